#include "refix/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "refix/errors.hpp"

namespace refix {

static_assert(std::endian::native == std::endian::little, "UFIX I/O assumes a little-endian host");

const std::string* Archive::find_config(const std::string& key) const {
  for (const auto& [k, v] : config)
    if (k == key) return &v;
  return nullptr;
}

const TensorRecord* Archive::find_tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void Archive::set_config(const std::string& key, std::string value) {
  for (auto& [k, v] : config)
    if (k == key) {
      v = std::move(value);
      return;
    }
  config.emplace_back(key, std::move(value));
}

namespace {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw DataError("checkpoint " + path.string() + ": truncated file");
  return v;
}

std::string get_string(std::istream& is, std::uint32_t n, const std::filesystem::path& path) {
  if (n > (1u << 24)) throw DataError("checkpoint " + path.string() + ": implausible string length");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw DataError("checkpoint " + path.string() + ": truncated file");
  return s;
}

}  // namespace

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  std::ostringstream cfg;
  for (const auto& [k, v] : archive.config) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw InvalidInput("checkpoint config entry '" + k + "' contains '=' or a newline");
    cfg << k << '=' << v << '\n';
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os.write("UFIX", 4);
  put<std::uint32_t>(os, kArchiveVersion);
  const std::string text = cfg.str();
  put<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(archive.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : archive.tensors) {
    std::size_t n = 1;
    for (int d : t.shape) n *= static_cast<std::size_t>(d);
    if (n != t.values.size())
      throw InvalidInput("checkpoint tensor '" + t.name + "' shape does not match its values");
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    put<std::uint8_t>(os, 0);
    put<std::uint64_t>(os, offset);
    offset += n * sizeof(float);
  }
  put<std::uint64_t>(os, offset);
  for (const auto& t : archive.tensors)
    for (double v : t.values) put<float>(os, static_cast<float>(v));
  if (!os) throw DataError("failed writing checkpoint " + path.string());
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "UFIX", 4) != 0)
    throw DataError(path.string() + " is not a UFIX checkpoint");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kArchiveVersion)
    throw DataError("checkpoint " + path.string() + ": unsupported version " + std::to_string(version));
  Archive archive;
  std::istringstream cfg(get_string(is, get<std::uint32_t>(is, path), path));
  for (std::string line; std::getline(cfg, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("checkpoint " + path.string() + ": bad config line");
    archive.config.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  const auto count = get<std::uint32_t>(is, path);
  std::vector<std::uint64_t> offsets;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord t;
    t.name = get_string(is, get<std::uint32_t>(is, path), path);
    const auto rank = get<std::uint32_t>(is, path);
    if (rank > 8) throw DataError("checkpoint " + path.string() + ": implausible tensor rank");
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      t.shape.push_back(static_cast<int>(get<std::uint32_t>(is, path)));
      n *= static_cast<std::size_t>(t.shape.back());
    }
    if (get<std::uint8_t>(is, path) != 0)
      throw DataError("checkpoint " + path.string() + ": unsupported dtype for '" + t.name + "'");
    offsets.push_back(get<std::uint64_t>(is, path));
    t.values.resize(n);
    archive.tensors.push_back(std::move(t));
  }
  const auto data_bytes = get<std::uint64_t>(is, path);
  std::vector<char> data(data_bytes);
  if (data_bytes && !is.read(data.data(), static_cast<std::streamsize>(data_bytes)))
    throw DataError("checkpoint " + path.string() + ": truncated data section");
  for (std::size_t i = 0; i < archive.tensors.size(); ++i) {
    auto& t = archive.tensors[i];
    if (offsets[i] + t.values.size() * sizeof(float) > data_bytes)
      throw DataError("checkpoint " + path.string() + ": tensor '" + t.name + "' out of range");
    for (std::size_t k = 0; k < t.values.size(); ++k) {
      float f;
      std::memcpy(&f, data.data() + offsets[i] + k * sizeof(float), sizeof(float));
      t.values[k] = f;
    }
  }
  return archive;
}

std::string format_channels(const std::vector<int>& channels) {
  std::string s;
  for (std::size_t i = 0; i < channels.size(); ++i) s += (i ? "," : "") + std::to_string(channels[i]);
  return s;
}

std::vector<int> parse_channels(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw InvalidInput("invalid channel list '" + text + "'");
    }
  }
  if (out.empty()) throw InvalidInput("empty channel list");
  return out;
}

Archive model_to_archive(const FixerModel& model) {
  const auto& c = model.config();
  Archive a;
  a.set_config("model.scales", std::to_string(c.scales));
  a.set_config("model.channels", format_channels(c.channels));
  a.set_config("model.latent_channels", std::to_string(c.latent_channels));
  std::ostringstream r;
  r.precision(17);
  r << c.max_offset;
  a.set_config("model.max_offset", r.str());
  a.set_config("model.attn_blocks", std::to_string(c.attn_blocks));
  a.set_config("model.attn_heads", std::to_string(c.attn_heads));
  a.set_config("model.predictor_hidden", std::to_string(c.predictor_hidden));
  a.set_config("model.local_detail_injection", c.local_detail_injection ? "true" : "false");
  a.set_config("model.seed", std::to_string(c.seed));
  for (const auto& p : model.parameters())
    a.tensors.push_back({p.name, p.tensor.shape(), {p.tensor.value().begin(), p.tensor.value().end()}});
  return a;
}

FixerModel model_from_archive(const Archive& a) {
  auto need = [&](const char* k) -> const std::string& {
    const std::string* v = a.find_config(k);
    if (!v) throw DataError(std::string("checkpoint lacks config key '") + k + "'");
    return *v;
  };
  FixerConfig c;
  try {
    c.scales = std::stoi(need("model.scales"));
    c.channels = parse_channels(need("model.channels"));
    c.latent_channels = std::stoi(need("model.latent_channels"));
    c.max_offset = std::stod(need("model.max_offset"));
    c.attn_blocks = std::stoi(need("model.attn_blocks"));
    c.attn_heads = std::stoi(need("model.attn_heads"));
    c.predictor_hidden = std::stoi(need("model.predictor_hidden"));
    c.local_detail_injection = need("model.local_detail_injection") == "true";
    c.seed = std::stoull(need("model.seed"));
  } catch (const DataError&) {
    throw;
  } catch (const std::exception& e) {
    throw DataError(std::string("checkpoint config is malformed: ") + e.what());
  }
  FixerModel model(c);
  for (auto& p : model.parameters()) {
    const TensorRecord* t = a.find_tensor(p.name);
    if (!t) throw DataError("checkpoint lacks parameter '" + p.name + "'");
    if (t->shape != p.tensor.shape()) throw DataError("checkpoint parameter '" + p.name + "' has the wrong shape");
    std::copy(t->values.begin(), t->values.end(), p.tensor.mutable_value().begin());
  }
  return model;
}

void save_model(const std::filesystem::path& path, const FixerModel& model) {
  write_archive(path, model_to_archive(model));
}

FixerModel load_model(const std::filesystem::path& path) { return model_from_archive(read_archive(path)); }

}  // namespace refix
