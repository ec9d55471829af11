#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "refix/fixer.hpp"

namespace refix {

struct TensorRecord {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;  // stored on disk as float32
};

/// In-memory form of a UFIX file: a key=value config block and named tensors.
///
/// Layout: "UFIX", u32 version, u32 config bytes, config text, u32 tensor
/// count, per tensor {u32 name bytes, name, u32 rank, u32 dims..., u8 dtype,
/// u64 byte offset into the data section}, u64 data bytes, then the data.
/// All integers and floats are little-endian; dtype 0 is float32.
struct Archive {
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<TensorRecord> tensors;

  const std::string* find_config(const std::string& key) const;
  const TensorRecord* find_tensor(const std::string& name) const;
  void set_config(const std::string& key, std::string value);
};

inline constexpr std::uint32_t kArchiveVersion = 1;

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

/// Model config under "model.*" keys plus every parameter tensor.
Archive model_to_archive(const FixerModel& model);
FixerModel model_from_archive(const Archive& archive);

void save_model(const std::filesystem::path& path, const FixerModel& model);
FixerModel load_model(const std::filesystem::path& path);

std::string format_channels(const std::vector<int>& channels);
std::vector<int> parse_channels(const std::string& text);

}  // namespace refix
