#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "refix/checkpoint.hpp"
#include "refix/errors.hpp"
#include "refix/fixer.hpp"
#include "refix/training.hpp"
#include "test_support.hpp"

using namespace refix;
using namespace refix::testing;

namespace {

std::vector<double> values_of(const Tensor& t) { return {t.value().begin(), t.value().end()}; }

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor identity_matrix(int c) {
  std::vector<double> v(static_cast<std::size_t>(c) * c, 0.0);
  for (int i = 0; i < c; ++i) v[i * c + i] = 1.0;
  return Tensor::constant({c, c}, v);
}

}  // namespace

// Encoder ---------------------------------------------------------------------------

TEST_CASE("encode: shapes for a 64x64 input") {
  FixerConfig c;
  c.channels = {16, 32, 64};
  c.latent_channels = 64;
  const FixerModel m(c);
  const EncoderOutput e = encode(random_image(1, 64, 64), m);
  CHECK(e.latent.shape() == std::vector<int>{64, 8, 8});
  REQUIRE(e.taps.size() == 3);
  CHECK(e.taps[0].shape() == std::vector<int>{16, 32, 32});
  CHECK(e.taps[1].shape() == std::vector<int>{32, 16, 16});
  CHECK(e.taps[2].shape() == std::vector<int>{64, 8, 8});
  const EncoderOutput again = encode(random_image(1, 64, 64), m);
  CHECK(values_of(again.latent) == values_of(e.latent));
  CHECK_THROWS_AS(encode(random_image(1, 60, 64), m), InvalidInput);
}

TEST_CASE("encode: a pixel only reaches taps whose receptive field covers it") {
  FixerConfig c = toy_config(4);
  c.scales = 3;
  c.channels = {4, 4, 4};
  c.latent_channels = 4;
  const FixerModel m(c);
  const int n = 32, py = 13, px = 18;
  const Image a = random_image(2, n, n);
  Image b = a;
  b.set(py, px, 0, a(py, px, 0) > 0.5 ? 0.0 : 1.0);
  const EncoderOutput ea = encode(a, m), eb = encode(b, m);
  int changed_total = 0;
  for (int s = 0; s < 3; ++s) {
    // Layers up to tap s: stem (stride 1), then per scale a stride-2 and a stride-1 conv, all 3x3 pad 1.
    std::vector<int> strides{1};
    for (int j = 0; j <= s; ++j) {
      strides.push_back(2);
      strides.push_back(1);
    }
    const int hs = ea.taps[s].dim(1), ws = ea.taps[s].dim(2), ch = ea.taps[s].dim(0);
    for (int y = 0; y < hs; ++y)
      for (int x = 0; x < ws; ++x) {
        int y0 = y, y1 = y, x0 = x, x1 = x;
        for (auto it = strides.rbegin(); it != strides.rend(); ++it) {
          y0 = *it * y0 - 1;
          y1 = *it * y1 + 1;
          x0 = *it * x0 - 1;
          x1 = *it * x1 + 1;
        }
        const bool covers = py >= y0 && py <= y1 && px >= x0 && px <= x1;
        bool changed = false;
        for (int k = 0; k < ch; ++k) {
          const std::size_t i = (static_cast<std::size_t>(k) * hs + y) * ws + x;
          if (ea.taps[s].value()[i] != eb.taps[s].value()[i]) changed = true;
        }
        if (!covers) CHECK_FALSE(changed);
        changed_total += changed;
      }
  }
  CHECK(changed_total > 0);
}

// Attention -------------------------------------------------------------------------

TEST_CASE("mixed_attention: a single token attends to itself") {
  Rng rng = make_rng(3, "t");
  const int c = 5;
  AttentionWeights w{random_constant(rng, {c, c}), random_constant(rng, {c}), random_constant(rng, {c, c}),
                     random_constant(rng, {c}), random_constant(rng, {c, c}), random_constant(rng, {c})};
  const Tensor z = random_constant(rng, {1, c});
  AttentionTrace trace;
  const Tensor out = mixed_attention(z, {w}, 1, &trace);
  CHECK(trace.weights[0].value()[0] == 1.0);
  for (int j = 0; j < c; ++j) {
    double v = w.bv.value()[j];
    for (int k = 0; k < c; ++k) v += z.value()[k] * w.wv.value()[k * c + j];
    CHECK(std::abs(out.value()[j] - (z.value()[j] + v)) < 1e-12);
  }
}

TEST_CASE("reference_mixed_attention: identical tokens get uniform weights and identical outputs") {
  FixerConfig c = toy_config(4);
  const FixerModel m(c);
  const int ch = c.latent_channels;
  std::vector<double> v(static_cast<std::size_t>(ch) * 9);
  for (int k = 0; k < ch; ++k)
    for (int p = 0; p < 9; ++p) v[k * 9 + p] = 0.1 * (k + 1);
  const Tensor z = Tensor::constant({ch, 3, 3}, v);
  AttentionTrace trace;
  const auto [zd, zr] = reference_mixed_attention(z, z, m, &trace);
  for (double a : trace.weights[0].value()) CHECK(std::abs(a - 1.0 / 18) < 1e-12);
  for (int k = 0; k < ch; ++k)
    for (int p = 1; p < 9; ++p) {
      CHECK(zd.value()[k * 9 + p] == zd.value()[k * 9]);
      CHECK(std::abs(zr.value()[k * 9 + p] - zd.value()[k * 9]) < 1e-12);
    }
}

TEST_CASE("mixed_attention with identity projections matches a hand-rolled oracle") {
  Rng rng = make_rng(4, "t");
  const int c = 4;
  const Tensor zero = Tensor::zeros({c});
  AttentionWeights w{identity_matrix(c), zero, identity_matrix(c), zero, identity_matrix(c), zero};
  const Tensor x = random_constant(rng, {3, c});
  const auto want = attention_oracle(values_of(x), 3, c, {oracle_block(w)});
  CHECK(max_abs_diff(mixed_attention(x, {w}, 1).value(), want) < 1e-12);
}

TEST_CASE("reference_mixed_attention matches the loop oracle and rows are stochastic") {
  Rng rng = make_rng(5, "t");
  for (int trial = 0; trial < 20; ++trial) {
    FixerConfig c = toy_config(4);
    c.attn_blocks = 1 + trial % 2;
    c.seed = trial;
    const FixerModel m(c);
    const int ch = c.latent_channels, h = 1 + trial % 4, w = 1 + (trial / 4) % 4;
    const Tensor zd = random_constant(rng, {ch, h, w}), zr = random_constant(rng, {ch, h, w});
    AttentionTrace trace;
    const auto [od, orf] = reference_mixed_attention(zd, zr, m, &trace);
    // tokens: degraded then reference, each in row-major pixel order
    const int hw = h * w;
    std::vector<double> tok(static_cast<std::size_t>(2 * hw) * ch);
    for (int k = 0; k < ch; ++k)
      for (int p = 0; p < hw; ++p) {
        tok[p * ch + k] = zd.value()[k * hw + p];
        tok[(hw + p) * ch + k] = zr.value()[k * hw + p];
      }
    std::vector<AttentionOracleBlock> blocks;
    for (int b = 0; b < c.attn_blocks; ++b) blocks.push_back(oracle_block(attention_weights(m, b)));
    const auto want = attention_oracle(tok, 2 * hw, ch, blocks);
    double err = 0.0;
    for (int k = 0; k < ch; ++k)
      for (int p = 0; p < hw; ++p) {
        err = std::max(err, std::abs(od.value()[k * hw + p] - want[p * ch + k]));
        err = std::max(err, std::abs(orf.value()[k * hw + p] - want[(hw + p) * ch + k]));
      }
    CHECK(err < 1e-6);
    for (const Tensor& a : trace.weights)
      for (int r = 0; r < a.dim(0); ++r) {
        double s = 0.0;
        for (int j = 0; j < a.dim(1); ++j) s += a.value()[r * a.dim(1) + j];
        CHECK(std::abs(s - 1.0) < 1e-6);
      }
  }
}

TEST_CASE("attention rows stay stochastic at 2x16x16 tokens") {
  FixerConfig c = toy_config(4);
  const FixerModel m(c);
  Rng rng = make_rng(6, "t");
  AttentionTrace trace;
  reference_mixed_attention(random_constant(rng, {8, 16, 16}, 3.0), random_constant(rng, {8, 16, 16}, 3.0), m,
                            &trace);
  const Tensor& a = trace.weights[0];
  REQUIRE(a.dim(0) == 512);
  double worst = 0.0;
  for (int r = 0; r < 512; ++r) {
    double s = 0.0;
    for (int j = 0; j < 512; ++j) s += a.value()[r * 512 + j];
    worst = std::max(worst, std::abs(s - 1.0));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("reference_mixed_attention rejects mismatched latents") {
  const FixerModel m(toy_config(4));
  CHECK_THROWS_AS(reference_mixed_attention(Tensor::zeros({8, 2, 2}), Tensor::zeros({8, 2, 3}), m), InvalidInput);
}

// Offsets, deformable sampling, gating ---------------------------------------------

TEST_CASE("predict_offsets: zero-initialised predictor, bounds, determinism") {
  const FixerModel zero_init(toy_config(4));
  Rng rng = make_rng(7, "t");
  const Tensor fd = random_constant(rng, {4, 6, 6}), fr = random_constant(rng, {4, 6, 6});
  const OffsetField f = predict_offsets(fd, fr, zero_init, 0);
  for (double v : f.offsets.value()) CHECK(v == 0.0);
  for (double v : f.mask.value()) CHECK(v == 0.5);

  FixerConfig c = toy_config(4);
  c.zero_init_offsets = false;
  FixerModel wild(c);
  for (auto& p : wild.parameters())
    if (p.name.rfind("ldi.0.pred", 0) == 0)
      for (double& v : p.tensor.mutable_value()) v *= 50.0;
  const OffsetField g = predict_offsets(random_constant(rng, {4, 6, 6}, 20), fr, wild, 0);
  double peak = 0.0;
  for (double v : g.offsets.value()) peak = std::max(peak, std::abs(v));
  CHECK(peak <= c.max_offset);
  CHECK(peak > 0.5 * c.max_offset);
  for (double v : g.mask.value()) CHECK((v >= 0.0 && v <= 1.0));
  CHECK(values_of(predict_offsets(fd, fr, wild, 1 - 1).offsets) == values_of(predict_offsets(fd, fr, wild, 0).offsets));
  CHECK_THROWS_AS(predict_offsets(fd, fr, wild, 5), InvalidInput);
}

TEST_CASE("deformable_sample: identity kernel doubles, zero mask passes through") {
  Rng rng = make_rng(8, "t");
  const int c = 3, h = 5, w = 6;
  const Tensor f = random_constant(rng, {c, h, w});
  std::vector<double> k(static_cast<std::size_t>(c) * c * 9, 0.0);
  for (int i = 0; i < c; ++i) k[(i * c + i) * 9 + 4] = 1.0;
  const Tensor weight = Tensor::constant({c, c, 3, 3}, k);
  OffsetField ones{Tensor::zeros({18, h, w}), Tensor::constant({9, h, w}, std::vector<double>(9 * h * w, 1.0))};
  const Tensor doubled = deformable_sample(f, ones, weight, Tensor());
  for (std::size_t i = 0; i < f.numel(); ++i) CHECK(doubled.value()[i] == 2.0 * f.value()[i]);
  OffsetField off{random_constant(rng, {18, h, w}, 2.0), Tensor::zeros({9, h, w})};
  const Tensor same = deformable_sample(f, off, random_constant(rng, {c, c, 3, 3}), Tensor());
  CHECK(values_of(same) == values_of(f));
}

TEST_CASE("deformable_sample matches the gather oracle and plain convolution") {
  Rng rng = make_rng(9, "t");
  for (int trial = 0; trial < 20; ++trial) {
    const int ci = 1 + trial % 3, h = 3 + trial % 7, w = 4 + (trial * 3) % 9;
    const Tensor f = random_constant(rng, {ci, h, w});
    const Tensor wt = random_constant(rng, {ci, ci, 3, 3}), b = random_constant(rng, {ci});
    OffsetField field{random_constant(rng, {18, h, w}, 2.5), Tensor::constant({9, h, w}, [&] {
                        std::vector<double> m(9 * h * w);
                        for (double& v : m) v = uniform01(rng);
                        return m;
                      }())};
    const Tensor got = deformable_sample(f, field, wt, b);
    auto want = deform_oracle(values_of(f), ci, h, w, values_of(field.offsets), values_of(field.mask),
                              values_of(wt), ci, values_of(b));
    for (std::size_t i = 0; i < want.size(); ++i) want[i] += f.value()[i];
    CHECK(max_abs_diff(got.value(), want) < 1e-6);

    OffsetField plain{Tensor::zeros({18, h, w}), Tensor::constant({9, h, w}, std::vector<double>(9 * h * w, 1.0))};
    auto conv = conv3x3_oracle(values_of(f), ci, h, w, values_of(wt), ci, values_of(b));
    for (std::size_t i = 0; i < conv.size(); ++i) conv[i] += f.value()[i];
    CHECK(max_abs_diff(deformable_sample(f, plain, wt, b).value(), conv) < 1e-6);
  }
}

TEST_CASE("blend endpoints are exact and the scalar case is hand-checkable") {
  Rng rng = make_rng(10, "t");
  const Tensor fd = random_constant(rng, {3, 4, 4}), fr = random_constant(rng, {3, 4, 4});
  const Tensor one = Tensor::constant({3, 4, 4}, std::vector<double>(48, 1.0)), zero = Tensor::zeros({3, 4, 4});
  CHECK(values_of(blend(one, fd, fr)) == values_of(fd));
  CHECK(values_of(blend(zero, fd, fr)) == values_of(fr));
  const Tensor g = Tensor::constant({1}, {0.25});
  CHECK(blend(g, Tensor::constant({1}, {4.0}), Tensor::constant({1}, {8.0})).item() == 7.0);
}

TEST_CASE("gated_fusion: gate in range, bias start, shape checks") {
  const FixerModel m(toy_config(4));
  Rng rng = make_rng(11, "t");
  const Tensor fd = random_constant(rng, {4, 6, 6}), fr = random_constant(rng, {4, 6, 6});
  const Tensor g = gate_map(fd, fr, m, 0);
  for (double v : g.value()) CHECK((v > 0.0 && v < 1.0));
  const Tensor fused = gated_fusion(fd, fr, m, 0);
  const Tensor manual = blend(g, fd, fr);
  CHECK(values_of(fused) == values_of(manual));
  CHECK_THROWS_AS(gated_fusion(fd, random_constant(rng, {4, 6, 5}), m, 0), InvalidInput);
}

// Decoder and full pipeline -----------------------------------------------------------

TEST_CASE("decode: shape, determinism and a live injection path") {
  const FixerModel m(toy_config(4));
  const Image img = random_image(12, 16, 16);
  const EncoderOutput e = encode(img, m);
  const Tensor out = decode(e.latent, e.taps, m);
  CHECK(out.shape() == std::vector<int>{3, 16, 16});
  CHECK(values_of(decode(e.latent, e.taps, m)) == values_of(out));
  for (std::size_t s = 0; s < e.taps.size(); ++s) {
    std::vector<Tensor> fused = e.taps;
    std::vector<double> v = values_of(fused[s]);
    v[v.size() / 2] += 1e-3;
    fused[s] = Tensor::constant(fused[s].shape(), v);
    CHECK(max_abs_diff(decode(e.latent, fused, m).value(), out.value()) > 0.0);
  }
  CHECK_THROWS_AS(decode(e.latent, {e.taps[0]}, m), InvalidInput);
}

TEST_CASE("fix: shapes, range and finiteness") {
  const FixerModel m{FixerConfig{}};
  for (auto [h, w] : {std::pair{64, 64}, std::pair{96, 128}}) {
    const Image deg = random_image(13, h, w);
    Image warped = random_image(14, h, w);
    Mask mask(h, w, 1, 1);
    for (int x = 0; x < w / 4; ++x) mask(h / 2, x) = 0;
    warped.set_mask(mask);
    const Image out = fix(deg, warped, m);
    CHECK(out.height() == h);
    CHECK(out.width() == w);
    for (double v : out.data()) CHECK((std::isfinite(v) && v >= 0.0 && v <= 1.0));
  }
  const FixerModel toy(toy_config(4));
  const Image odd = fix(random_image(15, 13, 21), random_image(16, 13, 21), toy);
  CHECK(odd.height() == 13);
  CHECK(odd.width() == 21);
  CHECK_THROWS_AS(fix(Image(16, 16, 3), Image(16, 8, 3), toy), InvalidInput);
}

TEST_CASE("every stage stays finite on random inputs") {
  FixerConfig c = toy_config(4);
  c.zero_init_offsets = false;
  const FixerModel m(c);
  Rng rng = make_rng(17, "t");
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor d = Tensor::constant({3, 16, 16}, random_values(rng, 768, 1.0));
    const Tensor w = Tensor::constant({3, 16, 16}, random_values(rng, 768, 1.0));
    const Tensor out = fix(d, w, Tensor(), m);
    for (double v : out.value()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("gradients of total_loss through fix match central differences for every group") {
  FixerConfig c = toy_config(3);
  c.zero_init_offsets = false;  // zero offsets sit on the bilinear kinks
  FixerModel m(c);
  const Image deg = random_image(18, 16, 16), warped = random_image(19, 16, 16), gt = random_image(20, 16, 16);
  const Tensor td = image_to_tensor(deg), tw = image_to_tensor(warped), tg = image_to_tensor(gt);
  LossConfig lc;
  lc.lambda_lpips = 1.0;
  const auto backend = make_perceptual_backend(lc);
  auto loss = [&] { return total_loss(fix(td, tw, Tensor(), m), tg, lc, backend.get()).total; };
  for (const char* group : kParameterGroups) {
    double worst = 0.0;
    std::size_t checked = 0;
    for (auto& p : m.parameters()) {
      if (parameter_group(p.name) != group) continue;
      Rng rng = make_rng(21, p.name);
      std::vector<std::size_t> idx;
      for (int k = 0; k < 2; ++k) idx.push_back(static_cast<std::size_t>(uniform01(rng) * p.tensor.numel()));
      const GradCheck r = check_gradient(loss, p.tensor, idx);
      worst = std::max(worst, r.max_rel_error);
      checked += r.checked;
    }
    INFO("group " << group);
    CHECK(checked > 0);
    CHECK(worst < 1e-3);
  }
}

// Checkpoints -----------------------------------------------------------------------

TEST_CASE("checkpoint round trip reproduces parameters and outputs") {
  FixerConfig c = toy_config(4);
  c.seed = 42;
  c.max_offset = 3.5;
  const FixerModel m(c);
  const auto path = std::filesystem::temp_directory_path() / "refix_model.ufix";
  save_model(path, m);
  const FixerModel back = load_model(path);
  CHECK(back.config().channels == c.channels);
  CHECK(back.config().max_offset == 3.5);
  CHECK(back.config().seed == 42);
  REQUIRE(back.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i)
    CHECK(values_of(back.parameters()[i].tensor) == values_of(m.parameters()[i].tensor));
  const Image a = random_image(22, 16, 16), b = random_image(23, 16, 16);
  CHECK(fix(a, b, back).pixels() == fix(a, b, m).pixels());

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XFIX", 4);
  }
  CHECK_THROWS_AS(load_model(path), DataError);
  std::filesystem::resize_file(path, 10);
  CHECK_THROWS_AS(load_model(path), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint header carries the UFIX magic and version") {
  const auto path = std::filesystem::temp_directory_path() / "refix_header.ufix";
  save_model(path, FixerModel(toy_config(2)));
  std::ifstream in(path, std::ios::binary);
  char magic[4];
  std::uint32_t version = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), 4);
  CHECK(std::string(magic, 4) == "UFIX");
  CHECK(version == kArchiveVersion);
  std::filesystem::remove(path);
}

TEST_CASE("parameter groups cover every parameter") {
  const FixerModel m(toy_config(4));
  for (const auto& p : m.parameters()) {
    const std::string g = parameter_group(p.name);
    CHECK(std::find_if(std::begin(kParameterGroups), std::end(kParameterGroups),
                       [&](const char* s) { return g == s; }) != std::end(kParameterGroups));
  }
  CHECK(m.param("ldi.0.gate.b").value()[0] == 2.0);
}
