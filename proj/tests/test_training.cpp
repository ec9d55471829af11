#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <set>

#include "refix/degrade.hpp"
#include "refix/errors.hpp"
#include "refix/training.hpp"
#include "test_support.hpp"

using namespace refix;
using namespace refix::testing;
namespace fs = std::filesystem;

namespace {

std::vector<std::optional<ViewTransform>> zero_flows(int n, int h, int w) {
  std::vector<std::optional<ViewTransform>> t;
  for (int i = 0; i < n; ++i) t.emplace_back(FlowTransform{FlowField::zeros(h, w)});
  return t;
}

std::vector<double> params_of(const FixerModel& m) {
  std::vector<double> v;
  for (const auto& p : m.parameters()) v.insert(v.end(), p.tensor.value().begin(), p.tensor.value().end());
  return v;
}

TrainingSample make_sample(int seed, int n) {
  TrainingSample s;
  s.i_gt = random_image(seed, n, n);
  s.i_deg = gaussian_blur(s.i_gt, 1.0);
  s.i_warped = s.i_gt;
  s.scene_id = "s" + std::to_string(seed);
  return s;
}

LossConfig small_loss(int patch) {
  LossConfig l;
  l.patch_h = patch;
  l.patch_w = patch;
  return l;
}

}  // namespace

TEST_CASE("reference frame number is ceil(N/2)") {
  CHECK(reference_frame_number(5) == 3);
  CHECK(reference_frame_number(1) == 1);
  CHECK(reference_frame_number(2) == 1);
  CHECK(reference_frame_number(6) == 3);
  CHECK_THROWS_AS(reference_frame_number(0), InvalidInput);
}

TEST_CASE("curate_pairs: identity transforms and degrader give identical triples") {
  const Image frame = random_image(100, 12, 16);
  const std::vector<Image> frames(4, frame);
  const auto samples = curate_pairs(frames, zero_flows(4, 12, 16), make_degrader("identity"), "sc");
  REQUIRE(samples.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(samples[i].frame_index == i);
    CHECK(samples[i].scene_id == "sc");
    CHECK(samples[i].i_deg.pixels() == frame.pixels());
    CHECK(samples[i].i_warped.pixels() == frame.pixels());
    CHECK(samples[i].i_gt.pixels() == frame.pixels());
  }
  CHECK_THROWS_AS(curate_pairs({}, {}, make_degrader("identity")), InvalidInput);
}

TEST_CASE("curate_pairs: the reference sample warps to itself exactly for every N") {
  for (int n = 1; n <= 6; ++n) {
    std::vector<Image> frames;
    for (int i = 0; i < n; ++i) frames.push_back(random_image(200 + i, 10, 10));
    auto t = zero_flows(n, 10, 10);
    const int ref = reference_frame_number(n) - 1;
    t[ref] = FlowTransform{FlowField::uniform(10, 10, 3.0, 1.0)};  // ignored for the reference
    const auto s = curate_pairs(frames, t, make_degrader("blur_noise", 3), "x");
    CHECK(s[ref].i_warped.pixels() == frames[ref].pixels());
    CHECK(s[ref].i_warped.valid_count() == 100);
  }
}

TEST_CASE("curate_pairs: blur degrades i_deg and leaves i_gt untouched, deterministically") {
  const Image board = checkerboard(16, 16, 4);
  const std::vector<Image> frames(3, board);
  const Degrader blur = make_degrader("blur_noise:1.5:0", 1);
  const auto a = curate_pairs(frames, zero_flows(3, 16, 16), blur);
  for (const auto& s : a) {
    CHECK(s.i_gt.pixels() == board.pixels());
    CHECK_FALSE(s.i_deg.pixels() == board.pixels());
  }
  const auto b = curate_pairs(frames, zero_flows(3, 16, 16), blur);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].i_deg.pixels() == b[i].i_deg.pixels());
    CHECK(a[i].i_warped.pixels() == b[i].i_warped.pixels());
  }
}

TEST_CASE("perceptual_distance: zero at equality, symmetric, positive under blur") {
  const LossConfig c;
  const Image a = random_image(1, 32, 32);
  CHECK(perceptual_distance(a, a, c) == 0.0);
  for (int s = 0; s < 5; ++s) {
    const Image x = random_image(10 + s, 16, 24), y = random_image(20 + s, 16, 24);
    CHECK(std::abs(perceptual_distance(x, y, c) - perceptual_distance(y, x, c)) < 1e-7);
  }
  CHECK(perceptual_distance(a, gaussian_blur(a, 1.5), c) > 0.0);
  CHECK(perceptual_distance(a, gaussian_blur(a, 1.5), c) == perceptual_distance(a, gaussian_blur(a, 1.5), c));
  CHECK_THROWS_AS(perceptual_distance(a, random_image(1, 16, 32), c), InvalidInput);
}

TEST_CASE("total_loss: hand values") {
  LossConfig c;
  const Image a = random_image(2, 8, 8);
  CHECK(total_loss(a, a, c) == 0.0);
  c.lambda_lpips = 0.0;
  CHECK(total_loss(Image(8, 8, 3, 0.25), Image(8, 8, 3, 0.75), c) == 0.25);
  CHECK_THROWS_AS(total_loss(a, Image(8, 4, 3), c), InvalidInput);
  c.lambda_lpips = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(c.validate(), InvalidInput);
}

TEST_CASE("total_loss gradient matches central differences on an 8x8 pair") {
  LossConfig c;
  const auto backend = make_perceptual_backend(c);
  Rng rng = make_rng(3, "t");
  Tensor pred = Tensor::parameter({3, 8, 8}, random_values(rng, 192, 0.5));
  const Tensor gt = Tensor::constant({3, 8, 8}, random_values(rng, 192, 0.5));
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < 192; i += 7) idx.push_back(i);
  const GradCheck r = check_gradient([&] { return total_loss(pred, gt, c, backend.get()).total; }, pred, idx);
  CHECK(r.checked == idx.size());
  CHECK(r.max_rel_error < 1e-3);
}

TEST_CASE("draw_crop stays in bounds and on the stride grid") {
  for (std::uint64_t d = 0; d < 200; ++d) {
    const CropWindow w = draw_crop(50, 70, 32, 48, 4, 9, d);
    CHECK(w.top >= 0);
    CHECK(w.left >= 0);
    CHECK(w.top + w.height <= 50);
    CHECK(w.left + w.width <= 70);
    CHECK(w.height % 4 == 0);
    CHECK(w.width % 4 == 0);
  }
  CHECK_THROWS_AS(draw_crop(20, 20, 32, 16, 4, 0, 0), InvalidInput);
}

TEST_CASE("sample_for_draw visits each sample once per epoch") {
  for (std::uint64_t epoch = 0; epoch < 3; ++epoch) {
    std::set<std::size_t> seen;
    for (std::uint64_t d = 0; d < 7; ++d) seen.insert(sample_for_draw(7, 5, epoch * 7 + d));
    CHECK(seen.size() == 7);
  }
  CHECK(sample_for_draw(7, 5, 3) == sample_for_draw(7, 5, 3));
}

TEST_CASE("train: zero steps leaves the model alone") {
  FixerModel m(toy_config(4));
  const auto before = params_of(m);
  AdamState st;
  OptimConfig o;
  o.max_steps = 0;
  CHECK(train(m, st, {make_sample(1, 16)}, small_loss(16), o).empty());
  CHECK(params_of(m) == before);
  CHECK_THROWS_AS(train(m, st, {}, small_loss(16), o), InvalidInput);
}

TEST_CASE("train: a single sample is overfit") {
  FixerModel m(toy_config(8));
  AdamState st;
  OptimConfig o;
  o.learning_rate = 1e-3;
  o.max_steps = 500;
  const auto h = train(m, st, {make_sample(4, 16)}, small_loss(16), o);
  REQUIRE(h.size() == 500);
  CHECK(h.back().loss < 0.1 * h.front().loss);
  std::vector<double> first, last;
  for (int i = 0; i < 50; ++i) {
    first.push_back(h[i].loss);
    last.push_back(h[450 + i].loss);
  }
  std::nth_element(first.begin(), first.begin() + 25, first.end());
  std::nth_element(last.begin(), last.begin() + 25, last.end());
  CHECK(last[25] < first[25]);
}

TEST_CASE("train: bit-identical histories and interrupt/resume equality") {
  const std::vector<TrainingSample> data{make_sample(5, 24), make_sample(6, 24), make_sample(7, 24)};
  OptimConfig o;
  o.learning_rate = 1e-3;
  o.max_steps = 12;
  o.seed = 11;
  FixerModel a(toy_config(4)), b(toy_config(4));
  AdamState sa, sb;
  const auto ha = train(a, sa, data, small_loss(16), o);
  const auto hb = train(b, sb, data, small_loss(16), o);
  REQUIRE(ha.size() == hb.size());
  for (std::size_t i = 0; i < ha.size(); ++i) CHECK(ha[i].loss == hb[i].loss);
  CHECK(params_of(a) == params_of(b));

  FixerModel c(toy_config(4));
  AdamState sc;
  OptimConfig half = o;
  half.max_steps = 5;
  auto hc = train(c, sc, data, small_loss(16), half);
  const fs::path path = fs::temp_directory_path() / "refix_resume.ufix";
  save_training_checkpoint(path, c, sc);
  TrainingCheckpoint back = load_training_checkpoint(path);
  fs::remove(path);
  CHECK(back.state.step == 5);
  const auto rest = train(back.model, back.state, data, small_loss(16), o);
  hc.insert(hc.end(), rest.begin(), rest.end());
  REQUIRE(hc.size() == ha.size());
  for (std::size_t i = 0; i < ha.size(); ++i) {
    CHECK(hc[i].step == ha[i].step);
    CHECK(hc[i].loss == ha[i].loss);
  }
  CHECK(params_of(back.model) == params_of(a));
}

TEST_CASE("train: a non-finite loss aborts with a diagnostic checkpoint") {
  struct NanBackend final : PerceptualBackend {
    Tensor distance(const Tensor& a, const Tensor& b) const override {
      return scale(mse(a, b), std::numeric_limits<double>::quiet_NaN());
    }
  };
  LossConfig loss = small_loss(16);
  loss.perceptual_backend = "external";
  loss.external = std::make_shared<NanBackend>();
  FixerModel m(toy_config(4));
  AdamState st;
  OptimConfig o;
  o.max_steps = 3;
  TrainOptions opts;
  opts.diagnostic_checkpoint = fs::temp_directory_path() / "refix_diverged.ufix";
  fs::remove(opts.diagnostic_checkpoint);
  CHECK_THROWS_AS(train(m, st, {make_sample(8, 16)}, loss, o, opts), NumericalError);
  CHECK(fs::exists(opts.diagnostic_checkpoint));
  fs::remove(opts.diagnostic_checkpoint);
}

TEST_CASE("train rejects patches larger than the images or off the stride grid") {
  FixerModel m(toy_config(4));
  AdamState st;
  OptimConfig o;
  o.max_steps = 1;
  CHECK_THROWS_AS(train(m, st, {make_sample(1, 16)}, small_loss(32), o), InvalidInput);
  CHECK_THROWS_AS(train(m, st, {make_sample(1, 16)}, small_loss(10), o), InvalidInput);
  o.learning_rate = 0.0;
  CHECK_THROWS_AS(o.validate(), InvalidInput);
}

TEST_CASE("sample archive round trip") {
  const fs::path dir = fs::temp_directory_path() / "refix_archive_test";
  fs::remove_all(dir);
  std::vector<TrainingSample> s{make_sample(9, 16), make_sample(10, 16)};
  Mask mask(16, 16, 1, 1);
  mask(2, 5) = 0;
  s[1].i_warped.set_mask(mask);
  s[1].frame_index = 3;
  write_sample_archive(dir, s);
  const auto back = read_sample_archive(dir);
  REQUIRE(back.size() == 2);
  CHECK(back[1].scene_id == "s10");
  CHECK(back[1].frame_index == 3);
  CHECK(back[1].i_warped.valid_count() == 255);
  CHECK_FALSE(back[1].i_warped.is_valid(2, 5));
  // 8-bit PNG storage
  for (std::size_t i = 0; i < s[0].i_gt.data().size(); ++i)
    CHECK(std::abs(back[0].i_gt.data()[i] - s[0].i_gt.data()[i]) <= 0.5 / 255 + 1e-12);
  fs::remove_all(dir);
  fs::create_directories(dir);
  CHECK_THROWS_AS(read_sample_archive(dir), DataError);
  fs::remove_all(dir);
}
