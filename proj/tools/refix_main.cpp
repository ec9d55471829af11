#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "refix/analysis.hpp"
#include "refix/checkpoint.hpp"
#include "refix/dataset.hpp"
#include "refix/degrade.hpp"
#include "refix/errors.hpp"
#include "refix/fixer.hpp"
#include "refix/image_io.hpp"
#include "refix/metrics.hpp"
#include "refix/rng.hpp"
#include "refix/run_config.hpp"
#include "refix/synth.hpp"
#include "refix/training.hpp"

namespace fs = std::filesystem;
using namespace refix;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
};

Globals g;

void note(const std::string& msg) {
  if (g.verbose) std::cerr << msg << '\n';
}

RunConfig run_config() {
  RunConfig c = g.config.empty() ? RunConfig{} : load_run_config(g.config);
  if (g.seed) c.set_seed(*g.seed);
  c.validate();
  return c;
}

std::uint64_t base_seed() { return g.seed.value_or(0); }

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// "key=value" -> pair; both halves non-empty.
std::pair<std::string, std::string> split_assignment(const std::string& text, const char* flag) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == text.size())
    throw InvalidInput(std::string(flag) + " expects name=value, got '" + text + "'");
  return {text.substr(0, eq), text.substr(eq + 1)};
}

// synth ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  int count = 20;
  int frames = 5;
  int size = 80;
};

int cmd_synth(const SynthArgs& a) {
  SynthOptions o;
  o.frames = a.frames;
  o.height = o.width = a.size;
  const auto dirs = write_synthetic_dataset(a.out, a.count, base_seed(), o);
  note("wrote " + std::to_string(dirs.size()) + " scenes under " + a.out);
  return kOk;
}

// curate --------------------------------------------------------------------------

struct CurateArgs {
  std::string manifest;
  std::string degrader = "blur_noise";
  std::string out;
};

int cmd_curate(const CurateArgs& a) {
  const RunConfig cfg = run_config();
  make_degrader(a.degrader, 0);  // rejects bad specs before any work
  const auto scenes = read_manifest(a.manifest);
  std::vector<TrainingSample> all;
  int failed = 0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    try {
      const Scene scene = load_scene(scenes[i]);
      const auto transforms = scene_transforms(scene, cfg.warp_mode);
      const Degrader deg = make_degrader(a.degrader, derive_seed(base_seed(), "curation", i));
      PreAlignOptions warp;
      warp.temperature = cfg.warp_temperature;
      auto samples = curate_pairs(scene.frames, transforms, deg, scene.name, warp);
      note(scene.name + ": " + std::to_string(samples.size()) + " samples");
      for (auto& s : samples) all.push_back(std::move(s));
    } catch (const DataError& e) {
      ++failed;
      std::cerr << "skipping " << scenes[i].string() << ": " << e.what() << '\n';
    } catch (const InvalidInput& e) {
      ++failed;
      std::cerr << "skipping " << scenes[i].string() << ": " << e.what() << '\n';
    }
  }
  if (all.empty()) throw DataError("no scene could be curated (" + std::to_string(failed) + " failed)");
  write_sample_archive(a.out, all);
  note("wrote " + std::to_string(all.size()) + " samples to " + a.out);
  return kOk;
}

// train ---------------------------------------------------------------------------

struct TrainArgs {
  std::string samples;
  std::string out;
  std::string resume;
  std::string loss_csv;
  std::string diagnostic;
};

int cmd_train(const TrainArgs& a) {
  const RunConfig cfg = run_config();
  const auto samples = read_sample_archive(a.samples);
  std::optional<TrainingCheckpoint> ck;
  if (!a.resume.empty()) {
    ck.emplace(load_training_checkpoint(a.resume));
    note("resuming from step " + std::to_string(ck->state.step));
    if (ck->state.step > cfg.optim.max_steps)
      throw InvalidInput("checkpoint is at step " + std::to_string(ck->state.step) +
                         ", past train.steps = " + std::to_string(cfg.optim.max_steps));
  } else {
    ck.emplace(TrainingCheckpoint{FixerModel(cfg.model), {}});
    ck->state.reset(ck->model);
  }
  TrainOptions opts;
  opts.diagnostic_checkpoint = a.diagnostic.empty() ? fs::path(a.out + ".diverged") : fs::path(a.diagnostic);
  if (g.verbose)
    opts.on_step = [](const LossRecord& r) {
      if (r.step % 50 == 0) std::cerr << "step " << r.step << " loss " << r.loss << '\n';
    };
  const auto history = train(ck->model, ck->state, samples, cfg.loss, cfg.optim, opts);
  save_training_checkpoint(a.out, ck->model, ck->state);
  if (!a.loss_csv.empty()) write_loss_csv(a.loss_csv, history);
  note("saved " + a.out + " at step " + std::to_string(ck->state.step));
  return kOk;
}

// fix -----------------------------------------------------------------------------

struct FixArgs {
  std::string checkpoint;
  std::string degraded;
  std::string reference;
  std::string transform;
  bool flow_fallback = false;
  std::string out;
};

const char* transform_extension(WarpMode mode) {
  switch (mode) {
    case WarpMode::flow: return ".flo";
    case WarpMode::disparity: return ".pfm";
    case WarpMode::geometry: break;
  }
  return ".txt";
}

Image fix_one(const FixerModel& model, const RunConfig& cfg, const fs::path& degraded_path,
              const fs::path& reference_path, const std::optional<fs::path>& transform_path,
              bool flow_fallback) {
  const Image deg = read_png(degraded_path);
  const Image ref = read_png(reference_path);
  if (deg.height() != ref.height() || deg.width() != ref.width())
    throw DataError(degraded_path.string() + " and " + reference_path.string() + " differ in size");
  PreAlignOptions warp;
  warp.temperature = cfg.warp_temperature;
  warp.degraded_view = &deg;
  Image warped;
  if (transform_path) {
    const ViewTransform t = load_view_transform(*transform_path, cfg.warp_mode);
    const auto [h, w] = transform_extent(t);
    if (h != deg.height() || w != deg.width())
      throw DataError(transform_path->string() + " does not match the image size");
    warped = pre_align(ref, t, warp);
  } else if (flow_fallback || cfg.warp_mode == WarpMode::flow) {
    warped = pre_align(ref, FlowTransform{estimate_flow(ref, deg)}, warp);
  } else {
    throw InvalidInput("no transform for " + degraded_path.string() + " in " + to_string(cfg.warp_mode) +
                       " mode; pass --transform or --flow-fallback");
  }
  return fix(deg, warped, model);
}

int cmd_fix(const FixArgs& a) {
  const RunConfig cfg = run_config();
  const FixerModel model = load_model(a.checkpoint);
  if (!fs::is_directory(a.degraded)) {
    std::optional<fs::path> t;
    if (!a.transform.empty()) t = a.transform;
    write_png(a.out, fix_one(model, cfg, a.degraded, a.reference, t, a.flow_fallback));
    return kOk;
  }
  // Sequence: a reference directory pairs frames by name, a single reference
  // file is shared by every frame.
  const bool per_frame = fs::is_directory(a.reference);
  const auto names = list_pngs(a.degraded);
  if (names.empty()) throw DataError("no PNG files in " + a.degraded);
  fs::create_directories(a.out);
  for (const auto& name : names) {
    const fs::path ref = per_frame ? fs::path(a.reference) / name : fs::path(a.reference);
    if (!fs::exists(ref)) throw DataError("missing reference " + ref.string());
    std::optional<fs::path> t;
    if (!a.transform.empty()) {
      t = fs::path(a.transform) / (fs::path(name).stem().string() + transform_extension(cfg.warp_mode));
      if (!fs::exists(*t)) {
        if (!a.flow_fallback) throw DataError("missing transform " + t->string());
        t.reset();
      }
    }
    write_png(fs::path(a.out) / name, fix_one(model, cfg, fs::path(a.degraded) / name, ref, t, a.flow_fallback));
    note("fixed " + name);
  }
  return kOk;
}

// analyze -------------------------------------------------------------------------

struct AnalyzeArgs {
  std::string gt;
  std::vector<std::string> variants;
  std::vector<std::string> pairs;
  std::string extractor;
  std::string out;
};

std::string describe_mismatch(const std::vector<std::string>& want, const std::vector<std::string>& have,
                              const std::string& dir) {
  std::ostringstream s;
  s << "file names in " << dir << " do not match the ground truth:";
  for (const auto& n : want)
    if (!std::binary_search(have.begin(), have.end(), n)) s << "\n  missing " << n;
  for (const auto& n : have)
    if (!std::binary_search(want.begin(), want.end(), n)) s << "\n  extra " << n;
  return s.str();
}

int cmd_analyze(const AnalyzeArgs& a) {
  const RunConfig cfg = run_config();
  if (a.variants.empty()) throw InvalidInput("analyze needs at least one --variant label=dir");
  std::vector<std::pair<std::string, std::string>> variants;
  std::set<std::string> seen;
  for (const auto& v : a.variants) {
    variants.push_back(split_assignment(v, "--variant"));
    if (!seen.insert(variants.back().first).second)
      throw InvalidInput("duplicate variant label '" + variants.back().first + "'");
  }
  std::vector<ShiftArrow> arrows;
  for (const auto& p : a.pairs) {
    auto [from, to] = split_assignment(p, "--pair");
    if (!seen.count(from) || !seen.count(to)) throw InvalidInput("--pair " + p + " names an unknown label");
    arrows.push_back({from, to});
  }

  std::vector<std::string> names = list_pngs(a.gt);
  if (names.empty()) throw DataError("no PNG files in " + a.gt);
  for (const auto& [label, dir] : variants) {
    const auto have = list_pngs(dir);
    if (have != names) throw DataError(describe_mismatch(names, have, dir));
  }
  if (cfg.analyze_samples > 0 && static_cast<std::size_t>(cfg.analyze_samples) < names.size()) {
    Rng rng = make_rng(cfg.analyze_seed, "analyze-samples");
    for (std::size_t i = names.size() - 1; i > 0; --i)
      std::swap(names[i], names[static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i + 1))]);
    names.resize(cfg.analyze_samples);
    std::sort(names.begin(), names.end());
  }

  const ToyExtractor extractor =
      a.extractor.empty() ? ToyExtractor(0) : ToyExtractor::from_archive(read_archive(a.extractor));
  std::map<std::string, PooledEmbedding> gt_pooled;
  for (const auto& n : names)
    gt_pooled[n] = pool_embedding(extract_patch_tokens(read_png(fs::path(a.gt) / n), extractor));

  std::vector<DegradationEmbedding> emb;
  std::vector<std::string> labels, files;
  for (const auto& [label, dir] : variants)
    for (const auto& n : names) {
      const auto pooled = pool_embedding(extract_patch_tokens(read_png(fs::path(dir) / n), extractor));
      emb.push_back(degradation_embedding(pooled, gt_pooled[n]));
      labels.push_back(label);
      files.push_back(n);
    }
  note("embedded " + std::to_string(emb.size()) + " images");

  const auto points = project_2d(emb, parse_projection_method(cfg.analyze_method), cfg.analyze_seed,
                                 cfg.analyze_perplexity);
  std::vector<std::string> warnings;
  const auto clusters = cluster_summaries(points, labels, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';

  std::vector<char> kept(points.size(), 0);
  for (const auto& c : clusters)
    for (std::size_t i : c.kept) kept[i] = 1;

  std::ofstream csv(a.out + ".csv");
  if (!csv) throw DataError("cannot write " + a.out + ".csv");
  csv << "label,file,x,y,kept\n";
  for (std::size_t i = 0; i < points.size(); ++i)
    csv << labels[i] << ',' << files[i] << ',' << num(points[i][0]) << ',' << num(points[i][1]) << ','
        << int(kept[i]) << '\n';

  // Distances to the ground truth are measured in the embedding space itself.
  std::ofstream cl(a.out + "_clusters.csv");
  if (!cl) throw DataError("cannot write " + a.out + "_clusters.csv");
  cl << "label,mean_x,mean_y,kept,dropped,mean_norm,centroid_norm\n";
  for (const auto& c : clusters) {
    double norm_sum = 0.0;
    std::vector<double> centroid(emb[0].values.size(), 0.0);
    int n = 0;
    for (std::size_t i = 0; i < emb.size(); ++i) {
      if (labels[i] != c.label) continue;
      norm_sum += emb[i].norm();
      for (std::size_t k = 0; k < centroid.size(); ++k) centroid[k] += emb[i].values[k];
      ++n;
    }
    double cn = 0.0;
    for (double v : centroid) cn += (v / n) * (v / n);
    cl << c.label << ',' << num(c.mean[0]) << ',' << num(c.mean[1]) << ',' << c.count_kept << ','
       << c.count_dropped << ',' << num(norm_sum / n) << ',' << num(std::sqrt(cn)) << '\n';
  }
  write_scatter_png(a.out + ".png", points, labels, clusters, arrows);
  if (seen.size() > 1) std::cout << "silhouette " << num(silhouette_score(points, labels)) << '\n';
  return kOk;
}

// eval ----------------------------------------------------------------------------

struct EvalArgs {
  std::string pred;
  std::string gt;
  std::vector<std::string> plugins;
  std::string csv;
  std::string report;
};

int cmd_eval(const EvalArgs& a) {
  std::vector<ExternalMetric> ext;
  for (const auto& p : a.plugins) {
    auto [name, exe] = split_assignment(p, "--plugin");
    ext.push_back({name, exe});
  }
  const EvaluationResult r = evaluate_pairs(a.pred, a.gt, ext);
  for (const auto& name : r.unavailable) std::cerr << "metric '" << name << "' unavailable, omitted\n";
  if (!a.csv.empty()) write_eval_csv(a.csv, r);
  const std::string summary = format_eval_summary(r);
  if (a.report.empty()) {
    std::cout << summary;
  } else {
    std::ofstream out(a.report);
    if (!out) throw DataError("cannot write " + a.report);
    out << summary;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"refix: reference-guided fixing of degraded novel views"};
  app.require_subcommand(1);
  auto add_globals = [](CLI::App* sub) {
    sub->add_option("--config", g.config, "key = value run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", g.seed, "seed for every random component");
    sub->add_flag("-v,--verbose", g.verbose, "progress on stderr");
  };
  add_globals(&app);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "write procedural textured-plane scenes");
  s->add_option("--out", synth.out, "output root")->required();
  s->add_option("--count", synth.count, "number of scenes")->check(CLI::Range(1, 100000));
  s->add_option("--frames", synth.frames, "frames per scene")->check(CLI::Range(1, 1000));
  s->add_option("--size", synth.size, "frame height and width")->check(CLI::Range(8, 4096));

  CurateArgs curate;
  auto* c = app.add_subcommand("curate", "build degraded/warped/ground-truth training triples");
  c->add_option("--manifest", curate.manifest, "scene list")->required()->check(CLI::ExistingFile);
  c->add_option("--degrader", curate.degrader, "degrader spec, e.g. blur_noise:1.2:0.02");
  c->add_option("--out", curate.out, "sample archive directory")->required();

  TrainArgs train_args;
  auto* t = app.add_subcommand("train", "train the fixer on a sample archive");
  t->add_option("--samples", train_args.samples, "sample archive directory")->required();
  t->add_option("--out", train_args.out, "checkpoint to write")->required();
  t->add_option("--resume", train_args.resume, "training checkpoint to continue")->check(CLI::ExistingFile);
  t->add_option("--loss-csv", train_args.loss_csv, "per-step loss log");
  t->add_option("--diagnostic", train_args.diagnostic, "checkpoint written if the loss diverges");

  FixArgs fix_args;
  auto* f = app.add_subcommand("fix", "fix a degraded view, or a directory of them");
  f->add_option("--checkpoint", fix_args.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  f->add_option("--degraded", fix_args.degraded, "degraded PNG or directory")->required()->check(CLI::ExistingPath);
  f->add_option("--reference", fix_args.reference, "reference PNG, or directory paired by name")
      ->required()
      ->check(CLI::ExistingPath);
  f->add_option("--transform", fix_args.transform, "reference-to-view transform file or directory");
  f->add_flag("--flow-fallback", fix_args.flow_fallback, "estimate flow where no transform is given");
  f->add_option("--out", fix_args.out, "output PNG or directory")->required();

  AnalyzeArgs analyze;
  auto* an = app.add_subcommand("analyze", "degradation embedding analysis");
  an->add_option("--gt", analyze.gt, "ground-truth directory")->required()->check(CLI::ExistingDirectory);
  an->add_option("--variant", analyze.variants, "label=dir, repeatable")->required();
  an->add_option("--pair", analyze.pairs, "from=to arrow between cluster means, repeatable");
  an->add_option("--extractor", analyze.extractor, "extractor weights archive")->check(CLI::ExistingFile);
  an->add_option("--out", analyze.out, "output prefix")->required();

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "PSNR / SSIM and plugin metrics over paired directories");
  e->add_option("--pred", eval.pred, "predictions")->required()->check(CLI::ExistingDirectory);
  e->add_option("--gt", eval.gt, "ground truth")->required()->check(CLI::ExistingDirectory);
  e->add_option("--plugin", eval.plugins, "name=executable, repeatable");
  e->add_option("--csv", eval.csv, "per-image CSV");
  e->add_option("--report", eval.report, "summary file (stdout when absent)");

  for (auto* sub : {s, c, t, f, an, e}) add_globals(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*c) return cmd_curate(curate);
    if (*t) return cmd_train(train_args);
    if (*f) return cmd_fix(fix_args);
    if (*an) return cmd_analyze(analyze);
    if (*e) return cmd_eval(eval);
  } catch (const InvalidInput& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const NumericalError& err) {
    std::cerr << "numerical failure: " << err.what() << '\n';
    return kNumerical;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kData;
  }
  return kUsage;
}
