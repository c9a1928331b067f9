#include "dcdl/cli.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dcdl/checkpoint.hpp"
#include "dcdl/dataset.hpp"
#include "dcdl/error.hpp"
#include "dcdl/features.hpp"
#include "dcdl/inference.hpp"
#include "dcdl/model.hpp"
#include "dcdl/run_config.hpp"
#include "dcdl/svm.hpp"

namespace dcdl {

namespace fs = std::filesystem;

namespace {

// Timestamps only ever appear on stderr log lines.
void log(std::ostream& err, const std::string& msg) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  err << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << msg << '\n';
}

struct DataArgs {
  std::string path;
  std::string labels;
  std::size_t offset = 0;
  std::size_t count = 0;
  bool mean_subtract = false;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--data", path, "IDX image file or class-per-directory image root")
        ->required();
    cmd->add_option("--labels", labels, "IDX label file (IDX data only)");
    cmd->add_option("--offset", offset, "first item to use");
    cmd->add_option("--count", count, "number of items (0 = all)");
    cmd->add_flag("--mean-subtract", mean_subtract, "subtract each image's mean");
  }

  DataSpec spec() const {
    DataSpec s;
    if (fs::is_directory(path)) {
      s.format = "image_dir";
      s.root = path;
    } else {
      if (!fs::exists(path)) throw ItemError(path, "does not exist");
      s.images = path;
      s.labels = labels;
    }
    s.offset = offset;
    s.count = count;
    s.mean_subtract = mean_subtract;
    return s;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ItemError(path.string(), "cannot open for writing");
  out << text;
  if (!out) throw ItemError(path.string(), "write failed");
}

class DiagnosticsLog {
 public:
  DiagnosticsLog(const fs::path& path, bool append)
      : out_(path, append ? std::ios::app : std::ios::trunc) {
    if (!out_) throw ItemError(path.string(), "cannot open for writing");
  }
  DiagnosticsSink sink() {
    return [this](const SweepRecord& r) {
      out_ << nlohmann::json(r).dump() << '\n';
      out_.flush();
    };
  }

 private:
  std::ofstream out_;
};

bool same_architecture(const ModelConfig& a, const ModelConfig& b) {
  if (a.image_rows != b.image_rows || a.image_cols != b.image_cols ||
      a.layers.size() != b.layers.size()) {
    return false;
  }
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto& x = a.layers[l];
    const auto& y = b.layers[l];
    const bool top = l + 1 == a.layers.size();
    if (x.num_dicts != y.num_dicts || x.dict_rows != y.dict_rows ||
        x.dict_cols != y.dict_cols ||
        (!top && (x.pool_rows != y.pool_rows || x.pool_cols != y.pool_cols))) {
      return false;
    }
  }
  return true;
}

double relative_error(const std::vector<Plane>& images,
                      const std::vector<Plane>& recon) {
  double num = 0.0, den = 0.0;
  for (std::size_t n = 0; n < images.size(); ++n) {
    for (std::size_t i = 0; i < images[n].size(); ++i) {
      const double d = images[n].values()[i] - recon[n].values()[i];
      num += d * d;
      den += images[n].values()[i] * images[n].values()[i];
    }
  }
  return den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
}

// Channels of a dictionary element side by side, one blank column apart.
Plane tile_channels(const DictionaryElement& d) {
  const std::size_t r = d.filter.front().rows();
  const std::size_t c = d.filter.front().cols();
  const std::size_t n = d.filter.size();
  double lo = 0.0;
  for (const auto& p : d.filter) {
    for (double v : p.values()) lo = std::min(lo, v);
  }
  Plane out(r, n * c + (n - 1), lo);
  for (std::size_t ch = 0; ch < n; ++ch) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out(i, ch * (c + 1) + j) = d.filter[ch](i, j);
    }
  }
  return out;
}

int run_pretrain(const std::string& config_path, const std::string& out_dir,
                 std::ostream& out, std::ostream& err) {
  const RunConfig cfg = load_run_config(config_path);
  const Dataset data = load_dataset(cfg.data, cfg.model.image_rows,
                                    cfg.model.image_cols, cfg.model.rng_seed,
                                    [&](const std::string& w) { log(err, "warning: " + w); });
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "config.json", nlohmann::json(cfg).dump(2) + "\n");
  log(err, "pretraining on " + std::to_string(data.size()) + " images");
  DiagnosticsLog diag(fs::path(out_dir) / "diagnostics.jsonl", false);
  ChainOptions opts;
  opts.sink = diag.sink();
  const FitResult fit = pretrain(data.images, cfg.model, opts);
  save_checkpoint(out_dir, make_checkpoint(fit));
  out << "pretrained " << cfg.model.num_layers() << " layer(s) on "
      << data.size() << " images; final residual "
      << (fit.trace.empty() ? 0.0 : fit.trace.back().residual_norm) << "\n";
  return kExitOk;
}

int run_refine(const std::string& ckpt_path, const std::string& config_path,
               const std::string& out_dir, std::ostream& out,
               std::ostream& err) {
  const RunConfig cfg = load_run_config(config_path);
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  if (!same_architecture(cfg.model, ckpt.model.config)) {
    throw ConsistencyError("config architecture differs from the checkpoint");
  }
  if (ckpt.states.empty()) {
    throw ConsistencyError("checkpoint " + ckpt_path + " holds no latent states");
  }
  const Dataset data = load_dataset(cfg.data, cfg.model.image_rows,
                                    cfg.model.image_cols, cfg.model.rng_seed,
                                    [&](const std::string& w) { log(err, "warning: " + w); });
  if (data.size() != ckpt.states.size()) {
    throw ConsistencyError("checkpoint has states for " +
                           std::to_string(ckpt.states.size()) +
                           " images, data selection has " +
                           std::to_string(data.size()));
  }
  FitResult start;
  start.model = ckpt.model;
  start.model.config.gibbs = cfg.model.gibbs;
  start.model.config.rng_seed = cfg.model.rng_seed;
  start.states = std::move(ckpt.states);
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "config.json", nlohmann::json(cfg).dump(2) + "\n");
  log(err, "refining on " + std::to_string(data.size()) + " images");
  DiagnosticsLog diag(fs::path(out_dir) / "diagnostics.jsonl", false);
  ChainOptions opts;
  opts.sink = diag.sink();
  const FitResult fit = refine(start, data.images, opts);
  Checkpoint result = make_checkpoint(fit);
  result.sweeps += ckpt.sweeps;
  result.residual_trace.insert(result.residual_trace.begin(),
                               ckpt.residual_trace.begin(), ckpt.residual_trace.end());
  result.score_trace.insert(result.score_trace.begin(), ckpt.score_trace.begin(),
                            ckpt.score_trace.end());
  save_checkpoint(out_dir, result);
  out << "refined; final data residual "
      << (fit.trace.empty() ? 0.0 : fit.trace.back().residual_norm) << "\n";
  return kExitOk;
}

int run_features(const std::string& ckpt_path, const DataArgs& data_args,
                 std::size_t sweeps, std::int64_t seed_arg,
                 const std::string& out_path, std::ostream& out,
                 std::ostream& err) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ModelConfig& mc = ckpt.model.config;
  const Dataset data =
      load_dataset(data_args.spec(), mc.image_rows, mc.image_cols, mc.rng_seed,
                   [&](const std::string& w) { log(err, "warning: " + w); });
  const std::uint64_t seed =
      seed_arg >= 0 ? static_cast<std::uint64_t>(seed_arg) : mc.rng_seed;
  FeatureOptions fo;
  fo.sweeps = sweeps;
  std::vector<FeatureVector> fs_out;
  for (std::size_t n = 0; n < data.size(); ++n) {
    FeatureVector f = extract_features(data.images[n], ckpt.model, seed, fo);
    f.id = data.ids[n];
    if (data.labelled()) f.label = data.labels[n];
    fs_out.push_back(std::move(f));
    if ((n + 1) % 100 == 0) {
      log(err, "features " + std::to_string(n + 1) + "/" + std::to_string(data.size()));
    }
  }
  write_features(out_path, fs_out);
  out << "wrote " << fs_out.size() << " feature vectors of length "
      << (fs_out.empty() ? 0 : fs_out.front().values.size()) << " to "
      << out_path << "\n";
  return kExitOk;
}

struct ClassifyArgs {
  std::string train, test, model_out, predictions_out;
  bool cv = false;
  double C = 10.0;
  double gamma = 0.0;
  std::size_t folds = 5;
  std::uint64_t seed = 0;
};

int run_classify(const ClassifyArgs& a, std::ostream& out, std::ostream& err) {
  std::vector<FeatureVector> train = read_features(a.train);
  std::vector<FeatureVector> test = read_features(a.test);
  if (train.empty()) throw ValidationError(a.train + " holds no features");
  std::set<int> train_classes, test_classes;
  for (const auto& f : train) {
    if (!f.label) throw ValidationError("training feature '" + f.id + "' has no label");
    train_classes.insert(*f.label);
  }
  for (const auto& f : test) {
    if (f.label) test_classes.insert(*f.label);
  }
  if (!test.empty() && test.front().values.size() != train.front().values.size()) {
    throw ConsistencyError("train and test features have different lengths");
  }
  bool overlap = test_classes.empty();
  for (int c : test_classes) overlap = overlap || train_classes.count(c) > 0;
  if (!overlap) {
    throw ConsistencyError("test labels are disjoint from the training labels");
  }
  for (int c : test_classes) {
    if (!train_classes.count(c)) {
      log(err, "warning: test class " + std::to_string(c) + " never occurs in training");
    }
  }
  const Standardizer st(train);
  st.apply_in_place(train);
  st.apply_in_place(test);
  std::vector<Sample> x;
  std::vector<int> y;
  for (const auto& f : train) {
    x.push_back(f.values);
    y.push_back(*f.label);
  }
  double C = a.C;
  double gamma = a.gamma > 0.0 ? a.gamma : 1.0 / static_cast<double>(x.front().size());
  if (a.cv) {
    const CvResult cv = svm_cross_validate(x, y, default_c_grid(),
                                           default_gamma_grid(), a.folds, a.seed);
    C = cv.C;
    gamma = cv.gamma;
    out << "cross-validation: C=" << C << " gamma=" << gamma
        << " accuracy=" << cv.accuracy << "\n";
  }
  const SvmModel model = svm_train(x, y, C, gamma);
  if (!a.model_out.empty()) {
    nlohmann::json j = model;
    j["standardizer"] = {{"mean", st.mean()}, {"scale", st.scale()}};
    write_text(a.model_out, j.dump() + "\n");
  }
  std::size_t labelled = 0, wrong = 0;
  std::ostringstream preds;
  for (const auto& f : test) {
    const int p = svm_predict(model, f.values);
    preds << nlohmann::json({{"id", f.id}, {"predicted", p}}).dump() << "\n";
    if (f.label) {
      ++labelled;
      wrong += p != *f.label;
    }
  }
  if (!a.predictions_out.empty()) write_text(a.predictions_out, preds.str());
  if (labelled > 0) {
    out << "test error: " << std::fixed << std::setprecision(2)
        << 100.0 * static_cast<double>(wrong) / static_cast<double>(labelled)
        << "% (" << wrong << "/" << labelled << ")\n";
  } else {
    out << "predicted " << test.size() << " unlabelled items\n";
  }
  return kExitOk;
}

int run_reconstruct(const std::string& ckpt_path, const DataArgs& data_args,
                    std::size_t sweeps, std::int64_t seed_arg,
                    const std::string& out_dir, std::ostream& out,
                    std::ostream& err) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ModelConfig& mc = ckpt.model.config;
  const Dataset data =
      load_dataset(data_args.spec(), mc.image_rows, mc.image_cols, mc.rng_seed,
                   [&](const std::string& w) { log(err, "warning: " + w); });
  const std::uint64_t seed =
      seed_arg >= 0 ? static_cast<std::uint64_t>(seed_arg) : mc.rng_seed;
  const std::size_t n_sweeps = sweeps ? sweeps : mc.gibbs.pretrain_sweeps;
  fs::create_directories(out_dir);
  const auto geo = layer_geometry(mc);
  std::vector<Plane> recon;
  for (std::size_t n = 0; n < data.size(); ++n) {
    const auto states = infer_states(data.images[n], ckpt.model, n_sweeps, seed);
    // Bottom-layer fit: inferred states are per layer, not one top-down path.
    recon.push_back(synthesize_layer(states[0].activations, ckpt.model.dicts[0], geo[0])[0]);
    write_pgm(fs::path(out_dir) / ("recon_" + std::to_string(n) + ".pgm"), recon.back());
  }
  for (const auto& layer : ckpt.model.dicts) {
    for (const auto& d : layer) {
      write_pgm_normalized(fs::path(out_dir) / ("dict_" + std::to_string(d.layer) +
                                                "_" + std::to_string(d.index) + ".pgm"),
                           tile_channels(d));
    }
  }
  out << "reconstructed " << data.size() << " images; relative error "
      << relative_error(data.images, recon) << "\n";
  return kExitOk;
}

int run_generate(const std::string& ckpt_path, std::size_t n,
                 std::int64_t seed_arg, const std::string& out_dir,
                 std::ostream& out) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const ModelConfig& mc = ckpt.model.config;
  const std::uint64_t seed =
      seed_arg >= 0 ? static_cast<std::uint64_t>(seed_arg) : mc.rng_seed;
  Rng rng = derive_stream(seed, 4, 0);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < n; ++i) {
    const GeneratedSample s = generate(mc, ckpt.model.dicts, ckpt.model.hyper, rng);
    write_pgm_normalized(fs::path(out_dir) / ("sample_" + std::to_string(i) + ".pgm"),
                         s.image);
  }
  out << "generated " << n << " samples in " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out,
             std::ostream& err) {
  CLI::App app{"Deep convolutional dictionary learning: pretrain, refine, "
               "extract features, classify."};
  app.name("dcdl");
  app.require_subcommand(1);

  std::string config, out_path, ckpt;
  std::size_t sweeps = 0, n = 0;
  std::int64_t seed = -1;
  DataArgs data;
  ClassifyArgs cls;

  auto* pre = app.add_subcommand("pretrain", "layer-wise pretraining from a config");
  pre->add_option("--config", config, "run config JSON")->required();
  pre->add_option("--out", out_path, "output checkpoint directory")->required();

  auto* ref = app.add_subcommand("refine", "top-down refinement of a pretrained checkpoint");
  ref->add_option("--checkpoint", ckpt, "pretrained checkpoint directory")->required();
  ref->add_option("--config", config, "run config JSON")->required();
  ref->add_option("--out", out_path, "output checkpoint directory")->required();

  auto* feat = app.add_subcommand("features", "top-layer features as JSON lines");
  feat->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  data.add_to(feat);
  feat->add_option("--out", out_path, "output .jsonl file")->required();
  feat->add_option("--sweeps", sweeps, "Gibbs sweeps per layer (default: config)");
  feat->add_option("--seed", seed, "inference seed (default: config seed)");

  auto* clf = app.add_subcommand("classify", "one-vs-all RBF SVM on feature files");
  clf->add_option("--train", cls.train, "training features (.jsonl)")->required();
  clf->add_option("--test", cls.test, "test features (.jsonl)")->required();
  clf->add_flag("--cv", cls.cv, "pick C and gamma by stratified cross-validation");
  clf->add_option("--C", cls.C, "box constraint without --cv");
  clf->add_option("--gamma", cls.gamma, "kernel width without --cv (default 1/length)");
  clf->add_option("--folds", cls.folds, "cross-validation folds");
  clf->add_option("--seed", cls.seed, "fold assignment seed");
  clf->add_option("--model-out", cls.model_out, "write the trained model as JSON");
  clf->add_option("--predictions-out", cls.predictions_out, "write predictions as JSON lines");

  auto* rec = app.add_subcommand("reconstruct", "reconstructions and dictionary images as PGM");
  rec->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  data.add_to(rec);
  rec->add_option("--out", out_path, "output directory")->required();
  rec->add_option("--sweeps", sweeps, "Gibbs sweeps per layer (default: config)");
  rec->add_option("--seed", seed, "inference seed (default: config seed)");

  auto* gen = app.add_subcommand("generate", "ancestral samples from a checkpoint");
  gen->add_option("--checkpoint", ckpt, "checkpoint directory")->required();
  gen->add_option("--n", n, "number of samples")->required();
  gen->add_option("--out", out_path, "output directory")->required();
  gen->add_option("--seed", seed, "sampling seed (default: config seed)");

  if (args.empty()) {
    err << app.help();
    return kExitUsage;
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << "run 'dcdl --help' for usage\n";
    return kExitUsage;
  }

  try {
    if (*pre) return run_pretrain(config, out_path, out, err);
    if (*ref) return run_refine(ckpt, config, out_path, out, err);
    if (*feat) return run_features(ckpt, data, sweeps, seed, out_path, out, err);
    if (*clf) return run_classify(cls, out, err);
    if (*rec) return run_reconstruct(ckpt, data, sweeps, seed, out_path, out, err);
    if (*gen) return run_generate(ckpt, n, seed, out_path, out);
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace dcdl
