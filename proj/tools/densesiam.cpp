// densesiam: data generation, training, evaluation and diagnostics.
#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "densesiam/config.hpp"
#include "densesiam/dataset.hpp"
#include "densesiam/dst1.hpp"
#include "densesiam/errors.hpp"
#include "densesiam/evaluation.hpp"
#include "densesiam/gradcheck_suite.hpp"
#include "densesiam/image_io.hpp"
#include "densesiam/rng.hpp"
#include "densesiam/trainer.hpp"

namespace fs = std::filesystem;
using namespace dsiam;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
}

std::string kinds_text(const Dataset& d) {
  std::string s;
  for (std::size_t c = 0; c < d.class_kinds.size(); ++c) {
    if (c) s += ",";
    s += d.class_kinds[c] == ClassKind::Stuff ? "stuff" : "thing";
  }
  return s;
}

// A directory written by gen-data resolves to its split file; anything else
// goes to load_dataset (a DST1 file or a directory of .ppm images).
Dataset open_data(const fs::path& path, const char* split) {
  if (fs::is_directory(path) && fs::is_regular_file(path / (std::string(split) + ".dst1"))) {
    return load_dataset(path / (std::string(split) + ".dst1"));
  }
  if (!fs::exists(path)) throw InputError("data not found: " + path.string());
  return load_dataset(path);
}

// ---- gen-data ----

struct GenDataArgs {
  std::string out;
  int num = 0, val = 0, classes = 3, size = 64;
  std::uint64_t seed = 0;
};

int cmd_gen_data(const GenDataArgs& a) {
  if (a.val < 0) throw ConfigError("--val must be >= 0");
  const Dataset train = gen_shapes_dataset(a.num, a.classes, a.size, a.seed);
  fs::create_directories(a.out);
  save_dataset(train, fs::path(a.out) / "train.dst1");
  if (a.val > 0) {
    const Dataset val = gen_shapes_dataset(a.val, a.classes, a.size, derive_seed(a.seed, {fnv1a("val")}));
    save_dataset(val, fs::path(a.out) / "val.dst1");
  }
  std::ostringstream m;
  m << "num = " << a.num << "\nval = " << a.val << "\nclasses = " << a.classes << "\nsize = " << a.size
    << "\nseed = " << a.seed << "\nclass_kinds = " << kinds_text(train) << "\n";
  write_text(fs::path(a.out) / "manifest.txt", m.str());
  std::cout << "wrote " << a.num << " training images";
  if (a.val > 0) std::cout << " and " << a.val << " validation images";
  std::cout << " (" << a.classes << " classes, " << a.size << "x" << a.size << ") to " << a.out << "\n";
  return kExitOk;
}

// ---- pretrain / train-seg ----

struct TrainArgs {
  std::string config, data, out, resume, metrics;
  std::optional<std::int64_t> until_epoch;
};

int cmd_train(const TrainArgs& a, Mode mode) {
  std::optional<dst1::Container> ckpt;
  TrainConfig cfg;
  std::string config_text;
  if (!a.resume.empty()) {
    ckpt = dst1::Container::load(a.resume);
    cfg = checkpoint_config(*ckpt);
    if (cfg.mode != mode) throw ConfigError("checkpoint was written by " + to_string(cfg.mode) + ", not " + to_string(mode));
    config_text = ckpt->get("meta.config").as_text();
  } else {
    if (a.config.empty()) throw ConfigError("--config is required unless --resume is given");
    config_text = read_text(a.config);
    cfg = parse_config(config_text, mode);
  }
  const std::string data_path = !a.data.empty() ? a.data : cfg.data;
  if (data_path.empty()) throw ConfigError("no training data: pass --data or set data in the config");
  const Dataset data = open_data(data_path, "train");

  if (mode == Mode::Seg && cfg.N_aux <= resolved_num_classes(cfg, data.labeled() ? data.num_classes() : 0)) {
    std::cerr << "warning: N_aux (" << cfg.N_aux << ") should exceed N for over-clustering\n";
  }

  Trainer trainer = ckpt ? Trainer::resume(*ckpt, data) : Trainer(cfg, data);
  const fs::path out = a.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  if (!ckpt) write_text(out.string() + ".config", config_text);

  const fs::path metrics = a.metrics.empty() ? fs::path(out.string() + ".metrics.csv") : fs::path(a.metrics);
  const bool append = ckpt && fs::exists(metrics);
  std::ofstream csv(metrics, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw Error("cannot open '" + metrics.string() + "' for writing");
  if (!append) csv << kMetricsHeader << "\n";
  trainer.on_step([&csv](const StepMetrics& m) { csv << metrics_row(m) << "\n" << std::flush; });

  std::printf("%s: %zu images, %lld steps/epoch, %lld steps total, N=%d\n", to_string(mode).c_str(), data.size(),
              static_cast<long long>(trainer.steps_per_epoch()), static_cast<long long>(trainer.total_steps()),
              trainer.num_classes());
  while (!trainer.finished() && (!a.until_epoch || trainer.epoch() < *a.until_epoch)) {
    const StepMetrics m = trainer.train_epoch();
    std::printf("epoch %lld step %lld lr %.6g loss %.6f collapse %.4f\n", static_cast<long long>(m.epoch + 1),
                static_cast<long long>(m.step), m.lr, m.total, m.collapse);
    std::fflush(stdout);
  }
  trainer.save_checkpoint(out);
  std::printf("checkpoint: %s\n", out.string().c_str());
  return kExitOk;
}

// ---- eval-seg ----

struct EvalArgs {
  std::string ckpt, data, pred_dir, export_dir, csv;
  int baseline_runs = 0;
  std::uint64_t baseline_seed = 0;
};

fs::path label_file(const fs::path& dir, std::size_t i) {
  char name[32];
  std::snprintf(name, sizeof name, "%05zu.pgm", i);
  return dir / name;
}

int cmd_eval(const EvalArgs& a) {
  const Dataset data = open_data(a.data, "val");
  if (!data.labeled()) throw InputError("evaluation data has no masks");
  const auto width = static_cast<std::size_t>(data.width()), height = static_cast<std::size_t>(data.height());
  std::vector<std::vector<std::int64_t>> preds;
  std::size_t pred_classes = static_cast<std::size_t>(data.num_classes());
  if (!a.pred_dir.empty()) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      LabelMap m = load_pgm(label_file(a.pred_dir, i));
      if (m.width != width || m.height != height) {
        throw InputError("prediction " + label_file(a.pred_dir, i).string() + " does not match the image size");
      }
      for (auto l : m.labels) pred_classes = std::max(pred_classes, static_cast<std::size_t>(l) + 1);
      preds.push_back(std::move(m.labels));
    }
  } else {
    if (a.ckpt.empty()) throw ConfigError("eval-seg needs --ckpt or --pred-dir");
    const auto ckpt = dst1::Container::load(a.ckpt);
    ModelF model = load_model(ckpt);
    pred_classes = std::max(pred_classes, static_cast<std::size_t>(model.config().num_classes));
    std::vector<TensorF> images;
    for (const auto& item : data.items) images.push_back(item.image);
    preds = predict_labels(model, images);
  }
  if (!a.export_dir.empty()) {
    fs::create_directories(a.export_dir);
    for (std::size_t i = 0; i < preds.size(); ++i) save_pgm({width, height, preds[i]}, label_file(a.export_dir, i));
  }
  const SegMetrics m = evaluate(confusion_for(preds, data, pred_classes), data.class_kinds);
  std::cout << format_report(m, data.class_kinds);
  if (!a.csv.empty()) write_text(a.csv, format_csv(m, data.class_kinds));
  if (a.baseline_runs > 0) {
    std::printf("random baseline (%d runs): mIoU=%.4f\n", a.baseline_runs,
                random_baseline_miou(data, a.baseline_runs, a.baseline_seed));
  }
  return kExitOk;
}

// ---- grad-check ----

struct GradCheckArgs {
  bool sabotage = false;
  int seeds = 20;
  std::vector<std::string> only;
};

int cmd_grad_check(const GradCheckArgs& a) {
  SuiteOptions opt;
  opt.seeds = a.seeds;
  opt.only = a.only;
  if (a.sabotage) opt.analytic_scale = 1.01;
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  int passed = 0;
  for (const auto& r : results) {
    std::printf("%s %-9s %-28s seeds %d/%d  max_rel_err %.3e\n", r.pass() ? "PASS" : "FAIL", r.group.c_str(),
                r.name.c_str(), r.passed, r.seeds, r.max_rel_err);
    if (!r.pass()) std::printf("     %s\n", r.first_failure.c_str());
    passed += r.pass();
  }
  std::printf("grad-check: %d/%zu cases passed (tolerance %.0e, %.1f s)%s\n", passed, results.size(), opt.tolerance,
              secs, a.sabotage ? " [sabotaged]" : "");
  return passed == static_cast<int>(results.size()) ? kExitOk : kExitRuntime;
}

// ---- inspect ----

const char* dtype_name(dst1::DType d) {
  switch (d) {
    case dst1::DType::F32: return "f32";
    case dst1::DType::I64: return "i64";
    case dst1::DType::U8: return "u8";
  }
  return "?";
}

int cmd_inspect(const std::string& path) {
  const auto ckpt = dst1::Container::load(path);
  std::size_t params = 0, stats = 0, optim = 0;
  for (const auto& e : ckpt.entries()) {
    std::string shape;
    for (std::size_t i = 0; i < e.dims.size(); ++i) shape += (i ? "x" : "") + std::to_string(e.dims[i]);
    std::printf("%-48s %-4s %-16s %zu\n", e.name.c_str(), dtype_name(e.dtype), shape.c_str(), e.count());
    const bool meta = e.name.rfind("meta.", 0) == 0 || e.name.rfind("state.", 0) == 0;
    if (e.name.rfind("optim.", 0) == 0) {
      optim += e.count();
    } else if (!meta) {
      const bool running = e.name.find("running_") != std::string::npos;
      (running ? stats : params) += e.count();
    }
  }
  std::printf("entries: %zu\n", ckpt.entries().size());
  std::printf("trainable parameters: %zu\n", params);
  std::printf("running statistics: %zu\n", stats);
  std::printf("momentum values: %zu\n", optim);
  if (ckpt.contains("meta.config")) {
    const TrainConfig cfg = checkpoint_config(ckpt);
    const std::size_t expected = count_parameters(model_config(cfg, checkpoint_num_classes(ckpt)));
    std::printf("expected from config: %zu (%s)\n", expected, expected == params ? "match" : "MISMATCH");
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense siamese self-supervised segmentation toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic labeled shapes dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--num", gen.num, "Training images")->required();
  gen_cmd->add_option("--classes", gen.classes, "Number of classes (2-12)")->capture_default_str();
  gen_cmd->add_option("--size", gen.size, "Image side in pixels")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Root seed")->capture_default_str();
  gen_cmd->add_option("--val", gen.val, "Validation images")->capture_default_str();

  TrainArgs pre, seg;
  std::int64_t pre_until = -1, seg_until = -1;
  auto add_train = [&](CLI::App* cmd, TrainArgs& t, std::int64_t& until) {
    cmd->add_option("--config", t.config, "Config file (key = value lines)");
    cmd->add_option("--data", t.data, "Dataset file or directory");
    cmd->add_option("--out", t.out, "Checkpoint path")->required();
    cmd->add_option("--resume", t.resume, "Continue from a checkpoint");
    cmd->add_option("--metrics", t.metrics, "Metrics CSV (default <out>.metrics.csv)");
    cmd->add_option("--until-epoch", until, "Stop after this many completed epochs");
  };
  auto* pre_cmd = app.add_subcommand("pretrain", "Self-supervised pretraining");
  add_train(pre_cmd, pre, pre_until);
  auto* seg_cmd = app.add_subcommand("train-seg", "Unsupervised segmentation training");
  add_train(seg_cmd, seg, seg_until);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval-seg", "Hungarian-matched mIoU of a checkpoint or label maps");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint");
  eval_cmd->add_option("--data", ev.data, "Labeled dataset")->required();
  eval_cmd->add_option("--pred-dir", ev.pred_dir, "Directory of NNNNN.pgm label maps instead of a checkpoint");
  eval_cmd->add_option("--export-dir", ev.export_dir, "Write predicted label maps here");
  eval_cmd->add_option("--csv", ev.csv, "Write the metrics as CSV");
  eval_cmd->add_option("--baseline-runs", ev.baseline_runs, "Also report a random-labeling baseline");
  eval_cmd->add_option("--baseline-seed", ev.baseline_seed, "Seed for the baseline");

  GradCheckArgs gc;
  auto* gc_cmd = app.add_subcommand("grad-check", "Finite-difference check of every primitive and loss");
  gc_cmd->add_flag("--sabotage", gc.sabotage, "Scale analytic gradients by 1.01 (must fail)");
  gc_cmd->add_option("--seeds", gc.seeds, "Random inputs per case")->capture_default_str()->check(CLI::PositiveNumber);
  gc_cmd->add_option("--only", gc.only, "Restrict to the named cases");

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect", "List the entries of a checkpoint");
  inspect_cmd->add_option("--ckpt", inspect_path, "Checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*pre_cmd) {
      if (pre_until >= 0) pre.until_epoch = pre_until;
      return cmd_train(pre, Mode::Pretrain);
    }
    if (*seg_cmd) {
      if (seg_until >= 0) seg.until_epoch = seg_until;
      return cmd_train(seg, Mode::Seg);
    }
    if (*eval_cmd) return cmd_eval(ev);
    if (*gc_cmd) return cmd_grad_check(gc);
    if (*inspect_cmd) return cmd_inspect(inspect_path);
  } catch (const NonFiniteLoss& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
