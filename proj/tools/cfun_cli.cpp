#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <string>

#include "CLI11.hpp"
#include "cfun/error.hpp"
#include "cfun/pipeline.hpp"
#include "cfun/verify.hpp"

namespace fs = std::filesystem;
using namespace cfun;

namespace {

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Shape3 parse_shape(const std::string& s) {
  static const std::regex re(R"((\d+)x(\d+)x(\d+))");
  std::smatch m;
  if (!std::regex_match(s, m, re)) throw UsageError("--shape must look like DxHxW, got '" + s + "'");
  return {std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3])};
}

void require_file(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw UsageError(std::string(what) + " not found: " + p.string());
}

struct ConfigFlags {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps_per_epoch, base_epochs, edge_epochs;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON config file (flat TrainConfig keys)");
    cmd->add_option("--preset", preset, "desk or paper");
    cmd->add_option("--seed", seed, "training seed");
    cmd->add_option("--steps-per-epoch", steps_per_epoch);
    cmd->add_option("--base-epochs", base_epochs, "epochs without the edge term");
    cmd->add_option("--edge-epochs", edge_epochs, "epochs with the edge term");
  }

  [[nodiscard]] TrainConfig resolve() const {
    TrainConfig c = TrainConfig::desk();
    if (!config.empty()) {
      require_file(config, "config");
      c = TrainConfig::load(config);
    }
    if (!preset.empty()) {
      const auto p = parse_preset(preset);
      if (!p) throw UsageError("--preset must be desk or paper, got '" + preset + "'");
      if (config.empty()) c = TrainConfig::for_preset(*p);
      else if (c.preset != *p) throw UsageError("--preset conflicts with the preset in " + config);
    }
    if (seed) c.seed = *seed;
    if (steps_per_epoch) c.steps_per_epoch = *steps_per_epoch;
    if (base_epochs) c.base_epochs = *base_epochs;
    if (edge_epochs) c.edge_epochs = *edge_epochs;
    try {
      c.unet.in_channels = c.seg_input_channels();
      c.validate();
    } catch (const ShapeError& e) {
      throw UsageError(std::string("invalid configuration: ") + e.what());
    }
    return c;
  }
};

Variant require_variant(const std::string& s) {
  const auto v = parse_variant(s);
  if (!v) throw UsageError("unknown variant '" + s + "'; valid variants: " + variant_names());
  return *v;
}

TrainOptions progress_options(const fs::path& csv, bool quiet, int total) {
  TrainOptions o;
  o.loss_csv = csv;
  if (!quiet)
    o.on_step = [total](const StepLog& s) {
      if (s.step % 100 == 0 || s.step + 1 == total)
        std::fprintf(stderr, "step %d/%d phase %d total %.4f (box %.4f cls %.4f seg %.4f edge %.4f)\n", s.step + 1,
                     total, s.phase, s.report.total, s.report.l_box, s.report.l_cls, s.report.l_seg, s.report.l_edge);
    };
  return o;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage whole-heart detection and segmentation on synthetic CT phantoms"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "generate a phantom dataset");
  int gen_count = 1;
  std::string gen_shape = "96x128x128";
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  PhantomSpec gen_spec;
  gen->add_option("--count", gen_count, "number of samples")->required();
  gen->add_option("--shape", gen_shape, "volume shape DxHxW");
  gen->add_option("--seed", gen_seed, "seed of the first sample")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--noise", gen_spec.noise_sigma, "Gaussian noise sigma");
  gen->add_option("--clutter", gen_spec.clutter_count, "bright distractors outside the heart");

  // train
  auto* tr = app.add_subcommand("train", "train detector and U-net jointly");
  ConfigFlags tr_cfg;
  tr_cfg.attach(tr);
  std::string tr_data, tr_out, tr_variant = "full";
  bool tr_quiet = false, tr_print = false;
  tr->add_option("--data", tr_data, "training manifest");
  tr->add_flag("--print-config", tr_print, "print the resolved configuration and exit");
  tr->add_option("--out", tr_out, "checkpoint directory");
  tr->add_option("--variant", tr_variant, "ablation switches to apply");
  tr->add_flag("--quiet", tr_quiet, "no progress output");

  // infer
  auto* inf = app.add_subcommand("infer", "segment one volume");
  std::string inf_ckpt, inf_image, inf_out;
  inf->add_option("--ckpt", inf_ckpt, "checkpoint directory")->required();
  inf->add_option("--image", inf_image, "input volume")->required();
  inf->add_option("--out", inf_out, "output label volume")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Dice and detection metrics over a manifest");
  std::string ev_ckpt, ev_data, ev_csv, ev_json;
  bool ev_gt = false;
  ev->add_option("--ckpt", ev_ckpt, "checkpoint directory");
  ev->add_option("--data", ev_data, "evaluation manifest")->required();
  ev->add_flag("--ground-truth", ev_gt, "score the ground truth against itself");
  ev->add_option("--csv", ev_csv, "write the metrics row as CSV");
  ev->add_option("--json", ev_json, "write the full report as JSON");

  // ablate
  auto* ab = app.add_subcommand("ablate", "train and evaluate one ablation variant");
  ConfigFlags ab_cfg;
  ab_cfg.attach(ab);
  std::string ab_variant, ab_train, ab_test, ab_out;
  bool ab_quiet = false;
  ab->add_option("--variant", ab_variant, "one of: " + variant_names())->required();
  ab->add_option("--train", ab_train, "training manifest")->required();
  ab->add_option("--test", ab_test, "held-out manifest")->required();
  ab->add_option("--out", ab_out, "directory for the loss log and report");
  ab->add_flag("--quiet", ab_quiet, "no progress output");

  // verify
  auto* ver = app.add_subcommand("verify", "run oracle comparisons and gradient checks");
  bool ver_corrupt = false;
  int ver_instances = 100;
  std::uint64_t ver_seed = VerifyOptions{}.seed;
  ver->add_flag("--corrupt-sobel", ver_corrupt, "use a wrong Sobel profile (negative control)");
  ver->add_option("--instances", ver_instances, "random instances per oracle check");
  ver->add_option("--seed", ver_seed, "seed for the random instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) {
      gen_spec.shape = parse_shape(gen_shape);
      if (gen_count < 1) throw UsageError("--count must be >= 1");
      try {
        gen_spec.validate();
      } catch (const ShapeError& e) {
        throw UsageError(e.what());
      }
      std::cout << make_dataset(gen_spec, gen_count, gen_seed, gen_out).string() << "\n";
      return kOk;
    }

    if (*tr) {
      const TrainConfig cfg = tr_cfg.resolve().with_variant(require_variant(tr_variant));
      if (tr_print) {
        std::cout << cfg.to_json() << "\n";
        return kOk;
      }
      if (tr_data.empty() || tr_out.empty()) throw UsageError("train needs --data and --out");
      require_file(tr_data, "manifest");
      const Manifest manifest = read_manifest(tr_data);
      const auto samples = load_samples(manifest, cfg.input_shape);
      fs::create_directories(tr_out);
      Model model(cfg);
      const TrainResult r =
          train(model, samples, progress_options(fs::path(tr_out) / "loss.csv", tr_quiet, cfg.total_steps()));
      model.save(tr_out);
      const auto& last = r.log.back().report;
      std::printf("steps=%d final_total=%.6f l_box=%.6f l_cls=%.6f l_seg=%.6f l_edge=%.6f\n", r.steps, last.total,
                  last.l_box, last.l_cls, last.l_seg, last.l_edge);
      return kOk;
    }

    if (*inf) {
      require_file(fs::path(inf_ckpt) / "config.json", "checkpoint");
      require_file(inf_image, "image");
      const auto model = Model::load(inf_ckpt);
      const InferResult r = infer(*model, load_volume(inf_image));
      save_labels(r.labels, inf_out);
      std::printf("box=%s score=%.4f low_confidence=%d\n", r.proposal.box.str().c_str(), r.proposal.score,
                  r.low_confidence ? 1 : 0);
      std::printf("dotted_box_seconds=%.6f\n", r.seconds);
      return kOk;
    }

    if (*ev) {
      require_file(ev_data, "manifest");
      const Manifest manifest = read_manifest(ev_data);
      MetricsReport rep;
      if (ev_gt) {
        rep = evaluate_ground_truth(manifest);
      } else {
        if (ev_ckpt.empty()) throw UsageError("eval needs --ckpt or --ground-truth");
        require_file(fs::path(ev_ckpt) / "config.json", "checkpoint");
        rep = evaluate(*Model::load(ev_ckpt), manifest);
      }
      std::cout << rep.table();
      std::printf("detection_iou=%.4f iou_hit_fraction=%.4f seconds=%.4f\n", rep.mean_iou, rep.iou_hit_fraction,
                  rep.mean_seconds);
      if (!ev_csv.empty()) write_text(ev_csv, rep.csv());
      if (!ev_json.empty()) write_text(ev_json, rep.json());
      return kOk;
    }

    if (*ab) {
      const Variant v = require_variant(ab_variant);
      require_file(ab_train, "training manifest");
      require_file(ab_test, "held-out manifest");
      const TrainConfig cfg = ab_cfg.resolve();
      fs::path log;
      if (!ab_out.empty()) {
        fs::create_directories(ab_out);
        log = fs::path(ab_out) / ("loss_" + to_string(v) + ".csv");
      }
      const AblationResult r =
          ablate(v, cfg, read_manifest(ab_train), read_manifest(ab_test), progress_options(log, ab_quiet, cfg.total_steps()));
      std::printf("variant=%s steps=%d\n", to_string(v).c_str(), r.steps);
      std::cout << r.report.table();
      if (!ab_out.empty()) write_text(fs::path(ab_out) / ("report_" + to_string(v) + ".json"), r.report.json());
      return kOk;
    }

    if (*ver) {
      VerifyOptions o;
      o.corrupt_sobel = ver_corrupt;
      o.instances = ver_instances;
      o.seed = ver_seed;
      const auto checks = run_verification(o);
      std::string failing;
      for (const auto& c : checks) {
        std::printf("%-28s %s max_error=%.3e tolerance=%.1e\n", c.name.c_str(), c.passed() ? "PASS" : "FAIL",
                    c.max_error, c.tolerance);
        if (!c.passed()) failing += " " + c.name;
      }
      if (failing.empty()) return kOk;
      std::printf("failing checks:%s\n", failing.c_str());
      return kRuntime;
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "error: training diverged: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
