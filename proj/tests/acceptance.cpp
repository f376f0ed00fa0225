// Acceptance suite: one PASS/FAIL line per criterion, exit code 1 if any
// primary criterion fails. Tolerances are fixed below.
//
//   acceptance [--work DIR] [--quick]
//
// --quick shrinks the training schedule for a fast smoke pass; its verdicts
// on the trained-model criteria are not meaningful.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cfun/losses.hpp"
#include "cfun/pipeline.hpp"
#include "cfun/verify.hpp"

namespace fs = std::filesystem;
using namespace cfun;
using Clock = std::chrono::steady_clock;

namespace {

constexpr int kTrainCount = 20;
constexpr int kTestCount = 6;
constexpr std::uint64_t kTrainDataSeed = 1000;
constexpr std::uint64_t kTestDataSeed = 9000;
constexpr std::uint64_t kRunSeeds[] = {1, 2, 3};

constexpr double kOracleBudgetSeconds = 120.0;
constexpr double kGradBudgetSeconds = 300.0;
constexpr double kIouThreshold = 0.5;
constexpr double kIouHitFraction = 0.9;
constexpr double kDiceThreshold = 0.80;
constexpr double kRunBudgetMinutes = 60.0;

int primary_failures = 0;

void report(bool primary, bool ok, const std::string& name, const std::string& detail) {
  std::printf("[%s] %s%s: %s\n", ok ? "PASS" : "FAIL", primary ? "" : "(supplementary) ", name.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (primary && !ok) ++primary_failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void log_line(const std::string& s) {
  std::fprintf(stderr, "%s\n", s.c_str());
  std::fflush(stderr);
}

// ---------------------------------------------------------------------------

void oracle_and_gradient_checks() {
  const auto group = [](bool oracles, double budget, const char* name) {
    VerifyOptions opt;
    opt.instances = 100;
    opt.oracles = oracles;
    opt.gradients = !oracles;
    const auto t0 = Clock::now();
    const auto checks = run_verification(opt);
    const double secs = seconds_since(t0);
    bool ok = !checks.empty() && secs < budget;
    std::string d;
    for (const auto& c : checks) {
      d += fmt("%s%s %.2e/%.0e", d.empty() ? "" : ", ", c.name.c_str(), c.max_error, c.tolerance);
      ok = ok && c.passed() && (!oracles || c.instances >= 100);
    }
    report(true, ok, name, d + fmt("; %.1fs (budget %.0fs)", secs, budget));
  };
  group(true, kOracleBudgetSeconds, "oracle equivalence (>=100 instances each)");
  group(false, kGradBudgetSeconds, "gradient battery (max_rel_error < 1e-2)");

  VerifyOptions bad;
  bad.instances = 10;
  bad.corrupt_sobel = true;
  bad.gradients = false;
  bool caught = false;
  for (const auto& c : run_verification(bad))
    if (c.name == "edge_response") caught = !c.passed();
  report(false, caught, "verification negative control", "corrupted Sobel constant is detected by edge_response");
}

void edge_loss_invariants() {
  SplitMix64 rng(77);
  const auto bank = loss::sobel_bank();
  loss::SobelBank doubled = bank;
  doubled.kernels.insert(doubled.kernels.end(), bank.kernels.begin(), bank.kernels.end());
  double self = 0, min_val = 1e30, asym = 0, dup = 0;
  for (int t = 0; t < 50; ++t) {
    const Shape3 s{2 + int(rng.below(7)), 2 + int(rng.below(7)), 2 + int(rng.below(7))};
    Tensor logits(8, s);
    for (auto& v : logits.values()) v = static_cast<float>(rng.uniform(-4, 4));
    const SegMap p{nn::softmax_channels(logits), SegKind::Probabilities};
    LabelVolume l(s, 8);
    for (auto& v : l.data) v = static_cast<std::uint8_t>(rng.below(8));
    const SegMap y = one_hot(l);
    self = std::max(self, std::abs(loss::edge_loss(p, p, bank)) + std::abs(loss::edge_loss(y, y, bank)));
    const double a = loss::edge_loss(p, y, bank);
    min_val = std::min(min_val, a);
    asym = std::max(asym, std::abs(a - loss::edge_loss(y, p, bank)));
    dup = std::max(dup, std::abs(a - loss::edge_loss(p, y, doubled)) / std::max(1e-12, a));
  }
  report(true, self == 0.0 && min_val >= 0.0 && asym <= 1e-12 && dup <= 1e-9, "edge loss invariants",
         fmt("edge(p,p)=%.1e (exact 0), min=%.3e (>=0), |edge(p,y)-edge(y,p)|=%.1e (<=1e-12), "
             "K-duplication rel diff=%.1e (<=1e-9), 50 instances",
             self, min_val, asym, dup));
}

void shape_contracts() {
  const TrainConfig paper = TrainConfig::paper();
  SplitMix64 rng(5);
  nn::ParamStore ps;
  const Unet net(ps, paper.unet, rng);
  std::vector<int> got;
  {
    ag::NoGradGuard ng;
    Tensor crop(1, paper.roi_out_size);
    for (auto& v : crop.values()) v = static_cast<float>(rng.uniform());
    got = net.forward(ag::constant(crop)).logits->value.shape();
  }
  const bool unet_ok = paper.roi_out_size == Shape3{64, 64, 64} && got == std::vector<int>{8, 128, 128, 128};

  bool one_box = true;
  for (int t = 0; t < 200; ++t) {
    std::vector<Proposal> props;
    const int n = 1 + int(rng.below(60));
    for (int i = 0; i < n; ++i) {
      const double z = rng.uniform(0, 80), y = rng.uniform(0, 80), x = rng.uniform(0, 80);
      props.push_back({{z, y, x, z + rng.uniform(1, 40), y + rng.uniform(1, 40), x + rng.uniform(1, 40)}, rng.uniform()});
    }
    const Selection s = select_heart_box(props);
    bool member = false;
    for (const auto& p : props) member = member || (p.box == s.proposal.box && p.score == s.proposal.score);
    one_box = one_box && member && s.low_confidence == (s.proposal.score < 0.5);
  }
  report(true, unet_ok && one_box, "shape contracts",
         fmt("paper RoI %dx%dx%d -> logits (%d,%d,%d,%d); one box from 200 random nonempty proposal sets: %s",
             paper.roi_out_size.d, paper.roi_out_size.h, paper.roi_out_size.w, got[0], got[1], got[2], got[3],
             one_box ? "yes" : "no"));
}

// ---------------------------------------------------------------------------

struct RunOutcome {
  std::uint64_t seed = 0;
  Variant variant = Variant::Full;
  TrainResult train;
  MetricsReport metrics;
  double train_minutes = 0;
  double total_minutes = 0;
  fs::path csv;
};

RunOutcome run(const TrainConfig& base, Variant v, std::uint64_t seed, const Manifest& train_set,
               const Manifest& test_set, const fs::path& dir, const std::string& tag) {
  TrainConfig cfg = base.with_variant(v);
  cfg.seed = seed;
  RunOutcome r;
  r.seed = seed;
  r.variant = v;
  r.csv = dir / ("loss_" + tag + ".csv");
  const auto t0 = Clock::now();
  Model model(cfg);
  const auto samples = load_samples(train_set, cfg.input_shape);
  TrainOptions opts;
  opts.loss_csv = r.csv;
  const int total = cfg.total_steps();
  opts.on_step = [&, total](const StepLog& s) {
    if ((s.step + 1) % 256 == 0 || s.step + 1 == total)
      log_line(fmt("  %s step %d/%d total %.4f (%.1f min)", tag.c_str(), s.step + 1, total, s.report.total,
                   seconds_since(t0) / 60.0));
  };
  r.train = train(model, samples, opts);
  r.train_minutes = seconds_since(t0) / 60.0;
  r.metrics = evaluate(model, test_set);
  r.total_minutes = seconds_since(t0) / 60.0;
  model.save(dir / ("model_" + tag));
  std::ofstream(dir / ("report_" + tag + ".json")) << r.metrics.json();
  log_line(fmt("  %s done: dice %.4f, iou %.3f, hit %.2f, %.1f min", tag.c_str(), r.metrics.mean_dice,
               r.metrics.mean_iou, r.metrics.iou_hit_fraction, r.total_minutes));
  return r;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

void trained_model_criteria(const fs::path& work, bool quick) {
  PhantomSpec spec;
  TrainConfig base = TrainConfig::desk();
  spec.shape = base.input_shape;
  if (quick) {
    base.steps_per_epoch = 4;
    base.base_epochs = 3;
    base.edge_epochs = 1;
  }
  const Manifest train_set = read_manifest(make_dataset(spec, kTrainCount, kTrainDataSeed, work / "train"));
  const Manifest test_set = read_manifest(make_dataset(spec, kTestCount, kTestDataSeed, work / "test"));

  std::vector<RunOutcome> full, plain;
  for (std::uint64_t seed : kRunSeeds) {
    log_line(fmt("desk run: full, seed %llu", static_cast<unsigned long long>(seed)));
    full.push_back(run(base, Variant::Full, seed, train_set, test_set, work, fmt("full_s%llu", (unsigned long long)seed)));
  }
  for (std::uint64_t seed : kRunSeeds) {
    log_line(fmt("desk run: no_edge_no_refine, seed %llu", static_cast<unsigned long long>(seed)));
    plain.push_back(run(base, Variant::NoEdgeNoRefine, seed, train_set, test_set, work,
                        fmt("plain_s%llu", (unsigned long long)seed)));
  }

  // Combined-loss arithmetic and the phase-1 edge term.
  {
    const loss::LossWeights w = base.weights;
    const double seven = loss::total_loss(1, 1, 1, 1, w).total;
    std::size_t phase1_rows = 0, nonzero = 0;
    double worst_sum = 0;
    for (const auto& r : full)
      for (const auto& s : r.train.log) {
        const auto& q = s.report;
        worst_sum = std::max(worst_sum, std::abs(q.total - (2 * q.l_box + 2 * q.l_cls + 2 * q.l_seg + q.l_edge)));
        if (s.phase != 1) continue;
        ++phase1_rows;
        nonzero += q.l_edge != 0.0;
      }
    report(true, seven == 7.0 && nonzero == 0 && phase1_rows > 0 && worst_sum < 1e-9, "combined loss arithmetic",
           fmt("total((1,1,1,1),(2,2,2,1))=%.17g; phase-1 rows with l_edge != 0: %zu of %zu; "
               "max |total - weighted sum| over logs %.1e",
               seven, nonzero, phase1_rows, worst_sum));
  }

  // End-to-end quality.
  {
    std::vector<double> dices;
    int hits = 0, n = 0;
    double worst_minutes = 0;
    std::string per_seed;
    for (const auto& r : full) {
      dices.push_back(r.metrics.mean_dice);
      for (const auto& s : r.metrics.samples) {
        hits += s.iou >= kIouThreshold;
        ++n;
      }
      worst_minutes = std::max(worst_minutes, r.total_minutes);
      per_seed += fmt("%sseed %llu: dice %.4f, iou>=0.5 on %.0f%%, %.1f min", per_seed.empty() ? "" : "; ",
                      (unsigned long long)r.seed, r.metrics.mean_dice, 100.0 * r.metrics.iou_hit_fraction,
                      r.total_minutes);
    }
    const double hit_frac = double(hits) / n;
    const double m = mean(dices), sd = stddev(dices);
    report(true, hit_frac >= kIouHitFraction, "desk detection (IoU >= 0.5 on >= 90% of held-out samples)",
           fmt("%d/%d held-out evaluations over %zu seeds (%.1f%%); %s", hits, n, full.size(), 100.0 * hit_frac,
               per_seed.c_str()));
    report(true, m + sd >= kDiceThreshold, "desk segmentation (mean Dice >= 0.80 within run-to-run sigma)",
           fmt("mean Dice %.4f, sigma %.4f across seeds (%.4f %.4f %.4f)", m, sd, dices[0], dices[1], dices[2]));
    report(true, worst_minutes < kRunBudgetMinutes, "desk wall clock (< 60 min per train+eval run)",
           fmt("slowest run %.1f min, mean train %.1f min for %d steps", worst_minutes,
               mean({full[0].train_minutes, full[1].train_minutes, full[2].train_minutes}), full[0].train.steps));
  }

  // Ablation direction.
  {
    bool all = true;
    std::string d;
    for (std::size_t i = 0; i < full.size(); ++i) {
      const bool better = full[i].metrics.mean_dice > plain[i].metrics.mean_dice;
      all = all && better && full[i].train.steps == plain[i].train.steps;
      d += fmt("%sseed %llu: full %.4f vs no_edge_no_refine %.4f", d.empty() ? "" : "; ",
               (unsigned long long)full[i].seed, full[i].metrics.mean_dice, plain[i].metrics.mean_dice);
    }
    report(true, all, "ablation direction (full > no_edge_no_refine in every seed)", d);
  }

  // Determinism: repeat the first full run.
  {
    log_line("desk run: full, seed 1 repeat");
    const RunOutcome again = run(base, Variant::Full, kRunSeeds[0], train_set, test_set, work, "full_s1_repeat");
    const std::string a = slurp(full[0].csv), b = slurp(again.csv);
    report(true, !a.empty() && a == b, "determinism (identical loss CSVs for identical seeds)",
           fmt("%zu bytes vs %zu bytes, %s", a.size(), b.size(), a == b ? "identical" : "different"));
  }

  // Measured unit-level properties on the trained full models.
  {
    std::vector<double> refine, merged, coarse, secs;
    std::string conv;
    bool conv_ok = true;
    for (const auto& r : full) {
      refine.push_back(r.metrics.refine_not_worse);
      merged.push_back(r.metrics.mean_dice);
      coarse.push_back(r.metrics.coarse_mean_dice);
      secs.push_back(r.metrics.mean_seconds);
      const auto& log = r.train.log;
      const double early = log.size() > 9 ? log[9].report.total : log.front().report.total;
      double tail = 0;
      const std::size_t k = std::min<std::size_t>(32, log.size());
      for (std::size_t i = log.size() - k; i < log.size(); ++i) tail += log[i].report.total;
      tail /= double(k);
      conv_ok = conv_ok && tail < 0.25 * early;
      conv += fmt("%s%.4f -> %.4f", conv.empty() ? "" : ", ", early, tail);
    }
    report(false, *std::min_element(refine.begin(), refine.end()) >= 0.7,
           "refined box IoU >= proposal IoU on >= 70% of held-out samples",
           fmt("per seed %.2f %.2f %.2f", refine[0], refine[1], refine[2]));
    bool merged_better = true;
    for (std::size_t i = 0; i < merged.size(); ++i) merged_better = merged_better && merged[i] > coarse[i];
    report(false, merged_better, "merged logits beat the coarsest stage",
           fmt("merged %.4f %.4f %.4f vs coarsest %.4f %.4f %.4f", merged[0], merged[1], merged[2], coarse[0],
               coarse[1], coarse[2]));
    report(false, conv_ok, "final mean training loss < 25% of step-10 loss",
           "step 10 -> mean of last 32 steps: " + conv);
    report(false, *std::max_element(secs.begin(), secs.end()) < 10.0, "dotted-box time < 10 s per volume",
           fmt("mean seconds per seed %.3f %.3f %.3f", secs[0], secs[1], secs[2]));
  }
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "cfun_acceptance";
  bool quick = false;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--quick") == 0) quick = true;
    else if (std::strcmp(argv[i], "--work") == 0 && i + 1 < argc) work = argv[++i];
    else {
      std::fprintf(stderr, "usage: %s [--work DIR] [--quick]\n", argv[0]);
      return 2;
    }
  }
  fs::create_directories(work);
  try {
    oracle_and_gradient_checks();
    edge_loss_invariants();
    shape_contracts();
    trained_model_criteria(work, quick);
  } catch (const std::exception& e) {
    std::printf("[FAIL] acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%d primary criteria failed\n", primary_failures);
  return primary_failures == 0 ? 0 : 1;
}
