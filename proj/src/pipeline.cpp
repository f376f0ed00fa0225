#include "cfun/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cfun/checkpoint.hpp"
#include "cfun/error.hpp"
#include "cfun/optim.hpp"
#include "json.hpp"

namespace cfun {

namespace {

// Smallest crop side in input voxels; two cells of a stride-4 feature map.
constexpr double kMinCropSide = 8.0;

UnetConfig unet_config_for(const TrainConfig& cfg) {
  UnetConfig u = cfg.unet;
  u.in_channels = cfg.seg_input_channels();
  return u;
}

// Parameter init and data sampling draw from separate streams so that changing
// one never perturbs the other.
constexpr std::uint64_t kInitStream = 0x1f2e3d4c5b6a7988ULL;
constexpr std::uint64_t kTrainStream = 0x8899aabbccddeeffULL;

BBox3D scale_box(const BBox3D& b, double s) { return {b.z1 * s, b.y1 * s, b.x1 * s, b.z2 * s, b.y2 * s, b.x2 * s}; }

BBox3D rescale_box(const BBox3D& b, Shape3 from, Shape3 to) {
  const double fz = static_cast<double>(to.d) / from.d;
  const double fy = static_cast<double>(to.h) / from.h;
  const double fx = static_cast<double>(to.w) / from.w;
  return {b.z1 * fz, b.y1 * fy, b.x1 * fx, b.z2 * fz, b.y2 * fy, b.x2 * fx};
}

bool usable(const BBox3D& b) { return b.size(0) >= 1.0 && b.size(1) >= 1.0 && b.size(2) >= 1.0; }

BoxDelta to_delta(const Tensor& t) {
  BoxDelta d;
  for (int k = 0; k < 6; ++k) d[k] = t[static_cast<std::size_t>(k)];
  return d;
}

// The tensor the segmentation branch aligns, and the scale from input voxels
// to its grid.
std::pair<ag::Var, double> seg_source(const TrainConfig& cfg, const ag::Var& image, const FeaturePyramid& pyr) {
  switch (cfg.seg_input) {
    case SegInput::Image: return {image, 1.0};
    case SegInput::Conv: return {pyr.stages.front(), 1.0 / DetectorConfig::level_stride(0)};
    case SegInput::Pyramid: return {pyr.levels.front(), 1.0 / DetectorConfig::level_stride(0)};
  }
  return {image, 1.0};
}

Shape3 doubled(Shape3 s) { return {2 * s.d, 2 * s.h, 2 * s.w}; }

// Writes crop-grid labels back into a full-size background volume. A voxel
// receives a label iff its center lies inside `box`.
void paste(const LabelVolume& crop, const BBox3D& box, LabelVolume& full) {
  const Shape3 s = full.shape;
  const Shape3 c = crop.shape;
  auto range = [](double lo, double hi, int n) {
    const int a = std::max(0, static_cast<int>(std::ceil(lo - 0.5)));
    const int b = std::min(n, static_cast<int>(std::ceil(hi - 0.5)));
    return std::pair{a, b};
  };
  auto index = [](double center, double lo, double size, int n) {
    return std::clamp(static_cast<int>(std::floor((center - lo) / size * n)), 0, n - 1);
  };
  const auto [z0, z1] = range(box.z1, box.z2, s.d);
  const auto [y0, y1] = range(box.y1, box.y2, s.h);
  const auto [x0, x1] = range(box.x1, box.x2, s.w);
  for (int z = z0; z < z1; ++z) {
    const int cz = index(z + 0.5, box.z1, box.size(0), c.d);
    for (int y = y0; y < y1; ++y) {
      const int cy = index(y + 0.5, box.y1, box.size(1), c.h);
      for (int x = x0; x < x1; ++x) {
        const int cx = index(x + 0.5, box.x1, box.size(2), c.w);
        full.data[(static_cast<std::size_t>(z) * s.h + y) * s.w + x] =
            crop.data[(static_cast<std::size_t>(cz) * c.h + cy) * c.w + cx];
      }
    }
  }
}

LabelVolume background_like(Shape3 shape, int num_classes) {
  LabelVolume l;
  l.shape = shape;
  l.num_classes = num_classes;
  l.data.assign(shape.voxels(), 0);
  return l;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

Model::Model(const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.unet = unet_config_for(cfg);
  cfg_.validate();
  SplitMix64 rng(cfg_.seed ^ kInitStream);
  detector_ = Detector(params_, cfg_.detector, rng);
  unet_ = Unet(params_, cfg_.unet, rng);
}

void Model::save(const std::filesystem::path& dir) const {
  nn::save_checkpoint(params_, dir);
  cfg_.save(dir / "config.json");
}

std::unique_ptr<Model> Model::load(const std::filesystem::path& dir) {
  auto m = std::make_unique<Model>(TrainConfig::load(dir / "config.json"));
  nn::load_checkpoint(m->params_, dir);
  return m;
}

std::vector<TrainingSample> load_samples(const Manifest& manifest, Shape3 input_shape) {
  std::vector<TrainingSample> out;
  for (const auto& e : manifest.samples) {
    TrainingSample s;
    s.image = load_volume(e.image);
    s.labels = load_labels(e.labels);
    if (!(s.image.shape == s.labels.shape)) throw FormatError("image/label shape mismatch for " + e.image.string());
    if (!(s.image.shape == input_shape)) {
      s.image = resample_trilinear(s.image, input_shape);
      s.labels = resample_nearest(s.labels, input_shape);
    }
    s.box = ground_truth_box(s.labels);
    out.push_back(std::move(s));
  }
  return out;
}

LabelVolume crop_labels(const LabelVolume& labels, const BBox3D& box, Shape3 out) {
  LabelVolume c = background_like(out, labels.num_classes);
  const Shape3 s = labels.shape;
  auto source = [](int i, double lo, double size, int n_out, int n_src) {
    return std::clamp(static_cast<int>(std::floor(lo + (i + 0.5) * size / n_out)), 0, n_src - 1);
  };
  for (int z = 0; z < out.d; ++z) {
    const int sz = source(z, box.z1, box.size(0), out.d, s.d);
    for (int y = 0; y < out.h; ++y) {
      const int sy = source(y, box.y1, box.size(1), out.h, s.h);
      for (int x = 0; x < out.w; ++x) {
        const int sx = source(x, box.x1, box.size(2), out.w, s.w);
        c.data[(static_cast<std::size_t>(z) * out.h + y) * out.w + x] =
            labels.data[(static_cast<std::size_t>(sz) * s.h + sy) * s.w + sx];
      }
    }
  }
  return c;
}

BBox3D jitter_box(const BBox3D& box, double fraction, Shape3 extent, SplitMix64& rng) {
  auto a = box.as_array();
  for (int k = 0; k < 6; ++k) a[static_cast<std::size_t>(k)] += rng.uniform(-fraction, fraction) * box.size(k % 3);
  BBox3D j = clip_box(BBox3D::from_array(a), extent);
  return usable(j) ? j : clip_box(box, extent);
}

TrainResult train(Model& model, const std::vector<TrainingSample>& samples, const TrainOptions& opts) {
  const TrainConfig& cfg = model.config();
  if (samples.size() < 2) throw ShapeError("training needs at least 2 samples");
  for (const auto& s : samples)
    if (!(s.image.shape == cfg.input_shape)) throw ShapeError("training sample is not on the model input grid");

  const Detector& det = model.detector();
  const Unet& unet = model.unet();
  nn::Adam adam(model.params(), {cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.clip_norm});
  SplitMix64 rng(cfg.seed ^ kTrainStream);
  const auto bank = loss::sobel_bank();
  const Shape3 extent = cfg.input_shape;
  const Shape3 out_grid = doubled(cfg.roi_out_size);
  const int total = cfg.total_steps();
  const int teacher_steps = static_cast<int>(std::floor(cfg.teacher_forcing * cfg.phase1_steps()));

  std::vector<ag::Var> images;
  for (const auto& s : samples) images.push_back(ag::constant(s.image.to_tensor()));

  std::ofstream csv;
  if (!opts.loss_csv.empty()) {
    csv.open(opts.loss_csv, std::ios::trunc);
    if (!csv) throw IoError("cannot write loss log " + opts.loss_csv.string());
    csv << "step,phase,l_box,l_cls,l_seg,l_edge,total\n";
  }

  TrainResult result;
  std::optional<AnchorSet> anchors;
  for (int step = 0; step < total; ++step) {
    const int phase = step < cfg.phase1_steps() ? 1 : 2;
    const bool edge_on = phase == 2 && cfg.edge_enabled;
    const std::size_t pick = static_cast<std::size_t>(rng.below(samples.size()));
    const TrainingSample& sample = samples[pick];
    const BBox3D& gt = sample.box;

    FeaturePyramid pyr = det.backbone_fpn_forward(images[pick]);
    RpnOutput rpn = det.rpn_forward(pyr);
    if (!anchors) anchors = det.anchors_for(pyr);
    const std::vector<float> current = rpn.flat_scores();
    const AnchorTargets targets = assign_anchor_targets(*anchors, gt, cfg.detector, rng, current);

    std::vector<std::pair<int, std::size_t>> cls_refs;
    std::vector<std::int8_t> cls_labels;
    for (std::size_t i : targets.positives) {
      cls_refs.push_back(rpn.score_ref(i));
      cls_labels.push_back(loss::kPositive);
    }
    for (std::size_t i : targets.negatives) {
      cls_refs.push_back(rpn.score_ref(i));
      cls_labels.push_back(loss::kNegative);
    }
    ag::Var l_cls = loss::bce_loss(nn::gather(rpn.scores, cls_refs), cls_labels);

    std::vector<std::pair<int, std::size_t>> box_refs;
    std::vector<float> box_targets;
    for (std::size_t i : targets.positives)
      for (int k = 0; k < 6; ++k) {
        box_refs.push_back(rpn.delta_ref(i, k));
        box_targets.push_back(static_cast<float>(targets.deltas[i][k]));
      }
    ag::Var l_box = loss::box_loss(nn::gather(rpn.deltas, box_refs), box_targets);

    // Current best guess of the heart box, from values only.
    const auto props = det.proposals(rpn, *anchors, extent);
    std::optional<BBox3D> predicted;
    if (!props.empty()) predicted = select_heart_box(props, cfg.detector.score_threshold, cfg.detector.nms_iou).proposal.box;

    if (cfg.refine_enabled) {
      std::vector<BBox3D> rois{jitter_box(gt, 0.15, extent, rng)};
      if (predicted) rois.push_back(*predicted);
      std::vector<ag::Var> logits, deltas;
      std::vector<std::int8_t> labels;
      std::vector<float> delta_targets;
      for (std::size_t i = 0; i < rois.size(); ++i) {
        const BBox3D& roi = rois[i];
        RefineOutput r = det.refine(pyr, roi);
        logits.push_back(r.logit);
        const bool pos = iou_3d(roi, gt) >= cfg.detector.positive_iou;
        labels.push_back(pos ? loss::kPositive : loss::kNegative);
        if (pos) {
          deltas.push_back(r.delta);
          const BoxDelta t = encode_box(roi, gt);
          for (int k = 0; k < 6; ++k) delta_targets.push_back(static_cast<float>(t[k]));
        }
        if (i == 1 && step >= teacher_steps) {
          const BBox3D refined = clip_box(decode_box(roi, to_delta(r.delta->value)), extent);
          if (usable(refined)) predicted = refined;
        }
      }
      std::vector<std::pair<int, std::size_t>> lrefs;
      for (std::size_t i = 0; i < logits.size(); ++i) lrefs.emplace_back(static_cast<int>(i), 0);
      l_cls = nn::add(l_cls, loss::bce_loss(nn::gather(logits, lrefs), labels));
      if (!deltas.empty()) {
        std::vector<std::pair<int, std::size_t>> drefs;
        for (std::size_t i = 0; i < deltas.size(); ++i)
          for (std::size_t k = 0; k < 6; ++k) drefs.emplace_back(static_cast<int>(i), k);
        l_box = nn::add(l_box, loss::box_loss(nn::gather(deltas, drefs), delta_targets));
      }
    }

    const bool teacher = step < teacher_steps || !predicted;
    const BBox3D seg_box = teacher ? jitter_box(gt, cfg.teacher_jitter, extent, rng) : *predicted;
    const BBox3D crop_box = fit_box(expand_box(seg_box, cfg.crop_margin), kMinCropSide, extent);
    const auto [src, scale] = seg_source(cfg, images[pick], pyr);
    ag::Var crop = roi_align(src, scale_box(crop_box, scale), cfg.roi_spec());
    UnetOutput seg = unet.forward(crop);
    const LabelVolume crop_truth = crop_labels(sample.labels, crop_box, out_grid);
    ag::Var l_seg = loss::seg_loss(seg.logits, crop_truth);

    std::vector<ag::Var> terms{l_box, l_cls, l_seg};
    std::vector<float> weights{cfg.weights.box, cfg.weights.cls, cfg.weights.seg};
    double edge_value = 0.0;
    if (edge_on) {
      ag::Var l_edge = loss::edge_loss(nn::softmax_channels(seg.logits), one_hot(crop_truth).data, bank, cfg.edge_norm);
      edge_value = l_edge->value[0];
      terms.push_back(l_edge);
      weights.push_back(cfg.weights.edge);
    }
    ag::Var objective = nn::weighted_sum(terms, weights);

    StepLog row;
    row.step = step;
    row.phase = phase;
    try {
      row.report = loss::total_loss(l_box->value[0], l_cls->value[0], l_seg->value[0], edge_value, cfg.weights, edge_on);
    } catch (const ShapeError&) {
      throw DivergenceError(step, "non-finite loss");
    }
    ag::backward(objective);
    const double gnorm = adam.step(model.params());
    model.params().zero_grad();
    if (!std::isfinite(gnorm)) throw DivergenceError(step, "non-finite gradient");

    if (csv) {
      const auto& r = row.report;
      csv << step << ',' << phase << ',' << fmt(r.l_box) << ',' << fmt(r.l_cls) << ',' << fmt(r.l_seg) << ','
          << fmt(r.l_edge) << ',' << fmt(r.total) << '\n';
    }
    if (opts.on_step) opts.on_step(row);
    result.log.push_back(row);
  }
  result.steps = total;
  return result;
}

void write_loss_csv(const std::vector<StepLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write loss log " + path.string());
  out << "step,phase,l_box,l_cls,l_seg,l_edge,total\n";
  for (const auto& row : log) {
    const auto& r = row.report;
    out << row.step << ',' << row.phase << ',' << fmt(r.l_box) << ',' << fmt(r.l_cls) << ',' << fmt(r.l_seg) << ','
        << fmt(r.l_edge) << ',' << fmt(r.total) << '\n';
  }
}

InferResult infer(const Model& model, const Volume& vol, bool with_coarse_stage) {
  vol.validate();
  const TrainConfig& cfg = model.config();
  const Shape3 grid = cfg.input_shape;
  const Volume input = vol.shape == grid ? vol : resample_trilinear(vol, grid);
  ag::NoGradGuard no_grad;

  const auto t0 = std::chrono::steady_clock::now();
  const Detector& det = model.detector();
  const ag::Var image = ag::constant(input.to_tensor());
  const FeaturePyramid pyr = det.backbone_fpn_forward(image);
  const RpnOutput rpn = det.rpn_forward(pyr);
  const auto props = det.proposals(rpn, det.anchors_for(pyr), grid);
  if (props.empty()) throw ShapeError("infer: every proposal is degenerate after clipping");
  const Selection sel = select_heart_box(props, cfg.detector.score_threshold, cfg.detector.nms_iou);

  InferResult r;
  r.raw_proposal = sel.proposal;
  r.proposal = sel.proposal;
  r.low_confidence = sel.low_confidence;
  if (cfg.refine_enabled) {
    const RefineOutput ref = det.refine(pyr, sel.proposal.box);
    const BBox3D refined = clip_box(decode_box(sel.proposal.box, to_delta(ref.delta->value)), grid);
    if (usable(refined)) r.proposal.box = refined;
  }
  const BBox3D crop_box = fit_box(expand_box(r.proposal.box, cfg.crop_margin), kMinCropSide, grid);
  if (!usable(crop_box)) throw ShapeError("infer: degenerate selected box " + crop_box.str());

  const auto [src, scale] = seg_source(cfg, image, pyr);
  const UnetOutput seg = model.unet().forward(roi_align(src, scale_box(crop_box, scale), cfg.roi_spec()));
  const LabelVolume crop = argmax(predict_probs({seg.logits->value, SegKind::Logits}));
  LabelVolume full = background_like(grid, kNumClasses);
  paste(crop, crop_box, full);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (with_coarse_stage) {
    const Tensor coarse = nn::resize_trilinear(seg.stage_logits.front()->value, crop.shape);
    LabelVolume c = background_like(grid, kNumClasses);
    paste(argmax({coarse, SegKind::Logits}), crop_box, c);
    r.coarse_labels = vol.shape == grid ? std::move(c) : resample_nearest(c, vol.shape);
  }
  r.crop_box = crop_box;
  if (!(vol.shape == grid)) {
    full = resample_nearest(full, vol.shape);
    r.proposal.box = rescale_box(r.proposal.box, grid, vol.shape);
    r.raw_proposal.box = rescale_box(r.raw_proposal.box, grid, vol.shape);
    r.crop_box = rescale_box(crop_box, grid, vol.shape);
  }
  full.spacing = vol.spacing;
  r.labels = std::move(full);
  return r;
}

double dice(const LabelVolume& pred, const LabelVolume& gt, int cls) {
  if (!(pred.shape == gt.shape)) throw ShapeError("dice: shape mismatch " + pred.shape.str() + " vs " + gt.shape.str());
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] == cls;
    const bool g = gt.data[i] == cls;
    a += p;
    b += g;
    both += p && g;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

std::string MetricsReport::csv() const {
  std::ostringstream os;
  os << "LV,Myo,RV,LA,RA,AA,PA,Average,detection_iou,iou_hit_fraction,seconds\n";
  for (double d : dice) os << fmt(d) << ',';
  os << fmt(mean_dice) << ',' << fmt(mean_iou) << ',' << fmt(iou_hit_fraction) << ',' << fmt(mean_seconds) << '\n';
  return os.str();
}

std::string MetricsReport::json() const {
  nlohmann::ordered_json j;
  nlohmann::ordered_json d;
  for (int c = 0; c < 7; ++c) d[kStructureNames[c + 1]] = dice[static_cast<std::size_t>(c)];
  d["Average"] = mean_dice;
  j["dice"] = d;
  j["detection_iou"] = mean_iou;
  j["iou_hit_fraction"] = iou_hit_fraction;
  j["refine_not_worse_fraction"] = refine_not_worse;
  j["coarse_stage_mean_dice"] = coarse_mean_dice;
  j["inference_seconds"] = mean_seconds;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& s : samples) {
    nlohmann::ordered_json r;
    r["dice"] = s.dice;
    r["iou"] = s.iou;
    r["proposal_iou"] = s.proposal_iou;
    r["seconds"] = s.seconds;
    rows.push_back(r);
  }
  j["samples"] = rows;
  return j.dump(2);
}

std::string MetricsReport::table() const {
  std::ostringstream os;
  char buf[64];
  os << "    LV   Myo    RV    LA    RA    AA    PA Average\n";
  for (double d : dice) {
    std::snprintf(buf, sizeof buf, "%6.3f", d);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%8.3f", mean_dice);
  os << buf << '\n';
  return os.str();
}

MetricsReport evaluate(const Manifest& manifest, const Predictor& predict) {
  if (manifest.samples.empty()) throw ShapeError("evaluate: empty manifest");
  MetricsReport rep;
  std::size_t hits = 0, not_worse = 0;
  for (const auto& e : manifest.samples) {
    const Volume image = load_volume(e.image);
    const LabelVolume truth = load_labels(e.labels);
    const BBox3D truth_box = ground_truth_box(truth);
    const Prediction p = predict(image, truth, truth_box);
    SampleMetrics m;
    for (int c = 0; c < 7; ++c) m.dice[static_cast<std::size_t>(c)] = dice(p.labels, truth, c + 1);
    m.iou = iou_3d(p.box, truth_box);
    m.proposal_iou = iou_3d(p.proposal_box, truth_box);
    m.seconds = p.seconds;
    if (p.coarse_labels) {
      double cs = 0.0;
      for (int c = 1; c <= 7; ++c) cs += dice(*p.coarse_labels, truth, c);
      m.coarse_mean_dice = cs / 7.0;
    }
    hits += m.iou >= 0.5;
    not_worse += m.iou >= m.proposal_iou;
    for (std::size_t c = 0; c < 7; ++c) rep.dice[c] += m.dice[c];
    rep.mean_iou += m.iou;
    rep.mean_seconds += m.seconds;
    rep.coarse_mean_dice += m.coarse_mean_dice;
    rep.samples.push_back(m);
  }
  const auto n = static_cast<double>(manifest.samples.size());
  double mean = 0.0;
  for (double& d : rep.dice) {
    d /= n;
    mean += d;
  }
  rep.mean_dice = mean / 7.0;
  rep.mean_iou /= n;
  rep.mean_seconds /= n;
  rep.coarse_mean_dice /= n;
  rep.iou_hit_fraction = static_cast<double>(hits) / n;
  rep.refine_not_worse = static_cast<double>(not_worse) / n;
  return rep;
}

MetricsReport evaluate(const Model& model, const Manifest& manifest) {
  return evaluate(manifest, [&](const Volume& image, const LabelVolume&, const BBox3D&) {
    InferResult r = infer(model, image, true);
    return Prediction{std::move(r.labels), r.proposal.box, r.raw_proposal.box, r.seconds, std::move(r.coarse_labels)};
  });
}

MetricsReport evaluate_ground_truth(const Manifest& manifest) {
  return evaluate(manifest, [](const Volume&, const LabelVolume& truth, const BBox3D& box) {
    return Prediction{truth, box, box, 0.0, truth};
  });
}

AblationResult ablate(Variant variant, const TrainConfig& base, const Manifest& train_set, const Manifest& test_set,
                      const TrainOptions& opts) {
  const TrainConfig cfg = base.with_variant(variant);
  Model model(cfg);
  const auto samples = load_samples(train_set, cfg.input_shape);
  const TrainResult tr = train(model, samples, opts);
  return {variant, tr.steps, evaluate(model, test_set)};
}

}  // namespace cfun
