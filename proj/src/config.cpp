#include "cfun/config.hpp"

#include <fstream>
#include <sstream>

#include "cfun/error.hpp"
#include "json.hpp"

namespace cfun {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<Variant, const char*>, 7> kVariantNames{{
    {Variant::Full, "full"},
    {Variant::NoEdge, "no_edge"},
    {Variant::NoRefine, "no_refine"},
    {Variant::NoEdgeNoRefine, "no_edge_no_refine"},
    {Variant::InputIO, "input_IO"},
    {Variant::InputIC, "input_IC"},
    {Variant::InputIP, "input_IP"},
}};

json shape_json(Shape3 s) { return json::array({s.d, s.h, s.w}); }

Shape3 shape_from(const json& j, const char* key) {
  if (!j.is_array() || j.size() != 3) throw FormatError(std::string(key) + " must be [D, H, W]");
  return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

}  // namespace

std::string to_string(Preset p) { return p == Preset::Desk ? "desk" : "paper"; }

std::string to_string(SegInput s) {
  switch (s) {
    case SegInput::Image: return "image";
    case SegInput::Conv: return "conv";
    case SegInput::Pyramid: return "pyramid";
  }
  return "image";
}

std::string to_string(Variant v) {
  for (const auto& [k, n] : kVariantNames)
    if (k == v) return n;
  return "full";
}

std::optional<Preset> parse_preset(const std::string& s) {
  if (s == "desk") return Preset::Desk;
  if (s == "paper") return Preset::Paper;
  return std::nullopt;
}

std::optional<SegInput> parse_seg_input(const std::string& s) {
  if (s == "image") return SegInput::Image;
  if (s == "conv") return SegInput::Conv;
  if (s == "pyramid") return SegInput::Pyramid;
  return std::nullopt;
}

std::optional<Variant> parse_variant(const std::string& s) {
  for (const auto& [k, n] : kVariantNames)
    if (s == n) return k;
  return std::nullopt;
}

std::string variant_names() {
  std::string out;
  for (const auto& [k, n] : kVariantNames) out += (out.empty() ? "" : ", ") + std::string(n);
  return out;
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.preset = Preset::Desk;
  c.input_shape = {96, 128, 128};
  c.roi_out_size = {32, 32, 32};
  c.unet.base_channels = 8;
  c.unet.depth = 3;
  c.unet.final_channels = 4;
  c.detector.stem_channels = 8;
  c.detector.stage_channels = {16, 32, 64};
  c.detector.fpn_channels = 8;
  c.detector.anchor_scales = {24.0, 40.0};
  c.steps_per_epoch = 32;
  c.base_epochs = 72;
  c.edge_epochs = 24;
  return c;
}

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.preset = Preset::Paper;
  c.input_shape = {192, 320, 320};
  c.roi_out_size = {64, 64, 64};
  c.unet.base_channels = 16;
  c.unet.depth = 4;
  c.unet.final_channels = 16;
  c.detector.stem_channels = 16;
  c.detector.stage_channels = {32, 64, 128};
  c.detector.fpn_channels = 32;
  c.detector.anchor_scales = {64.0, 128.0};
  c.lr = 1e-3f;
  c.batch_size = 1;
  c.steps_per_epoch = 32;
  c.base_epochs = 300;
  c.edge_epochs = 100;
  return c;
}

TrainConfig TrainConfig::for_preset(Preset p) { return p == Preset::Desk ? desk() : paper(); }

int TrainConfig::seg_input_channels() const {
  switch (seg_input) {
    case SegInput::Image: return 1;
    case SegInput::Conv: return detector.stage_channels.front();
    case SegInput::Pyramid: return detector.fpn_channels;
  }
  return 1;
}

void TrainConfig::validate() const {
  if (input_shape.d < 16 || input_shape.h < 16 || input_shape.w < 16)
    throw ShapeError("input_shape dims must be >= 16");
  detector.validate();
  detector.check_input(input_shape);
  roi_spec().validate();
  unet.validate();
  unet.check_input(roi_out_size);
  if (unet.in_channels != seg_input_channels())
    throw ShapeError("unet in_channels must match the segmentation input path");
  if (!(lr > 0.0f)) throw ShapeError("lr must be positive");
  if (batch_size != 1) throw ShapeError("only batch_size = 1 is supported");
  if (steps_per_epoch < 1 || base_epochs < 0 || edge_epochs < 0 || base_epochs + edge_epochs < 1)
    throw ShapeError("training schedule must contain at least one step");
  weights.validate();
  if (!(adam_beta1 >= 0.0f && adam_beta1 < 1.0f && adam_beta2 >= 0.0f && adam_beta2 < 1.0f && adam_eps > 0.0f))
    throw ShapeError("invalid Adam coefficients");
  if (!(teacher_forcing >= 0.0 && teacher_forcing <= 1.0)) throw ShapeError("teacher_forcing must be in [0, 1]");
  if (!(teacher_jitter >= 0.0 && teacher_jitter < 0.5)) throw ShapeError("teacher_jitter must be in [0, 0.5)");
  if (!(crop_margin >= 0.0 && crop_margin <= 1.0)) throw ShapeError("crop_margin must be in [0, 1]");
}

TrainConfig TrainConfig::with_variant(Variant v) const {
  TrainConfig c = *this;
  c.edge_enabled = v != Variant::NoEdge && v != Variant::NoEdgeNoRefine;
  c.refine_enabled = v != Variant::NoRefine && v != Variant::NoEdgeNoRefine;
  c.seg_input = v == Variant::InputIC ? SegInput::Conv : (v == Variant::InputIP ? SegInput::Pyramid : SegInput::Image);
  c.unet.in_channels = c.seg_input_channels();
  return c;
}

std::string TrainConfig::to_json() const {
  json j;
  j["preset"] = to_string(preset);
  j["input_shape"] = shape_json(input_shape);
  j["roi_out_size"] = shape_json(roi_out_size);
  j["roi_samples_per_bin"] = roi_samples_per_bin;
  j["unet_base_channels"] = unet.base_channels;
  j["unet_depth"] = unet.depth;
  j["unet_final_channels"] = unet.final_channels;
  j["det_stem_channels"] = detector.stem_channels;
  j["det_stage_channels"] = detector.stage_channels;
  j["det_fpn_channels"] = detector.fpn_channels;
  j["anchor_scales"] = detector.anchor_scales;
  j["positive_iou"] = detector.positive_iou;
  j["negative_iou"] = detector.negative_iou;
  j["neg_per_pos"] = detector.neg_per_pos;
  j["hard_negative_fraction"] = detector.hard_negative_fraction;
  j["objectness_prior"] = detector.objectness_prior;
  j["pre_nms_top_k"] = detector.pre_nms_top_k;
  j["nms_iou"] = detector.nms_iou;
  j["score_threshold"] = detector.score_threshold;
  j["refine_grid"] = detector.refine_grid;
  j["lr"] = lr;
  j["batch_size"] = batch_size;
  j["steps_per_epoch"] = steps_per_epoch;
  j["base_epochs"] = base_epochs;
  j["edge_epochs"] = edge_epochs;
  j["w_box"] = weights.box;
  j["w_cls"] = weights.cls;
  j["w_seg"] = weights.seg;
  j["w_edge"] = weights.edge;
  j["seed"] = seed;
  j["adam_beta1"] = adam_beta1;
  j["adam_beta2"] = adam_beta2;
  j["adam_eps"] = adam_eps;
  j["clip_norm"] = clip_norm;
  j["teacher_forcing"] = teacher_forcing;
  j["teacher_jitter"] = teacher_jitter;
  j["crop_margin"] = crop_margin;
  j["edge_norm"] = edge_norm == loss::EdgeNorm::Absolute ? "absolute" : "squared";
  j["edge_enabled"] = edge_enabled;
  j["refine_enabled"] = refine_enabled;
  j["seg_input"] = to_string(seg_input);
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("config must be a JSON object");
  Preset p = Preset::Desk;
  if (j.contains("preset")) {
    const auto parsed = parse_preset(j["preset"].get<std::string>());
    if (!parsed) throw FormatError("unknown preset " + j["preset"].dump());
    p = *parsed;
  }
  TrainConfig c = for_preset(p);
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "preset") continue;
      else if (key == "input_shape") c.input_shape = shape_from(v, "input_shape");
      else if (key == "roi_out_size") c.roi_out_size = shape_from(v, "roi_out_size");
      else if (key == "roi_samples_per_bin") c.roi_samples_per_bin = v.get<int>();
      else if (key == "unet_base_channels") c.unet.base_channels = v.get<int>();
      else if (key == "unet_depth") c.unet.depth = v.get<int>();
      else if (key == "unet_final_channels") c.unet.final_channels = v.get<int>();
      else if (key == "det_stem_channels") c.detector.stem_channels = v.get<int>();
      else if (key == "det_stage_channels") c.detector.stage_channels = v.get<std::vector<int>>();
      else if (key == "det_fpn_channels") c.detector.fpn_channels = v.get<int>();
      else if (key == "anchor_scales") c.detector.anchor_scales = v.get<std::vector<double>>();
      else if (key == "positive_iou") c.detector.positive_iou = v.get<double>();
      else if (key == "negative_iou") c.detector.negative_iou = v.get<double>();
      else if (key == "neg_per_pos") c.detector.neg_per_pos = v.get<double>();
      else if (key == "hard_negative_fraction") c.detector.hard_negative_fraction = v.get<double>();
      else if (key == "objectness_prior") c.detector.objectness_prior = v.get<double>();
      else if (key == "pre_nms_top_k") c.detector.pre_nms_top_k = v.get<int>();
      else if (key == "nms_iou") c.detector.nms_iou = v.get<double>();
      else if (key == "score_threshold") c.detector.score_threshold = v.get<double>();
      else if (key == "refine_grid") c.detector.refine_grid = v.get<int>();
      else if (key == "lr") c.lr = v.get<float>();
      else if (key == "batch_size") c.batch_size = v.get<int>();
      else if (key == "steps_per_epoch") c.steps_per_epoch = v.get<int>();
      else if (key == "base_epochs") c.base_epochs = v.get<int>();
      else if (key == "edge_epochs") c.edge_epochs = v.get<int>();
      else if (key == "w_box") c.weights.box = v.get<float>();
      else if (key == "w_cls") c.weights.cls = v.get<float>();
      else if (key == "w_seg") c.weights.seg = v.get<float>();
      else if (key == "w_edge") c.weights.edge = v.get<float>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "adam_beta1") c.adam_beta1 = v.get<float>();
      else if (key == "adam_beta2") c.adam_beta2 = v.get<float>();
      else if (key == "adam_eps") c.adam_eps = v.get<float>();
      else if (key == "clip_norm") c.clip_norm = v.get<float>();
      else if (key == "teacher_forcing") c.teacher_forcing = v.get<double>();
      else if (key == "teacher_jitter") c.teacher_jitter = v.get<double>();
      else if (key == "crop_margin") c.crop_margin = v.get<double>();
      else if (key == "edge_norm") {
        const auto s = v.get<std::string>();
        if (s != "absolute" && s != "squared") throw FormatError("edge_norm must be absolute or squared");
        c.edge_norm = s == "absolute" ? loss::EdgeNorm::Absolute : loss::EdgeNorm::Squared;
      } else if (key == "edge_enabled") c.edge_enabled = v.get<bool>();
      else if (key == "refine_enabled") c.refine_enabled = v.get<bool>();
      else if (key == "seg_input") {
        const auto s = parse_seg_input(v.get<std::string>());
        if (!s) throw FormatError("seg_input must be image, conv or pyramid");
        c.seg_input = *s;
      } else {
        throw FormatError("unknown config key " + key);
      }
    }
  } catch (const json::type_error& e) {
    throw FormatError(std::string("config value has the wrong type: ") + e.what());
  }
  c.unet.in_channels = c.seg_input_channels();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void TrainConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write config " + path.string());
  out << to_json() << "\n";
  if (!out) throw IoError("failed writing config " + path.string());
}

}  // namespace cfun
