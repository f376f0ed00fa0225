#include "cfun/unet.hpp"

#include "cfun/error.hpp"

namespace cfun {

using nn::ConvGeometry;

void UnetConfig::validate() const {
  if (in_channels < 1 || base_channels < 1 || final_channels < 1) throw ShapeError("unet channels must be >= 1");
  if (depth < 1 || depth > 6) throw ShapeError("unet depth must be in [1, 6]");
  if (num_classes != 8) throw ShapeError("unet num_classes must be 8");
}

void UnetConfig::check_input(Shape3 s) const {
  const int f = 1 << depth;
  if (s.d % f || s.h % f || s.w % f)
    throw ShapeError("unet input " + s.str() + " is not divisible by 2^depth = " + std::to_string(f));
}

ag::Var deep_supervision_merge(const std::vector<ag::Var>& stage_logits, Shape3 out, int num_classes) {
  if (stage_logits.empty()) throw ShapeError("deep_supervision_merge: no stages");
  ag::Var total;
  for (const auto& s : stage_logits) {
    if (s->value.channels() != num_classes)
      throw ShapeError("deep_supervision_merge: stage has " + std::to_string(s->value.channels()) + " channels");
    ag::Var up = s->value.spatial() == out ? s : nn::resize_trilinear(s, out);
    total = total ? nn::add(total, up) : up;
  }
  return total;
}

SegMap predict_probs(const SegMap& logits) {
  if (logits.kind != SegKind::Logits) throw ShapeError("predict_probs expects logits");
  if (!logits.data.all_finite()) throw ShapeError("predict_probs: non-finite logits");
  return {nn::softmax_channels(logits.data), SegKind::Probabilities};
}

Unet::Unet(nn::ParamStore& ps, const UnetConfig& cfg, SplitMix64& rng) : cfg_(cfg) {
  cfg.validate();
  const auto k3 = ConvGeometry::cube(3, 1, 1);
  const auto down = ConvGeometry::cube(3, 2, 1);
  int prev = cfg.in_channels;
  for (int i = 0; i <= cfg.depth; ++i) {
    const int ch = cfg.base_channels << i;
    const std::string n = "unet.enc" + std::to_string(i);
    ResStage s;
    s.entry = nn::ConvNormRelu(ps, n + ".entry", prev, ch, i == 0 ? k3 : down, rng);
    s.inner = nn::ConvNormRelu(ps, n + ".inner", ch, ch, k3, rng);
    s.out_conv = nn::Conv(ps, n + ".out", ch, ch, k3, rng, false);
    s.out_norm = nn::Norm(ps, n + ".out_norm", ch);
    encoder_.push_back(std::move(s));
    prev = ch;
  }
  for (int i = cfg.depth - 1; i >= 0; --i) {
    const int ch = cfg.base_channels << i;
    const std::string n = "unet.dec" + std::to_string(i);
    UpStage u;
    u.up = nn::Deconv(ps, n + ".up", prev, ch, ConvGeometry::cube(2, 2, 0), rng);
    u.fuse = nn::ConvNormRelu(ps, n + ".fuse", 2 * ch, ch, k3, rng);
    u.head = nn::Conv(ps, n + ".head", ch, cfg.num_classes, ConvGeometry::cube(1, 1, 0), rng);
    decoder_.push_back(std::move(u));
    prev = ch;
  }
  final_up_ = nn::Deconv(ps, "unet.final.up", prev, cfg.final_channels, ConvGeometry::cube(2, 2, 0), rng);
  final_conv_ = nn::ConvNormRelu(ps, "unet.final.conv", cfg.final_channels, cfg.final_channels, k3, rng);
  final_head_ = nn::Conv(ps, "unet.final.head", cfg.final_channels, cfg.num_classes, ConvGeometry::cube(1, 1, 0), rng);
}

UnetOutput Unet::forward(const ag::Var& crop) const {
  if (crop->value.channels() != cfg_.in_channels)
    throw ShapeError("unet expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                     std::to_string(crop->value.channels()));
  const Shape3 in = crop->value.spatial();
  cfg_.check_input(in);

  std::vector<ag::Var> skips;
  ag::Var h = crop;
  for (const auto& s : encoder_) {
    ag::Var e = s.entry(h);
    ag::Var r = s.out_norm(s.out_conv(s.inner(e)));
    h = nn::relu(nn::add(r, e));
    skips.push_back(h);
  }
  skips.pop_back();  // bottleneck output is `h`

  UnetOutput out;
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const auto& u = decoder_[i];
    const ag::Var& skip = skips[skips.size() - 1 - i];
    h = u.fuse(nn::concat_channels(u.up(h), skip));
    out.stage_logits.push_back(u.head(h));
  }
  h = final_conv_(final_up_(h));
  out.stage_logits.push_back(final_head_(h));
  out.logits = deep_supervision_merge(out.stage_logits, {2 * in.d, 2 * in.h, 2 * in.w}, cfg_.num_classes);
  return out;
}

}  // namespace cfun
