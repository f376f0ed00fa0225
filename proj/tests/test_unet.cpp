#include <cmath>

#include "cfun/config.hpp"
#include "cfun/error.hpp"
#include "cfun/gradcheck.hpp"
#include "cfun/losses.hpp"
#include "cfun/unet.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cfun;
using testing::random_tensor;

TEST_CASE("unet output doubles the crop grid") {
  SplitMix64 rng(41);
  SUBCASE("desk preset") {
    const UnetConfig cfg = TrainConfig::desk().unet;
    nn::ParamStore ps;
    const Unet net(ps, cfg, rng);
    ag::NoGradGuard ng;
    const auto out = net.forward(ag::constant(random_tensor({1, 32, 32, 32}, rng)));
    CHECK(out.logits->value.shape() == std::vector<int>{8, 64, 64, 64});
    CHECK(int(out.stage_logits.size()) == cfg.depth + 1);
    CHECK(out.stage_logits.front()->value.spatial() == Shape3{8, 8, 8});
    CHECK(out.stage_logits.back()->value.spatial() == Shape3{64, 64, 64});
  }
  SUBCASE("paper preset") {
    const TrainConfig paper = TrainConfig::paper();
    CHECK(paper.roi_out_size == Shape3{64, 64, 64});
    nn::ParamStore ps;
    const Unet net(ps, paper.unet, rng);
    ag::NoGradGuard ng;
    const auto out = net.forward(ag::constant(random_tensor({1, 64, 64, 64}, rng)));
    CHECK(out.logits->value.shape() == std::vector<int>{8, 128, 128, 128});
  }
  SUBCASE("shape errors") {
    UnetConfig cfg;
    cfg.base_channels = 2;
    nn::ParamStore ps;
    const Unet net(ps, cfg, rng);
    CHECK_THROWS_AS(static_cast<void>(net.forward(ag::constant(Tensor(1, {12, 16, 16})))), ShapeError);
    CHECK_THROWS_AS(static_cast<void>(net.forward(ag::constant(Tensor(2, {16, 16, 16})))), ShapeError);
  }
}

TEST_CASE("deep supervision merge") {
  SplitMix64 rng(42);
  const auto s = ag::constant(random_tensor({8, 3, 4, 5}, rng));
  const Shape3 out{6, 8, 10};
  const auto one = deep_supervision_merge({s}, out);
  const Tensor up = nn::resize_trilinear(s->value, out);
  CHECK(testing::max_abs_diff(one->value, up) == 0.0);
  const auto two = deep_supervision_merge({s, s}, out);
  for (std::size_t i = 0; i < up.size(); ++i) CHECK(two->value[i] == doctest::Approx(2.0f * up[i]).epsilon(1e-6));
  CHECK_THROWS_AS(deep_supervision_merge({}, out), ShapeError);
  CHECK_THROWS_AS(deep_supervision_merge({ag::constant(Tensor(3, {2, 2, 2}))}, out), ShapeError);
}

TEST_CASE("predict_probs") {
  const Shape3 s{2, 3, 4};
  const SegMap z = predict_probs({Tensor4(8, s), SegKind::Logits});
  CHECK(z.kind == SegKind::Probabilities);
  for (float v : z.data.values()) CHECK(v == doctest::Approx(0.125));
  SplitMix64 rng(43);
  const SegMap p = predict_probs({random_tensor({8, 2, 3, 4}, rng, -6, 6), SegKind::Logits});
  CHECK_NOTHROW(p.validate());
  CHECK_THROWS_AS(predict_probs(p), ShapeError);
}

TEST_CASE("unet locality") {
  SplitMix64 rng(44);
  UnetConfig cfg;
  cfg.base_channels = 4;
  cfg.depth = 2;
  cfg.final_channels = 4;
  nn::ParamStore ps;
  const Unet net(ps, cfg, rng);
  ag::NoGradGuard ng;
  const Tensor base = random_tensor({1, 32, 32, 32}, rng, 0.0, 1.0);
  const Tensor ref = net.forward(ag::constant(base)).logits->value;
  Tensor spiked = base;
  spiked.at(0, 1, 1, 1) += 20.0f;
  const Tensor pert = net.forward(ag::constant(spiked)).logits->value;
  // Output voxel i sits at input coordinate i / 2; compare the corner next to
  // the spike with the opposite corner, which only sees it through the
  // per-channel normalization statistics.
  double near = 0, far = 0;
  for (int c = 0; c < 8; ++c)
    for (int z = 0; z < 64; ++z)
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
          const double d = std::abs(double(ref.at(c, z, y, x)) - pert.at(c, z, y, x));
          if (z < 6 && y < 6 && x < 6) near = std::max(near, d);
          if (z >= 56 && y >= 56 && x >= 56) far = std::max(far, d);
        }
  CHECK(near > 0.0);
  CHECK(far < 0.1 * near);
}

TEST_CASE("unet composed with seg_loss passes grad_check") {
  SplitMix64 rng(45);
  UnetConfig cfg;
  cfg.base_channels = 2;
  cfg.depth = 1;
  cfg.final_channels = 2;
  nn::ParamStore ps;
  const Unet net(ps, cfg, rng);
  auto x = ag::parameter(random_tensor({1, 8, 8, 8}, rng));
  const LabelVolume labels = testing::random_labels({16, 16, 16}, rng);
  const auto f = [&] { return loss::seg_loss(net.forward(x).logits, labels); };
  nn::GradCheckOptions opt;
  opt.max_samples = 24;
  CHECK(nn::grad_check(f, x, opt) < 1e-2);
  for (std::size_t i = 0; i < ps.params().size(); i += 7) CHECK(nn::grad_check(f, ps.params()[i].second, opt) < 1e-2);
}
