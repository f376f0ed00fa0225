#include <cmath>

#include "cfun/checkpoint.hpp"
#include "cfun/error.hpp"
#include "cfun/gradcheck.hpp"
#include "cfun/layers.hpp"
#include "cfun/losses.hpp"
#include "cfun/optim.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cfun;
using nn::ConvGeometry;
using testing::random_tensor;

TEST_CASE("conv3d: identity kernel, zero kernel, naive oracle") {
  SplitMix64 rng(1);
  const Tensor x = random_tensor({3, 4, 5, 6}, rng);

  Tensor id({3, 3, 1, 1, 1});
  for (int c = 0; c < 3; ++c) id[static_cast<std::size_t>(c * 3 + c)] = 1.0f;
  CHECK(testing::max_abs_diff(nn::conv3d(x, id, nullptr, ConvGeometry::cube(1, 1, 0)), x) == 0.0);

  const Tensor zero({2, 3, 3, 3, 3});
  const Tensor bias({2}, 0.0f);
  Tensor b = bias;
  b[0] = 1.5f;
  b[1] = -2.0f;
  const Tensor zy = nn::conv3d(x, zero, &b, ConvGeometry::cube(3, 1, 1));
  for (std::size_t i = 0; i < zy.channel_size(); ++i) {
    CHECK(zy.channel(0)[i] == 1.5f);
    CHECK(zy.channel(1)[i] == -2.0f);
  }

  for (int t = 0; t < 20; ++t) {
    const int stride = 1 + int(rng.below(2));
    const int pad = int(rng.below(2));
    const Tensor xi = random_tensor({2, 5, 6, 7}, rng);
    const Tensor w = random_tensor({3, 2, 3, 3, 3}, rng);
    const Tensor bb = random_tensor({3}, rng);
    const Tensor got = nn::conv3d(xi, w, &bb, ConvGeometry::cube(3, stride, pad));
    const Tensor want = testing::naive_conv(xi, w, &bb, stride, pad);
    REQUIRE(got.same_shape(want));
    CHECK(testing::max_abs_diff(got, want) <= 1e-5 * std::max(1.0, testing::max_abs(want)));
  }
}

TEST_CASE("conv geometry arithmetic") {
  const auto g = ConvGeometry::cube(3, 2, 1);
  CHECK(g.output({16, 15, 9}) == Shape3{8, 8, 5});
  CHECK(ConvGeometry::cube(2, 2, 0).transposed_output({4, 4, 4}) == Shape3{8, 8, 8});
  CHECK(ConvGeometry::cube(1, 1, 0).is_pointwise());
  SplitMix64 rng(2);
  CHECK_THROWS_AS(nn::conv3d(random_tensor({2, 4, 4, 4}, rng), random_tensor({1, 3, 3, 3, 3}, rng), nullptr,
                             ConvGeometry::cube(3, 1, 1)),
                  ShapeError);
}

TEST_CASE("deconv3d: shapes, bias-only output, adjoint of conv3d") {
  SplitMix64 rng(3);
  const Tensor x = random_tensor({3, 4, 4, 4}, rng);
  const Tensor w = random_tensor({3, 5, 2, 2, 2}, rng);
  CHECK(nn::deconv3d(x, w, nullptr, ConvGeometry::cube(2, 2, 0)).shape() == std::vector<int>{5, 8, 8, 8});

  const Tensor bias = random_tensor({5}, rng);
  const Tensor z = nn::deconv3d(Tensor({3, 4, 4, 4}), w, &bias, ConvGeometry::cube(2, 2, 0));
  for (int c = 0; c < 5; ++c)
    for (std::size_t i = 0; i < z.channel_size(); ++i) CHECK(z.channel(c)[i] == bias[static_cast<std::size_t>(c)]);

  struct Case {
    Shape3 in;
    ConvGeometry g;
  };
  const Case cases[] = {{{7, 7, 7}, ConvGeometry::cube(3, 2, 1)},
                        {{6, 5, 4}, ConvGeometry::cube(3, 1, 1)},
                        {{8, 6, 4}, ConvGeometry::cube(2, 2, 0)},
                        {{5, 7, 5}, ConvGeometry{{1, 3, 3}, {1, 2, 2}, {0, 1, 1}}}};
  for (const auto& c : cases) {
    const Tensor xi = random_tensor({2, c.in.d, c.in.h, c.in.w}, rng);
    const Tensor wi = random_tensor({3, 2, c.g.kernel[0], c.g.kernel[1], c.g.kernel[2]}, rng);
    const Tensor cx = nn::conv3d(xi, wi, nullptr, c.g);
    const Tensor y = random_tensor(cx.shape(), rng);
    const Tensor dy = nn::deconv3d(y, wi, nullptr, c.g);
    REQUIRE(dy.same_shape(xi));
    const double lhs = testing::dot(cx, y), rhs = testing::dot(xi, dy);
    CHECK(std::abs(lhs - rhs) <= 1e-5 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("p3d bottleneck: shapes and residual path") {
  SplitMix64 rng(4);
  nn::ParamStore ps;
  nn::P3DBottleneck down(ps, "down", {4, 2, 8, {2, 2, 2}}, rng);
  CHECK(down.has_projection());
  const auto y = down(ag::constant(random_tensor({4, 16, 16, 16}, rng)));
  CHECK(y->value.shape() == std::vector<int>{8, 8, 8, 8});

  // Zeroed residual branch: the block reduces to relu(shortcut(x)).
  nn::ParamStore zs;
  nn::P3DBottleneck same(zs, "b", {3, 2, 3, {1, 1, 1}}, rng);
  CHECK_FALSE(same.has_projection());
  for (auto& [name, p] : zs.params()) p->value.fill(0.0f);
  const Tensor x = random_tensor({3, 5, 5, 5}, rng);
  const auto out = same(ag::constant(x));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(out->value[i] == std::max(0.0f, x[i]));

  nn::ParamStore ps2;
  nn::P3DBottleneck proj(ps2, "p", {2, 2, 2, {2, 2, 2}}, rng);
  for (auto& [name, p] : ps2.params()) {
    p->value.fill(0.0f);
    if (name == "p.proj.w") {
      p->value[0] = 1.0f;
      p->value[3] = 1.0f;
    }
  }
  const Tensor x2 = random_tensor({2, 6, 6, 6}, rng);
  const auto o2 = proj(ag::constant(x2));
  for (int c = 0; c < 2; ++c)
    for (int z = 0; z < 3; ++z)
      for (int yy = 0; yy < 3; ++yy)
        for (int xx = 0; xx < 3; ++xx)
          CHECK(o2->value.at(c, z, yy, xx) == std::max(0.0f, x2.at(c, 2 * z, 2 * yy, 2 * xx)));
}

TEST_CASE("p3d bottleneck: factorized convs reach the whole 3x3x3 neighborhood") {
  SplitMix64 rng(5);
  nn::ParamStore ps;
  nn::P3DBottleneck blk(ps, "rf", {2, 8, 2, {1, 1, 1}}, rng);
  constexpr int n = 13, mid = n / 2;
  auto x = ag::parameter(random_tensor({2, n, n, n}, rng, 0.0, 1.0));
  const auto out = blk(x);
  const std::size_t center = (static_cast<std::size_t>(mid) * n + mid) * n + mid;
  ag::backward(nn::sum(nn::gather({out}, {{0, center}, {0, out->value.channel_size() + center}})));
  const auto sensitivity = [&](int z, int y, int xx) {
    return std::abs(double(x->grad.at(0, z, y, xx))) + std::abs(double(x->grad.at(1, z, y, xx)));
  };
  // Voxels outside the neighborhood only reach the center through the
  // per-channel statistics, so their typical sensitivity is small.
  double far = 0.0, near = 1e30;
  int outside = 0;
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int xx = 0; xx < n; ++xx) {
        const bool inside = std::abs(z - mid) <= 1 && std::abs(y - mid) <= 1 && std::abs(xx - mid) <= 1;
        if (inside) near = std::min(near, sensitivity(z, y, xx));
        else {
          far += sensitivity(z, y, xx);
          ++outside;
        }
      }
  CHECK(near > 5.0 * far / outside);

  // Direct sweep: bumping any one of the 27 neighbors moves the center output
  // by more than bumping a voxel outside the neighborhood typically does.
  ag::NoGradGuard ng;
  const Tensor ref = blk(ag::constant(x->value))->value;
  const auto bump = [&](int z, int y, int xx) {
    double strongest = 0.0;
    for (int c = 0; c < 2; ++c) {
      Tensor p = x->value;
      p.at(c, z, y, xx) += 0.05f;
      const Tensor o = blk(ag::constant(p))->value;
      strongest = std::max(strongest, std::abs(double(o.at(0, mid, mid, mid)) - ref.at(0, mid, mid, mid)) +
                                          std::abs(double(o.at(1, mid, mid, mid)) - ref.at(1, mid, mid, mid)));
    }
    return strongest;
  };
  double far_bump = 0.0;
  for (int z : {0, mid, n - 1})
    for (int y : {0, n - 1}) far_bump += bump(z, y, mid) / 6.0;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) CHECK(bump(mid + dz, mid + dy, mid + dx) > 5.0 * far_bump);
}

TEST_CASE("ops: softmax, resize, upsample, concat") {
  SplitMix64 rng(6);
  const Tensor zero({8, 2, 2, 2});
  const Tensor uniform = nn::softmax_channels(zero);
  for (float v : uniform.values()) CHECK(v == doctest::Approx(0.125));
  const Tensor l = random_tensor({8, 3, 4, 5}, rng, -5, 5);
  const Tensor p = nn::softmax_channels(l);
  for (std::size_t i = 0; i < l.channel_size(); ++i) {
    double s = 0;
    for (int c = 0; c < 8; ++c) s += p.channel(c)[i];
    CHECK(std::abs(s - 1.0) < 1e-5);
  }
  Tensor shifted = l;
  for (int c = 0; c < 8; ++c) shifted.channel(c)[7] += 3.0f;
  const Tensor ps = nn::softmax_channels(shifted);
  for (int c = 0; c < 8; ++c) CHECK(ps.channel(c)[7] == doctest::Approx(p.channel(c)[7]).epsilon(1e-5));

  CHECK(nn::resize_trilinear(l, l.spatial()).values()[5] == l.values()[5]);
  const auto up = nn::upsample_nearest(ag::constant(l), {2, 2, 2});
  CHECK(up->value.spatial() == Shape3{6, 8, 10});
  CHECK(up->value.at(3, 5, 7, 9) == l.at(3, 2, 3, 4));
  const auto cat = nn::concat_channels(ag::constant(l), ag::constant(l));
  CHECK(cat->value.channels() == 16);
}

TEST_CASE("grad_check skips kinks but catches wrong gradients") {
  // relu(x) with x at 5e-4: the default step straddles the kink, the finer
  // retry does not.
  auto x = ag::parameter(Tensor({1}, 5e-4f));
  CHECK(nn::grad_check([&] { return nn::sum(nn::relu(x)); }, x) < 1e-6);

  // relu(x) at exactly 0 is a kink on every step.
  auto at_kink = ag::parameter(Tensor({1}, 0.0f));
  CHECK(std::isinf(nn::grad_check([&] { return nn::sum(nn::relu(at_kink)); }, at_kink)));

  // Smooth square with a backward that is off by 10%.
  SplitMix64 rng(8);
  auto y = ag::parameter(random_tensor({5}, rng, 0.5, 1.5));
  const auto wrong_square = [&] {
    Tensor v = y->value;
    for (float& e : v.values()) e *= e;
    return nn::sum(ag::make_result(std::move(v), {y}, [](ag::Node& self) {
      Tensor& dy = self.parents[0]->grad_ref();
      for (std::size_t i = 0; i < dy.size(); ++i) dy[i] += 2.2f * self.parents[0]->value[i] * self.grad[i];
    }));
  };
  CHECK(nn::grad_check(wrong_square, y) > 0.05);
}

TEST_CASE("grad_check battery on small inputs") {
  SplitMix64 rng(7);
  nn::GradCheckOptions opt;

  SUBCASE("sum matches to float round-off") {
    auto x = ag::parameter(random_tensor({2, 3, 3, 3}, rng));
    CHECK(nn::grad_check([&] { return nn::sum(x); }, x, opt) < 1e-4);
  }
  SUBCASE("conv3d") {
    auto x = ag::parameter(random_tensor({2, 5, 5, 5}, rng));
    auto w = ag::parameter(random_tensor({3, 2, 3, 3, 3}, rng));
    auto b = ag::parameter(random_tensor({3}, rng));
    const auto f = [&] { return nn::sum(nn::conv3d(x, w, b, ConvGeometry::cube(3, 2, 1))); };
    CHECK(nn::grad_check(f, x, opt) < 1e-2);
    CHECK(nn::grad_check(f, w, opt) < 1e-2);
    CHECK(nn::grad_check(f, b, opt) < 1e-2);
  }
  SUBCASE("deconv3d with a random readout") {
    auto x = ag::parameter(random_tensor({2, 3, 3, 3}, rng));
    auto w = ag::parameter(random_tensor({2, 3, 2, 2, 2}, rng));
    const auto r = ag::constant(random_tensor({3, 6, 6, 6}, rng));
    const auto f = [&] {
      const auto y = nn::deconv3d(x, w, nullptr, ConvGeometry::cube(2, 2, 0));
      return nn::sum(nn::relu(nn::add(y, r)));
    };
    CHECK(nn::grad_check(f, x, opt) < 1e-2);
    CHECK(nn::grad_check(f, w, opt) < 1e-2);
  }
  SUBCASE("instance norm, trilinear resize, softmax") {
    auto x = ag::parameter(random_tensor({2, 4, 3, 5}, rng));
    auto g = ag::parameter(random_tensor({2}, rng, 0.5, 1.5));
    auto b = ag::parameter(random_tensor({2}, rng));
    const auto probe = ag::constant(random_tensor({2, 7, 5, 3}, rng));
    const auto f = [&] {
      auto h = nn::resize_trilinear(nn::instance_norm(x, g, b), {7, 5, 3});
      h = nn::softmax_channels(h);
      return nn::sum(nn::relu(nn::add(h, probe)));
    };
    CHECK(nn::grad_check(f, x, opt) < 1e-2);
    CHECK(nn::grad_check(f, g, opt) < 1e-2);
  }
  SUBCASE("p3d bottleneck") {
    nn::ParamStore ps;
    nn::P3DBottleneck blk(ps, "g", {2, 2, 3, {2, 2, 2}}, rng);
    auto x = ag::parameter(random_tensor({2, 6, 6, 6}, rng));
    // A random linear readout keeps the normalization from cancelling the signal.
    const auto w = ag::constant(random_tensor({1, 3, 3, 3, 3}, rng));
    const auto f = [&] { return nn::sum(nn::conv3d(blk(x), w, ag::Var(), ConvGeometry::cube(3, 1, 0))); };
    CHECK(nn::grad_check(f, x, opt) < 1e-2);
  }
  SUBCASE("edge loss through softmax") {
    SplitMix64 lr(9);
    const LabelVolume y = testing::random_labels({5, 5, 5}, lr, 0.6);
    const Tensor yt = one_hot(y).data;
    auto logits = ag::parameter(random_tensor({8, 5, 5, 5}, rng, -2, 2));
    for (auto norm : {loss::EdgeNorm::Absolute, loss::EdgeNorm::Squared}) {
      const auto f = [&] { return loss::edge_loss(nn::softmax_channels(logits), yt, loss::sobel_bank(), norm); };
      CHECK(nn::grad_check(f, logits, opt) < 1e-2);
    }
  }
  SUBCASE("gather and weighted sum") {
    auto a = ag::parameter(random_tensor({4}, rng));
    auto b = ag::parameter(random_tensor({3}, rng));
    const auto f = [&] {
      const auto g = nn::gather({a, b}, {{0, 1}, {1, 2}, {0, 3}, {1, 2}});
      return nn::weighted_sum({nn::sum(nn::relu(g)), nn::sum(a)}, {2.0f, 0.5f});
    };
    CHECK(nn::grad_check(f, a, opt) < 1e-2);
    CHECK(nn::grad_check(f, b, opt) < 1e-2);
  }
}

TEST_CASE("autograd accumulates through shared subgraphs and respects NoGradGuard") {
  auto x = ag::parameter(Tensor({1}, 3.0f));
  const auto y = nn::add(nn::scale(x, 2.0f), nn::scale(x, 5.0f));
  ag::backward(y);
  CHECK(x->grad[0] == doctest::Approx(7.0f));
  {
    ag::NoGradGuard g;
    const auto z = nn::scale(x, 2.0f);
    CHECK(z->parents.empty());
    CHECK_FALSE(z->requires_grad);
  }
  CHECK(ag::grad_enabled());
}

TEST_CASE("checkpoint round trip and mismatches") {
  const auto dir = testing::scratch_dir("ckpt");
  SplitMix64 rng(10);
  nn::ParamStore a;
  nn::Conv c1(a, "c1", 2, 3, ConvGeometry::cube(3, 1, 1), rng);
  nn::Norm n1(a, "n1", 3);
  nn::save_checkpoint(a, dir);

  SplitMix64 other(11);
  nn::ParamStore b;
  nn::Conv c2(b, "c1", 2, 3, ConvGeometry::cube(3, 1, 1), other);
  nn::Norm n2(b, "n1", 3);
  nn::load_checkpoint(b, dir);
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& va = a.params()[i].second->value;
    const auto& vb = b.params()[i].second->value;
    CHECK(testing::max_abs_diff(va, vb) == 0.0);
  }

  nn::ParamStore wrong_shape;
  nn::Conv c3(wrong_shape, "c1", 2, 4, ConvGeometry::cube(3, 1, 1), other);
  nn::Norm n3(wrong_shape, "n1", 3);
  CHECK_THROWS_AS(nn::load_checkpoint(wrong_shape, dir), FormatError);

  nn::ParamStore extra;
  nn::Conv c4(extra, "c1", 2, 3, ConvGeometry::cube(3, 1, 1), other);
  nn::Norm n4(extra, "n1", 3);
  nn::Norm n5(extra, "n2", 3);
  CHECK_THROWS_AS(nn::load_checkpoint(extra, dir), FormatError);
}

TEST_CASE("adam: first step magnitude, clipping and convergence") {
  nn::ParamStore ps;
  auto p = ps.add("p", Tensor({3}, 0.0f));
  p->value[0] = 1.0f;
  p->value[1] = -2.0f;
  p->value[2] = 0.5f;
  nn::AdamOptions o;
  o.lr = 0.1f;
  o.clip_norm = 0.0f;
  nn::Adam adam(ps, o);

  // The first Adam step moves every coordinate by lr * g / (|g| + eps).
  const Tensor before = p->value;
  ag::backward(nn::sum(nn::gather({p}, {{0, 0}, {0, 1}, {0, 1}, {0, 2}})));
  adam.step(ps);
  CHECK(p->value[0] == doctest::Approx(before[0] - 0.1f).epsilon(1e-5));
  CHECK(p->value[1] == doctest::Approx(before[1] - 0.1f).epsilon(1e-5));
  ps.zero_grad();

  // Minimize sum(|p - 3|).
  for (int i = 0; i < 400; ++i) {
    const auto d = nn::add(p, ag::constant(Tensor({3}, -3.0f)));
    auto loss = nn::sum(nn::relu(d));
    loss = nn::add(loss, nn::sum(nn::relu(nn::scale(d, -1.0f))));
    ag::backward(loss);
    adam.step(ps);
    ps.zero_grad();
  }
  for (int i = 0; i < 3; ++i) CHECK(std::abs(p->value[static_cast<std::size_t>(i)] - 3.0f) < 0.15f);

  nn::ParamStore big;
  auto q = big.add("q", Tensor({2}, 0.0f));
  nn::AdamOptions oc;
  oc.clip_norm = 1.0f;
  nn::Adam clipped(big, oc);
  ag::backward(nn::sum(nn::scale(q, 100.0f)));
  CHECK(clipped.step(big) == doctest::Approx(100.0 * std::sqrt(2.0)));
  CHECK(clipped.steps() == 1);
}
