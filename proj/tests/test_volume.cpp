#include <cstring>
#include <fstream>

#include "cfun/error.hpp"
#include "cfun/volume.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cfun;

namespace {

std::vector<char> slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

constexpr std::size_t kHeader = 8 + 4 + 3 * 4 + 3 * 4;

// Corner-aligned linear interpolation of a 1D signal, evaluated per output point.
double interp_1d(const std::vector<double>& f, int i, int n_out) {
  const int n = static_cast<int>(f.size());
  const double x = n_out == 1 ? 0.5 * (n - 1) : double(i) * (n - 1) / (n_out - 1);
  const int x0 = std::min(static_cast<int>(std::floor(x)), n - 1);
  const int x1 = std::min(x0 + 1, n - 1);
  const double t = x - x0;
  return (1 - t) * f[static_cast<std::size_t>(x0)] + t * f[static_cast<std::size_t>(x1)];
}

}  // namespace

TEST_CASE("volume io: smallest legal file") {
  const auto dir = testing::scratch_dir("vol_min");
  Volume v({1, 1, 1}, 0.0f);
  save_volume(v, dir / "a.vol");
  const Volume r = load_volume(dir / "a.vol");
  CHECK(r.shape == Shape3{1, 1, 1});
  REQUIRE(r.data.size() == 1);
  CHECK(r.data[0] == 0.0f);
}

TEST_CASE("volume io: round trip is bitwise") {
  const auto dir = testing::scratch_dir("vol_rt");
  SplitMix64 rng(3);
  for (int t = 0; t < 5; ++t) {
    Volume v({1 + int(rng.below(5)), 1 + int(rng.below(5)), 1 + int(rng.below(5))}, 0.0f,
             {float(rng.uniform(0.2, 3)), float(rng.uniform(0.2, 3)), float(rng.uniform(0.2, 3))});
    for (auto& x : v.data) x = float(rng.normal() * 1000);
    save_volume(v, dir / "v.vol");
    const Volume r = load_volume(dir / "v.vol");
    CHECK(r.shape == v.shape);
    CHECK(std::memcmp(r.spacing.data(), v.spacing.data(), sizeof(v.spacing)) == 0);
    CHECK(std::memcmp(r.data.data(), v.data.data(), 4 * v.data.size()) == 0);
  }
}

TEST_CASE("volume io: payload is z-major little-endian f32") {
  const auto dir = testing::scratch_dir("vol_layout");
  Volume v({2, 2, 2});
  for (int z = 0; z < 2; ++z)
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x) v.at(z, y, x) = float(4 * z + 2 * y + x);
  save_volume(v, dir / "r.vol");
  const auto bytes = slurp(dir / "r.vol");
  REQUIRE(bytes.size() == kHeader + 8 * 4);
  CHECK(std::string(bytes.data(), 8) == "CFUNVOL1");
  for (int i = 0; i < 8; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= std::uint32_t(static_cast<unsigned char>(bytes[kHeader + 4 * i + b])) << (8 * b);
    float f;
    std::memcpy(&f, &bits, 4);
    CHECK(f == float(i));
  }
}

TEST_CASE("volume io: errors") {
  const auto dir = testing::scratch_dir("vol_err");
  Volume v({2, 2, 2}, 1.0f);
  save_volume(v, dir / "ok.vol");
  auto bytes = slurp(dir / "ok.vol");
  bytes[7] = '2';
  {
    std::ofstream out(dir / "bad.vol", std::ios::binary);
    out.write(bytes.data(), std::streamsize(bytes.size()));
  }
  CHECK_THROWS_AS(load_volume(dir / "bad.vol"), FormatError);
  CHECK_THROWS_AS(save_volume(v, dir / "no" / "such" / "dir" / "x.vol"), IoError);
  CHECK_THROWS_AS(load_volume(dir / "missing.vol"), IoError);
  CHECK_THROWS_AS(load_labels(dir / "ok.vol"), FormatError);
}

TEST_CASE("label io round trip") {
  const auto dir = testing::scratch_dir("lab_rt");
  SplitMix64 rng(4);
  const LabelVolume l = testing::random_labels({3, 4, 5}, rng);
  save_labels(l, dir / "l.vol");
  const LabelVolume r = load_labels(dir / "l.vol");
  CHECK(r.data == l.data);
  CHECK(r.num_classes == 8);
}

TEST_CASE("resample: constants, identity and a ramp") {
  SplitMix64 rng(5);
  Volume c({3, 4, 5}, 7.5f);
  const Volume rc = resample_trilinear(c, {7, 2, 9});
  for (float v : rc.data) CHECK(v == doctest::Approx(7.5f).epsilon(1e-6));

  Volume r({3, 4, 5});
  for (auto& v : r.data) v = float(rng.uniform());
  CHECK(resample_trilinear(r, r.shape).data == r.data);

  Volume ramp({1, 1, 4});
  for (int x = 0; x < 4; ++x) ramp.at(0, 0, x) = float(x);
  const Volume up = resample_trilinear(ramp, {1, 1, 7});
  for (int x = 0; x < 7; ++x) CHECK(std::abs(up.at(0, 0, x) - interp_1d({0, 1, 2, 3}, x, 7)) < 1e-6);

  // Separable 3D check against per-axis interpolation of a random product signal.
  std::vector<double> fz{0.3, -1.2, 2.0}, fy{1.0, 0.5, -0.25, 4.0}, fx{2.0, -3.0};
  Volume prod({3, 4, 2});
  for (int z = 0; z < 3; ++z)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 2; ++x) prod.at(z, y, x) = float(fz[z] * fy[y] * fx[x]);
  const Volume pr = resample_trilinear(prod, {5, 3, 6});
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 6; ++x)
        CHECK(std::abs(pr.at(z, y, x) - interp_1d(fz, z, 5) * interp_1d(fy, y, 3) * interp_1d(fx, x, 6)) < 1e-5);
}

TEST_CASE("resample_nearest keeps label values") {
  SplitMix64 rng(6);
  const LabelVolume l = testing::random_labels({4, 5, 6}, rng);
  const LabelVolume r = resample_nearest(l, {9, 3, 11});
  for (auto v : r.data) CHECK(v < 8);
  CHECK(resample_nearest(l, l.shape).data == l.data);
}

TEST_CASE("normalize_intensity endpoints and midpoint") {
  Volume v({1, 1, 4});
  v.data = {-300.0f, 500.0f, -1000.0f, 2000.0f};
  const Volume n = normalize_intensity(v);
  CHECK(n.data[0] == 0.0f);
  CHECK(n.data[1] == 1.0f);
  CHECK(n.data[2] == 0.0f);
  CHECK(n.data[3] == 1.0f);
  Volume m({1, 1, 1}, 100.0f);
  CHECK(normalize_intensity(m, -100.0f, 300.0f).data[0] == doctest::Approx(0.5));
  CHECK_THROWS_AS(normalize_intensity(m, 1.0f, 1.0f), ShapeError);
}

TEST_CASE("one_hot and argmax") {
  LabelVolume z({2, 3, 4}, 8);
  const SegMap oh = one_hot(z);
  CHECK(oh.num_classes() == 8);
  for (int c = 0; c < 8; ++c)
    for (std::size_t i = 0; i < z.data.size(); ++i) CHECK(oh.data.channel(c)[i] == (c == 0 ? 1.0f : 0.0f));

  z.at(1, 2, 3) = 3;
  const SegMap o3 = one_hot(z);
  int ones = 0;
  for (std::size_t i = 0; i < z.data.size(); ++i) ones += o3.data.channel(3)[i] == 1.0f;
  CHECK(ones == 1);

  SplitMix64 rng(7);
  for (int t = 0; t < 10; ++t) {
    const LabelVolume l = testing::random_labels({3, 4, 5}, rng, 0.8);
    CHECK(argmax(one_hot(l)).data == l.data);
  }
}

TEST_CASE("segmap validation") {
  SegMap bad{Tensor4(8, {1, 1, 2}, 0.2f), SegKind::Probabilities};
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  LabelVolume l({1, 1, 2}, 8);
  l.data[0] = 9;
  CHECK_THROWS_AS(l.validate(), ShapeError);
}
