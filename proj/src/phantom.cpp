#include "cfun/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

#include "cfun/error.hpp"
#include "cfun/rng.hpp"

namespace cfun {

void PhantomSpec::validate() const {
  if (shape.d < 16 || shape.h < 16 || shape.w < 16)
    throw ShapeError("phantom shape dims must be >= 16, got " + shape.str());
  if (num_structures != 7) throw ShapeError("phantom num_structures must be 7");
  if (!(noise_sigma >= 0.0)) throw ShapeError("noise_sigma must be >= 0");
  const auto [lo, hi] = heart_scale_range;
  if (!(lo > 0.0 && lo <= hi && hi <= 1.0)) throw ShapeError("heart_scale_range must satisfy 0 < lo <= hi <= 1");
  if (clutter_count < 0) throw ShapeError("clutter_count must be >= 0");
  if (!(center_jitter >= 0.0 && center_jitter < 0.5)) throw ShapeError("center_jitter must be in [0, 0.5)");
}

namespace {

using Vec3 = std::array<double, 3>;

// Geometry lives in a heart frame where the unit is half the heart edge.
struct Ellipsoid {
  Vec3 c;
  Vec3 r;
  [[nodiscard]] double level(const Vec3& p) const {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      const double t = (p[i] - c[i]) / r[i];
      s += t * t;
    }
    return s;
  }
};

struct Capsule {
  Vec3 a;
  Vec3 b;
  double radius;
  [[nodiscard]] bool contains(const Vec3& p) const {
    Vec3 ab{}, ap{};
    double len2 = 0.0, t = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      ab[i] = b[i] - a[i];
      ap[i] = p[i] - a[i];
      len2 += ab[i] * ab[i];
      t += ab[i] * ap[i];
    }
    t = std::clamp(t / len2, 0.0, 1.0);
    double d2 = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      const double q = ap[i] - t * ab[i];
      d2 += q * q;
    }
    return d2 <= radius * radius;
  }
};

struct HeartLayout {
  Ellipsoid lv, myo_outer, rv, la, ra;
  Capsule aa, pa;

  // Later structures win voxel ownership.
  [[nodiscard]] int label_at(const Vec3& p) const {
    int label = 0;
    if (lv.level(p) <= 1.0) label = kLV;
    if (myo_outer.level(p) <= 1.0 && lv.level(p) > 1.0) label = kMyo;
    if (rv.level(p) <= 1.0) label = kRV;
    if (la.level(p) <= 1.0) label = kLA;
    if (ra.level(p) <= 1.0) label = kRA;
    if (aa.contains(p)) label = kAA;
    if (pa.contains(p)) label = kPA;
    return label;
  }
};

Vec3 jitter(SplitMix64& rng, Vec3 v, double amount) {
  for (auto& x : v) x += rng.uniform(-amount, amount);
  return v;
}

Vec3 scaled(SplitMix64& rng, Vec3 v, double lo, double hi) {
  for (auto& x : v) x *= rng.uniform(lo, hi);
  return v;
}

HeartLayout random_layout(SplitMix64& rng) {
  constexpr double kPos = 0.04;
  HeartLayout h;
  h.lv = {jitter(rng, {0.22, 0.05, 0.28}, kPos), scaled(rng, {0.42, 0.40, 0.30}, 0.9, 1.1)};
  const double wall = rng.uniform(0.16, 0.2);
  h.myo_outer = {h.lv.c, {h.lv.r[0] + wall, h.lv.r[1] + wall, h.lv.r[2] + wall}};
  h.rv = {jitter(rng, {0.22, 0.0, -0.42}, kPos), scaled(rng, {0.40, 0.40, 0.28}, 0.9, 1.1)};
  h.la = {jitter(rng, {-0.42, 0.12, 0.30}, kPos), scaled(rng, {0.27, 0.27, 0.27}, 0.9, 1.1)};
  h.ra = {jitter(rng, {-0.40, 0.05, -0.42}, kPos), scaled(rng, {0.28, 0.28, 0.26}, 0.9, 1.1)};
  h.aa = {jitter(rng, {0.0, -0.22, 0.08}, kPos), jitter(rng, {-0.95, -0.28, 0.15}, kPos), rng.uniform(0.13, 0.16)};
  h.pa = {jitter(rng, {-0.05, 0.30, -0.12}, kPos), jitter(rng, {-0.9, 0.36, -0.05}, kPos), rng.uniform(0.13, 0.16)};
  return h;
}

bool boxes_overlap(const BBox3D& a, const BBox3D& b) {
  for (int ax = 0; ax < 3; ++ax)
    if (a.hi(ax) <= b.lo(ax) || b.hi(ax) <= a.lo(ax)) return false;
  return true;
}

}  // namespace

PhantomSample generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  const Shape3 s = spec.shape;
  const int min_extent = std::min({s.d, s.h, s.w});
  const double max_half = 0.5 * spec.heart_scale_range.second * min_extent;
  for (int ax = 0; ax < 3; ++ax)
    if (0.5 * s[ax] - spec.center_jitter * s[ax] - max_half < 1.0)
      throw ShapeError("heart at maximum jitter does not fit inside a " + s.str() + " volume");

  SplitMix64 rng(seed);
  const double half = 0.5 * rng.uniform(spec.heart_scale_range.first, spec.heart_scale_range.second) * min_extent;
  Vec3 center{};
  for (int ax = 0; ax < 3; ++ax)
    center[static_cast<std::size_t>(ax)] =
        0.5 * s[ax] + rng.uniform(-spec.center_jitter, spec.center_jitter) * s[ax];
  const HeartLayout layout = random_layout(rng);

  PhantomSample out{Volume(s, kClassIntensity[0]), LabelVolume(s, kNumClasses), {}};

  // Rasterize the heart inside its frame's bounding region.
  std::array<int, 3> lo{}, hi{};
  for (int ax = 0; ax < 3; ++ax) {
    const auto a = static_cast<std::size_t>(ax);
    lo[a] = std::max(0, static_cast<int>(std::floor(center[a] - half)) - 1);
    hi[a] = std::min(s[ax], static_cast<int>(std::ceil(center[a] + half)) + 1);
  }
  for (int z = lo[0]; z < hi[0]; ++z)
    for (int y = lo[1]; y < hi[1]; ++y)
      for (int x = lo[2]; x < hi[2]; ++x) {
        const Vec3 p{(z + 0.5 - center[0]) / half, (y + 0.5 - center[1]) / half, (x + 0.5 - center[2]) / half};
        const int label = layout.label_at(p);
        if (label > 0) {
          out.labels.at(z, y, x) = static_cast<std::uint8_t>(label);
          out.image.at(z, y, x) = kClassIntensity[label];
        }
      }
  out.box = ground_truth_box(out.labels);

  // Bright distractors strictly outside the heart box.
  const BBox3D keep_out = expand_box(out.box, 0.05);
  for (int k = 0; k < spec.clutter_count; ++k) {
    for (int attempt = 0; attempt < 64; ++attempt) {
      const double r = rng.uniform(0.04, 0.09) * min_extent;
      const Vec3 radii = scaled(rng, {r, r, r}, 0.7, 1.3);
      const Vec3 c{rng.uniform(0, s.d), rng.uniform(0, s.h), rng.uniform(0, s.w)};
      const float intensity = static_cast<float>(rng.uniform(0.3, 0.95));
      const BBox3D cb = BBox3D::from_center(c[0], c[1], c[2], 2 * radii[0] + 2, 2 * radii[1] + 2, 2 * radii[2] + 2);
      if (boxes_overlap(cb, keep_out)) continue;
      const Ellipsoid e{c, radii};
      const BBox3D clipped = clip_box(cb, s);
      for (int z = static_cast<int>(clipped.z1); z < static_cast<int>(std::ceil(clipped.z2)); ++z)
        for (int y = static_cast<int>(clipped.y1); y < static_cast<int>(std::ceil(clipped.y2)); ++y)
          for (int x = static_cast<int>(clipped.x1); x < static_cast<int>(std::ceil(clipped.x2)); ++x)
            if (e.level({z + 0.5, y + 0.5, x + 0.5}) <= 1.0) out.image.at(z, y, x) = intensity;
      break;
    }
  }

  if (spec.noise_sigma > 0.0)
    for (float& v : out.image.data) v = static_cast<float>(v + spec.noise_sigma * rng.normal());
  return out;
}

BBox3D ground_truth_box(const LabelVolume& labels) {
  int lo[3] = {labels.shape.d, labels.shape.h, labels.shape.w};
  int hi[3] = {-1, -1, -1};
  for (int z = 0; z < labels.shape.d; ++z)
    for (int y = 0; y < labels.shape.h; ++y)
      for (int x = 0; x < labels.shape.w; ++x) {
        if (labels.at(z, y, x) == 0) continue;
        const int p[3] = {z, y, x};
        for (int a = 0; a < 3; ++a) {
          lo[a] = std::min(lo[a], p[a]);
          hi[a] = std::max(hi[a], p[a]);
        }
      }
  if (hi[0] < 0) throw ShapeError("ground_truth_box: label volume has no foreground");
  return {double(lo[0]), double(lo[1]), double(lo[2]), double(hi[0] + 1), double(hi[1] + 1), double(hi[2] + 1)};
}

namespace {

std::string sample_stem(int i) {
  std::ostringstream os;
  os << "sample_" << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

}  // namespace

std::filesystem::path make_dataset(const PhantomSpec& spec, int count, std::uint64_t seed,
                                   const std::filesystem::path& out_dir) {
  if (count < 1) throw ShapeError("make_dataset: count must be >= 1");
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  Manifest manifest;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t s = seed + static_cast<std::uint64_t>(i);
    const PhantomSample sample = generate_phantom(spec, s);
    const auto stem = sample_stem(i);
    ManifestEntry e{out_dir / (stem + "_image.vol"), out_dir / (stem + "_labels.vol"), sample.box, s};
    save_volume(sample.image, e.image);
    save_labels(sample.labels, e.labels);
    manifest.samples.push_back(std::move(e));
  }
  const auto path = out_dir / "manifest.json";
  write_manifest(manifest, path);
  return path;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  const auto base = path.parent_path();
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& e : manifest.samples) {
    samples.push_back({{"image", e.image.lexically_relative(base).generic_string()},
                       {"labels", e.labels.lexically_relative(base).generic_string()},
                       {"box", e.box.as_array()},
                       {"seed", e.seed}});
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << nlohmann::json{{"samples", samples}}.dump(2) << "\n";
  if (!os) throw IoError("write failed for " + path.string());
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  Manifest m;
  const auto base = path.parent_path();
  try {
    for (const auto& s : j.at("samples")) {
      ManifestEntry e;
      const std::filesystem::path img = s.at("image").get<std::string>();
      const std::filesystem::path lab = s.at("labels").get<std::string>();
      e.image = img.is_absolute() ? img : base / img;
      e.labels = lab.is_absolute() ? lab : base / lab;
      e.box = BBox3D::from_array(s.at("box").get<std::array<double, 6>>());
      e.seed = s.at("seed").get<std::uint64_t>();
      m.samples.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace cfun
