#include "cfun/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cfun/error.hpp"

namespace cfun {

Volume::Volume(Shape3 s, float fill, std::array<float, 3> sp) : shape(s), spacing(sp), data(s.voxels(), fill) {
  if (s.d < 1 || s.h < 1 || s.w < 1) throw ShapeError("volume dims must be >= 1");
}

Tensor4 Volume::to_tensor() const {
  Tensor4 t(1, shape);
  std::copy(data.begin(), data.end(), t.data());
  return t;
}

void Volume::validate() const {
  if (shape.d < 1 || shape.h < 1 || shape.w < 1) throw ShapeError("volume dims must be >= 1");
  if (data.size() != shape.voxels()) throw ShapeError("volume payload does not match shape");
  for (float s : spacing)
    if (!(s > 0.0f) || !std::isfinite(s)) throw FormatError("volume spacing must be positive and finite");
  for (float v : data)
    if (!std::isfinite(v)) throw FormatError("volume contains non-finite values");
}

LabelVolume::LabelVolume(Shape3 s, int classes, std::uint8_t fill)
    : shape(s), num_classes(classes), data(s.voxels(), fill) {
  if (s.d < 1 || s.h < 1 || s.w < 1) throw ShapeError("label dims must be >= 1");
  if (classes < 2 || classes > 256) throw ShapeError("num_classes must be in [2, 256]");
}

void LabelVolume::validate() const {
  if (data.size() != shape.voxels()) throw ShapeError("label payload does not match shape");
  if (num_classes < 2) throw ShapeError("num_classes must be >= 2");
  for (auto v : data)
    if (v >= num_classes) throw ShapeError("label value " + std::to_string(v) + " >= num_classes");
}

void SegMap::validate() const {
  const int c = data.channels();
  const std::size_t m = data.channel_size();
  if (kind == SegKind::Logits) {
    if (!data.all_finite()) throw ShapeError("logits contain non-finite values");
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double sum = 0.0;
    for (int k = 0; k < c; ++k) {
      const float v = data.channel(k)[i];
      if (kind == SegKind::OneHot && v != 0.0f && v != 1.0f) throw ShapeError("one-hot map has non-binary value");
      if (!(v >= 0.0f && v <= 1.0f)) throw ShapeError("probability outside [0,1]");
      sum += v;
    }
    if (kind == SegKind::OneHot ? sum != 1.0 : std::abs(sum - 1.0) > 1e-5)
      throw ShapeError("per-voxel channel sum is not 1");
  }
}

namespace {

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

void put_f32(std::vector<char>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

std::uint32_t get_u32(const std::vector<char>& in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

float get_f32(const std::vector<char>& in, std::size_t pos) { return std::bit_cast<float>(get_u32(in, pos)); }

constexpr std::size_t kHeaderBytes = 36;

std::vector<char> header(std::uint32_t dtype, Shape3 s, const std::array<float, 3>& spacing) {
  std::vector<char> out(kVolumeMagic, kVolumeMagic + 8);
  put_u32(out, dtype);
  put_u32(out, static_cast<std::uint32_t>(s.d));
  put_u32(out, static_cast<std::uint32_t>(s.h));
  put_u32(out, static_cast<std::uint32_t>(s.w));
  for (float f : spacing) put_f32(out, f);
  return out;
}

void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct Header {
  std::uint32_t dtype;
  Shape3 shape;
  std::array<float, 3> spacing;
};

Header parse_header(const std::vector<char>& bytes, const std::filesystem::path& path) {
  if (bytes.size() < kHeaderBytes) throw FormatError(path.string() + ": truncated header");
  if (std::memcmp(bytes.data(), kVolumeMagic, 8) != 0) throw FormatError(path.string() + ": bad magic");
  Header h{};
  h.dtype = get_u32(bytes, 8);
  const auto d = get_u32(bytes, 12), hh = get_u32(bytes, 16), w = get_u32(bytes, 20);
  if (d < 1 || hh < 1 || w < 1 || d > (1u << 16) || hh > (1u << 16) || w > (1u << 16))
    throw FormatError(path.string() + ": invalid dims");
  h.shape = {static_cast<int>(d), static_cast<int>(hh), static_cast<int>(w)};
  for (int i = 0; i < 3; ++i) h.spacing[static_cast<std::size_t>(i)] = get_f32(bytes, 24 + 4 * static_cast<std::size_t>(i));
  for (float s : h.spacing)
    if (!(s > 0.0f) || !std::isfinite(s)) throw FormatError(path.string() + ": invalid spacing");
  return h;
}

}  // namespace

void save_volume(const Volume& vol, const std::filesystem::path& path) {
  vol.validate();
  auto bytes = header(kDtypeFloat32, vol.shape, vol.spacing);
  bytes.reserve(bytes.size() + 4 * vol.data.size());
  for (float v : vol.data) put_f32(bytes, v);
  write_file(path, bytes);
}

Volume load_volume(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const Header h = parse_header(bytes, path);
  if (h.dtype != kDtypeFloat32) throw FormatError(path.string() + ": not a float32 volume");
  const std::size_t n = h.shape.voxels();
  if (bytes.size() != kHeaderBytes + 4 * n) throw FormatError(path.string() + ": payload size mismatch");
  Volume vol(h.shape, 0.0f, h.spacing);
  for (std::size_t i = 0; i < n; ++i) vol.data[i] = get_f32(bytes, kHeaderBytes + 4 * i);
  vol.validate();
  return vol;
}

void save_labels(const LabelVolume& labels, const std::filesystem::path& path) {
  labels.validate();
  auto bytes = header(kDtypeLabel8, labels.shape, labels.spacing);
  bytes.insert(bytes.end(), labels.data.begin(), labels.data.end());
  put_u32(bytes, static_cast<std::uint32_t>(labels.num_classes));
  write_file(path, bytes);
}

LabelVolume load_labels(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const Header h = parse_header(bytes, path);
  if (h.dtype != kDtypeLabel8) throw FormatError(path.string() + ": not a label volume");
  const std::size_t n = h.shape.voxels();
  if (bytes.size() != kHeaderBytes + n + 4) throw FormatError(path.string() + ": payload size mismatch");
  const auto classes = get_u32(bytes, kHeaderBytes + n);
  if (classes < 2 || classes > 256) throw FormatError(path.string() + ": invalid num_classes");
  LabelVolume labels(h.shape, static_cast<int>(classes));
  labels.spacing = h.spacing;
  std::copy(bytes.begin() + kHeaderBytes, bytes.begin() + static_cast<std::ptrdiff_t>(kHeaderBytes + n),
            reinterpret_cast<char*>(labels.data.data()));
  try {
    labels.validate();
  } catch (const ShapeError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return labels;
}

double corner_aligned_coord(int i, int n_in, int n_out) {
  if (n_out == 1) return 0.5 * (n_in - 1);
  return static_cast<double>(i) * (static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1));
}

namespace {

struct AxisTap {
  int i0;
  int i1;
  double f;
};

std::vector<AxisTap> axis_taps(int n_in, int n_out) {
  std::vector<AxisTap> taps(static_cast<std::size_t>(n_out));
  for (int i = 0; i < n_out; ++i) {
    const double s = corner_aligned_coord(i, n_in, n_out);
    int i0 = static_cast<int>(std::floor(s));
    i0 = std::clamp(i0, 0, std::max(0, n_in - 2));
    const int i1 = std::min(i0 + 1, n_in - 1);
    taps[static_cast<std::size_t>(i)] = {i0, i1, n_in == 1 ? 0.0 : s - i0};
  }
  return taps;
}

void check_target(Shape3 target) {
  if (target.d < 1 || target.h < 1 || target.w < 1) throw ShapeError("target dims must be >= 1");
}

}  // namespace

Volume resample_trilinear(const Volume& vol, Shape3 target) {
  check_target(target);
  const auto tz = axis_taps(vol.shape.d, target.d);
  const auto ty = axis_taps(vol.shape.h, target.h);
  const auto tx = axis_taps(vol.shape.w, target.w);
  std::array<float, 3> spacing{vol.spacing[0] * vol.shape.d / target.d, vol.spacing[1] * vol.shape.h / target.h,
                               vol.spacing[2] * vol.shape.w / target.w};
  Volume out(target, 0.0f, spacing);
  for (int z = 0; z < target.d; ++z) {
    const auto& a = tz[static_cast<std::size_t>(z)];
    for (int y = 0; y < target.h; ++y) {
      const auto& b = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < target.w; ++x) {
        const auto& c = tx[static_cast<std::size_t>(x)];
        auto line = [&](int zz, int yy) {
          return std::lerp(static_cast<double>(vol.at(zz, yy, c.i0)), static_cast<double>(vol.at(zz, yy, c.i1)), c.f);
        };
        const double v0 = std::lerp(line(a.i0, b.i0), line(a.i0, b.i1), b.f);
        const double v1 = std::lerp(line(a.i1, b.i0), line(a.i1, b.i1), b.f);
        out.at(z, y, x) = static_cast<float>(std::lerp(v0, v1, a.f));
      }
    }
  }
  return out;
}

LabelVolume resample_nearest(const LabelVolume& labels, Shape3 target) {
  check_target(target);
  auto nearest = [](int n_in, int n_out) {
    std::vector<int> idx(static_cast<std::size_t>(n_out));
    for (int i = 0; i < n_out; ++i)
      idx[static_cast<std::size_t>(i)] =
          std::clamp(static_cast<int>(std::lround(corner_aligned_coord(i, n_in, n_out))), 0, n_in - 1);
    return idx;
  };
  const auto iz = nearest(labels.shape.d, target.d);
  const auto iy = nearest(labels.shape.h, target.h);
  const auto ix = nearest(labels.shape.w, target.w);
  LabelVolume out(target, labels.num_classes);
  out.spacing = {labels.spacing[0] * labels.shape.d / target.d, labels.spacing[1] * labels.shape.h / target.h,
                 labels.spacing[2] * labels.shape.w / target.w};
  for (int z = 0; z < target.d; ++z)
    for (int y = 0; y < target.h; ++y)
      for (int x = 0; x < target.w; ++x)
        out.at(z, y, x) = labels.at(iz[static_cast<std::size_t>(z)], iy[static_cast<std::size_t>(y)],
                                    ix[static_cast<std::size_t>(x)]);
  return out;
}

Volume normalize_intensity(const Volume& vol, float lo, float hi) {
  if (!(lo < hi)) throw ShapeError("normalize_intensity requires lo < hi");
  Volume out = vol;
  const double range = static_cast<double>(hi) - lo;
  for (float& v : out.data) v = static_cast<float>((std::clamp(v, lo, hi) - static_cast<double>(lo)) / range);
  return out;
}

SegMap one_hot(const LabelVolume& labels) {
  labels.validate();
  SegMap map{Tensor4(labels.num_classes, labels.shape), SegKind::OneHot};
  const std::size_t m = labels.shape.voxels();
  for (std::size_t i = 0; i < m; ++i) map.data.channel(labels.data[i])[i] = 1.0f;
  return map;
}

LabelVolume argmax(const SegMap& map) {
  const int c = map.data.channels();
  LabelVolume out(map.data.spatial(), c);
  const std::size_t m = map.data.channel_size();
  for (std::size_t i = 0; i < m; ++i) {
    int best = 0;
    float bv = map.data.channel(0)[i];
    for (int k = 1; k < c; ++k) {
      const float v = map.data.channel(k)[i];
      if (v > bv) {
        bv = v;
        best = k;
      }
    }
    out.data[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

}  // namespace cfun
