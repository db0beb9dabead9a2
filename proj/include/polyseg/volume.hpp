#pragma once

// Scalar 3D volumes with physical spacing, the on-disk header/raw format,
// separable Gaussian smoothing and spacing-aware resampling.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "polyseg/error.hpp"

namespace polyseg {

namespace fs = std::filesystem;

/// Voxel counts in (z, y, x) order.
using Dims3 = std::array<std::size_t, 3>;
/// Millimetres per voxel in (z, y, x) order.
using Spacing3 = std::array<double, 3>;

enum class VolumeKind { intensity_hu, label, probability };

enum class ResampleMode { nearest, trilinear, cubic_bspline };

inline std::string_view to_string(VolumeKind kind) {
  switch (kind) {
    case VolumeKind::intensity_hu: return "intensity-HU";
    case VolumeKind::label: return "label";
    case VolumeKind::probability: return "probability";
  }
  return "?";
}

inline VolumeKind parse_volume_kind(std::string_view s) {
  if (s == "intensity-HU") return VolumeKind::intensity_hu;
  if (s == "label") return VolumeKind::label;
  if (s == "probability") return VolumeKind::probability;
  throw DataError("unknown volume kind '" + std::string(s) + "'");
}

inline std::size_t voxel_count(const Dims3& d) { return d[0] * d[1] * d[2]; }

/// Dense z-major scalar grid. Invariants are checked on construction and the
/// object is immutable afterwards.
class Volume {
 public:
  Volume(Dims3 dims, Spacing3 spacing, VolumeKind kind, std::vector<float> data)
      : dims_(dims), spacing_(spacing), kind_(kind), data_(std::move(data)) {
    validate();
  }

  static Volume filled(Dims3 dims, Spacing3 spacing, VolumeKind kind, float value) {
    return Volume(dims, spacing, kind, std::vector<float>(voxel_count(dims), value));
  }

  const Dims3& dims() const { return dims_; }
  const Spacing3& spacing() const { return spacing_; }
  VolumeKind kind() const { return kind_; }
  std::span<const float> data() const { return data_; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * dims_[1] + y) * dims_[2] + x;
  }
  float operator()(std::size_t z, std::size_t y, std::size_t x) const {
    return data_[index(z, y, x)];
  }
  float operator[](std::size_t i) const { return data_[i]; }

  bool same_grid(const Volume& other) const {
    return dims_ == other.dims_ && spacing_ == other.spacing_;
  }

  /// Copy of the data, for building derived volumes.
  std::vector<float> values() const { return data_; }

 private:
  void validate() const {
    for (auto d : dims_) detail::require(d > 0, "volume dims must be positive");
    for (auto s : spacing_) {
      detail::require(std::isfinite(s) && s > 0.0, "invalid spacing: components must be positive");
    }
    detail::require(data_.size() == voxel_count(dims_),
                    "volume data length " + std::to_string(data_.size()) +
                        " does not match dims product " + std::to_string(voxel_count(dims_)));
    switch (kind_) {
      case VolumeKind::label:
        for (float v : data_) {
          detail::require(v >= 0.0f && v == std::floor(v) && v < 16777216.0f,
                          "label volume holds a non-integer or negative value");
        }
        break;
      case VolumeKind::probability:
        for (float v : data_) {
          detail::require(v >= 0.0f && v <= 1.0f, "probability volume value outside [0,1]");
        }
        break;
      case VolumeKind::intensity_hu:
        for (float v : data_) detail::require(std::isfinite(v), "non-finite intensity value");
        break;
    }
  }

  Dims3 dims_;
  Spacing3 spacing_;
  VolumeKind kind_;
  std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// File format: <name>.volhdr.json + <name>.vol.raw (little-endian float32).

struct VolumePaths {
  fs::path header;
  fs::path raw;
};

inline constexpr std::string_view kHeaderSuffix = ".volhdr.json";
inline constexpr std::string_view kRawSuffix = ".vol.raw";

/// Accepts either the base path ("dir/name") or the header path itself.
inline VolumePaths volume_paths(const fs::path& path) {
  std::string s = path.string();
  if (s.size() > kHeaderSuffix.size() &&
      s.compare(s.size() - kHeaderSuffix.size(), kHeaderSuffix.size(), kHeaderSuffix) == 0) {
    s.resize(s.size() - kHeaderSuffix.size());
  }
  return {fs::path(s + std::string(kHeaderSuffix)), fs::path(s + std::string(kRawSuffix))};
}

namespace detail {

inline std::uint32_t to_le32(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

}  // namespace detail

inline void write_volume(const Volume& v, const fs::path& path) {
  const auto paths = volume_paths(path);
  if (paths.header.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(paths.header.parent_path(), ec);
  }

  nlohmann::json hdr;
  hdr["dims"] = {v.dims()[0], v.dims()[1], v.dims()[2]};
  hdr["spacing_mm"] = {v.spacing()[0], v.spacing()[1], v.spacing()[2]};
  hdr["kind"] = std::string(to_string(v.kind()));
  hdr["data_file"] = paths.raw.filename().string();

  std::ofstream h(paths.header, std::ios::trunc);
  if (!h) throw IoError("cannot write " + paths.header.string());
  h << hdr.dump(2) << '\n';
  if (!h) throw IoError("write failed: " + paths.header.string());

  std::vector<std::uint32_t> words(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    words[i] = detail::to_le32(std::bit_cast<std::uint32_t>(v[i]));
  }
  std::ofstream r(paths.raw, std::ios::binary | std::ios::trunc);
  if (!r) throw IoError("cannot write " + paths.raw.string());
  r.write(reinterpret_cast<const char*>(words.data()),
          static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (!r) throw IoError("write failed: " + paths.raw.string());
}

inline Volume read_volume(const fs::path& path) {
  const auto paths = volume_paths(path);
  std::ifstream h(paths.header);
  if (!h) throw IoError("missing volume header " + paths.header.string());

  nlohmann::json hdr;
  try {
    hdr = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed volume header " + paths.header.string() + ": " + e.what());
  }

  Dims3 dims{};
  Spacing3 spacing{};
  VolumeKind kind{};
  fs::path raw_path;
  try {
    const auto& d = hdr.at("dims");
    const auto& s = hdr.at("spacing_mm");
    detail::require(d.is_array() && d.size() == 3, "header dims must have 3 entries");
    detail::require(s.is_array() && s.size() == 3, "header spacing_mm must have 3 entries");
    for (int i = 0; i < 3; ++i) {
      const auto di = d[i].get<long long>();
      detail::require(di > 0, "header dims must be positive");
      dims[i] = static_cast<std::size_t>(di);
      spacing[i] = s[i].get<double>();
      detail::require(spacing[i] > 0.0, "invalid spacing: components must be positive");
    }
    kind = parse_volume_kind(hdr.at("kind").get<std::string>());
    raw_path = paths.header.parent_path() / hdr.at("data_file").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad volume header " + paths.header.string() + ": " + e.what());
  }

  std::ifstream r(raw_path, std::ios::binary | std::ios::ate);
  if (!r) throw IoError("missing raw file " + raw_path.string());
  const auto bytes = static_cast<std::size_t>(r.tellg());
  const std::size_t expected = voxel_count(dims) * sizeof(float);
  if (bytes != expected) {
    throw DataError("length mismatch: " + raw_path.string() + " holds " + std::to_string(bytes) +
                    " bytes, header implies " + std::to_string(expected));
  }
  r.seekg(0);
  std::vector<std::uint32_t> words(voxel_count(dims));
  r.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));
  if (!r) throw IoError("read failed: " + raw_path.string());

  std::vector<float> data(words.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    data[i] = std::bit_cast<float>(detail::to_le32(words[i]));
  }
  return Volume(dims, spacing, kind, std::move(data));
}

// ---------------------------------------------------------------------------
// Smoothing

namespace detail {

/// Reflect index into [0, n) without repeating the edge sample (d c b | a b c d).
inline std::ptrdiff_t mirror_index(std::ptrdiff_t i, std::ptrdiff_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// Truncated at ±ceil(3σ) and renormalized to unit sum.
inline std::vector<double> gaussian_kernel(double sigma) {
  if (sigma == 0.0) return {1.0};
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = w;
    sum += w;
  }
  for (auto& w : k) w /= sum;
  return k;
}

/// Convolve `data` along one axis in place; stride/extent describe the axis.
inline void convolve_axis(std::vector<double>& data, const Dims3& dims, int axis,
                          const std::vector<double>& kernel) {
  if (kernel.size() == 1) return;
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const auto n = static_cast<std::ptrdiff_t>(dims[axis]);
  const std::size_t stride = axis == 0 ? dims[1] * dims[2] : axis == 1 ? dims[2] : 1;
  const std::size_t lines = voxel_count(dims) / dims[axis];

  std::vector<double> line(static_cast<std::size_t>(n));
  for (std::size_t l = 0; l < lines; ++l) {
    // Decompose the line number into the two orthogonal coordinates.
    std::size_t base = 0;
    if (axis == 0) {
      base = l;
    } else if (axis == 1) {
      base = (l / dims[2]) * dims[1] * dims[2] + (l % dims[2]);
    } else {
      base = l * dims[2];
    }
    for (std::ptrdiff_t i = 0; i < n; ++i) line[i] = data[base + static_cast<std::size_t>(i) * stride];
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::ptrdiff_t k = -radius; k <= radius; ++k) {
        acc += kernel[static_cast<std::size_t>(k + radius)] * line[mirror_index(i - k, n)];
      }
      data[base + static_cast<std::size_t>(i) * stride] = acc;
    }
  }
}

}  // namespace detail

/// Separable Gaussian filter with per-axis sigma in voxels and mirror boundary.
inline Volume gaussian_smooth(const Volume& v, const std::array<double, 3>& sigma_vox) {
  detail::require_arg(v.kind() == VolumeKind::intensity_hu,
                      "gaussian_smooth applies to intensity volumes only");
  for (double s : sigma_vox) {
    detail::require_arg(std::isfinite(s) && s >= 0.0, "gaussian sigma must be nonnegative");
  }
  std::vector<double> work(v.data().begin(), v.data().end());
  for (int axis = 0; axis < 3; ++axis) {
    detail::convolve_axis(work, v.dims(), axis, detail::gaussian_kernel(sigma_vox[axis]));
  }
  std::vector<float> out(work.size());
  std::transform(work.begin(), work.end(), out.begin(),
                 [](double x) { return static_cast<float>(x); });
  return Volume(v.dims(), v.spacing(), v.kind(), std::move(out));
}

/// Default anti-alias sigma (voxels) when going from `spacing` to `target`: f/2
/// for a downsampling factor f, zero when not downsampling.
inline std::array<double, 3> antialias_sigma(const Spacing3& spacing, const Spacing3& target) {
  std::array<double, 3> s{};
  for (int i = 0; i < 3; ++i) {
    const double f = target[i] / spacing[i];
    s[i] = f > 1.0 ? f / 2.0 : 0.0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Resampling

inline Dims3 resampled_dims(const Dims3& dims, const Spacing3& spacing, const Spacing3& target) {
  Dims3 out{};
  for (int i = 0; i < 3; ++i) {
    const double extent = static_cast<double>(dims[i]) * spacing[i] / target[i];
    out[i] = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(extent - 1e-9)));
  }
  return out;
}

namespace detail {

/// In-place cubic B-spline prefilter along one line (mirror boundary).
inline void bspline_prefilter_line(std::vector<double>& c) {
  const auto n = static_cast<std::ptrdiff_t>(c.size());
  if (n < 2) return;
  const double z = std::sqrt(3.0) - 2.0;
  const double lambda = (1.0 - z) * (1.0 - 1.0 / z);
  for (auto& x : c) x *= lambda;

  // Causal initialization over the mirrored signal: a truncated geometric sum
  // when the line is long enough, the exact closed form otherwise.
  const auto horizon = static_cast<std::ptrdiff_t>(std::ceil(std::log(1e-12) / std::log(std::abs(z))));
  if (horizon < n) {
    double sum = c[0];
    double zn = z;
    for (std::ptrdiff_t k = 1; k < horizon; ++k) {
      sum += zn * c[k];
      zn *= z;
    }
    c[0] = sum;
  } else {
    double zn = z;
    const double iz = 1.0 / z;
    double z2n = std::pow(z, static_cast<double>(n - 1));
    double sum = c[0] + z2n * c[n - 1];
    z2n *= z2n * iz;
    for (std::ptrdiff_t k = 1; k <= n - 2; ++k) {
      sum += (zn + z2n) * c[k];
      zn *= z;
      z2n *= iz;
    }
    c[0] = sum / (1.0 - zn * zn);
  }
  for (std::ptrdiff_t k = 1; k < n; ++k) c[k] += z * c[k - 1];
  c[n - 1] = (z / (z * z - 1.0)) * (z * c[n - 2] + c[n - 1]);
  for (std::ptrdiff_t k = n - 2; k >= 0; --k) c[k] = z * (c[k + 1] - c[k]);
}

inline std::array<double, 4> bspline_weights(double t) {
  const double t2 = t * t;
  const double t3 = t2 * t;
  return {(1.0 - t) * (1.0 - t) * (1.0 - t) / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
          (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0, t3 / 6.0};
}

}  // namespace detail

/// Pull back every output voxel centre (origin at the first voxel centre) into
/// input voxel coordinates; sample positions are clamped to the input grid.
/// `out_dims` overrides the default ceil(dims * spacing / target) size.
inline Volume resample(const Volume& v, const Spacing3& target_spacing, ResampleMode mode,
                       std::optional<Dims3> out_dims = std::nullopt) {
  for (double s : target_spacing) {
    detail::require_arg(std::isfinite(s) && s > 0.0, "target spacing must be positive");
  }
  detail::require_arg(v.kind() != VolumeKind::label || mode == ResampleMode::nearest,
                      "label volumes can only be resampled with nearest interpolation");

  const Dims3 od = out_dims.value_or(resampled_dims(v.dims(), v.spacing(), target_spacing));
  const Dims3& id = v.dims();
  if (od == id && target_spacing == v.spacing()) return v;

  std::array<double, 3> scale{};
  for (int i = 0; i < 3; ++i) scale[i] = target_spacing[i] / v.spacing()[i];
  auto coord = [&](int axis, std::size_t i) {
    const double u = static_cast<double>(i) * scale[axis];
    return std::clamp(u, 0.0, static_cast<double>(id[axis] - 1));
  };

  std::vector<float> out(voxel_count(od));
  auto in = v.data();

  if (mode == ResampleMode::nearest) {
    for (std::size_t z = 0; z < od[0]; ++z) {
      const auto iz = static_cast<std::size_t>(std::lround(coord(0, z)));
      for (std::size_t y = 0; y < od[1]; ++y) {
        const auto iy = static_cast<std::size_t>(std::lround(coord(1, y)));
        for (std::size_t x = 0; x < od[2]; ++x) {
          const auto ix = static_cast<std::size_t>(std::lround(coord(2, x)));
          out[(z * od[1] + y) * od[2] + x] = in[v.index(iz, iy, ix)];
        }
      }
    }
  } else if (mode == ResampleMode::trilinear) {
    auto split = [&](int axis, std::size_t i) {
      const double u = coord(axis, i);
      auto i0 = static_cast<std::size_t>(std::floor(u));
      i0 = std::min(i0, id[axis] - 1);
      const std::size_t i1 = std::min(i0 + 1, id[axis] - 1);
      return std::tuple{i0, i1, u - static_cast<double>(i0)};
    };
    for (std::size_t z = 0; z < od[0]; ++z) {
      const auto [z0, z1, fz] = split(0, z);
      for (std::size_t y = 0; y < od[1]; ++y) {
        const auto [y0, y1, fy] = split(1, y);
        for (std::size_t x = 0; x < od[2]; ++x) {
          const auto [x0, x1, fx] = split(2, x);
          auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
          const double c00 = lerp(in[v.index(z0, y0, x0)], in[v.index(z0, y0, x1)], fx);
          const double c01 = lerp(in[v.index(z0, y1, x0)], in[v.index(z0, y1, x1)], fx);
          const double c10 = lerp(in[v.index(z1, y0, x0)], in[v.index(z1, y0, x1)], fx);
          const double c11 = lerp(in[v.index(z1, y1, x0)], in[v.index(z1, y1, x1)], fx);
          const double val = lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz);
          out[(z * od[1] + y) * od[2] + x] = static_cast<float>(val);
        }
      }
    }
  } else {
    // Interpolating cubic B-spline: prefilter to coefficients, then evaluate.
    std::vector<double> coef(in.begin(), in.end());
    for (int axis = 0; axis < 3; ++axis) {
      const std::size_t n = id[axis];
      const std::size_t stride = axis == 0 ? id[1] * id[2] : axis == 1 ? id[2] : 1;
      const std::size_t lines = voxel_count(id) / n;
      std::vector<double> line(n);
      for (std::size_t l = 0; l < lines; ++l) {
        std::size_t base = axis == 0   ? l
                           : axis == 1 ? (l / id[2]) * id[1] * id[2] + (l % id[2])
                                       : l * id[2];
        for (std::size_t i = 0; i < n; ++i) line[i] = coef[base + i * stride];
        detail::bspline_prefilter_line(line);
        for (std::size_t i = 0; i < n; ++i) coef[base + i * stride] = line[i];
      }
    }
    auto taps = [&](int axis, std::size_t i) {
      const double u = coord(axis, i);
      const double fl = std::floor(u);
      const auto w = detail::bspline_weights(u - fl);
      std::array<std::size_t, 4> idx{};
      for (int k = 0; k < 4; ++k) {
        idx[k] = static_cast<std::size_t>(detail::mirror_index(
            static_cast<std::ptrdiff_t>(fl) - 1 + k, static_cast<std::ptrdiff_t>(id[axis])));
      }
      return std::pair{idx, w};
    };
    for (std::size_t z = 0; z < od[0]; ++z) {
      const auto [iz, wz] = taps(0, z);
      for (std::size_t y = 0; y < od[1]; ++y) {
        const auto [iy, wy] = taps(1, y);
        for (std::size_t x = 0; x < od[2]; ++x) {
          const auto [ix, wx] = taps(2, x);
          double acc = 0.0;
          for (int a = 0; a < 4; ++a) {
            for (int b = 0; b < 4; ++b) {
              const double wab = wz[a] * wy[b];
              const std::size_t row = (iz[a] * id[1] + iy[b]) * id[2];
              for (int c = 0; c < 4; ++c) acc += wab * wx[c] * coef[row + ix[c]];
            }
          }
          float val = static_cast<float>(acc);
          if (v.kind() == VolumeKind::probability) val = std::clamp(val, 0.0f, 1.0f);
          out[(z * od[1] + y) * od[2] + x] = val;
        }
      }
    }
  }
  return Volume(od, target_spacing, v.kind(), std::move(out));
}

}  // namespace polyseg
