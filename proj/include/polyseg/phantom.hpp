#pragma once

// Synthetic chest phantoms: two ellipsoidal lungs in soft tissue, optional
// ground-glass and consolidation blobs grown by random flood fill, specific or
// generic labels, and an optional five-lobe subdivision.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "polyseg/error.hpp"
#include "polyseg/label_hierarchy.hpp"
#include "polyseg/volume.hpp"

namespace polyseg {

/// HU bands used by the generator.
namespace hu {
inline constexpr double kLungMean = -800.0;
inline constexpr double kLungSd = 50.0;
inline constexpr double kLungMax = -600.0;
inline constexpr double kLungMin = -1000.0;
inline constexpr double kTissueMean = 40.0;
inline constexpr double kTissueSd = 20.0;
inline constexpr double kGroundGlassLo = -500.0;
inline constexpr double kGroundGlassHi = -100.0;
inline constexpr double kConsolidationLo = -100.0;
inline constexpr double kConsolidationHi = 100.0;
}  // namespace hu

/// Lobe labels in the five-label volume; 0 is outside the lungs.
namespace lobe {
inline constexpr int kRightUpper = 1;
inline constexpr int kRightMiddle = 2;
inline constexpr int kRightLower = 3;
inline constexpr int kLeftUpper = 4;
inline constexpr int kLeftLower = 5;
inline constexpr int kCount = 5;
}  // namespace lobe

struct PhantomConfig {
  Dims3 dims{64, 64, 64};
  Spacing3 spacing{1.0, 1.0, 1.0};
  double consolidation_fraction = 0.0;
  double ground_glass_fraction = 0.0;
  LabelLevel label_level = LabelLevel::specific;
  bool lobe_planes = false;
  std::uint64_t seed = 0;

  void validate() const {
    for (auto d : dims) detail::require_arg(d >= 8, "phantom dims must be at least 8 per axis");
    for (auto s : spacing) detail::require_arg(s > 0.0, "phantom spacing must be positive");
    detail::require_arg(consolidation_fraction >= 0.0 && consolidation_fraction < 1.0,
                        "consolidation_fraction must lie in [0,1)");
    detail::require_arg(ground_glass_fraction >= 0.0 && ground_glass_fraction < 1.0,
                        "ground_glass_fraction must lie in [0,1)");
    detail::require_arg(consolidation_fraction + ground_glass_fraction < 1.0,
                        "consolidation + ground-glass fractions must be < 1");
  }

  nlohmann::json to_json() const {
    return {{"dims", dims},
            {"spacing_mm", spacing},
            {"consolidation_fraction", consolidation_fraction},
            {"ground_glass_fraction", ground_glass_fraction},
            {"label_level", std::string(to_string(label_level))},
            {"lobe_planes", lobe_planes},
            {"seed", seed}};
  }

  static PhantomConfig from_json(const nlohmann::json& j) {
    PhantomConfig c;
    try {
      if (j.contains("dims")) c.dims = j["dims"].get<Dims3>();
      if (j.contains("spacing_mm")) c.spacing = j["spacing_mm"].get<Spacing3>();
      c.consolidation_fraction = j.value("consolidation_fraction", c.consolidation_fraction);
      c.ground_glass_fraction = j.value("ground_glass_fraction", c.ground_glass_fraction);
      if (j.contains("label_level")) c.label_level = parse_label_level(j["label_level"].get<std::string>());
      c.lobe_planes = j.value("lobe_planes", c.lobe_planes);
      c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("bad phantom config: ") + e.what());
    }
    return c;
  }
};

struct Phantom {
  Volume ct;
  LabelVolume label;
  std::optional<Volume> lobes;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> axes;

  bool contains(std::size_t z, std::size_t y, std::size_t x) const {
    const double dz = (static_cast<double>(z) - center[0]) / axes[0];
    const double dy = (static_cast<double>(y) - center[1]) / axes[1];
    const double dx = (static_cast<double>(x) - center[2]) / axes[2];
    return dz * dz + dy * dy + dx * dx <= 1.0;
  }
};

/// 0 = tissue, 1 = left lung, 2 = right lung (left sits at high x).
inline std::vector<std::uint8_t> lung_sides(const Dims3& d, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double D = static_cast<double>(d[0]), H = static_cast<double>(d[1]), W = static_cast<double>(d[2]);
  for (int attempt = 0; attempt < 64; ++attempt) {
    auto draw = [&](double sign) {
      Ellipsoid e{};
      e.axes = {D * (0.30 + 0.08 * u(rng)), H * (0.24 + 0.08 * u(rng)), W * (0.15 + 0.04 * u(rng))};
      const double gap = std::max(3.0, 0.06 * W);
      e.center = {(D - 1) / 2.0 + D * 0.04 * (u(rng) - 0.5), (H - 1) / 2.0 + H * 0.04 * (u(rng) - 0.5),
                  (W - 1) / 2.0 + sign * (gap / 2.0 + e.axes[2] + W * 0.03 * u(rng))};
      return e;
    };
    const Ellipsoid right = draw(-1.0);
    const Ellipsoid left = draw(+1.0);

    std::vector<std::uint8_t> side(voxel_count(d), 0);
    std::ptrdiff_t right_max_x = -1;
    auto left_min_x = static_cast<std::ptrdiff_t>(d[2]);
    std::size_t n_left = 0, n_right = 0;
    for (std::size_t z = 0; z < d[0]; ++z) {
      for (std::size_t y = 0; y < d[1]; ++y) {
        for (std::size_t x = 0; x < d[2]; ++x) {
          const std::size_t i = (z * d[1] + y) * d[2] + x;
          const bool in_r = right.contains(z, y, x);
          const bool in_l = left.contains(z, y, x);
          if (in_r && in_l) continue;
          if (in_l) {
            side[i] = 1;
            ++n_left;
            left_min_x = std::min(left_min_x, static_cast<std::ptrdiff_t>(x));
          } else if (in_r) {
            side[i] = 2;
            ++n_right;
            right_max_x = std::max(right_max_x, static_cast<std::ptrdiff_t>(x));
          }
        }
      }
    }
    if (n_left > 0 && n_right > 0 && left_min_x - right_max_x - 1 >= 2) return side;
  }
  throw DataError("could not place two separated lungs in the phantom grid");
}

/// Grow `target` voxels of `mark` inside `allowed` (value `free`) by random
/// flood fill from seeds drawn from `seed_pool`; blobs are capped at `blob_cap`.
inline void grow_blobs(std::vector<std::uint8_t>& state, const Dims3& d, std::uint8_t free, std::uint8_t mark,
                       std::size_t target, std::size_t blob_cap, const std::vector<std::size_t>& seed_pool,
                       std::mt19937_64& rng) {
  std::size_t grown = 0;
  std::vector<std::size_t> frontier;
  std::size_t seed_tries = 0;
  while (grown < target) {
    std::vector<std::size_t> candidates;
    for (auto s : seed_pool) {
      if (state[s] == free) candidates.push_back(s);
    }
    if (candidates.empty()) {
      for (std::size_t i = 0; i < state.size(); ++i) {
        if (state[i] == free) candidates.push_back(i);
      }
    }
    require(!candidates.empty(), "pathology fractions infeasible for the generated lung size");
    require(++seed_tries < 100000, "pathology growth did not converge");

    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    frontier.assign(1, candidates[pick(rng)]);
    std::size_t blob = 0;
    const std::size_t blob_target = std::min(blob_cap, target - grown);
    while (!frontier.empty() && blob < blob_target) {
      std::uniform_int_distribution<std::size_t> fp(0, frontier.size() - 1);
      const std::size_t k = fp(rng);
      const std::size_t i = frontier[k];
      frontier[k] = frontier.back();
      frontier.pop_back();
      if (state[i] != free) continue;
      state[i] = mark;
      ++blob;
      const std::size_t x = i % d[2];
      const std::size_t y = (i / d[2]) % d[1];
      const std::size_t z = i / (d[1] * d[2]);
      if (x > 0) frontier.push_back(i - 1);
      if (x + 1 < d[2]) frontier.push_back(i + 1);
      if (y > 0) frontier.push_back(i - d[2]);
      if (y + 1 < d[1]) frontier.push_back(i + d[2]);
      if (z > 0) frontier.push_back(i - d[1] * d[2]);
      if (z + 1 < d[0]) frontier.push_back(i + d[1] * d[2]);
    }
    grown += blob;
  }
}

/// Lung voxels with at least one non-lung 6-neighbour (out of bounds counts).
inline std::vector<std::size_t> lung_boundary(const std::vector<std::uint8_t>& side, const Dims3& d) {
  std::vector<std::size_t> out;
  for (std::size_t z = 0; z < d[0]; ++z) {
    for (std::size_t y = 0; y < d[1]; ++y) {
      for (std::size_t x = 0; x < d[2]; ++x) {
        const std::size_t i = (z * d[1] + y) * d[2] + x;
        if (!side[i]) continue;
        const bool edge = x == 0 || y == 0 || z == 0 || x + 1 == d[2] || y + 1 == d[1] || z + 1 == d[0] ||
                          !side[i - 1] || !side[i + 1] || !side[i - d[2]] || !side[i + d[2]] ||
                          !side[i - d[1] * d[2]] || !side[i + d[1] * d[2]];
        if (edge) out.push_back(i);
      }
    }
  }
  return out;
}

/// Value at quantile q of `v` (nth_element on a copy).
inline double quantile(std::vector<double> v, double q) {
  const auto k = static_cast<std::size_t>(q * static_cast<double>(v.size() - 1));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

/// Oblique plane splits each lung into upper/lower; an axial plane splits the
/// right upper part into upper/middle. Thresholds sit at within-lung quantiles
/// so every lobe is nonempty.
inline std::vector<float> lobe_labels(const std::vector<std::uint8_t>& side, const Dims3& d) {
  std::vector<float> lobes(side.size(), 0.0f);
  auto oblique = [&](std::size_t i) {
    const double y = static_cast<double>((i / d[2]) % d[1]) / static_cast<double>(d[1]);
    const double z = static_cast<double>(i / (d[1] * d[2])) / static_cast<double>(d[0]);
    return z + 0.6 * y;
  };
  auto axial = [&](std::size_t i) { return static_cast<double>(i / (d[1] * d[2])); };

  for (std::uint8_t s : {std::uint8_t{1}, std::uint8_t{2}}) {
    std::vector<std::size_t> idx;
    std::vector<double> proj;
    for (std::size_t i = 0; i < side.size(); ++i) {
      if (side[i] == s) {
        idx.push_back(i);
        proj.push_back(oblique(i));
      }
    }
    require(idx.size() >= 3, "lung too small to subdivide into lobes");
    const double cut = quantile(proj, 0.55);
    std::vector<std::size_t> upper;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (proj[k] > cut) {
        lobes[idx[k]] = static_cast<float>(s == 1 ? lobe::kLeftLower : lobe::kRightLower);
      } else {
        lobes[idx[k]] = static_cast<float>(lobe::kLeftUpper);
        upper.push_back(idx[k]);
      }
    }
    if (s == 2) {
      std::vector<double> zs;
      for (auto i : upper) zs.push_back(axial(i));
      const double zcut = quantile(zs, 0.6);
      std::size_t middle = 0;
      for (auto i : upper) {
        const bool mid = axial(i) > zcut;
        middle += mid;
        lobes[i] = static_cast<float>(mid ? lobe::kRightMiddle : lobe::kRightUpper);
      }
      // A flat z-distribution can leave the middle lobe empty; take the lowest slice then.
      if (middle == 0) {
        for (auto i : upper) {
          if (axial(i) == zcut) lobes[i] = static_cast<float>(lobe::kRightMiddle);
        }
      }
    }
  }
  return lobes;
}

}  // namespace detail

inline Phantom gen_phantom(const PhantomConfig& cfg, const LabelHierarchy& h = LabelHierarchy::lung()) {
  cfg.validate();
  const Dims3& d = cfg.dims;
  std::mt19937_64 rng(cfg.seed);

  const std::vector<std::uint8_t> side = detail::lung_sides(d, rng);
  std::size_t lung_count = 0;
  for (auto s : side) lung_count += s != 0;

  // Pathology state per voxel: 0 tissue, 1 aerated lung, 2 consolidation, 3 ground glass.
  constexpr std::uint8_t kTissue = 0, kAerated = 1, kConsolidated = 2, kGroundGlass = 3;
  std::vector<std::uint8_t> state(side.size());
  for (std::size_t i = 0; i < side.size(); ++i) state[i] = side[i] ? kAerated : kTissue;

  const auto n_cons = static_cast<std::size_t>(std::llround(cfg.consolidation_fraction * static_cast<double>(lung_count)));
  const auto n_gg = static_cast<std::size_t>(std::llround(cfg.ground_glass_fraction * static_cast<double>(lung_count)));
  detail::require(lung_count >= 16 && n_cons + n_gg <= lung_count,
                  "pathology fractions infeasible for the generated lung size");

  // Consolidation starts at the pleura so it erodes the visible lung boundary.
  const std::size_t cap = std::max<std::size_t>(1, lung_count / 6);
  if (n_cons > 0) {
    detail::grow_blobs(state, d, kAerated, kConsolidated, n_cons, cap, detail::lung_boundary(side, d), rng);
  }
  if (n_gg > 0) {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < state.size(); ++i) {
      if (state[i] == kAerated) pool.push_back(i);
    }
    detail::grow_blobs(state, d, kAerated, kGroundGlass, n_gg, cap, pool, rng);
  }

  std::normal_distribution<double> lung_noise(hu::kLungMean, hu::kLungSd);
  std::normal_distribution<double> tissue_noise(hu::kTissueMean, hu::kTissueSd);
  std::uniform_real_distribution<double> gg(std::nextafter(hu::kGroundGlassLo, 0.0), hu::kGroundGlassHi);
  std::uniform_real_distribution<double> cons(hu::kConsolidationLo, hu::kConsolidationHi);

  std::vector<float> ct(side.size());
  for (std::size_t i = 0; i < ct.size(); ++i) {
    double v = 0.0;
    switch (state[i]) {
      case kTissue: v = tissue_noise(rng); break;
      case kAerated: v = std::clamp(lung_noise(rng), hu::kLungMin, hu::kLungMax); break;
      case kConsolidated: v = cons(rng); break;
      case kGroundGlass: v = gg(rng); break;
    }
    ct[i] = static_cast<float>(v);
  }

  std::vector<float> labels(side.size());
  for (std::size_t i = 0; i < side.size(); ++i) {
    int id = h.background_id();
    if (side[i] == 1) id = LabelHierarchy::kLeft;
    if (side[i] == 2) id = LabelHierarchy::kRight;
    if (id != h.background_id() && cfg.label_level == LabelLevel::generic) id = h.generic_of(id);
    labels[i] = static_cast<float>(id);
  }

  Phantom p{Volume(d, cfg.spacing, VolumeKind::intensity_hu, std::move(ct)),
            LabelVolume(Volume(d, cfg.spacing, VolumeKind::label, std::move(labels)), cfg.label_level, h),
            std::nullopt};
  if (cfg.lobe_planes) p.lobes = Volume(d, cfg.spacing, VolumeKind::label, detail::lobe_labels(side, d));
  return p;
}

// ---------------------------------------------------------------------------
// Datasets

struct ManifestEntry {
  std::string id;
  std::filesystem::path ct;
  std::filesystem::path label;
  LabelLevel level = LabelLevel::specific;
  bool consolidated = false;
  bool eval_only = false;
  std::optional<std::filesystem::path> lobes;
};

struct DatasetCounts {
  std::size_t clean_specific = 0;
  std::size_t consolidated_generic = 0;
  std::size_t consolidated_specific = 0;
};

/// Case seed derived from the dataset seed and the case's running index.
inline std::uint64_t case_seed(std::uint64_t seed, std::size_t index) {
  return detail::splitmix64(seed ^ detail::splitmix64(static_cast<std::uint64_t>(index) + 1));
}

/// Consolidated cases draw their fractions per case: consolidation uniformly in
/// [0.2, 1] x base, ground glass in [0, 1] x base. Clean cases have neither.
inline std::vector<std::pair<ManifestEntry, PhantomConfig>> plan_dataset(const DatasetCounts& n,
                                                                         const PhantomConfig& base,
                                                                         std::uint64_t seed) {
  base.validate();
  std::vector<std::pair<ManifestEntry, PhantomConfig>> plan;
  std::mt19937_64 rng(detail::splitmix64(seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto add = [&](const std::string& prefix, std::size_t count, LabelLevel level, bool consolidated, bool eval_only) {
    for (std::size_t k = 0; k < count; ++k) {
      PhantomConfig c = base;
      c.label_level = level;
      c.seed = case_seed(seed, plan.size());
      if (consolidated) {
        c.consolidation_fraction = base.consolidation_fraction * (0.2 + 0.8 * u(rng));
        c.ground_glass_fraction = base.ground_glass_fraction * u(rng);
      } else {
        c.consolidation_fraction = 0.0;
        c.ground_glass_fraction = 0.0;
      }
      char buf[32];
      std::snprintf(buf, sizeof buf, "%03zu", k);
      ManifestEntry e;
      e.id = prefix + buf;
      e.level = level;
      e.consolidated = consolidated;
      e.eval_only = eval_only;
      plan.emplace_back(std::move(e), c);
    }
  };
  add("clean_specific_", n.clean_specific, LabelLevel::specific, false, false);
  add("consol_generic_", n.consolidated_generic, LabelLevel::generic, true, false);
  add("consol_specific_", n.consolidated_specific, LabelLevel::specific, true, true);
  return plan;
}

inline nlohmann::json manifest_to_json(const std::vector<ManifestEntry>& entries) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json r{{"id", e.id},
                     {"ct", e.ct.generic_string()},
                     {"label", e.label.generic_string()},
                     {"level", std::string(to_string(e.level))},
                     {"consolidated", e.consolidated},
                     {"eval_only", e.eval_only}};
    if (e.lobes) r["lobes"] = e.lobes->generic_string();
    j.push_back(r);
  }
  return j;
}

/// Writes volumes and `manifest.json` under `out_dir`; paths in the manifest are relative to it.
inline std::vector<ManifestEntry> gen_dataset(const DatasetCounts& n, const PhantomConfig& base, std::uint64_t seed,
                                              const std::filesystem::path& out_dir,
                                              const LabelHierarchy& h = LabelHierarchy::lung()) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<ManifestEntry> entries;
  for (auto& [entry, cfg] : plan_dataset(n, base, seed)) {
    const Phantom p = gen_phantom(cfg, h);
    entry.ct = entry.id + "_ct";
    entry.label = entry.id + "_label";
    write_volume(p.ct, out_dir / entry.ct);
    write_volume(p.label.vol(), out_dir / entry.label);
    if (p.lobes) {
      entry.lobes = entry.id + "_lobes";
      write_volume(*p.lobes, out_dir / *entry.lobes);
    }
    entries.push_back(entry);
  }
  std::ofstream m(out_dir / "manifest.json", std::ios::trunc);
  if (!m) throw IoError("cannot write manifest in " + out_dir.string());
  m << manifest_to_json(entries).dump(2) << '\n';
  return entries;
}

/// Entries with paths resolved against the manifest directory.
inline std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing manifest " + path.string());
  std::vector<ManifestEntry> out;
  const auto dir = path.parent_path();
  try {
    const auto j = nlohmann::json::parse(in);
    detail::require(j.is_array(), "manifest must be a JSON array");
    for (const auto& r : j) {
      ManifestEntry e;
      e.id = r.at("id").get<std::string>();
      e.ct = dir / r.at("ct").get<std::string>();
      e.label = dir / r.at("label").get<std::string>();
      e.level = parse_label_level(r.at("level").get<std::string>());
      e.consolidated = r.at("consolidated").get<bool>();
      e.eval_only = r.at("eval_only").get<bool>();
      if (r.contains("lobes")) e.lobes = dir / r.at("lobes").get<std::string>();
      out.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("bad manifest " + path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace polyseg
