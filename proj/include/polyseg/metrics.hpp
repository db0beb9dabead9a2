#pragma once

// Segmentation quality metrics: Dice overlap, average symmetric surface
// distance, nonaerated lung fraction, and per-model summaries with OLS slopes
// against the nonaerated fraction.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "polyseg/error.hpp"
#include "polyseg/label_hierarchy.hpp"
#include "polyseg/volume.hpp"

namespace polyseg {

using Point3 = std::array<double, 3>;

/// Nonaerated (and consolidation) threshold.
inline constexpr double kNonaeratedHu = -100.0;

/// 0/1 label volume of voxels equal to `label`.
inline Volume binary_mask(const Volume& labels, int label) {
  std::vector<float> m(labels.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels[i] == static_cast<float>(label) ? 1.0f : 0.0f;
  return Volume(labels.dims(), labels.spacing(), VolumeKind::label, std::move(m));
}

/// 0/1 label volume of voxels not equal to `background`.
inline Volume foreground_mask(const Volume& labels, int background) {
  std::vector<float> m(labels.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = labels[i] != static_cast<float>(background) ? 1.0f : 0.0f;
  return Volume(labels.dims(), labels.spacing(), VolumeKind::label, std::move(m));
}

inline std::size_t count_foreground(const Volume& mask) {
  std::size_t n = 0;
  for (float v : mask.data()) n += v != 0.0f;
  return n;
}

/// 2|A∩B| / (|A|+|B|); 1 when both masks are empty. Nonzero voxels are foreground.
inline double dice(const Volume& a, const Volume& b) {
  detail::require(a.dims() == b.dims(), "dice: mask dims differ");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool ia = a[i] != 0.0f, ib = b[i] != 0.0f;
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

/// Foreground voxels with at least one background 6-neighbour (outside the grid
/// counts as background), as voxel-centre coordinates in mm.
inline std::vector<Point3> extract_surface(const Volume& mask) {
  const auto& d = mask.dims();
  const auto& s = mask.spacing();
  auto fg = [&](std::ptrdiff_t z, std::ptrdiff_t y, std::ptrdiff_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= static_cast<std::ptrdiff_t>(d[0]) ||
        y >= static_cast<std::ptrdiff_t>(d[1]) || x >= static_cast<std::ptrdiff_t>(d[2])) {
      return false;
    }
    return mask(static_cast<std::size_t>(z), static_cast<std::size_t>(y), static_cast<std::size_t>(x)) != 0.0f;
  };
  std::vector<Point3> pts;
  for (std::ptrdiff_t z = 0; z < static_cast<std::ptrdiff_t>(d[0]); ++z) {
    for (std::ptrdiff_t y = 0; y < static_cast<std::ptrdiff_t>(d[1]); ++y) {
      for (std::ptrdiff_t x = 0; x < static_cast<std::ptrdiff_t>(d[2]); ++x) {
        if (!fg(z, y, x)) continue;
        if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) || !fg(z, y + 1, x) || !fg(z, y, x - 1) ||
            !fg(z, y, x + 1)) {
          pts.push_back({static_cast<double>(z) * s[0], static_cast<double>(y) * s[1], static_cast<double>(x) * s[2]});
        }
      }
    }
  }
  return pts;
}

/// Static 3D k-d tree answering exact nearest-neighbour distance queries.
class KdTree {
 public:
  explicit KdTree(std::vector<Point3> points) : pts_(std::move(points)) {
    if (!pts_.empty()) build(0, pts_.size(), 0);
  }

  bool empty() const { return pts_.empty(); }

  double nearest_distance(const Point3& q) const {
    detail::require(!pts_.empty(), "nearest-neighbour query on an empty point set");
    double best = std::numeric_limits<double>::infinity();
    search(0, pts_.size(), 0, q, best);
    return std::sqrt(best);
  }

 private:
  // Points in [lo, hi) are arranged so the median sits at mid, split on `axis`.
  void build(std::size_t lo, std::size_t hi, int axis) {
    if (hi - lo <= 1) return;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(pts_.begin() + static_cast<std::ptrdiff_t>(lo), pts_.begin() + static_cast<std::ptrdiff_t>(mid),
                     pts_.begin() + static_cast<std::ptrdiff_t>(hi),
                     [axis](const Point3& a, const Point3& b) { return a[axis] < b[axis]; });
    build(lo, mid, (axis + 1) % 3);
    build(mid + 1, hi, (axis + 1) % 3);
  }

  void search(std::size_t lo, std::size_t hi, int axis, const Point3& q, double& best) const {
    if (lo >= hi) return;
    const std::size_t mid = lo + (hi - lo) / 2;
    const Point3& p = pts_[mid];
    const double d2 = (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]);
    best = std::min(best, d2);
    const double diff = q[axis] - p[axis];
    const int next = (axis + 1) % 3;
    if (diff < 0) {
      search(lo, mid, next, q, best);
      if (diff * diff < best) search(mid + 1, hi, next, q, best);
    } else {
      search(mid + 1, hi, next, q, best);
      if (diff * diff < best) search(lo, mid, next, q, best);
    }
  }

  std::vector<Point3> pts_;
};

/// Mean of nearest-surface distances in both directions, in mm.
inline double assd(const Volume& a, const Volume& b) {
  detail::require(a.dims() == b.dims() && a.spacing() == b.spacing(), "assd: mask grids differ");
  const auto sa = extract_surface(a);
  const auto sb = extract_surface(b);
  detail::require(!sa.empty() && !sb.empty(), "assd undefined for an empty mask");
  const KdTree ta(sa), tb(sb);
  // Directed sums kept apart so that assd(a, b) == assd(b, a) bitwise.
  double sum_ab = 0.0, sum_ba = 0.0;
  for (const auto& p : sa) sum_ab += tb.nearest_distance(p);
  for (const auto& q : sb) sum_ba += ta.nearest_distance(q);
  return (sum_ab + sum_ba) / static_cast<double>(sa.size() + sb.size());
}

/// Percent of lung voxels with HU >= -100.
inline double nonaerated_fraction(const Volume& ct, const Volume& lung_mask) {
  detail::require(ct.dims() == lung_mask.dims(), "nonaerated_fraction: grids differ");
  std::size_t lung = 0, dense = 0;
  for (std::size_t i = 0; i < ct.size(); ++i) {
    if (lung_mask[i] == 0.0f) continue;
    ++lung;
    dense += ct[i] >= kNonaeratedHu;
  }
  detail::require(lung > 0, "nonaerated_fraction: empty lung mask");
  return 100.0 * static_cast<double>(dense) / static_cast<double>(lung);
}

struct LinearFit {
  double slope = std::numeric_limits<double>::quiet_NaN();
  double intercept = std::numeric_limits<double>::quiet_NaN();
};

/// Ordinary least squares y = slope * x + intercept; NaN when x has no spread.
inline LinearFit ols_fit(std::span<const double> x, std::span<const double> y) {
  detail::require(x.size() == y.size(), "ols: length mismatch");
  LinearFit f;
  const std::size_t n = x.size();
  if (n < 2) return f;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) return f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  return f;
}

// ---------------------------------------------------------------------------
// Dataset evaluation

struct EvalRecord {
  std::string case_id;
  std::string side;  // "left" or "right"
  double dice = 0.0;
  double assd_mm = 0.0;  // NaN when the predicted side is empty
  double nonaerated_fraction_pct = 0.0;
};

struct EvalCase {
  std::string id;
  const LabelVolume* prediction = nullptr;
  const LabelVolume* truth = nullptr;
  const Volume* ct = nullptr;
};

struct SummaryRow {
  std::string side;    // left, right, all
  std::string metric;  // dice, assd_mm
  std::size_t n = 0;   // records with a defined value
  double mean = 0.0;
  double sd = 0.0;
  double slope = 0.0;
  double intercept = 0.0;
};

struct EvalReport {
  std::vector<EvalRecord> records;
  std::vector<SummaryRow> summary;

  const SummaryRow& row(std::string_view side, std::string_view metric) const {
    for (const auto& r : summary) {
      if (r.side == side && r.metric == metric) return r;
    }
    throw UsageError("no summary row " + std::string(side) + "/" + std::string(metric));
  }
};

inline SummaryRow summarize(const std::vector<EvalRecord>& recs, std::string side, std::string metric) {
  std::vector<double> xs, ys;
  for (const auto& r : recs) {
    if (side != "all" && r.side != side) continue;
    const double y = metric == "dice" ? r.dice : r.assd_mm;
    if (!std::isfinite(y)) continue;
    xs.push_back(r.nonaerated_fraction_pct);
    ys.push_back(y);
  }
  SummaryRow row{std::move(side), std::move(metric), ys.size(), 0.0, 0.0, 0.0, 0.0};
  if (ys.empty()) {
    row.mean = row.sd = row.slope = row.intercept = std::numeric_limits<double>::quiet_NaN();
    return row;
  }
  row.mean = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(ys.size());
  if (ys.size() > 1) {
    double ss = 0.0;
    for (double y : ys) ss += (y - row.mean) * (y - row.mean);
    row.sd = std::sqrt(ss / static_cast<double>(ys.size() - 1));
  }
  const auto fit = ols_fit(xs, ys);
  row.slope = fit.slope;
  row.intercept = fit.intercept;
  return row;
}

/// Per-case, per-side Dice and ASSD, with the whole-lung nonaerated percent of
/// the ground truth as covariate; summaries per side and pooled.
inline EvalReport evaluate_dataset(std::span<const EvalCase> cases, const LabelHierarchy& h) {
  EvalReport rep;
  for (const auto& c : cases) {
    detail::require(c.prediction && c.truth && c.ct, "incomplete evaluation case " + c.id);
    const Volume& pred = c.prediction->vol();
    const Volume& gt = c.truth->vol();
    detail::require(pred.same_grid(gt) && gt.dims() == c.ct->dims(), "unmatched grids for case " + c.id);
    detail::require(c.truth->level() == LabelLevel::specific, "ground truth must carry specific labels");
    const double nonaerated = nonaerated_fraction(*c.ct, foreground_mask(gt, h.background_id()));
    for (const auto& [side, label] : {std::pair{"left", LabelHierarchy::kLeft}, std::pair{"right", LabelHierarchy::kRight}}) {
      const Volume mp = binary_mask(pred, label);
      const Volume mg = binary_mask(gt, label);
      EvalRecord r{c.id, side, dice(mp, mg), std::numeric_limits<double>::quiet_NaN(), nonaerated};
      if (count_foreground(mp) > 0 && count_foreground(mg) > 0) r.assd_mm = assd(mp, mg);
      rep.records.push_back(std::move(r));
    }
  }
  for (const char* side : {"left", "right", "all"}) {
    for (const char* metric : {"dice", "assd_mm"}) rep.summary.push_back(summarize(rep.records, side, metric));
  }
  return rep;
}

namespace detail {

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline void write_eval_csv(const std::vector<EvalRecord>& recs, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "case_id,side,dice,assd_mm,nonaerated_pct\n";
  for (const auto& r : recs) {
    out << r.case_id << ',' << r.side << ',' << detail::fmt_double(r.dice) << ',' << detail::fmt_double(r.assd_mm)
        << ',' << detail::fmt_double(r.nonaerated_fraction_pct) << '\n';
  }
}

inline void write_summary_csv(const std::vector<std::pair<std::string, EvalReport>>& models,
                              const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "model,side,metric,n,mean,sd,slope,intercept\n";
  for (const auto& [model, rep] : models) {
    for (const auto& r : rep.summary) {
      out << model << ',' << r.side << ',' << r.metric << ',' << r.n << ',' << detail::fmt_double(r.mean) << ','
          << detail::fmt_double(r.sd) << ',' << detail::fmt_double(r.slope) << ','
          << detail::fmt_double(r.intercept) << '\n';
    }
  }
}

}  // namespace polyseg
