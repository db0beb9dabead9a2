#pragma once

// Per-lobe aeration features and Ward agglomerative clustering of cases.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "polyseg/error.hpp"
#include "polyseg/metrics.hpp"
#include "polyseg/volume.hpp"

namespace polyseg {

/// Poor aeration band, exclusive on both ends.
inline constexpr double kPoorAerationLoHu = -500.0;
inline constexpr double kPoorAerationHiHu = -100.0;

/// Row-major cases x (2L) matrix: percent poorly aerated per lobe, then percent consolidated per lobe.
struct FeatureMatrix {
  std::vector<std::string> case_ids;
  std::size_t cols = 0;
  std::vector<double> values;

  std::size_t rows() const { return case_ids.size(); }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  void add_row(std::string id, const std::vector<double>& row) {
    if (cols == 0) cols = row.size();
    detail::require(row.size() == cols, "feature row length mismatch");
    case_ids.push_back(std::move(id));
    values.insert(values.end(), row.begin(), row.end());
  }

  void validate() const {
    detail::require(cols % 2 == 0, "feature matrix must have an even number of columns");
    detail::require(values.size() == rows() * cols, "feature matrix size mismatch");
    for (double v : values) detail::require(v >= 0.0 && v <= 100.0, "feature value outside [0,100]");
  }
};

/// [pa_1..pa_L, cons_1..cons_L] for lobes labelled 1..L.
inline std::vector<double> aeration_features(const Volume& ct, const Volume& lobes, int lobe_count) {
  detail::require(ct.dims() == lobes.dims(), "aeration_features: grids differ");
  detail::require(lobes.kind() == VolumeKind::label, "lobes must be a label volume");
  std::vector<std::size_t> total(static_cast<std::size_t>(lobe_count) + 1, 0);
  std::vector<std::size_t> poor(total.size(), 0), cons(total.size(), 0);
  for (std::size_t i = 0; i < ct.size(); ++i) {
    const auto l = static_cast<std::size_t>(lobes[i]);
    if (l == 0) continue;
    detail::require(l <= static_cast<std::size_t>(lobe_count), "lobe label out of range");
    ++total[l];
    const double h = ct[i];
    if (h >= kNonaeratedHu) {
      ++cons[l];
    } else if (h > kPoorAerationLoHu && h < kPoorAerationHiHu) {
      ++poor[l];
    }
  }
  std::vector<double> row(2 * static_cast<std::size_t>(lobe_count));
  for (std::size_t l = 1; l <= static_cast<std::size_t>(lobe_count); ++l) {
    detail::require(total[l] > 0, "lobe " + std::to_string(l) + " is empty");
    row[l - 1] = 100.0 * static_cast<double>(poor[l]) / static_cast<double>(total[l]);
    row[static_cast<std::size_t>(lobe_count) + l - 1] = 100.0 * static_cast<double>(cons[l]) / static_cast<double>(total[l]);
  }
  return row;
}

struct Merge {
  std::size_t a = 0;  // smaller cluster id
  std::size_t b = 0;
  double height = 0.0;
  std::size_t id = 0;  // leaf_count + merge index
  friend bool operator==(const Merge&, const Merge&) = default;
};

struct Dendrogram {
  std::size_t leaf_count = 0;
  std::vector<Merge> merges;
  friend bool operator==(const Dendrogram&, const Dendrogram&) = default;
};

/// Ward linkage on Euclidean distance via the Lance-Williams update on squared
/// distances. Ties go to the lexicographically smallest (a, b) cluster-id pair.
inline Dendrogram agglomerate(const FeatureMatrix& f) {
  detail::require(f.rows() >= 1, "cannot cluster an empty feature matrix");
  const std::size_t n = f.rows();
  Dendrogram d{n, {}};

  // Slot i holds cluster ids[i]; slots are retired by setting active=false.
  std::vector<std::size_t> ids(n), sizes(n, 1);
  std::vector<bool> active(n, true);
  std::iota(ids.begin(), ids.end(), 0);
  std::vector<double> d2(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < f.cols; ++c) s += (f(i, c) - f(j, c)) * (f(i, c) - f(j, c));
      d2[i * n + j] = d2[j * n + i] = s;
    }
  }

  for (std::size_t step = 0; step + 1 < n; ++step) {
    std::size_t bi = n, bj = n;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (!active[j]) continue;
        const double v = d2[i * n + j];
        const auto lo = std::min(ids[i], ids[j]), hi = std::max(ids[i], ids[j]);
        bool better = bi == n || v < best;
        if (!better && v == best) {
          const auto blo = std::min(ids[bi], ids[bj]), bhi = std::max(ids[bi], ids[bj]);
          better = lo < blo || (lo == blo && hi < bhi);
        }
        if (better) {
          best = v;
          bi = i;
          bj = j;
        }
      }
    }
    const std::size_t new_id = n + step;
    d.merges.push_back({std::min(ids[bi], ids[bj]), std::max(ids[bi], ids[bj]), std::sqrt(std::max(best, 0.0)), new_id});

    const double ni = static_cast<double>(sizes[bi]), nj = static_cast<double>(sizes[bj]);
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == bi || k == bj) continue;
      const double nk = static_cast<double>(sizes[k]);
      const double v = ((nk + ni) * d2[k * n + bi] + (nk + nj) * d2[k * n + bj] - nk * best) / (nk + ni + nj);
      d2[k * n + bi] = d2[bi * n + k] = v;
    }
    ids[bi] = new_id;
    sizes[bi] += sizes[bj];
    active[bj] = false;
  }
  return d;
}

/// Undo the last k-1 merges. Cluster numbers 1..k follow the first case index in each cluster.
inline std::vector<int> cut_dendrogram(const Dendrogram& d, std::size_t k) {
  detail::require_arg(k >= 1 && k <= d.leaf_count, "cluster count k out of range");
  std::vector<std::size_t> parent(d.leaf_count + d.merges.size());
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t m = 0; m + k < d.leaf_count; ++m) {
    const auto& mg = d.merges[m];
    parent[find(mg.a)] = mg.id;
    parent[find(mg.b)] = mg.id;
  }
  std::map<std::size_t, int> label;
  std::vector<int> out(d.leaf_count);
  for (std::size_t i = 0; i < d.leaf_count; ++i) {
    const auto r = find(i);
    auto it = label.find(r);
    if (it == label.end()) it = label.emplace(r, static_cast<int>(label.size()) + 1).first;
    out[i] = it->second;
  }
  return out;
}

/// Leaves in dendrogram display order (depth-first, a before b).
inline std::vector<std::size_t> leaf_order(const Dendrogram& d) {
  if (d.leaf_count == 0) return {};
  if (d.merges.empty()) {
    std::vector<std::size_t> v(d.leaf_count);
    std::iota(v.begin(), v.end(), 0);
    return v;
  }
  std::vector<std::size_t> out;
  std::vector<std::size_t> stack{d.merges.back().id};
  while (!stack.empty()) {
    const auto id = stack.back();
    stack.pop_back();
    if (id < d.leaf_count) {
      out.push_back(id);
      continue;
    }
    const auto& m = d.merges[id - d.leaf_count];
    stack.push_back(m.b);
    stack.push_back(m.a);
  }
  return out;
}

inline nlohmann::json dendrogram_to_json(const Dendrogram& d, const std::vector<std::string>& case_ids) {
  nlohmann::json j{{"leaf_count", d.leaf_count}, {"leaves", case_ids}, {"merges", nlohmann::json::array()}};
  for (const auto& m : d.merges) j["merges"].push_back({{"a", m.a}, {"b", m.b}, {"height", m.height}, {"id", m.id}});
  return j;
}

inline Dendrogram dendrogram_from_json(const nlohmann::json& j) {
  try {
    Dendrogram d{j.at("leaf_count").get<std::size_t>(), {}};
    for (const auto& m : j.at("merges")) {
      d.merges.push_back({m.at("a").get<std::size_t>(), m.at("b").get<std::size_t>(), m.at("height").get<double>(),
                          m.at("id").get<std::size_t>()});
    }
    detail::require(d.leaf_count == 0 || d.merges.size() + 1 == d.leaf_count, "dendrogram merge count mismatch");
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad dendrogram JSON: ") + e.what());
  }
}

inline Dendrogram read_dendrogram(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing dendrogram " + path.string());
  try {
    return dendrogram_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("malformed dendrogram JSON: ") + e.what());
  }
}

inline std::string feature_header(std::size_t lobes) {
  std::string h;
  for (std::size_t l = 1; l <= lobes; ++l) h += ",pa_lobe" + std::to_string(l);
  for (std::size_t l = 1; l <= lobes; ++l) h += ",cons_lobe" + std::to_string(l);
  return h;
}

inline void write_feature_csv(const FeatureMatrix& f, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "case_id" << feature_header(f.cols / 2) << '\n';
  for (std::size_t r = 0; r < f.rows(); ++r) {
    out << f.case_ids[r];
    for (std::size_t c = 0; c < f.cols; ++c) out << ',' << detail::fmt_double(f(r, c));
    out << '\n';
  }
}

inline void write_assignment_csv(const FeatureMatrix& f, const std::vector<int>& assignment,
                                 const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "case_id,cluster\n";
  for (std::size_t r = 0; r < f.rows(); ++r) out << f.case_ids[r] << ',' << assignment[r] << '\n';
}

/// Writes `<dir>/phenotype_report.csv` (rows by cluster, then dendrogram leaf
/// order) and `<dir>/dendrogram.json`.
inline void export_phenotype_report(const FeatureMatrix& f, const std::vector<int>& assignment, const Dendrogram& d,
                                    const std::filesystem::path& dir) {
  detail::require(assignment.size() == f.rows() && d.leaf_count == f.rows(), "report inputs have inconsistent rows");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);

  const auto order = leaf_order(d);
  std::vector<std::size_t> pos(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) pos[order[i]] = i;
  std::vector<std::size_t> rows(f.rows());
  std::iota(rows.begin(), rows.end(), 0);
  std::stable_sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
    if (assignment[a] != assignment[b]) return assignment[a] < assignment[b];
    return pos[a] < pos[b];
  });

  std::ofstream out(dir / "phenotype_report.csv", std::ios::trunc);
  if (!out) throw IoError("cannot write report in " + dir.string());
  out << "case_id,cluster" << feature_header(f.cols / 2) << '\n';
  for (auto r : rows) {
    out << f.case_ids[r] << ',' << assignment[r];
    for (std::size_t c = 0; c < f.cols; ++c) out << ',' << detail::fmt_double(f(r, c));
    out << '\n';
  }

  std::ofstream dj(dir / "dendrogram.json", std::ios::trunc);
  if (!dj) throw IoError("cannot write dendrogram in " + dir.string());
  dj << dendrogram_to_json(d, f.case_ids).dump(2) << '\n';
}

}  // namespace polyseg
