#pragma once

// Hierarchical label taxonomies and the fine -> coarse aggregation used by the
// generic supervision head.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "polyseg/error.hpp"
#include "polyseg/tensor.hpp"
#include "polyseg/volume.hpp"

namespace polyseg {

enum class LabelLevel { specific, generic };

inline std::string_view to_string(LabelLevel level) {
  return level == LabelLevel::specific ? "specific" : "generic";
}

inline LabelLevel parse_label_level(std::string_view s) {
  if (s == "specific") return LabelLevel::specific;
  if (s == "generic") return LabelLevel::generic;
  throw DataError("unknown label level '" + std::string(s) + "'");
}

struct LabelNode {
  std::string name;
  int id = 0;
  std::optional<int> parent;
};

/// Rooted label tree. Leaves in `leaf_order` define the specific prediction
/// channels; each leaf's generic node is its parent, or the leaf itself when it
/// hangs directly off the root (the background).
class LabelHierarchy {
 public:
  LabelHierarchy(std::vector<LabelNode> nodes, std::vector<int> leaf_order, int background_id)
      : nodes_(std::move(nodes)), leaf_order_(std::move(leaf_order)), background_(background_id) {
    validate();
    for (int leaf : leaf_order_) {
      const int g = generic_of(leaf);
      if (std::find(generic_order_.begin(), generic_order_.end(), g) == generic_order_.end()) {
        generic_order_.push_back(g);
      }
    }
  }

  /// root -> {background, lung}; lung -> {left, right}; channels [left, right, background].
  static const LabelHierarchy& lung() {
    static const LabelHierarchy h(
        {{"background", kBackground, kRoot},
         {"left", kLeft, kLung},
         {"right", kRight, kLung},
         {"lung", kLung, kRoot},
         {"root", kRoot, std::nullopt}},
        {kLeft, kRight, kBackground}, kBackground);
    return h;
  }

  static constexpr int kBackground = 0;
  static constexpr int kLeft = 1;
  static constexpr int kRight = 2;
  static constexpr int kLung = 3;
  static constexpr int kRoot = 4;

  const std::vector<LabelNode>& nodes() const { return nodes_; }
  const std::vector<int>& leaf_order() const { return leaf_order_; }
  const std::vector<int>& generic_order() const { return generic_order_; }
  int background_id() const { return background_; }
  int root_id() const { return root_; }

  const LabelNode& node(int id) const {
    auto it = std::find_if(nodes_.begin(), nodes_.end(), [&](const auto& n) { return n.id == id; });
    if (it == nodes_.end()) throw DataError("unknown label id " + std::to_string(id));
    return *it;
  }

  int id_of(std::string_view name) const {
    for (const auto& n : nodes_) {
      if (n.name == name) return n.id;
    }
    throw DataError("unknown label name '" + std::string(name) + "'");
  }

  int generic_of(int leaf) const {
    const auto& n = node(leaf);
    return (n.parent && *n.parent != root_) ? *n.parent : leaf;
  }

  std::size_t channel_count(LabelLevel level) const {
    return level == LabelLevel::specific ? leaf_order_.size() : generic_order_.size();
  }
  const std::vector<int>& channel_meaning(LabelLevel level) const {
    return level == LabelLevel::specific ? leaf_order_ : generic_order_;
  }

  /// Channel index for a label id at the given level, or nullopt if not a label there.
  std::optional<std::size_t> channel_of(int id, LabelLevel level) const {
    const auto& order = channel_meaning(level);
    auto it = std::find(order.begin(), order.end(), id);
    if (it == order.end()) return std::nullopt;
    return static_cast<std::size_t>(it - order.begin());
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["nodes"] = nlohmann::json::array();
    for (const auto& n : nodes_) {
      nlohmann::json jn{{"name", n.name}, {"id", n.id}};
      jn["parent"] = n.parent ? nlohmann::json(*n.parent) : nlohmann::json(nullptr);
      j["nodes"].push_back(jn);
    }
    j["leaf_order"] = leaf_order_;
    j["background"] = background_;
    return j;
  }

  static LabelHierarchy from_json(const nlohmann::json& j) {
    try {
      std::vector<LabelNode> nodes;
      for (const auto& jn : j.at("nodes")) {
        LabelNode n{jn.at("name").get<std::string>(), jn.at("id").get<int>(), std::nullopt};
        if (jn.contains("parent") && !jn.at("parent").is_null()) n.parent = jn.at("parent").get<int>();
        nodes.push_back(std::move(n));
      }
      return LabelHierarchy(std::move(nodes), j.at("leaf_order").get<std::vector<int>>(),
                            j.at("background").get<int>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("bad hierarchy JSON: ") + e.what());
    }
  }

 private:
  void validate() {
    std::set<int> ids;
    for (const auto& n : nodes_) {
      detail::require(n.id >= 0, "label ids must be nonnegative");
      detail::require(ids.insert(n.id).second, "duplicate label id " + std::to_string(n.id));
    }
    int roots = 0;
    for (const auto& n : nodes_) {
      if (!n.parent) {
        ++roots;
        root_ = n.id;
      } else {
        detail::require(ids.count(*n.parent) == 1,
                        "label " + n.name + " has an unknown parent");
      }
    }
    detail::require(roots == 1, "label hierarchy must have exactly one root");

    // Every node must reach the root within |nodes| steps.
    std::map<int, std::optional<int>> parent;
    for (const auto& n : nodes_) parent[n.id] = n.parent;
    for (const auto& n : nodes_) {
      std::optional<int> cur = n.id;
      std::size_t steps = 0;
      while (cur && parent[*cur]) {
        cur = parent[*cur];
        detail::require(++steps <= nodes_.size(), "label hierarchy contains a cycle");
      }
    }

    std::set<int> non_leaves;
    for (const auto& n : nodes_) {
      if (n.parent) non_leaves.insert(*n.parent);
    }
    std::set<int> leaves;
    for (int id : ids) {
      if (!non_leaves.count(id) && id != root_) leaves.insert(id);
    }

    detail::require(ids.count(background_) == 1, "background id is not a node");
    detail::require(!non_leaves.count(background_), "background label must be a leaf");
    detail::require(parent[background_] == root_, "background must be a direct child of the root");

    std::set<int> order(leaf_order_.begin(), leaf_order_.end());
    detail::require(order.size() == leaf_order_.size(), "leaf_order has duplicates");
    detail::require(order == leaves, "leaf_order must list every leaf exactly once");
  }

  std::vector<LabelNode> nodes_;
  std::vector<int> leaf_order_;
  std::vector<int> generic_order_;
  int background_ = 0;
  int root_ = 0;
};

/// Label volume tagged with its specificity; values are validated on construction.
class LabelVolume {
 public:
  LabelVolume(Volume vol, LabelLevel level, const LabelHierarchy& h)
      : vol_(std::move(vol)), level_(level) {
    detail::require(vol_.kind() == VolumeKind::label, "label volume must have kind=label");
    for (float v : vol_.data()) {
      if (!h.channel_of(static_cast<int>(v), level_)) {
        throw DataError("voxel value " + std::to_string(static_cast<int>(v)) +
                        " is not a valid " + std::string(to_string(level_)) + " label");
      }
    }
  }

  const Volume& vol() const { return vol_; }
  LabelLevel level() const { return level_; }

 private:
  Volume vol_;
  LabelLevel level_;
};

/// Per-voxel class probabilities with channel meanings in hierarchy order.
struct PredictionStack {
  Tensor channels;
  std::vector<int> channel_meaning;
  LabelLevel level = LabelLevel::specific;
};

/// Generic-level stack: each generic channel is the sum of its leaf channels,
/// accumulated in leaf order (lung = left + right, background copied).
inline PredictionStack aggregate_probabilities(const PredictionStack& p, const LabelHierarchy& h) {
  detail::require_arg(p.level == LabelLevel::specific, "aggregation expects a specific stack");
  detail::require(p.channel_meaning == h.leaf_order(),
                  "prediction channels do not match hierarchy leaf order");
  const auto& s = p.channels.shape();
  const auto& gorder = h.generic_order();
  Tensor out({gorder.size(), s[1], s[2], s[3]});
  std::vector<bool> touched(gorder.size(), false);
  const std::size_t nv = p.channels.voxels();
  for (std::size_t c = 0; c < h.leaf_order().size(); ++c) {
    const std::size_t g = *h.channel_of(h.generic_of(h.leaf_order()[c]), LabelLevel::generic);
    auto src = p.channels.channel(c);
    auto dst = out.channel(g);
    if (!touched[g]) {
      std::copy(src.begin(), src.end(), dst.begin());
      touched[g] = true;
    } else {
      for (std::size_t i = 0; i < nv; ++i) dst[i] += src[i];
    }
  }
  return {std::move(out), gorder, LabelLevel::generic};
}

/// Replace each specific label by its generic node (left/right -> lung).
inline LabelVolume coarsen_label_volume(const LabelVolume& y, const LabelHierarchy& h) {
  detail::require_arg(y.level() == LabelLevel::specific, "coarsening expects a specific label volume");
  std::vector<float> out(y.vol().size());
  auto in = y.vol().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int id = static_cast<int>(in[i]);
    detail::require(h.channel_of(id, LabelLevel::specific).has_value(),
                    "voxel value " + std::to_string(id) + " is not a valid specific label");
    out[i] = static_cast<float>(h.generic_of(id));
  }
  return LabelVolume(Volume(y.vol().dims(), y.vol().spacing(), VolumeKind::label, std::move(out)),
                     LabelLevel::generic, h);
}

inline PredictionStack one_hot(const LabelVolume& y, const LabelHierarchy& h) {
  const auto& d = y.vol().dims();
  const auto& meaning = h.channel_meaning(y.level());
  Tensor t({meaning.size(), d[0], d[1], d[2]});
  const std::size_t nv = y.vol().size();
  auto in = y.vol().data();
  for (std::size_t i = 0; i < nv; ++i) {
    const auto c = h.channel_of(static_cast<int>(in[i]), y.level());
    detail::require(c.has_value(), "invalid label in one_hot");
    t.ptr()[*c * nv + i] = 1.0;
  }
  return {std::move(t), meaning, y.level()};
}

/// Label volume holding the highest-probability channel's id (first wins ties).
inline Volume argmax_labels(const PredictionStack& p, const Spacing3& spacing) {
  const auto& s = p.channels.shape();
  const std::size_t nv = p.channels.voxels();
  std::vector<float> out(nv);
  for (std::size_t i = 0; i < nv; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < s[0]; ++c) {
      if (p.channels.ptr()[c * nv + i] > p.channels.ptr()[best * nv + i]) best = c;
    }
    out[i] = static_cast<float>(p.channel_meaning[best]);
  }
  return Volume({s[1], s[2], s[3]}, spacing, VolumeKind::label, std::move(out));
}

/// Largest |sum_c p_c - 1| over voxels, with the channel sum taken in channel order.
inline double max_normalization_error(const PredictionStack& p) {
  const std::size_t nv = p.channels.voxels();
  double worst = 0.0;
  for (std::size_t i = 0; i < nv; ++i) {
    double sum = 0.0;
    for (std::size_t c = 0; c < p.channels.channels(); ++c) sum += p.channels.ptr()[c * nv + i];
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  return worst;
}

}  // namespace polyseg
