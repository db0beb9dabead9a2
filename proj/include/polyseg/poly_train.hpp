#pragma once

// Polymorphic (dual-level) training and the two-resolution cascade.
//
// Every sample goes through the specific head (left/right/background). The
// generic head (lung/background) is the voxelwise sum of the left and right
// channels. Specific-labelled samples supervise the specific head; every
// sample supervises the generic head, with specific labels coarsened first.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "polyseg/error.hpp"
#include "polyseg/label_hierarchy.hpp"
#include "polyseg/micronet.hpp"
#include "polyseg/volume.hpp"

namespace polyseg {

enum class Variant { polymorphic, nonpolymorphic };

inline std::string_view to_string(Variant v) {
  return v == Variant::polymorphic ? "poly" : "nonpoly";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "poly" || s == "polymorphic") return Variant::polymorphic;
  if (s == "nonpoly" || s == "nonpolymorphic") return Variant::nonpolymorphic;
  throw UsageError("unknown variant '" + std::string(s) + "' (expected poly or nonpoly)");
}

struct CascadeConfig {
  double coarse_spacing_mm = 4.0;
  double fine_spacing_mm = 1.0;
  double threshold = 0.5;
  NetworkSpec coarse_spec{2, 4, 1, 3, 0};
  NetworkSpec fine_spec{2, 4, 3, 3, 0};
  int steps = 200;
  int batch = 4;
  AdamConfig adam;
  /// Weight of the generic-head loss; 1 means both heads count equally.
  double generic_weight = 1.0;
  std::uint64_t seed = 0;
  Variant variant = Variant::polymorphic;

  void validate() const {
    detail::require_arg(coarse_spacing_mm > 0.0 && fine_spacing_mm > 0.0, "spacings must be positive");
    detail::require_arg(coarse_spacing_mm > fine_spacing_mm, "coarse spacing must exceed fine spacing");
    detail::require_arg(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0,1)");
    detail::require_arg(steps > 0, "steps must be positive");
    detail::require_arg(batch > 0 && batch % 2 == 0, "batch size must be even and positive");
    detail::require_arg(generic_weight >= 0.0, "generic weight must be nonnegative");
    detail::require_arg(coarse_spec.in_channels == 1, "coarse network takes one CT channel");
    detail::require_arg(fine_spec.in_channels == 3, "fine network takes CT + left/right probabilities");
    coarse_spec.validate();
    fine_spec.validate();
  }

  nlohmann::json to_json() const {
    auto net = [](const NetworkSpec& s) {
      return nlohmann::json{{"levels", s.levels}, {"base_channels", s.base_channels}};
    };
    return {{"coarse_spacing_mm", coarse_spacing_mm},
            {"fine_spacing_mm", fine_spacing_mm},
            {"threshold", threshold},
            {"coarse_net", net(coarse_spec)},
            {"fine_net", net(fine_spec)},
            {"steps", steps},
            {"batch", batch},
            {"lr", adam.lr},
            {"beta1", adam.beta1},
            {"beta2", adam.beta2},
            {"eps", adam.eps},
            {"generic_weight", generic_weight},
            {"seed", seed},
            {"variant", std::string(to_string(variant))}};
  }

  /// Missing keys keep their defaults; in/out channels are fixed by the cascade.
  static CascadeConfig from_json(const nlohmann::json& j) {
    CascadeConfig c;
    try {
      c.coarse_spacing_mm = j.value("coarse_spacing_mm", c.coarse_spacing_mm);
      c.fine_spacing_mm = j.value("fine_spacing_mm", c.fine_spacing_mm);
      c.threshold = j.value("threshold", c.threshold);
      auto net = [&](const char* key, NetworkSpec& s) {
        if (!j.contains(key)) return;
        s.levels = j[key].value("levels", s.levels);
        s.base_channels = j[key].value("base_channels", s.base_channels);
      };
      net("coarse_net", c.coarse_spec);
      net("fine_net", c.fine_spec);
      c.steps = j.value("steps", c.steps);
      c.batch = j.value("batch", c.batch);
      c.adam.lr = j.value("lr", c.adam.lr);
      c.adam.beta1 = j.value("beta1", c.adam.beta1);
      c.adam.beta2 = j.value("beta2", c.adam.beta2);
      c.adam.eps = j.value("eps", c.adam.eps);
      c.generic_weight = j.value("generic_weight", c.generic_weight);
      c.seed = j.value("seed", c.seed);
      if (j.contains("variant")) c.variant = parse_variant(j["variant"].get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("bad cascade config: ") + e.what());
    }
    return c;
  }
};

/// Per-stage seeds are fixed offsets from the global seed.
namespace seed_offset {
inline constexpr std::uint64_t kCoarseInit = 1;
inline constexpr std::uint64_t kCoarseBatches = 2;
inline constexpr std::uint64_t kFineInit = 3;
inline constexpr std::uint64_t kFineBatches = 4;
}  // namespace seed_offset

struct TrainingSample {
  std::string id;
  Volume ct;
  LabelVolume label;
};

/// Network-ready sample: input tensor plus one-hot targets for the heads it can supervise.
struct StageSample {
  Tensor input;
  LabelLevel level = LabelLevel::specific;
  PredictionStack specific_target;  // empty tensor for generic samples
  PredictionStack generic_target;
};

struct BatchEntry {
  std::size_t index = 0;  // into the stage sample list
  LabelLevel level = LabelLevel::specific;
};
using Batch = std::vector<BatchEntry>;

/// batch/2 draws (with replacement) from each pool, specific half first.
template <class Rng>
Batch make_batch(std::span<const std::size_t> pool_specific, std::span<const std::size_t> pool_generic,
                 int batch, Rng& rng) {
  detail::require_arg(batch > 0 && batch % 2 == 0, "batch size must be even and positive");
  detail::require_arg(!pool_specific.empty(), "specific sample pool is empty");
  detail::require_arg(!pool_generic.empty(), "generic sample pool is empty");
  Batch out;
  std::uniform_int_distribution<std::size_t> ds(0, pool_specific.size() - 1);
  for (int i = 0; i < batch / 2; ++i) out.push_back({pool_specific[ds(rng)], LabelLevel::specific});
  std::uniform_int_distribution<std::size_t> dg(0, pool_generic.size() - 1);
  for (int i = 0; i < batch / 2; ++i) out.push_back({pool_generic[dg(rng)], LabelLevel::generic});
  return out;
}

/// The specific half of make_batch alone, drawn with the identical random sequence.
template <class Rng>
Batch make_specific_batch(std::span<const std::size_t> pool_specific, int batch, Rng& rng) {
  detail::require_arg(batch > 0 && batch % 2 == 0, "batch size must be even and positive");
  detail::require_arg(!pool_specific.empty(), "specific sample pool is empty");
  Batch out;
  std::uniform_int_distribution<std::size_t> ds(0, pool_specific.size() - 1);
  for (int i = 0; i < batch / 2; ++i) out.push_back({pool_specific[ds(rng)], LabelLevel::specific});
  return out;
}

struct StepLosses {
  double loss_specific = 0.0;
  double loss_generic = 0.0;
};

namespace detail {

struct BatchForward {
  std::vector<PredictionStack> probs;
  std::vector<Tape> tapes;
};

inline BatchForward forward_batch(const ParamStore& params, std::span<const StageSample> data,
                                  const Batch& batch, const LabelHierarchy& h) {
  BatchForward f;
  for (const auto& e : batch) {
    require(e.index < data.size(), "batch index out of range");
    auto r = forward(params, data[e.index].input, h.leaf_order());
    f.probs.push_back(std::move(r.probs));
    f.tapes.push_back(std::move(r.tape));
  }
  return f;
}

}  // namespace detail

/// Both losses and their combined per-sample logit gradients, without touching parameters.
struct PolyLoss {
  StepLosses losses;
  std::vector<Tensor> dlogits;
};

inline PolyLoss polymorphic_loss(std::span<const PredictionStack> probs, std::span<const StageSample> data,
                                 const Batch& batch, const LabelHierarchy& h, double generic_weight) {
  std::vector<bool> specific_mask;
  std::vector<bool> all_mask(batch.size(), true);
  std::vector<PredictionStack> spec_targets;
  std::vector<PredictionStack> gen_targets;
  bool any_specific = false;
  for (const auto& e : batch) {
    const auto& s = data[e.index];
    const bool is_specific = e.level == LabelLevel::specific;
    detail::require(!is_specific || s.level == LabelLevel::specific,
                    "batch marks a generic-labelled sample as specific");
    any_specific = any_specific || is_specific;
    specific_mask.push_back(is_specific);
    spec_targets.push_back(is_specific ? s.specific_target : PredictionStack{});
    gen_targets.push_back(s.generic_target);
  }
  detail::require(any_specific, "batch has no specific samples; specific loss undefined");

  // Unmasked entries are never read, but loss_ce checks shapes for every entry.
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!specific_mask[i]) spec_targets[i].channels = Tensor(probs[i].channels.shape());
  }

  auto ls = loss_ce(probs, spec_targets, specific_mask);
  auto lg = loss_ce_generic(probs, gen_targets, all_mask, h);

  PolyLoss out;
  out.losses = {ls.loss, lg.loss};
  out.dlogits = std::move(ls.dlogits);
  for (std::size_t i = 0; i < out.dlogits.size(); ++i) {
    auto d = out.dlogits[i].data();
    auto g = lg.dlogits[i].data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += generic_weight * g[k];
  }
  return out;
}

/// One polymorphic optimization step: forward every sample, combine
/// L_specific (specific samples) and generic_weight * L_generic (all samples),
/// backpropagate, and apply Adam step `t`.
inline StepLosses train_step(ParamStore& params, std::span<const StageSample> data, const Batch& batch,
                             const LabelHierarchy& h, const AdamConfig& adam, long t,
                             double generic_weight = 1.0) {
  auto f = detail::forward_batch(params, data, batch, h);
  auto loss = polymorphic_loss(f.probs, data, batch, h, generic_weight);
  params.zero_grad();
  for (std::size_t i = 0; i < batch.size(); ++i) backward(params, f.tapes[i], loss.dlogits[i]);
  adam_step(params, adam, t);
  return loss.losses;
}

/// Standard (nonpolymorphic) step: specific samples and the specific head only.
inline double train_step_standard(ParamStore& params, std::span<const StageSample> data, const Batch& batch,
                                  const LabelHierarchy& h, const AdamConfig& adam, long t) {
  auto f = detail::forward_batch(params, data, batch, h);
  std::vector<PredictionStack> targets;
  for (const auto& e : batch) {
    detail::require(e.level == LabelLevel::specific && data[e.index].level == LabelLevel::specific,
                    "standard training takes specific samples only");
    targets.push_back(data[e.index].specific_target);
  }
  auto ls = loss_ce(f.probs, targets, std::vector<bool>(batch.size(), true));
  params.zero_grad();
  for (std::size_t i = 0; i < batch.size(); ++i) backward(params, f.tapes[i], ls.dlogits[i]);
  adam_step(params, adam, t);
  return ls.loss;
}

struct TrainLogRow {
  int step = 0;
  std::string stage;
  double loss_specific = 0.0;
  double loss_generic = 0.0;  // NaN for the nonpolymorphic variant
};

struct StageOptions {
  Variant variant = Variant::polymorphic;
  int steps = 1;
  int batch = 2;
  AdamConfig adam;
  double generic_weight = 1.0;
  std::uint64_t batch_seed = 0;
};

/// Train one network on prepared samples, appending one log row per step.
inline ParamStore train_stage(const NetworkSpec& spec, std::span<const StageSample> data,
                              const LabelHierarchy& h, const StageOptions& opt, const std::string& stage,
                              std::vector<TrainLogRow>& log) {
  std::vector<std::size_t> pool_specific, pool_generic;
  for (std::size_t i = 0; i < data.size(); ++i) {
    (data[i].level == LabelLevel::specific ? pool_specific : pool_generic).push_back(i);
  }
  ParamStore params = init_params(spec);
  std::mt19937_64 rng(opt.batch_seed);
  for (int step = 1; step <= opt.steps; ++step) {
    TrainLogRow row{step, stage, 0.0, std::numeric_limits<double>::quiet_NaN()};
    if (opt.variant == Variant::nonpolymorphic) {
      const Batch b = make_specific_batch(pool_specific, opt.batch, rng);
      row.loss_specific = train_step_standard(params, data, b, h, opt.adam, step);
    } else {
      // Without a generic pool the batch is specific-only; only valid when the
      // generic loss is switched off (ablation control).
      const bool specific_only = pool_generic.empty() && opt.generic_weight == 0.0;
      const Batch b = specific_only ? make_specific_batch(pool_specific, opt.batch, rng)
                                    : make_batch(pool_specific, pool_generic, opt.batch, rng);
      const auto l = train_step(params, data, b, h, opt.adam, step, opt.generic_weight);
      row.loss_specific = l.loss_specific;
      row.loss_generic = l.loss_generic;
    }
    log.push_back(row);
  }
  return params;
}

// ---------------------------------------------------------------------------
// Cascade

/// Network input scaling for CT intensities.
inline constexpr double kHuScale = 1.0 / 1000.0;

inline Spacing3 isotropic(double mm) { return {mm, mm, mm}; }

inline Volume coarse_ct(const Volume& ct, const CascadeConfig& cfg) {
  const Spacing3 target = isotropic(cfg.coarse_spacing_mm);
  const Volume smooth = gaussian_smooth(ct, antialias_sigma(ct.spacing(), target));
  return resample(smooth, target, ResampleMode::trilinear);
}

inline Volume fine_ct(const Volume& ct, const CascadeConfig& cfg) {
  return resample(ct, isotropic(cfg.fine_spacing_mm), ResampleMode::trilinear);
}

inline Tensor ct_tensor(const Volume& ct) {
  const auto& d = ct.dims();
  Tensor t({1, d[0], d[1], d[2]});
  for (std::size_t i = 0; i < ct.size(); ++i) t.ptr()[i] = static_cast<double>(ct[i]) * kHuScale;
  return t;
}

/// Left and right probability channels of the coarse net, resampled (trilinear,
/// not renormalized) onto the grid of `fine`.
inline std::pair<Volume, Volume> coarse_lr_on_fine_grid(const ParamStore& coarse, const Volume& coarse_vol,
                                                        const Volume& fine, const LabelHierarchy& h) {
  const auto r = forward(coarse, ct_tensor(coarse_vol), h.leaf_order());
  auto channel_volume = [&](int label) {
    const std::size_t c = *h.channel_of(label, LabelLevel::specific);
    auto src = r.probs.channels.channel(c);
    std::vector<float> v(src.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp(static_cast<float>(src[i]), 0.0f, 1.0f);
    Volume pv(coarse_vol.dims(), coarse_vol.spacing(), VolumeKind::probability, std::move(v));
    return resample(pv, fine.spacing(), ResampleMode::trilinear, fine.dims());
  };
  return {channel_volume(LabelHierarchy::kLeft), channel_volume(LabelHierarchy::kRight)};
}

inline Tensor fine_tensor(const Volume& fine, const Volume& p_left, const Volume& p_right) {
  const auto& d = fine.dims();
  detail::require(p_left.dims() == d && p_right.dims() == d, "coarse probability grid does not match fine CT");
  Tensor t({3, d[0], d[1], d[2]});
  const std::size_t nv = fine.size();
  for (std::size_t i = 0; i < nv; ++i) {
    t.ptr()[i] = static_cast<double>(fine[i]) * kHuScale;
    t.ptr()[nv + i] = p_left[i];
    t.ptr()[2 * nv + i] = p_right[i];
  }
  return t;
}

inline StageSample make_stage_sample(Tensor input, const LabelVolume& label, const LabelHierarchy& h) {
  StageSample s;
  s.input = std::move(input);
  s.level = label.level();
  if (label.level() == LabelLevel::specific) {
    s.specific_target = one_hot(label, h);
    s.generic_target = one_hot(coarsen_label_volume(label, h), h);
  } else {
    s.generic_target = one_hot(label, h);
  }
  return s;
}

inline LabelVolume resample_labels(const LabelVolume& y, const Volume& grid, const LabelHierarchy& h) {
  return LabelVolume(resample(y.vol(), grid.spacing(), ResampleMode::nearest, grid.dims()), y.level(), h);
}

struct CascadeModel {
  ParamStore coarse;
  ParamStore fine;
  std::vector<TrainLogRow> log;
};

inline StageOptions stage_options(const CascadeConfig& cfg, std::uint64_t batch_seed) {
  return {cfg.variant, cfg.steps, cfg.batch, cfg.adam, cfg.generic_weight, batch_seed};
}

/// Train the coarse net on smoothed, downsampled CT, then the fine net on
/// [CT, coarse left, coarse right] at fine spacing. The nonpolymorphic variant
/// drops generic-labelled samples.
inline CascadeModel train_cascade(const CascadeConfig& cfg, std::span<const TrainingSample> dataset,
                                  const LabelHierarchy& h) {
  cfg.validate();
  std::vector<const TrainingSample*> used;
  for (const auto& s : dataset) {
    detail::require(s.ct.same_grid(s.label.vol()), "CT and label grids differ for case " + s.id);
    if (cfg.variant == Variant::nonpolymorphic && s.label.level() == LabelLevel::generic) continue;
    used.push_back(&s);
  }
  detail::require(!used.empty(), "no training samples");

  CascadeModel model;
  NetworkSpec coarse_spec = cfg.coarse_spec;
  coarse_spec.in_channels = 1;
  coarse_spec.out_channels = static_cast<int>(h.leaf_order().size());
  coarse_spec.seed = cfg.seed + seed_offset::kCoarseInit;
  NetworkSpec fine_spec = cfg.fine_spec;
  fine_spec.in_channels = 3;
  fine_spec.out_channels = coarse_spec.out_channels;
  fine_spec.seed = cfg.seed + seed_offset::kFineInit;

  std::vector<Volume> coarse_cts;
  std::vector<StageSample> coarse_data;
  for (const auto* s : used) {
    Volume c = coarse_ct(s->ct, cfg);
    coarse_data.push_back(make_stage_sample(ct_tensor(c), resample_labels(s->label, c, h), h));
    coarse_cts.push_back(std::move(c));
  }
  model.coarse = train_stage(coarse_spec, coarse_data, h,
                             stage_options(cfg, cfg.seed + seed_offset::kCoarseBatches), "coarse", model.log);
  coarse_data.clear();

  std::vector<StageSample> fine_data;
  for (std::size_t i = 0; i < used.size(); ++i) {
    const Volume f = fine_ct(used[i]->ct, cfg);
    const auto [pl, pr] = coarse_lr_on_fine_grid(model.coarse, coarse_cts[i], f, h);
    fine_data.push_back(make_stage_sample(fine_tensor(f, pl, pr), resample_labels(used[i]->label, f, h), h));
  }
  model.fine = train_stage(fine_spec, fine_data, h, stage_options(cfg, cfg.seed + seed_offset::kFineBatches),
                           "fine", model.log);
  return model;
}

/// left if p_left > threshold, right if p_right > threshold, else background.
inline Volume threshold_left_right(const PredictionStack& p, const Spacing3& spacing, double threshold,
                                   const LabelHierarchy& h) {
  const auto& s = p.channels.shape();
  const std::size_t nv = p.channels.voxels();
  const std::size_t cl = *h.channel_of(LabelHierarchy::kLeft, LabelLevel::specific);
  const std::size_t cr = *h.channel_of(LabelHierarchy::kRight, LabelLevel::specific);
  std::vector<float> out(nv, static_cast<float>(h.background_id()));
  for (std::size_t i = 0; i < nv; ++i) {
    if (p.channels.ptr()[cl * nv + i] > threshold) {
      out[i] = static_cast<float>(LabelHierarchy::kLeft);
    } else if (p.channels.ptr()[cr * nv + i] > threshold) {
      out[i] = static_cast<float>(LabelHierarchy::kRight);
    }
  }
  return Volume({s[1], s[2], s[3]}, spacing, VolumeKind::label, std::move(out));
}

/// Specific labels on the grid of `ct`.
inline LabelVolume predict_cascade(const CascadeConfig& cfg, const ParamStore& coarse, const ParamStore& fine,
                                   const Volume& ct, const LabelHierarchy& h) {
  detail::require(ct.kind() == VolumeKind::intensity_hu, "prediction input must be a CT volume");
  const Volume c = coarse_ct(ct, cfg);
  const Volume f = fine_ct(ct, cfg);
  const auto [pl, pr] = coarse_lr_on_fine_grid(coarse, c, f, h);
  const auto r = forward(fine, fine_tensor(f, pl, pr), h.leaf_order());
  Volume labels = threshold_left_right(r.probs, f.spacing(), cfg.threshold, h);
  if (!labels.same_grid(ct)) labels = resample(labels, ct.spacing(), ResampleMode::nearest, ct.dims());
  return LabelVolume(std::move(labels), LabelLevel::specific, h);
}

}  // namespace polyseg
