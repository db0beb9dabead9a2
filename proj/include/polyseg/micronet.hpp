#pragma once

// A small 3D U-shaped convolutional network with hand-written reverse-mode
// gradients, softmax cross-entropy losses for both label levels, Adam, and a
// bit-exact checkpoint format.
//
// Layout for `levels` = L and base channels b (c_l = b * 2^l):
//   enc0.conv1, enc0.conv2                3x3x3, ReLU
//   enc{l}.down                           3x3x3 stride 2, ReLU      (l = 1..L-1)
//   enc{l}.conv1, enc{l}.conv2            3x3x3, ReLU
//   dec{l}.conv1 on [up(x), skip_l]       3x3x3, ReLU               (l = L-2..0)
//   dec{l}.conv2                          3x3x3, ReLU
//   head                                  1x1x1 -> out_channels, softmax

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "polyseg/error.hpp"
#include "polyseg/label_hierarchy.hpp"
#include "polyseg/tensor.hpp"

namespace polyseg {

struct NetworkSpec {
  int levels = 2;
  int base_channels = 4;
  int in_channels = 1;
  int out_channels = 3;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require_arg(levels >= 1, "network levels must be >= 1");
    detail::require_arg(base_channels >= 1 && in_channels >= 1 && out_channels >= 1,
                        "network channel counts must be positive");
  }

  /// Spatial extents must be divisible by this.
  std::size_t size_multiple() const { return std::size_t{1} << (levels - 1); }

  nlohmann::json to_json() const {
    return {{"levels", levels},
            {"base_channels", base_channels},
            {"in_channels", in_channels},
            {"out_channels", out_channels},
            {"seed", seed}};
  }
  static NetworkSpec from_json(const nlohmann::json& j) {
    NetworkSpec s;
    s.levels = j.value("levels", s.levels);
    s.base_channels = j.value("base_channels", s.base_channels);
    s.in_channels = j.value("in_channels", s.in_channels);
    s.out_channels = j.value("out_channels", s.out_channels);
    s.seed = j.value("seed", s.seed);
    return s;
  }
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct LayerInfo {
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;

  std::size_t weight_count() const { return out_channels * in_channels * kernel * kernel * kernel; }
  std::size_t bias_count() const { return out_channels; }
};

inline std::vector<LayerInfo> layer_list(const NetworkSpec& spec) {
  spec.validate();
  auto ch = [&](int l) { return static_cast<std::size_t>(spec.base_channels) << l; };
  std::vector<LayerInfo> layers;
  layers.push_back({"enc0.conv1", static_cast<std::size_t>(spec.in_channels), ch(0), 3, 1});
  layers.push_back({"enc0.conv2", ch(0), ch(0), 3, 1});
  for (int l = 1; l < spec.levels; ++l) {
    const std::string p = "enc" + std::to_string(l);
    layers.push_back({p + ".down", ch(l - 1), ch(l), 3, 2});
    layers.push_back({p + ".conv1", ch(l), ch(l), 3, 1});
    layers.push_back({p + ".conv2", ch(l), ch(l), 3, 1});
  }
  for (int l = spec.levels - 2; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    layers.push_back({p + ".conv1", ch(l + 1) + ch(l), ch(l), 3, 1});
    layers.push_back({p + ".conv2", ch(l), ch(l), 3, 1});
  }
  layers.push_back({"head", ch(0), static_cast<std::size_t>(spec.out_channels), 1, 1});
  return layers;
}

struct Layer {
  LayerInfo info;
  std::vector<double> weight, bias;
  std::vector<double> grad_weight, grad_bias;
  // Adam moments.
  std::vector<double> m_weight, v_weight, m_bias, v_bias;
};

struct ParamStore {
  NetworkSpec spec;
  std::vector<Layer> layers;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  void zero_grad() {
    for (auto& l : layers) {
      std::fill(l.grad_weight.begin(), l.grad_weight.end(), 0.0);
      std::fill(l.grad_bias.begin(), l.grad_bias.end(), 0.0);
    }
  }

  const Layer& layer(std::string_view name) const {
    for (const auto& l : layers) {
      if (l.info.name == name) return l;
    }
    throw UsageError("no layer named " + std::string(name));
  }

  /// Parameters only; gradients and optimizer state are ignored.
  bool same_parameters(const ParamStore& o) const {
    if (!(spec == o.spec) || layers.size() != o.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].weight != o.layers[i].weight || layers[i].bias != o.layers[i].bias) return false;
    }
    return true;
  }
};

/// He-normal weights (std = sqrt(2 / fan_in)), zero biases, seeded by spec.seed.
inline ParamStore init_params(const NetworkSpec& spec) {
  ParamStore ps{spec, {}};
  std::mt19937_64 rng(spec.seed);
  for (const auto& info : layer_list(spec)) {
    Layer l;
    l.info = info;
    const double fan_in = static_cast<double>(info.in_channels * info.kernel * info.kernel * info.kernel);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    l.weight.resize(info.weight_count());
    for (auto& w : l.weight) w = dist(rng);
    l.bias.assign(info.bias_count(), 0.0);
    l.grad_weight.assign(l.weight.size(), 0.0);
    l.grad_bias.assign(l.bias.size(), 0.0);
    l.m_weight.assign(l.weight.size(), 0.0);
    l.v_weight.assign(l.weight.size(), 0.0);
    l.m_bias.assign(l.bias.size(), 0.0);
    l.v_bias.assign(l.bias.size(), 0.0);
    ps.layers.push_back(std::move(l));
  }
  return ps;
}

namespace detail {

using Shape = Tensor::Shape;

inline Shape conv_out_shape(const Shape& in, const LayerInfo& info) {
  if (info.stride == 1) return {info.out_channels, in[1], in[2], in[3]};
  auto half = [](std::size_t n) { return (n - 1) / 2 + 1; };
  return {info.out_channels, half(in[1]), half(in[2]), half(in[3])};
}

// Valid output range [lo, hi) for a tap at offset `off` with input extent n.
inline std::pair<std::size_t, std::size_t> tap_range(std::ptrdiff_t off, std::size_t stride,
                                                     std::size_t n_in, std::size_t n_out) {
  const auto s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = off < 0 ? (-off + s - 1) / s : 0;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(n_in) - 1 - off) / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(n_out));
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// 3x3x3 zero-padded convolution (pad 1) with stride S, plus bias.
template <std::size_t S>
void conv3_forward(const Tensor& in, const Layer& layer, Tensor& out) {
  const auto& is = in.shape();
  const auto& os = out.shape();
  const std::size_t ci_n = is[0], D = is[1], H = is[2], W = is[3];
  const std::size_t Ho = os[2], Wo = os[3];
  std::array<std::pair<std::size_t, std::size_t>, 3> xr{};
  for (int k = 0; k < 3; ++k) xr[k] = tap_range(k - 1, S, W, Wo);

  for (std::size_t co = 0; co < os[0]; ++co) {
    const double b = layer.bias[co];
    for (std::size_t oz = 0; oz < os[1]; ++oz) {
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        double* __restrict dst = out.ptr() + ((co * os[1] + oz) * Ho + oy) * Wo;
        std::fill(dst, dst + Wo, b);
        for (std::size_t ci = 0; ci < ci_n; ++ci) {
          for (std::size_t kz = 0; kz < 3; ++kz) {
            const auto iz = static_cast<std::ptrdiff_t>(oz * S + kz) - 1;
            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(D)) continue;
            for (std::size_t ky = 0; ky < 3; ++ky) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * S + ky) - 1;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              const double* __restrict src =
                  in.ptr() + ((ci * D + static_cast<std::size_t>(iz)) * H + static_cast<std::size_t>(iy)) * W;
              const double* w = layer.weight.data() + (((co * ci_n + ci) * 3 + kz) * 3 + ky) * 3;
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const double wk = w[kx];
                const auto [lo, hi] = xr[kx];
                const std::ptrdiff_t o = static_cast<std::ptrdiff_t>(kx) - 1;
                for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] += wk * src[static_cast<std::ptrdiff_t>(ox * S) + o];
              }
            }
          }
        }
      }
    }
  }
}

/// Accumulates weight/bias gradients and, if `gin` is non-null, writes the input gradient.
template <std::size_t S>
void conv3_backward(const Tensor& in, Layer& layer, const Tensor& gout, Tensor* gin) {
  const auto& is = in.shape();
  const auto& os = gout.shape();
  const std::size_t ci_n = is[0], D = is[1], H = is[2], W = is[3];
  const std::size_t Do = os[1], Ho = os[2], Wo = os[3];
  std::array<std::pair<std::size_t, std::size_t>, 3> xr{};
  for (int k = 0; k < 3; ++k) xr[k] = tap_range(k - 1, S, W, Wo);

  // Parameter gradients: one output row against the matching input rows.
  for (std::size_t co = 0; co < os[0]; ++co) {
    const double* g_co = gout.ptr() + co * Do * Ho * Wo;
    double bsum = 0.0;
    for (std::size_t i = 0; i < Do * Ho * Wo; ++i) bsum += g_co[i];
    layer.grad_bias[co] += bsum;

    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      double* gw = layer.grad_weight.data() + (co * ci_n + ci) * 27;
      std::array<double, 27> acc{};
      for (std::size_t oz = 0; oz < Do; ++oz) {
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const double* __restrict g = g_co + (oz * Ho + oy) * Wo;
          for (std::size_t kz = 0; kz < 3; ++kz) {
            const auto iz = static_cast<std::ptrdiff_t>(oz * S + kz) - 1;
            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(D)) continue;
            for (std::size_t ky = 0; ky < 3; ++ky) {
              const auto iy = static_cast<std::ptrdiff_t>(oy * S + ky) - 1;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              const double* __restrict src =
                  in.ptr() + ((ci * D + static_cast<std::size_t>(iz)) * H + static_cast<std::size_t>(iy)) * W;
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const auto [lo, hi] = xr[kx];
                const std::ptrdiff_t o = static_cast<std::ptrdiff_t>(kx) - 1;
                double dot = 0.0;
#pragma omp simd reduction(+ : dot)
                for (std::size_t ox = lo; ox < hi; ++ox) dot += g[ox] * src[static_cast<std::ptrdiff_t>(ox * S) + o];
                acc[(kz * 3 + ky) * 3 + kx] += dot;
              }
            }
          }
        }
      }
      for (std::size_t k = 0; k < 27; ++k) gw[k] += acc[k];
    }
  }

  if (gin == nullptr) return;
  *gin = Tensor(is);
  // Input gradient, accumulated per input row.
  for (std::size_t ci = 0; ci < ci_n; ++ci) {
    for (std::size_t iz = 0; iz < D; ++iz) {
      for (std::size_t iy = 0; iy < H; ++iy) {
        double* __restrict dst = gin->ptr() + ((ci * D + iz) * H + iy) * W;
        for (std::size_t kz = 0; kz < 3; ++kz) {
          const auto nz = static_cast<std::ptrdiff_t>(iz) + 1 - static_cast<std::ptrdiff_t>(kz);
          if (nz < 0 || nz % static_cast<std::ptrdiff_t>(S) != 0) continue;
          const auto oz = static_cast<std::size_t>(nz) / S;
          if (oz >= Do) continue;
          for (std::size_t ky = 0; ky < 3; ++ky) {
            const auto ny = static_cast<std::ptrdiff_t>(iy) + 1 - static_cast<std::ptrdiff_t>(ky);
            if (ny < 0 || ny % static_cast<std::ptrdiff_t>(S) != 0) continue;
            const auto oy = static_cast<std::size_t>(ny) / S;
            if (oy >= Ho) continue;
            for (std::size_t co = 0; co < os[0]; ++co) {
              const double* __restrict g = gout.ptr() + ((co * Do + oz) * Ho + oy) * Wo;
              const double* w = layer.weight.data() + (((co * ci_n + ci) * 3 + kz) * 3 + ky) * 3;
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const double wk = w[kx];
                const auto [lo, hi] = xr[kx];
                const std::ptrdiff_t o = static_cast<std::ptrdiff_t>(kx) - 1;
                for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<std::ptrdiff_t>(ox * S) + o] += wk * g[ox];
              }
            }
          }
        }
      }
    }
  }
}

inline void conv1_forward(const Tensor& in, const Layer& layer, Tensor& out) {
  const std::size_t nv = in.voxels();
  const std::size_t ci_n = in.channels();
  for (std::size_t co = 0; co < out.channels(); ++co) {
    double* __restrict dst = out.ptr() + co * nv;
    std::fill(dst, dst + nv, layer.bias[co]);
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      const double w = layer.weight[co * ci_n + ci];
      const double* __restrict src = in.ptr() + ci * nv;
      for (std::size_t i = 0; i < nv; ++i) dst[i] += w * src[i];
    }
  }
}

inline void conv1_backward(const Tensor& in, Layer& layer, const Tensor& gout, Tensor* gin) {
  const std::size_t nv = in.voxels();
  const std::size_t ci_n = in.channels();
  for (std::size_t co = 0; co < gout.channels(); ++co) {
    const double* __restrict g = gout.ptr() + co * nv;
    double bsum = 0.0;
    for (std::size_t i = 0; i < nv; ++i) bsum += g[i];
    layer.grad_bias[co] += bsum;
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      const double* __restrict src = in.ptr() + ci * nv;
      double dot = 0.0;
#pragma omp simd reduction(+ : dot)
      for (std::size_t i = 0; i < nv; ++i) dot += g[i] * src[i];
      layer.grad_weight[co * ci_n + ci] += dot;
    }
  }
  if (gin == nullptr) return;
  *gin = Tensor(in.shape());
  for (std::size_t ci = 0; ci < ci_n; ++ci) {
    double* __restrict dst = gin->ptr() + ci * nv;
    for (std::size_t co = 0; co < gout.channels(); ++co) {
      const double w = layer.weight[co * ci_n + ci];
      const double* __restrict g = gout.ptr() + co * nv;
      for (std::size_t i = 0; i < nv; ++i) dst[i] += w * g[i];
    }
  }
}

inline void relu_inplace(Tensor& t) {
  for (auto& v : t.data()) v = v > 0.0 ? v : 0.0;
}

/// g *= (out > 0), with `out` the post-activation tensor.
inline void relu_backward(const Tensor& out, Tensor& g) {
  auto o = out.data();
  auto d = g.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(o[i] > 0.0)) d[i] = 0.0;
  }
}

/// Nearest-neighbour 2x upsampling to the given spatial target shape.
inline Tensor upsample2(const Tensor& in, const Shape& target_spatial) {
  Tensor out({in.channels(), target_spatial[1], target_spatial[2], target_spatial[3]});
  for (std::size_t c = 0; c < out.channels(); ++c) {
    for (std::size_t z = 0; z < out.depth(); ++z) {
      for (std::size_t y = 0; y < out.height(); ++y) {
        const double* src = in.ptr() + ((c * in.depth() + z / 2) * in.height() + y / 2) * in.width();
        double* dst = &out.at(c, z, y, 0);
        for (std::size_t x = 0; x < out.width(); ++x) dst[x] = src[x / 2];
      }
    }
  }
  return out;
}

inline Tensor upsample2_backward(const Tensor& g, const Shape& in_shape) {
  Tensor out(in_shape);
  for (std::size_t c = 0; c < g.channels(); ++c) {
    for (std::size_t z = 0; z < g.depth(); ++z) {
      for (std::size_t y = 0; y < g.height(); ++y) {
        const double* src = g.ptr() + ((c * g.depth() + z) * g.height() + y) * g.width();
        double* dst = &out.at(c, z / 2, y / 2, 0);
        for (std::size_t x = 0; x < g.width(); ++x) dst[x / 2] += src[x];
      }
    }
  }
  return out;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  Tensor out({a.channels() + b.channels(), a.depth(), a.height(), a.width()});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

inline std::pair<Tensor, Tensor> split_channels(const Tensor& t, std::size_t first) {
  const auto& s = t.shape();
  Tensor a({first, s[1], s[2], s[3]});
  Tensor b({s[0] - first, s[1], s[2], s[3]});
  std::copy(t.data().begin(), t.data().begin() + static_cast<std::ptrdiff_t>(a.size()), a.data().begin());
  std::copy(t.data().begin() + static_cast<std::ptrdiff_t>(a.size()), t.data().end(), b.data().begin());
  return {std::move(a), std::move(b)};
}

inline Tensor softmax_channels(const Tensor& logits) {
  Tensor p(logits.shape());
  const std::size_t nv = logits.voxels();
  const std::size_t k = logits.channels();
  const double* z = logits.ptr();
  double* out = p.ptr();
  for (std::size_t i = 0; i < nv; ++i) {
    double mx = z[i];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, z[c * nv + i]);
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double e = std::exp(z[c * nv + i] - mx);
      out[c * nv + i] = e;
      sum += e;
    }
    for (std::size_t c = 0; c < k; ++c) out[c * nv + i] /= sum;
  }
  return p;
}

inline void add_inplace(Tensor& a, const Tensor& b) {
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) da[i] += db[i];
}

}  // namespace detail

/// Activations recorded by forward() for use by backward().
struct Tape {
  NetworkSpec spec;
  Tensor::Shape input_shape{};
  // For layer i: its input and its output (post-ReLU; raw logits for the head).
  std::vector<std::shared_ptr<const Tensor>> inputs;
  std::vector<std::shared_ptr<const Tensor>> outputs;
  // Spatial shapes of the skip tensors, per encoder level.
  std::vector<Tensor::Shape> skip_shapes;
};

struct ForwardResult {
  Tensor logits;
  PredictionStack probs;
  Tape tape;
};

/// `channel_meaning` labels the output channels (defaults to 0..out-1).
inline ForwardResult forward(const ParamStore& params, const Tensor& x,
                             std::vector<int> channel_meaning = {}) {
  const auto& spec = params.spec;
  detail::require(x.channels() == static_cast<std::size_t>(spec.in_channels),
                  "input has " + std::to_string(x.channels()) + " channels, network expects " +
                      std::to_string(spec.in_channels));
  const std::size_t m = spec.size_multiple();
  detail::require(x.depth() % m == 0 && x.height() % m == 0 && x.width() % m == 0,
                  "input spatial shape " + shape_string(x.shape()) + " not divisible by " +
                      std::to_string(m));
  detail::require(x.all_finite(), "non-finite network input");
  detail::require(params.layers.size() == layer_list(spec).size(), "parameter store does not match spec");

  if (channel_meaning.empty()) {
    for (int c = 0; c < spec.out_channels; ++c) channel_meaning.push_back(c);
  }
  detail::require(channel_meaning.size() == static_cast<std::size_t>(spec.out_channels),
                  "channel meaning does not match out_channels");

  Tape tape;
  tape.spec = spec;
  tape.input_shape = x.shape();

  std::size_t idx = 0;
  auto run = [&](std::shared_ptr<const Tensor> in, bool relu) {
    const Layer& layer = params.layers[idx];
    auto out = std::make_shared<Tensor>(detail::conv_out_shape(in->shape(), layer.info));
    if (layer.info.kernel == 1) {
      detail::conv1_forward(*in, layer, *out);
    } else if (layer.info.stride == 2) {
      detail::conv3_forward<2>(*in, layer, *out);
    } else {
      detail::conv3_forward<1>(*in, layer, *out);
    }
    if (relu) detail::relu_inplace(*out);
    tape.inputs.push_back(in);
    tape.outputs.push_back(out);
    ++idx;
    return std::shared_ptr<const Tensor>(out);
  };

  std::shared_ptr<const Tensor> cur = std::make_shared<Tensor>(x);
  std::vector<std::shared_ptr<const Tensor>> skips;
  for (int l = 0; l < spec.levels; ++l) {
    if (l > 0) cur = run(cur, true);
    cur = run(cur, true);
    cur = run(cur, true);
    if (l < spec.levels - 1) {
      skips.push_back(cur);
      tape.skip_shapes.push_back(cur->shape());
    }
  }
  for (int l = spec.levels - 2; l >= 0; --l) {
    const auto& skip = skips[static_cast<std::size_t>(l)];
    auto up = detail::upsample2(*cur, skip->shape());
    cur = std::make_shared<Tensor>(detail::concat_channels(up, *skip));
    cur = run(cur, true);
    cur = run(cur, true);
  }
  cur = run(cur, false);

  Tensor logits = *cur;
  PredictionStack probs{detail::softmax_channels(logits), std::move(channel_meaning), LabelLevel::specific};
  return {std::move(logits), std::move(probs), std::move(tape)};
}

/// Accumulates exact parameter gradients of sum(dLogits * logits) into `params`.
inline void backward(ParamStore& params, const Tape& tape, const Tensor& dlogits) {
  const auto& spec = tape.spec;
  detail::require(spec == params.spec, "tape was recorded with a different network spec");
  detail::require(!tape.outputs.empty() && dlogits.shape() == tape.outputs.back()->shape(),
                  "dLogits shape does not match the recorded logits");

  std::size_t idx = params.layers.size();
  // Backprop through layer idx-1; `g` is the gradient wrt that layer's output.
  auto back = [&](Tensor g, bool relu, bool need_input_grad) {
    --idx;
    Layer& layer = params.layers[idx];
    const Tensor& in = *tape.inputs[idx];
    if (relu) detail::relu_backward(*tape.outputs[idx], g);
    Tensor gin;
    Tensor* gin_ptr = need_input_grad ? &gin : nullptr;
    if (layer.info.kernel == 1) {
      detail::conv1_backward(in, layer, g, gin_ptr);
    } else if (layer.info.stride == 2) {
      detail::conv3_backward<2>(in, layer, g, gin_ptr);
    } else {
      detail::conv3_backward<1>(in, layer, g, gin_ptr);
    }
    return gin;
  };

  Tensor g = back(dlogits, false, true);
  std::vector<Tensor> skip_grads(static_cast<std::size_t>(spec.levels - 1));
  for (int l = 0; l <= spec.levels - 2; ++l) {
    g = back(std::move(g), true, true);
    g = back(std::move(g), true, true);
    const std::size_t up_channels = static_cast<std::size_t>(spec.base_channels) << (l + 1);
    auto [g_up, g_skip] = detail::split_channels(g, up_channels);
    skip_grads[static_cast<std::size_t>(l)] = std::move(g_skip);
    const auto& deeper = *tape.outputs[idx - 1];  // last encoder/decoder output feeding the upsample
    g = detail::upsample2_backward(g_up, deeper.shape());
  }
  for (int l = spec.levels - 1; l >= 0; --l) {
    if (l < spec.levels - 1) detail::add_inplace(g, skip_grads[static_cast<std::size_t>(l)]);
    g = back(std::move(g), true, true);
    g = back(std::move(g), true, l > 0);
    if (l > 0) g = back(std::move(g), true, true);
  }
}

// ---------------------------------------------------------------------------
// Losses

struct LossResult {
  double loss = 0.0;
  std::vector<Tensor> dlogits;  // one per sample; zero for unmasked samples
};

namespace detail {

inline double safe_log(double p) { return std::log(std::max(p, std::numeric_limits<double>::min())); }

inline std::size_t masked_voxels(std::span<const PredictionStack> probs, const std::vector<bool>& mask) {
  require(mask.size() == probs.size(), "mask length does not match batch size");
  std::size_t n = 0;
  for (std::size_t s = 0; s < probs.size(); ++s) {
    if (mask[s]) n += probs[s].channels.voxels();
  }
  require(n > 0, "empty loss mask");
  return n;
}

}  // namespace detail

/// Mean voxelwise cross-entropy over masked samples. dLogits = (p - t) / N on masked samples.
inline LossResult loss_ce(std::span<const PredictionStack> probs, std::span<const PredictionStack> targets,
                          const std::vector<bool>& mask) {
  detail::require(probs.size() == targets.size(), "probs/targets batch size mismatch");
  const std::size_t n = detail::masked_voxels(probs, mask);
  const double inv_n = 1.0 / static_cast<double>(n);

  LossResult r;
  double total = 0.0;
  for (std::size_t s = 0; s < probs.size(); ++s) {
    const Tensor& p = probs[s].channels;
    const Tensor& t = targets[s].channels;
    detail::require(p.shape() == t.shape(), "probs/target shape mismatch " + shape_string(p.shape()) +
                                                " vs " + shape_string(t.shape()));
    Tensor d(p.shape());
    if (mask[s]) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double ti = t.ptr()[i];
        if (ti != 0.0) total -= ti * detail::safe_log(p.ptr()[i]);
        d.ptr()[i] = (p.ptr()[i] - ti) * inv_n;
      }
    }
    r.dlogits.push_back(std::move(d));
  }
  r.loss = total * inv_n;
  return r;
}

/// Cross-entropy of the aggregated (generic) prediction against generic targets,
/// differentiated back to the specific-head logits through the channel summation
/// and the softmax.
inline LossResult loss_ce_generic(std::span<const PredictionStack> probs_specific,
                                  std::span<const PredictionStack> targets_generic,
                                  const std::vector<bool>& mask, const LabelHierarchy& h) {
  detail::require(probs_specific.size() == targets_generic.size(), "probs/targets batch size mismatch");
  const std::size_t n = detail::masked_voxels(probs_specific, mask);
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<std::size_t> group;  // specific channel -> generic channel
  for (int leaf : h.leaf_order()) group.push_back(*h.channel_of(h.generic_of(leaf), LabelLevel::generic));
  const std::size_t kg = h.generic_order().size();

  LossResult r;
  double total = 0.0;
  std::vector<double> gg(kg);
  for (std::size_t s = 0; s < probs_specific.size(); ++s) {
    const Tensor& p = probs_specific[s].channels;
    Tensor d(p.shape());
    if (mask[s]) {
      const PredictionStack agg = aggregate_probabilities(probs_specific[s], h);
      const Tensor& t = targets_generic[s].channels;
      detail::require(t.shape() == agg.channels.shape(), "generic target shape mismatch");
      const std::size_t nv = p.voxels();
      for (std::size_t i = 0; i < nv; ++i) {
        // dL/dP_g for the aggregated probabilities, then the softmax Jacobian.
        double dot = 0.0;
        for (std::size_t g = 0; g < kg; ++g) {
          const double tg = t.ptr()[g * nv + i];
          const double pg = agg.channels.ptr()[g * nv + i];
          if (tg != 0.0) total -= tg * detail::safe_log(pg);
          gg[g] = tg != 0.0 ? -tg / std::max(pg, std::numeric_limits<double>::min()) : 0.0;
          dot += pg * gg[g];
        }
        for (std::size_t c = 0; c < p.channels(); ++c) {
          const double pc = p.ptr()[c * nv + i];
          d.ptr()[c * nv + i] = pc * (gg[group[c]] - dot) * inv_n;
        }
      }
    }
    r.dlogits.push_back(std::move(d));
  }
  r.loss = total * inv_n;
  return r;
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update from the current gradient slots; `t` counts from 1.
inline void adam_step(ParamStore& params, const AdamConfig& cfg, long t) {
  detail::require_arg(t >= 1, "adam step index must be >= 1");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                    std::vector<double>& v) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mh = m[i] / c1;
      const double vh = v[i] / c2;
      p[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  };
  for (auto& l : params.layers) {
    update(l.weight, l.grad_weight, l.m_weight, l.v_weight);
    update(l.bias, l.grad_bias, l.m_bias, l.v_bias);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: <base>.ckpt.json manifest + <base>.ckpt.bin little-endian float64 blob.

inline std::pair<std::filesystem::path, std::filesystem::path> checkpoint_paths(const std::filesystem::path& base) {
  std::string s = base.string();
  for (std::string_view suffix : {".ckpt.json", ".ckpt.bin"}) {
    if (s.size() > suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0) {
      s.resize(s.size() - suffix.size());
    }
  }
  return {s + ".ckpt.json", s + ".ckpt.bin"};
}

namespace detail {

inline std::uint64_t to_le64(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
    return r;
  }
  return v;
}

}  // namespace detail

inline void save_checkpoint(const ParamStore& params, const std::filesystem::path& base) {
  const auto [manifest_path, blob_path] = checkpoint_paths(base);
  if (manifest_path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(manifest_path.parent_path(), ec);
  }
  nlohmann::json j;
  j["spec"] = params.spec.to_json();
  j["blob"] = blob_path.filename().string();
  j["layers"] = nlohmann::json::array();

  std::vector<std::uint64_t> words;
  for (const auto& l : params.layers) {
    nlohmann::json jl{{"name", l.info.name},
                      {"in_channels", l.info.in_channels},
                      {"out_channels", l.info.out_channels},
                      {"kernel", l.info.kernel},
                      {"stride", l.info.stride},
                      {"weight_offset", words.size() * 8},
                      {"weight_count", l.weight.size()}};
    for (double w : l.weight) words.push_back(detail::to_le64(std::bit_cast<std::uint64_t>(w)));
    jl["bias_offset"] = words.size() * 8;
    jl["bias_count"] = l.bias.size();
    for (double b : l.bias) words.push_back(detail::to_le64(std::bit_cast<std::uint64_t>(b)));
    j["layers"].push_back(jl);
  }

  std::ofstream m(manifest_path, std::ios::trunc);
  if (!m) throw IoError("cannot write " + manifest_path.string());
  m << j.dump(2) << '\n';
  std::ofstream b(blob_path, std::ios::binary | std::ios::trunc);
  if (!b) throw IoError("cannot write " + blob_path.string());
  b.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 8));
  if (!m || !b) throw IoError("checkpoint write failed for " + base.string());
}

inline ParamStore load_checkpoint(const std::filesystem::path& base) {
  const auto [manifest_path, blob_path] = checkpoint_paths(base);
  std::ifstream m(manifest_path);
  if (!m) throw IoError("missing checkpoint manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(m);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  ParamStore ps = init_params(NetworkSpec::from_json(j.at("spec")));

  const auto blob_file = manifest_path.parent_path() / j.at("blob").get<std::string>();
  std::ifstream b(blob_file, std::ios::binary | std::ios::ate);
  if (!b) throw IoError("missing checkpoint blob " + blob_file.string());
  const auto bytes = static_cast<std::size_t>(b.tellg());
  detail::require(bytes % 8 == 0 && bytes / 8 == ps.parameter_count(), "checkpoint blob size mismatch");
  b.seekg(0);
  std::vector<std::uint64_t> words(bytes / 8);
  b.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(bytes));

  const auto& jl = j.at("layers");
  detail::require(jl.size() == ps.layers.size(), "checkpoint layer count mismatch");
  for (std::size_t i = 0; i < ps.layers.size(); ++i) {
    auto& l = ps.layers[i];
    detail::require(jl[i].at("name").get<std::string>() == l.info.name, "checkpoint layer name mismatch");
    auto fill = [&](std::vector<double>& dst, std::size_t offset, std::size_t count) {
      detail::require(count == dst.size() && offset % 8 == 0 && offset / 8 + count <= words.size(),
                      "checkpoint layer " + l.info.name + " has inconsistent extents");
      for (std::size_t k = 0; k < count; ++k) {
        dst[k] = std::bit_cast<double>(detail::to_le64(words[offset / 8 + k]));
      }
    };
    fill(l.weight, jl[i].at("weight_offset").get<std::size_t>(), jl[i].at("weight_count").get<std::size_t>());
    fill(l.bias, jl[i].at("bias_offset").get<std::size_t>(), jl[i].at("bias_count").get<std::size_t>());
  }
  return ps;
}

}  // namespace polyseg
