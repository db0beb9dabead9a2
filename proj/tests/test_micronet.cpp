#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "polyseg/micronet.hpp"

using namespace polyseg;
namespace fs = std::filesystem;

namespace {

// Zero-padded direct convolution, 3x3x3 or 1x1x1, straight from the definition.
Tensor naive_conv(const Tensor& in, const Layer& l) {
  const auto& info = l.info;
  const std::size_t S = info.stride;
  const std::size_t K = info.kernel;
  const std::ptrdiff_t pad = K == 3 ? 1 : 0;
  auto out_n = [&](std::size_t n) { return S == 1 ? n : (n + 1) / 2; };
  Tensor out({info.out_channels, out_n(in.depth()), out_n(in.height()), out_n(in.width())});
  for (std::size_t co = 0; co < info.out_channels; ++co)
    for (std::size_t z = 0; z < out.depth(); ++z)
      for (std::size_t y = 0; y < out.height(); ++y)
        for (std::size_t x = 0; x < out.width(); ++x) {
          double acc = l.bias[co];
          for (std::size_t ci = 0; ci < info.in_channels; ++ci)
            for (std::size_t kz = 0; kz < K; ++kz)
              for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                  const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(z * S + kz) - pad;
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * S + ky) - pad;
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * S + kx) - pad;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<std::ptrdiff_t>(in.depth()) ||
                      iy >= static_cast<std::ptrdiff_t>(in.height()) || ix >= static_cast<std::ptrdiff_t>(in.width()))
                    continue;
                  acc += l.weight[(((co * info.in_channels + ci) * K + kz) * K + ky) * K + kx] *
                         in.at(ci, static_cast<std::size_t>(iz), static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
                }
          out.at(co, z, y, x) = acc;
        }
  return out;
}

Layer random_layer(LayerInfo info, std::mt19937_64& rng) {
  Layer l;
  l.info = info;
  std::normal_distribution<double> n(0.0, 0.5);
  l.weight.resize(info.weight_count());
  l.bias.resize(info.bias_count());
  for (auto& w : l.weight) w = n(rng);
  for (auto& b : l.bias) b = n(rng);
  l.grad_weight.assign(l.weight.size(), 0.0);
  l.grad_bias.assign(l.bias.size(), 0.0);
  return l;
}

PredictionStack random_target(const Tensor::Shape& s, std::mt19937_64& rng) {
  Tensor t(s);
  std::uniform_int_distribution<std::size_t> u(0, s[0] - 1);
  for (std::size_t i = 0; i < t.voxels(); ++i) t.ptr()[u(rng) * t.voxels() + i] = 1.0;
  return {t, {}, LabelLevel::specific};
}

double ce_loss(const ParamStore& p, const Tensor& x, const PredictionStack& target) {
  const auto r = forward(p, x);
  const std::vector<PredictionStack> probs{r.probs}, targets{target};
  return loss_ce(probs, targets, {true}).loss;
}

}  // namespace

TEST(NetworkSpec, GoldenLayerListAndCount) {
  const NetworkSpec spec{2, 4, 1, 3, 0};
  const auto layers = layer_list(spec);
  const std::vector<std::tuple<std::string, std::size_t, std::size_t, std::size_t, std::size_t>> golden{
      {"enc0.conv1", 1, 4, 3, 1},  {"enc0.conv2", 4, 4, 3, 1}, {"enc1.down", 4, 8, 3, 2},
      {"enc1.conv1", 8, 8, 3, 1},  {"enc1.conv2", 8, 8, 3, 1}, {"dec0.conv1", 12, 4, 3, 1},
      {"dec0.conv2", 4, 4, 3, 1},  {"head", 4, 3, 1, 1}};
  ASSERT_EQ(layers.size(), golden.size());
  for (std::size_t i = 0; i < golden.size(); ++i) {
    const auto& [name, in, out, k, s] = golden[i];
    EXPECT_EQ(layers[i].name, name);
    EXPECT_EQ(layers[i].in_channels, in);
    EXPECT_EQ(layers[i].out_channels, out);
    EXPECT_EQ(layers[i].kernel, k);
    EXPECT_EQ(layers[i].stride, s);
  }
  EXPECT_EQ(init_params(spec).parameter_count(), 6643u);
  EXPECT_EQ(oracle::count_params(layers), 6643u);
}

TEST(NetworkSpec, JsonRoundTrip) {
  const NetworkSpec s{3, 5, 2, 4, 99};
  EXPECT_EQ(NetworkSpec::from_json(s.to_json()), s);
  EXPECT_THROW(layer_list(NetworkSpec{0, 4, 1, 3, 0}), UsageError);
}

TEST(Init, DeterministicPerSeed) {
  const NetworkSpec a{2, 4, 1, 3, 7};
  EXPECT_TRUE(init_params(a).same_parameters(init_params(a)));
  NetworkSpec b = a;
  b.seed = 8;
  EXPECT_FALSE(init_params(a).same_parameters(init_params(b)));
  for (const auto& l : init_params(a).layers) {
    for (double v : l.bias) EXPECT_EQ(v, 0.0);
  }
}

TEST(Conv, MatchesDirectConvolution) {
  std::mt19937_64 rng(3);
  for (const LayerInfo& info : {LayerInfo{"c", 2, 3, 3, 1}, LayerInfo{"d", 2, 3, 3, 2}, LayerInfo{"h", 4, 3, 1, 1}}) {
    for (const Tensor::Shape s : {Tensor::Shape{info.in_channels, 5, 6, 7}, Tensor::Shape{info.in_channels, 4, 4, 8}}) {
      const Tensor in = oracle::random_tensor(s, rng);
      const Layer l = random_layer(info, rng);
      Tensor out(detail::conv_out_shape(s, info));
      if (info.kernel == 1) {
        detail::conv1_forward(in, l, out);
      } else if (info.stride == 2) {
        detail::conv3_forward<2>(in, l, out);
      } else {
        detail::conv3_forward<1>(in, l, out);
      }
      const Tensor ref = naive_conv(in, l);
      ASSERT_EQ(out.shape(), ref.shape());
      for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out.ptr()[i], ref.ptr()[i], 1e-12);
    }
  }
}

TEST(Conv, BackwardIsAdjointOfForward) {
  // <conv(x), g> is linear in x and w; its gradients must match conv3_backward.
  std::mt19937_64 rng(4);
  for (std::size_t stride : {1u, 2u}) {
    const LayerInfo info{"c", 2, 3, 3, stride};
    const Tensor x = oracle::random_tensor({2, 5, 6, 7}, rng);
    Layer l = random_layer(info, rng);
    const Tensor g = oracle::random_tensor(detail::conv_out_shape(x.shape(), info), rng);
    Tensor gin;
    if (stride == 2) {
      detail::conv3_backward<2>(x, l, g, &gin);
    } else {
      detail::conv3_backward<1>(x, l, g, &gin);
    }
    auto inner = [&](const Tensor& in, const Layer& layer) {
      const Tensor y = naive_conv(in, layer);
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y.ptr()[i] * g.ptr()[i];
      return s;
    };
    // Input gradient: exact by linearity, check a few coordinates.
    for (std::size_t i : {std::size_t{0}, std::size_t{17}, std::size_t{101}, x.size() - 1}) {
      Tensor xp = x;
      xp.ptr()[i] += 1.0;
      EXPECT_NEAR(inner(xp, l) - inner(x, l), gin.ptr()[i], 1e-9);
    }
    for (std::size_t i : {0u, 13u, 53u}) {
      Layer lp = l;
      lp.weight[i] += 1.0;
      EXPECT_NEAR(inner(x, lp) - inner(x, l), l.grad_weight[i], 1e-9);
    }
    Layer lb = l;
    lb.bias[1] += 1.0;
    EXPECT_NEAR(inner(x, lb) - inner(x, l), l.grad_bias[1], 1e-9);
  }
}

TEST(Forward, ShapesAndSoftmax) {
  std::mt19937_64 rng(5);
  const auto p = init_params({2, 4, 1, 3, 1});
  const Tensor x = oracle::random_tensor({1, 8, 6, 10}, rng);
  const auto r = forward(p, x, {1, 2, 0});
  EXPECT_EQ(r.logits.shape(), (Tensor::Shape{3, 8, 6, 10}));
  EXPECT_EQ(r.probs.channel_meaning, (std::vector<int>{1, 2, 0}));
  EXPECT_LT(max_normalization_error(r.probs), 1e-12);
  for (double v : r.probs.channels.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Forward, ZeroParametersGiveUniformOutput) {
  auto p = init_params({2, 4, 1, 3, 1});
  for (auto& l : p.layers) std::fill(l.weight.begin(), l.weight.end(), 0.0);
  std::mt19937_64 rng(6);
  const auto r = forward(p, oracle::random_tensor({1, 4, 4, 4}, rng));
  for (double v : r.probs.channels.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Forward, RejectsBadInput) {
  const auto p = init_params({2, 4, 1, 3, 1});
  EXPECT_THROW(forward(p, Tensor({2, 4, 4, 4})), DataError);
  EXPECT_THROW(forward(p, Tensor({1, 5, 4, 4})), DataError);
  Tensor bad({1, 4, 4, 4});
  bad.ptr()[3] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(forward(p, bad), DataError);
}

TEST(Forward, TranslationConsistentAwayFromBorders) {
  // Shift by an even amount (the stride-2 grid is preserved); compare voxels
  // farther from every border than the receptive field reaches.
  const std::size_t n = 40, shift = 2, margin = 12;
  std::mt19937_64 rng(7);
  const Tensor big = oracle::random_tensor({1, n + shift, n + shift, n + shift}, rng);
  Tensor a({1, n, n, n}), b({1, n, n, n});
  for (std::size_t z = 0; z < n; ++z)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        a.at(0, z, y, x) = big.at(0, z, y, x);
        b.at(0, z, y, x) = big.at(0, z + shift, y + shift, x + shift);
      }
  const auto p = init_params({2, 4, 1, 3, 2});
  const auto ra = forward(p, a), rb = forward(p, b);
  double worst = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t z = margin; z + margin < n; ++z)
      for (std::size_t y = margin; y + margin < n; ++y)
        for (std::size_t x = margin; x + margin < n; ++x) {
          worst = std::max(worst, std::abs(ra.logits.at(c, z + shift, y + shift, x + shift) - rb.logits.at(c, z, y, x)));
        }
  EXPECT_LT(worst, 1e-10);
}

TEST(Loss, UniformPredictionIsLog3) {
  Tensor p({3, 2, 2, 2});
  for (auto& v : p.data()) v = 1.0 / 3.0;
  std::mt19937_64 rng(8);
  const std::vector<PredictionStack> probs{{p, {}, LabelLevel::specific}};
  const std::vector<PredictionStack> t{random_target(p.shape(), rng)};
  EXPECT_NEAR(loss_ce(probs, t, {true}).loss, std::log(3.0), 1e-12);
  EXPECT_NEAR(loss_ce(probs, t, {true}).loss, 1.0986, 1e-4);
}

TEST(Loss, PerfectPredictionIsNearZero) {
  std::mt19937_64 rng(9);
  const auto t = random_target({3, 3, 3, 3}, rng);
  PredictionStack p = t;
  for (auto& v : p.channels.data()) v = v == 1.0 ? 1.0 - 2e-7 : 1e-7;
  const std::vector<PredictionStack> probs{p}, targets{t};
  EXPECT_LT(loss_ce(probs, targets, {true}).loss, 1e-6);
}

TEST(Loss, MatchesBruteForceMeanOverMaskedSamples) {
  std::mt19937_64 rng(10);
  std::vector<PredictionStack> probs, targets;
  for (int s = 0; s < 3; ++s) {
    Tensor l = oracle::random_tensor({3, 2, 3, 2}, rng, -3, 3);
    probs.push_back({detail::softmax_channels(l), {}, LabelLevel::specific});
    targets.push_back(random_target(l.shape(), rng));
  }
  const std::vector<bool> mask{true, false, true};
  double sum = 0;
  std::size_t count = 0;
  for (int s : {0, 2}) {
    const auto& p = probs[s].channels;
    const auto& t = targets[s].channels;
    for (std::size_t i = 0; i < p.voxels(); ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        if (t.ptr()[c * p.voxels() + i] == 1.0) sum -= std::log(p.ptr()[c * p.voxels() + i]);
      }
      ++count;
    }
  }
  const auto r = loss_ce(probs, targets, mask);
  EXPECT_NEAR(r.loss, sum / static_cast<double>(count), 1e-9);
  for (double v : r.dlogits[1].data()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(loss_ce(probs, targets, {false, false, false}), DataError);
}

TEST(Loss, GenericLossMatchesAggregatedCrossEntropy) {
  const auto& h = LabelHierarchy::lung();
  std::mt19937_64 rng(11);
  Tensor l = oracle::random_tensor({3, 2, 2, 3}, rng, -3, 3);
  const PredictionStack p{detail::softmax_channels(l), h.leaf_order(), LabelLevel::specific};
  Tensor tg({2, 2, 2, 3});
  std::uniform_int_distribution<int> u(0, 1);
  for (std::size_t i = 0; i < tg.voxels(); ++i) tg.ptr()[u(rng) * tg.voxels() + i] = 1.0;
  const std::vector<PredictionStack> probs{p}, targets{{tg, h.generic_order(), LabelLevel::generic}};
  double sum = 0;
  const std::size_t nv = tg.voxels();
  for (std::size_t i = 0; i < nv; ++i) {
    const double lung = p.channels.ptr()[i] + p.channels.ptr()[nv + i];
    const double bg = p.channels.ptr()[2 * nv + i];
    sum -= tg.ptr()[i] == 1.0 ? std::log(lung) : std::log(bg);
  }
  EXPECT_NEAR(loss_ce_generic(probs, targets, {true}, h).loss, sum / static_cast<double>(nv), 1e-12);
}

// Central differences with eps = 1e-3 at a point where no ReLU flips inside
// the +-eps interval of any parameter; the flip count is checked, not assumed.
void expect_gradients_match(NetworkSpec spec, Tensor::Shape in_shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto p = init_params(spec);
  const Tensor x = oracle::random_tensor(in_shape, rng);
  const auto target = random_target({3, in_shape[1], in_shape[2], in_shape[3]}, rng);
  oracle::place_relu_margins(p, {x}, 0.5);

  p.zero_grad();
  const auto r = forward(p, x);
  const auto base_pattern = oracle::relu_pattern(r.tape);
  const std::vector<PredictionStack> probs{r.probs}, targets{target};
  backward(p, r.tape, loss_ce(probs, targets, {true}).dlogits[0]);

  std::size_t flips = 0;
  const auto check = oracle::finite_difference_check(p, [&](const ParamStore& q) {
    const auto rq = forward(q, x);
    flips += oracle::relu_pattern(rq.tape) != base_pattern;
    const std::vector<PredictionStack> pq{rq.probs};
    return loss_ce(pq, targets, {true}).loss;
  });
  EXPECT_EQ(flips, 0u);
  EXPECT_EQ(check.checked, p.parameter_count());
  EXPECT_LT(check.max_rel_error, 1e-4) << "worst layer " << check.worst_layer;
}

TEST(Gradient, FiniteDifferenceWholeNetwork) { expect_gradients_match({2, 2, 1, 3, 13}, {1, 8, 8, 8}, 12); }

TEST(Gradient, ThreeLevelNetwork) { expect_gradients_match({3, 2, 2, 3, 15}, {2, 8, 8, 4}, 14); }

TEST(Gradient, SmallStepAtInitialization) {
  // Plain He initialization with mixed ReLU states; a small step keeps kink
  // crossings out of the difference quotient.
  std::mt19937_64 rng(12);
  auto p = init_params({2, 2, 1, 3, 13});
  const Tensor x = oracle::random_tensor({1, 8, 8, 8}, rng);
  const auto target = random_target({3, 8, 8, 8}, rng);
  p.zero_grad();
  const auto r = forward(p, x);
  const std::vector<PredictionStack> probs{r.probs}, targets{target};
  backward(p, r.tape, loss_ce(probs, targets, {true}).dlogits[0]);
  const auto check =
      oracle::finite_difference_check(p, [&](const ParamStore& q) { return ce_loss(q, x, target); }, 1e-5, 1e-6);
  EXPECT_LT(check.max_rel_error, 1e-4) << "worst layer " << check.worst_layer;
}

TEST(Gradient, LinearInUpstreamGradient) {
  std::mt19937_64 rng(16);
  auto p = init_params({2, 2, 1, 3, 17});
  const Tensor x = oracle::random_tensor({1, 4, 4, 4}, rng);
  const auto r = forward(p, x);
  const Tensor d = oracle::random_tensor(r.logits.shape(), rng);
  Tensor d2 = d;
  for (auto& v : d2.data()) v *= 2.0;

  p.zero_grad();
  backward(p, r.tape, Tensor(r.logits.shape()));
  for (const auto& l : p.layers) {
    for (double g : l.grad_weight) EXPECT_EQ(g, 0.0);
  }
  p.zero_grad();
  backward(p, r.tape, d);
  auto once = p;
  p.zero_grad();
  backward(p, r.tape, d2);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    for (std::size_t k = 0; k < p.layers[i].grad_weight.size(); ++k) {
      EXPECT_NEAR(p.layers[i].grad_weight[k], 2.0 * once.layers[i].grad_weight[k], 1e-12);
    }
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = init_params({1, 1, 1, 1, 0});
  const double w0 = p.layers[0].weight[0];
  for (auto& l : p.layers) {
    std::fill(l.grad_weight.begin(), l.grad_weight.end(), 1.0);
    std::fill(l.grad_bias.begin(), l.grad_bias.end(), 1.0);
  }
  adam_step(p, {0.1, 0.9, 0.999, 1e-8}, 1);
  EXPECT_NEAR(p.layers[0].weight[0] - w0, -0.1, 1e-6);
  EXPECT_THROW(adam_step(p, {}, 0), UsageError);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto p = init_params({2, 2, 1, 3, 1});
  const auto before = p;
  p.zero_grad();
  adam_step(p, {}, 1);
  EXPECT_TRUE(p.same_parameters(before));
}

TEST(Adam, IdenticalStoresStayIdentical) {
  auto a = init_params({2, 2, 1, 3, 1});
  auto b = a;
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n;
  for (int t = 1; t <= 5; ++t) {
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      for (std::size_t k = 0; k < a.layers[i].grad_weight.size(); ++k) {
        a.layers[i].grad_weight[k] = b.layers[i].grad_weight[k] = n(rng);
      }
    }
    adam_step(a, {}, t);
    adam_step(b, {}, t);
  }
  EXPECT_TRUE(a.same_parameters(b));
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const fs::path dir = fs::path(testing::TempDir()) / "polyseg_ckpt";
  fs::remove_all(dir);
  auto p = init_params({2, 3, 3, 3, 44});
  p.layers[2].bias[1] = -0.0;
  p.layers[3].weight[5] = 1e-310;  // subnormal survives
  save_checkpoint(p, dir / "net");
  const auto q = load_checkpoint(dir / "net");
  EXPECT_TRUE(p.same_parameters(q));
  EXPECT_TRUE(std::signbit(q.layers[2].bias[1]));
  EXPECT_EQ(fs::file_size(dir / "net.ckpt.bin"), p.parameter_count() * 8);
}

TEST(Checkpoint, TruncatedBlobIsDataError) {
  const fs::path dir = fs::path(testing::TempDir()) / "polyseg_ckpt_bad";
  fs::remove_all(dir);
  save_checkpoint(init_params({2, 2, 1, 3, 0}), dir / "net");
  fs::resize_file(dir / "net.ckpt.bin", 64);
  EXPECT_THROW(load_checkpoint(dir / "net"), DataError);
  EXPECT_THROW(load_checkpoint(dir / "absent"), IoError);
}
