#include <gtest/gtest.h>

#include <cmath>

#include "losa/baselines.hpp"

using namespace losa;

namespace {

double gelu_ref(double x) { return 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))); }

/// alpha * (GeLU(row W_d + b_d) W_u + b_u) for one row, written out.
std::vector<double> g_row(const ParameterStore<double>& s, const AdaptorLayer& a, const std::vector<double>& row) {
  const auto& wd = s.value(a.wd);
  const auto& wu = s.value(a.wu);
  const double alpha = s.value(a.alpha)[0];
  std::vector<double> z(a.rank, 0.0), out(a.axis_len, 0.0);
  for (std::size_t r = 0; r < a.rank; ++r) {
    for (std::size_t i = 0; i < a.axis_len; ++i) z[r] += row[i] * wd.at(i, r);
    if (a.bd) z[r] += s.value(*a.bd)[r];
    z[r] = gelu_ref(z[r]);
  }
  for (std::size_t i = 0; i < a.axis_len; ++i) {
    for (std::size_t r = 0; r < a.rank; ++r) out[i] += z[r] * wu.at(r, i);
    if (a.bu) out[i] += s.value(*a.bu)[i];
    out[i] *= alpha;
  }
  return out;
}

void randomize(ParameterStore<double>& s, std::mt19937_64& rng) {
  for (std::size_t id = 0; id < s.size(); ++id) {
    s.set_value(id, Tensor<double>::normal(s.value(id).shape(), 0.5, rng));
  }
}

Tensor<double> apply(const ParameterStore<double>& s, const AdaptorLayer& a, const Tensor<double>& x,
                     std::size_t nt = 1) {
  Tape<double> tape;
  return adaptor_apply(tape, s, a, tape.constant(x), nt).value();
}

BackboneConfig side_arch() {
  BackboneConfig c;
  c.name = "side-test";
  c.depth = 4;
  c.width = 8;
  c.heads = 2;
  c.mlp_dim = 16;
  c.patch = 2;
  c.image_size = 4;
  c.channels = 1;
  return c;
}

}  // namespace

TEST(Adaptor, ZeroUpProjectionGivesZero) {
  std::mt19937_64 rng(1);
  ParameterStore<double> s;
  const auto a = register_adaptor(s, "g", Axis::channel, 8, 2, true, rng);
  EXPECT_EQ(s.value(a.wu), Tensor<double>::zeros({2, 8}));
  EXPECT_EQ(s.value(a.alpha)[0], 1.0);
  const auto y = apply(s, a, Tensor<double>::normal({3, 8}, 1.0, rng));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Adaptor, ZeroAlphaGivesZero) {
  std::mt19937_64 rng(2);
  ParameterStore<double> s;
  const auto a = register_adaptor(s, "g", Axis::channel, 8, 2, true, rng);
  randomize(s, rng);
  s.set_value(a.alpha, Tensor<double>::scalar(0.0));
  const auto y = apply(s, a, Tensor<double>::normal({3, 8}, 1.0, rng));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Adaptor, InitScales) {
  std::mt19937_64 rng(3);
  ParameterStore<double> s;
  const auto a = register_adaptor(s, "g", Axis::channel, 400, 64, false, rng);
  const auto& wd = s.value(a.wd);
  double ss = 0;
  for (double v : wd.data()) ss += v * v;
  const double std_hat = std::sqrt(ss / double(wd.size()));
  // Truncation at two sigma shrinks the standard deviation to about 0.88 of the nominal 1/sqrt(400).
  EXPECT_NEAR(std_hat, 0.88 / 20.0, 0.005);
  EXPECT_FALSE(a.bd.has_value());
  EXPECT_EQ(a.param_count(), 2u * 64 * 400 + 1);
}

TEST(Adaptor, ChannelHandOracle) {
  std::mt19937_64 rng(4);
  ParameterStore<double> s;
  const auto a = register_adaptor(s, "g", Axis::channel, 8, 2, true, rng);
  randomize(s, rng);
  const auto x = Tensor<double>::normal({3, 8}, 1.0, rng);
  const auto y = apply(s, a, x);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto ref = g_row(s, a, std::vector<double>(x.data().begin() + i * 8, x.data().begin() + (i + 1) * 8));
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(y.at(i, j), ref[j], 1e-12);
  }
}

TEST(Adaptor, TokenAxisMixesColumns) {
  std::mt19937_64 rng(5);
  ParameterStore<double> s;
  const auto a = register_adaptor(s, "g", Axis::token, 3, 2, true, rng);
  randomize(s, rng);
  const auto x = Tensor<double>::normal({3, 8}, 1.0, rng);
  const auto y = apply(s, a, x);
  for (std::size_t c = 0; c < 8; ++c) {
    const auto ref = g_row(s, a, {x.at(0, c), x.at(1, c), x.at(2, c)});
    for (std::size_t t = 0; t < 3; ++t) EXPECT_NEAR(y.at(t, c), ref[t], 1e-12);
  }
  EXPECT_THROW(apply(s, a, Tensor<double>({4, 8})), DimensionError);
}

TEST(Adaptor, VideoAxesFactorize) {
  std::mt19937_64 rng(6);
  const std::size_t nt = 3, ns = 4, d = 5;
  ParameterStore<double> s;
  const auto sp = register_adaptor(s, "sp", Axis::spatial, ns, 2, true, rng);
  const auto tm = register_adaptor(s, "tm", Axis::temporal, nt, 2, true, rng);
  randomize(s, rng);
  const auto x = Tensor<double>::normal({nt * ns, d}, 1.0, rng);
  const auto ys = apply(s, sp, x, nt);
  const auto yt = apply(s, tm, x, nt);
  for (std::size_t t = 0; t < nt; ++t) {
    for (std::size_t c = 0; c < d; ++c) {
      std::vector<double> col(ns);
      for (std::size_t p = 0; p < ns; ++p) col[p] = x.at(t * ns + p, c);
      const auto ref = g_row(s, sp, col);
      for (std::size_t p = 0; p < ns; ++p) EXPECT_NEAR(ys.at(t * ns + p, c), ref[p], 1e-12);
    }
  }
  for (std::size_t p = 0; p < ns; ++p) {
    for (std::size_t c = 0; c < d; ++c) {
      std::vector<double> col(nt);
      for (std::size_t t = 0; t < nt; ++t) col[t] = x.at(t * ns + p, c);
      const auto ref = g_row(s, tm, col);
      for (std::size_t t = 0; t < nt; ++t) EXPECT_NEAR(yt.at(t * ns + p, c), ref[t], 1e-12);
    }
  }
  Tape<double> tape;
  const auto both = video_token_adaptor(tape, s, sp, tm, tape.constant(x)).value();
  for (std::size_t i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], ys[i] + yt[i], 1e-12);
  EXPECT_THROW(video_token_adaptor(tape, s, tm, sp, tape.constant(x)), ConfigError);
}

TEST(MixerSchedule, OddOrdinalsMixTokens) {
  EXPECT_EQ(mixer_axis_for(1), Axis::token);
  EXPECT_EQ(mixer_axis_for(2), Axis::channel);
  EXPECT_EQ(mixer_axis_for(39), Axis::token);
  EXPECT_EQ(mixer_axis_for(40), Axis::channel);
  EXPECT_EQ(mixer_axis_for(1, MixerParity::even_token), Axis::channel);
  EXPECT_EQ(mixer_axis_for(2, MixerParity::even_token), Axis::token);
  EXPECT_THROW(mixer_axis_for(0), ConfigError);
}

TEST(TapSelection, EvenlySpacedEndingAtLast) {
  EXPECT_EQ(select_tap_layers(40, 1), (std::vector<std::size_t>{40}));
  EXPECT_EQ(select_tap_layers(40, 2), (std::vector<std::size_t>{20, 40}));
  EXPECT_EQ(select_tap_layers(40, 4), (std::vector<std::size_t>{10, 20, 30, 40}));
  EXPECT_EQ(select_tap_layers(4, 3), (std::vector<std::size_t>{1, 2, 4}));
  const auto all = select_tap_layers(40, 40);
  for (std::size_t j = 0; j < 40; ++j) EXPECT_EQ(all[j], j + 1);
  for (std::size_t total = 1; total <= 48; ++total) {
    for (std::size_t k = 1; k <= total; ++k) {
      const auto t = select_tap_layers(total, k);
      ASSERT_EQ(t.size(), k);
      EXPECT_EQ(t.back(), total);
      for (std::size_t j = 1; j < k; ++j) EXPECT_LT(t[j - 1], t[j]);
    }
  }
  EXPECT_THROW(select_tap_layers(4, 0), ConfigError);
  EXPECT_THROW(select_tap_layers(4, 5), ConfigError);
}

TEST(LosaConfigTest, Validation) {
  const auto arch = side_arch();
  LosaConfig c;
  c.k_layers = 0;
  EXPECT_THROW(c.validate(arch), ConfigError);
  c.k_layers = 5;
  EXPECT_THROW(c.validate(arch), ConfigError);
  c.tap = TapKind::both;
  EXPECT_NO_THROW(c.validate(arch));
  c = LosaConfig{};
  c.rank = 0;
  EXPECT_THROW(c.validate(arch), ConfigError);
  auto video = preset("toy-video");
  video.cls_token = true;
  video.pool = Pooling::cls;
  EXPECT_THROW(LosaConfig{}.validate(video), ConfigError);
}

TEST(SideNetworkTest, InitLayoutFollowsSchedule) {
  const auto arch = side_arch();
  LosaConfig cfg;
  cfg.rank = 2;
  ParameterStore<double> s;
  const auto side = init_losa(cfg, arch, s, 1);
  ASSERT_EQ(side.layers().size(), 4u);
  EXPECT_EQ(side.tap_indices(), (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(side.layers()[0].adaptors[0].axis, Axis::token);
  EXPECT_EQ(side.layers()[1].adaptors[0].axis, Axis::channel);
  EXPECT_TRUE(s.contains("side.layer0.token.down.weight"));
  EXPECT_TRUE(s.contains("side.layer1.channel.up.bias"));
  const std::size_t n = arch.tokens(), d = arch.width, r = 2;
  const std::size_t expected = 2 * (2 * r * n + 1 + r + n) + 2 * (2 * r * d + 1 + r + d);
  EXPECT_EQ(side.parameter_count(s), expected);
  EXPECT_EQ(s.total_elements(), expected);
  EXPECT_EQ(s.trainable_elements(), expected);

  cfg.k_layers = 1;
  ParameterStore<double> s1;
  const auto one = init_losa(cfg, arch, s1, 1);
  EXPECT_EQ(one.tap_indices(), (std::vector<std::size_t>{4}));
  EXPECT_EQ(one.layers()[0].adaptors[0].axis, Axis::channel);
}

TEST(SideNetworkTest, VideoTokenLayersSplitIntoSpatialAndTemporal) {
  const auto arch = preset("toy-video");
  LosaConfig cfg;
  cfg.rank = 2;
  ParameterStore<float> s;
  const auto side = init_losa(cfg, arch, s, 1);
  ASSERT_EQ(side.layers()[0].adaptors.size(), 2u);
  EXPECT_EQ(side.layers()[0].adaptors[0].axis_len, arch.spatial_tokens());
  EXPECT_EQ(side.layers()[0].adaptors[1].axis_len, arch.temporal_tokens());
}

TEST(SideNetworkTest, CapacityGrowsWithRankAndLayers) {
  const auto arch = preset("toy");
  std::size_t prev = 0;
  for (std::size_t r : {1u, 2u, 4u, 8u, 16u}) {
    LosaConfig cfg;
    cfg.rank = r;
    ParameterStore<float> s;
    const auto n = init_losa(cfg, arch, s, 0).parameter_count(s);
    EXPECT_GT(n, prev);
    prev = n;
  }
  prev = 0;
  for (std::size_t k = 1; k <= arch.depth; ++k) {
    LosaConfig cfg;
    cfg.k_layers = k;
    ParameterStore<float> s;
    const auto n = init_losa(cfg, arch, s, 0).parameter_count(s);
    EXPECT_GT(n, prev);
    prev = n;
  }
}

TEST(SideNetworkTest, IdentityAtInit) {
  const auto arch = side_arch();
  ParameterStore<double> s;
  const auto side = init_losa(LosaConfig{}, arch, s, 3);
  std::mt19937_64 rng(3);
  Tape<double> tape;
  BackboneOutputs<double> outs;
  outs.tokens_in = tape.constant(Tensor<double>::normal({arch.tokens(), 8}, 1.0, rng));
  for (int i = 0; i < 4; ++i) outs.taps.push_back(tape.constant(Tensor<double>::normal({arch.tokens(), 8}, 1.0, rng)));
  outs.final = outs.taps.back();
  EXPECT_EQ(side_forward(tape, s, side, outs).value(), outs.final.value());
}

TEST(SideNetworkTest, HandOracleTwoLayers) {
  std::mt19937_64 rng(8);
  const std::size_t n = 3, d = 4, r = 2;
  ParameterStore<double> s;
  SideLayer l1, l2;
  l1.tap = 1;
  l1.ordinal = 1;
  l1.adaptors.push_back(register_adaptor(s, "a", Axis::token, n, r, true, rng));
  l2.tap = 3;
  l2.ordinal = 2;
  l2.adaptors.push_back(register_adaptor(s, "b", Axis::channel, d, r, false, rng));
  randomize(s, rng);
  const SideNetwork<double> side(LosaConfig{}, {l1, l2});

  Tape<double> tape;
  BackboneOutputs<double> outs;
  std::vector<Tensor<double>> taps;
  for (int i = 0; i < 3; ++i) {
    taps.push_back(Tensor<double>::normal({n, d}, 1.0, rng));
    outs.taps.push_back(tape.constant(taps.back()));
  }
  outs.final = outs.taps.back();
  outs.tokens_in = tape.constant(Tensor<double>::normal({n, d}, 1.0, rng));
  const auto y = side_forward(tape, s, side, outs).value();

  // y1 = g_token(b_1 + b_L) + b_L, y2 = g_channel(b_3 + y1) + y1.
  Tensor<double> y0 = taps[2], in1 = taps[0];
  for (std::size_t i = 0; i < in1.size(); ++i) in1[i] += y0[i];
  Tensor<double> y1 = y0;
  for (std::size_t c = 0; c < d; ++c) {
    const auto g = g_row(s, l1.adaptors[0], {in1.at(0, c), in1.at(1, c), in1.at(2, c)});
    for (std::size_t t = 0; t < n; ++t) y1.at(t, c) += g[t];
  }
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> row(d);
    for (std::size_t c = 0; c < d; ++c) row[c] = taps[2].at(t, c) + y1.at(t, c);
    const auto g = g_row(s, l2.adaptors[0], row);
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(y.at(t, c), g[c] + y1.at(t, c), 1e-12);
  }

  outs.taps.pop_back();
  EXPECT_THROW(side_forward(tape, s, side, outs), DimensionError);
}

TEST(SideNetworkTest, BackboneInputVariantStartsFromTokens) {
  const auto arch = side_arch();
  LosaConfig cfg;
  cfg.side_input = SideInput::backbone_input;
  ParameterStore<double> s;
  const auto side = init_losa(cfg, arch, s, 3);
  std::mt19937_64 rng(3);
  Tape<double> tape;
  BackboneOutputs<double> outs;
  outs.tokens_in = tape.constant(Tensor<double>::normal({arch.tokens(), 8}, 1.0, rng));
  for (int i = 0; i < 4; ++i) outs.taps.push_back(tape.constant(Tensor<double>::normal({arch.tokens(), 8}, 1.0, rng)));
  outs.final = outs.taps.back();
  EXPECT_EQ(side_forward(tape, s, side, outs).value(), outs.tokens_in.value());
}

TEST(SideNetworkTest, GradientsReachEverySideParameterButNoBackboneOne) {
  auto arch = preset("toy");
  arch.depth = 2;
  LosaConfig cfg;
  cfg.rank = 4;
  auto model = adapt(Backbone<double>::build(arch, 1), cfg, 3, 2);
  std::mt19937_64 rng(5);
  auto& ins = model.inserts();
  for (std::size_t id = 0; id < ins.size(); ++id) {
    if (ins[id].name.find(".up.") != std::string::npos) {
      ins.set_value(id, Tensor<double>::normal(ins.value(id).shape(), 0.1, rng));
    }
  }
  const auto img = Tensor<double>::normal({1, 16, 16, 3}, 1.0, rng);
  Tape<double> tape;
  const auto grads = tape.backward(model.loss(tape, img, 1));
  std::size_t side_grads = 0;
  for (const auto& [name, g] : grads) {
    EXPECT_NE(name.rfind("backbone.", 0), 0u) << name;
    if (name.rfind("side.", 0) == 0) {
      ++side_grads;
      double norm = 0;
      for (double v : g.data()) norm += v * v;
      EXPECT_GT(norm, 0.0) << name;
    }
  }
  EXPECT_EQ(side_grads, ins.size() - 2);
  EXPECT_EQ(tape.stats().region(Region::backbone).bwd_macs, 0u);
  EXPECT_EQ(tape.stats().region(Region::backbone).cached_bytes, 0u);
}

TEST(SideNetworkTest, ZeroUpProjectionStillTrainsUpWeights) {
  auto arch = preset("toy");
  arch.depth = 2;
  auto model = adapt(Backbone<double>::build(arch, 1), LosaConfig{}, 3, 2);
  std::mt19937_64 rng(5);
  const auto img = Tensor<double>::normal({1, 16, 16, 3}, 1.0, rng);
  Tape<double> tape;
  const auto grads = tape.backward(model.loss(tape, img, 0));
  auto norm = [&](const std::string& name) {
    double n = 0;
    for (double v : grads.at(name).data()) n += v * v;
    return n;
  };
  EXPECT_GT(norm("side.layer1.channel.up.weight"), 0.0);
  EXPECT_EQ(norm("side.layer1.channel.down.weight"), 0.0);
}
