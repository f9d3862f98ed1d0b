#pragma once

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "losa/backbone.hpp"

namespace losa {

enum class SideInput : std::uint8_t { backbone_output, backbone_input };
enum class SideVariant : std::uint8_t { low_rank_mixer, low_rank_mlp, transformer };
enum class Axis : std::uint8_t { channel, token, spatial, temporal };
/// Which ordinal parity mixes tokens. odd_token follows g^token for i mod 2 != 0.
enum class MixerParity : std::uint8_t { odd_token, even_token };

std::string_view to_string(SideInput s);
std::string_view to_string(SideVariant v);
std::string_view to_string(Axis a);
std::string_view to_string(MixerParity p);
SideInput side_input_from_string(std::string_view s);
SideVariant side_variant_from_string(std::string_view s);
MixerParity mixer_parity_from_string(std::string_view s);

struct LosaConfig {
  std::size_t rank = 64;
  /// Number of taps fed to the side network; nullopt means all of them.
  std::optional<std::size_t> k_layers;
  TapKind tap = TapKind::encoder_output;
  SideInput side_input = SideInput::backbone_output;
  bool use_biases = true;
  SideVariant variant = SideVariant::low_rank_mixer;
  MixerParity parity = MixerParity::odd_token;

  void validate(const BackboneConfig& arch) const;
  std::size_t layers_used(const BackboneConfig& arch) const {
    return k_layers.value_or(tap_count(tap, arch.depth));
  }
};

/// Mixing axis for side-layer ordinal i (1-based).
Axis mixer_axis_for(std::size_t i, MixerParity parity = MixerParity::odd_token);

/// k evenly spaced tap indices in 1..total, strictly increasing and ending at total.
std::vector<std::size_t> select_tap_layers(std::size_t total, std::size_t k);

/// Ordinal of side layer j (1-based) when k of total taps are used: the side layers are aligned with the
/// end of the backbone, so with k == total the ordinal equals the tap index.
inline std::size_t side_ordinal(std::size_t total, std::size_t k, std::size_t j) { return total - k + j; }

/// Heads used by transformer-shaped side blocks of the given width.
inline std::size_t side_heads(std::size_t width) {
  for (std::size_t h : {4u, 2u}) {
    if (width % h == 0) return h;
  }
  return 1;
}

/// g(x) = alpha * W_u GeLU(W_d x) applied along one axis.
struct AdaptorLayer {
  Axis axis = Axis::channel;
  std::size_t axis_len = 0;
  std::size_t rank = 0;
  ParamId wd = 0, wu = 0, alpha = 0;
  std::optional<ParamId> bd, bu;

  /// 2 r len + 1, plus r + len with biases.
  std::size_t param_count() const { return 2 * rank * axis_len + 1 + (bd ? rank + axis_len : 0); }
};

/// Side layer of the `transformer` variant: down-projection, a block at width r, zero-initialized up-projection.
struct TransformerAdaptor {
  ParamId down_w = 0, down_b = 0;
  BlockParams block;
  ParamId up_w = 0, up_b = 0;
};

struct SideLayer {
  std::size_t tap = 0;      // 1-based index into BackboneOutputs::taps
  std::size_t ordinal = 0;  // mixer-schedule ordinal
  std::vector<AdaptorLayer> adaptors;  // channel or token: one; video token: spatial then temporal
  std::optional<TransformerAdaptor> transformer;
};

template <typename Scalar, typename Rng>
AdaptorLayer register_adaptor(ParameterStore<Scalar>& store, const std::string& prefix, Axis axis,
                              std::size_t axis_len, std::size_t rank, bool biases, Rng& rng) {
  AdaptorLayer a;
  a.axis = axis;
  a.axis_len = axis_len;
  a.rank = rank;
  a.wd = store.add(prefix + ".down.weight",
                   Tensor<Scalar>::truncated_normal({axis_len, rank}, Scalar(1.0 / std::sqrt(double(axis_len))), rng),
                   true);
  if (biases) a.bd = store.add(prefix + ".down.bias", Tensor<Scalar>::zeros({rank}), true);
  a.wu = store.add(prefix + ".up.weight", Tensor<Scalar>::zeros({rank, axis_len}), true);
  if (biases) a.bu = store.add(prefix + ".up.bias", Tensor<Scalar>::zeros({axis_len}), true);
  a.alpha = store.add(prefix + ".alpha", Tensor<Scalar>::scalar(1), true);
  return a;
}

/// Low-rank map on rows [m x axis_len].
template <typename Scalar>
Var<Scalar> low_rank_rows(Tape<Scalar>& tape, const ParameterStore<Scalar>& store, const AdaptorLayer& a,
                          Var<Scalar> rows) {
  auto z = matmul(rows, tape.param(store, a.wd));
  if (a.bd) z = add_bias(z, tape.param(store, *a.bd));
  auto u = matmul(gelu(z), tape.param(store, a.wu));
  if (a.bu) u = add_bias(u, tape.param(store, *a.bu));
  return scale_by(u, tape.param(store, a.alpha));
}

/// Applies one adaptor to x [n x d] (or [n_t x n_s x d] for spatial/temporal axes). Channel mixing acts on
/// rows; token-like axes act on a transposed view so that channels are carried and tokens are mixed.
/// temporal_len is n_t and is only consulted for the spatial and temporal axes.
template <typename Scalar>
Var<Scalar> adaptor_apply(Tape<Scalar>& tape, const ParameterStore<Scalar>& store, const AdaptorLayer& a,
                          Var<Scalar> x, std::size_t temporal_len = 1) {
  const Shape in_shape = x.shape();
  if (in_shape.size() < 2) throw DimensionError("adaptor input must be at least rank 2", in_shape, Shape{});
  const std::size_t d = in_shape.back();
  const std::size_t n = x.value().size() / d;
  switch (a.axis) {
    case Axis::channel: {
      if (d != a.axis_len) throw DimensionError("channel adaptor width", in_shape, Shape{a.axis_len});
      auto y = low_rank_rows(tape, store, a, reshape(x, {n, d}));
      return reshape(y, in_shape);
    }
    case Axis::token: {
      if (n != a.axis_len) throw DimensionError("token adaptor length", in_shape, Shape{a.axis_len, d});
      auto y = low_rank_rows(tape, store, a, transpose(reshape(x, {n, d})));
      return reshape(transpose(y), in_shape);
    }
    case Axis::spatial: {
      const std::size_t nt = temporal_len, ns = a.axis_len;
      if (nt * ns != n) throw DimensionError("spatial adaptor geometry", in_shape, Shape{nt, ns, d});
      auto cube = permute(reshape(x, {nt, ns, d}), {0, 2, 1});  // [nt, d, ns]
      auto y = low_rank_rows(tape, store, a, reshape(cube, {nt * d, ns}));
      return reshape(permute(reshape(y, {nt, d, ns}), {0, 2, 1}), in_shape);
    }
    case Axis::temporal: {
      const std::size_t nt = a.axis_len;
      if (nt == 0 || n % nt != 0) throw DimensionError("temporal adaptor geometry", in_shape, Shape{nt, 0, d});
      const std::size_t ns = n / nt;
      auto cube = permute(reshape(x, {nt, ns, d}), {1, 2, 0});  // [ns, d, nt]
      auto y = low_rank_rows(tape, store, a, reshape(cube, {ns * d, nt}));
      return reshape(permute(reshape(y, {ns, d, nt}), {2, 0, 1}), in_shape);
    }
  }
  throw ConfigError("unreachable adaptor axis");
}

/// g^spatial(x) + g^temporal(x) for x of n_t * n_s tokens.
template <typename Scalar>
Var<Scalar> video_token_adaptor(Tape<Scalar>& tape, const ParameterStore<Scalar>& store, const AdaptorLayer& spatial,
                                const AdaptorLayer& temporal, Var<Scalar> x) {
  const std::size_t d = x.shape().back();
  const std::size_t n = x.value().size() / d;
  if (spatial.axis != Axis::spatial || temporal.axis != Axis::temporal) {
    throw ConfigError("video token adaptor needs a spatial and a temporal layer");
  }
  if (spatial.axis_len * temporal.axis_len != n) {
    throw DimensionError("token count does not factor into n_t x n_s", x.shape(),
                         Shape{temporal.axis_len, spatial.axis_len, d});
  }
  return add(adaptor_apply(tape, store, spatial, x, temporal.axis_len),
             adaptor_apply(tape, store, temporal, x, temporal.axis_len));
}

/// The parallel side network: y_i = g_i(b_{t_i} + y_{i-1}) + y_{i-1}.
template <typename Scalar>
class SideNetwork {
 public:
  SideNetwork() = default;

  template <typename Rng>
  static SideNetwork init(const LosaConfig& cfg, const BackboneConfig& arch, ParameterStore<Scalar>& store, Rng& rng,
                          const std::string& prefix = "side") {
    cfg.validate(arch);
    SideNetwork s;
    s.cfg_ = cfg;
    s.temporal_len_ = arch.temporal_tokens();
    const std::size_t total = tap_count(cfg.tap, arch.depth);
    const std::size_t k = cfg.layers_used(arch);
    const auto taps = select_tap_layers(total, k);
    const std::size_t d = arch.width, r = cfg.rank;
    for (std::size_t j = 1; j <= k; ++j) {
      SideLayer layer;
      layer.tap = taps[j - 1];
      layer.ordinal = side_ordinal(total, k, j);
      const std::string name = prefix + ".layer" + std::to_string(j - 1);
      if (cfg.variant == SideVariant::transformer) {
        TransformerAdaptor t;
        t.down_w = store.add(name + ".down.weight",
                             Tensor<Scalar>::truncated_normal({d, r}, Scalar(1.0 / std::sqrt(double(d))), rng), true);
        t.down_b = store.add(name + ".down.bias", Tensor<Scalar>::zeros({r}), true);
        t.block = register_block(store, name + ".block", r, side_heads(r), 4 * r, rng, true);
        t.up_w = store.add(name + ".up.weight", Tensor<Scalar>::zeros({r, d}), true);
        t.up_b = store.add(name + ".up.bias", Tensor<Scalar>::zeros({d}), true);
        layer.transformer = t;
      } else {
        const Axis axis =
            cfg.variant == SideVariant::low_rank_mlp ? Axis::channel : mixer_axis_for(layer.ordinal, cfg.parity);
        if (axis == Axis::channel) {
          layer.adaptors.push_back(register_adaptor(store, name + ".channel", Axis::channel, d, r, cfg.use_biases, rng));
        } else if (!arch.is_video()) {
          layer.adaptors.push_back(
              register_adaptor(store, name + ".token", Axis::token, arch.tokens(), r, cfg.use_biases, rng));
        } else {
          layer.adaptors.push_back(
              register_adaptor(store, name + ".spatial", Axis::spatial, arch.spatial_tokens(), r, cfg.use_biases, rng));
          layer.adaptors.push_back(register_adaptor(store, name + ".temporal", Axis::temporal, arch.temporal_tokens(), r,
                                                    cfg.use_biases, rng));
        }
      }
      s.layers_.push_back(std::move(layer));
    }
    return s;
  }

  /// Side network built from explicit layers (used for hand-constructed instances).
  SideNetwork(LosaConfig cfg, std::vector<SideLayer> layers, std::size_t temporal_len = 1)
      : cfg_(std::move(cfg)), layers_(std::move(layers)), temporal_len_(temporal_len) {}

  const LosaConfig& config() const { return cfg_; }
  const std::vector<SideLayer>& layers() const { return layers_; }

  std::vector<std::size_t> tap_indices() const {
    std::vector<std::size_t> t;
    for (const auto& l : layers_) t.push_back(l.tap);
    return t;
  }

  std::size_t parameter_count(const ParameterStore<Scalar>& store) const {
    std::size_t n = 0;
    for (const auto& l : layers_) {
      for (const auto& a : l.adaptors) n += a.param_count();
      if (l.transformer) {
        const auto& t = *l.transformer;
        for (ParamId id : {t.down_w, t.down_b, t.up_w, t.up_b, t.block.ln1_g, t.block.ln1_b, t.block.wq, t.block.bq,
                           t.block.wk, t.block.bk, t.block.wv, t.block.bv, t.block.wo, t.block.bo, t.block.ln2_g,
                           t.block.ln2_b, t.block.w1, t.block.b1, t.block.w2, t.block.b2}) {
          n += store.value(id).size();
        }
      }
    }
    return n;
  }

  /// g_j applied to x.
  Var<Scalar> apply_layer(Tape<Scalar>& tape, const ParameterStore<Scalar>& store, const SideLayer& layer,
                          Var<Scalar> x) const {
    if (layer.transformer) {
      const auto& t = *layer.transformer;
      auto h = linear(tape, store, x, t.down_w, t.down_b);
      h = transformer_block(tape, store, t.block, h).out;
      return linear(tape, store, h, t.up_w, t.up_b);
    }
    if (layer.adaptors.size() == 2) return video_token_adaptor(tape, store, layer.adaptors[0], layer.adaptors[1], x);
    return adaptor_apply(tape, store, layer.adaptors.at(0), x, temporal_len_);
  }

  Var<Scalar> forward(Tape<Scalar>& tape, const ParameterStore<Scalar>& store, const BackboneOutputs<Scalar>& outs) const {
    auto guard = tape.scope(Region::side);
    Var<Scalar> y = cfg_.side_input == SideInput::backbone_output ? outs.final : outs.tokens_in;
    for (const auto& layer : layers_) {
      if (layer.tap == 0 || layer.tap > outs.taps.size()) {
        throw DimensionError("side tap index out of range", Shape{layer.tap}, Shape{outs.taps.size()});
      }
      const auto b = outs.taps[layer.tap - 1];
      if (b.shape() != y.shape()) throw DimensionError("tap shape", b.shape(), y.shape());
      y = add(apply_layer(tape, store, layer, add(b, y)), y);
    }
    return y;
  }

 private:
  LosaConfig cfg_;
  std::vector<SideLayer> layers_;
  std::size_t temporal_len_ = 1;
};

template <typename Scalar>
Var<Scalar> side_forward(Tape<Scalar>& tape, const ParameterStore<Scalar>& store, const SideNetwork<Scalar>& side,
                         const BackboneOutputs<Scalar>& outs) {
  return side.forward(tape, store, outs);
}

}  // namespace losa

namespace losa {

template <typename Scalar>
SideNetwork<Scalar> init_losa(const LosaConfig& cfg, const BackboneConfig& arch, ParameterStore<Scalar>& store,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return SideNetwork<Scalar>::init(cfg, arch, store, rng);
}

}  // namespace losa
