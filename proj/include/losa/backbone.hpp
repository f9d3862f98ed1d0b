#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "losa/autodiff.hpp"

namespace losa {

enum class Pooling : std::uint8_t { cls, mean, map };

/// Transformer geometry. Shape-only presets of the large models are used by the cost model; desk-scale
/// configs are built and trained.
struct BackboneConfig {
  std::string name = "custom";
  std::size_t depth = 0;
  std::size_t width = 0;
  std::size_t heads = 1;
  std::size_t mlp_dim = 0;
  std::size_t patch = 16;
  std::size_t tubelet_t = 1;
  std::size_t image_size = 224;
  std::size_t frames = 1;
  std::size_t channels = 3;
  bool cls_token = true;
  Pooling pool = Pooling::cls;

  void validate() const;

  std::size_t spatial_tokens() const { return (image_size / patch) * (image_size / patch); }
  std::size_t temporal_tokens() const { return frames / tubelet_t; }
  std::size_t patch_tokens() const { return spatial_tokens() * temporal_tokens(); }
  /// n = n_s * n_t (+1 with a cls token).
  std::size_t tokens() const { return patch_tokens() + (cls_token ? 1 : 0); }
  std::size_t patch_dim() const { return tubelet_t * patch * patch * channels; }
  std::size_t head_dim() const { return width / heads; }
  bool is_video() const { return temporal_tokens() > 1; }
};

std::string_view to_string(Pooling p);
Pooling pooling_from_string(std::string_view s);

/// Built-in architectures: ViT-B, ViT-H, ViT-g, ViT-G, ViT-e, their ViViT variants, toy, toy-video.
BackboneConfig preset(std::string_view name);
std::vector<std::string> preset_names();

enum class TapKind : std::uint8_t { encoder_output, mhsa_output, mlp_output, both };

std::string_view to_string(TapKind t);
TapKind tap_kind_from_string(std::string_view s);

/// Taps exposed by a backbone of the given depth.
inline std::size_t tap_count(TapKind t, std::size_t depth) { return t == TapKind::both ? 2 * depth : depth; }

template <typename Scalar>
struct BackboneOutputs {
  Var<Scalar> final;
  std::vector<Var<Scalar>> taps;
  Var<Scalar> tokens_in;
};

enum class Projection : std::uint8_t { q, k, v, out, mlp };
inline constexpr std::array<Projection, 5> kAllProjections = {Projection::q, Projection::k, Projection::v,
                                                              Projection::out, Projection::mlp};
std::string_view to_string(Projection p);
Projection projection_from_string(std::string_view s);

/// A projection site; layer == depth addresses the attention-pooling head.
struct Site {
  std::size_t layer = 0;
  Projection proj = Projection::q;
};

/// Extension points used by methods that insert into the backbone (LoRA, prompt tuning).
template <typename Scalar>
class ForwardHooks {
 public:
  virtual ~ForwardHooks() = default;
  /// Added to the projection output. For Projection::mlp, input is the normalized MLP-block input and the
  /// delta is added to the MLP-block output.
  virtual std::optional<Var<Scalar>> projection_delta(Site, Var<Scalar> input) const {
    (void)input;
    return std::nullopt;
  }
  virtual Var<Scalar> before_block(std::size_t layer, Var<Scalar> x) const {
    (void)layer;
    return x;
  }
};

using ParamId = std::size_t;

/// Parameter ids of one pre-norm transformer block.
struct BlockParams {
  std::size_t width = 0;
  std::size_t heads = 1;
  std::size_t mlp_dim = 0;
  ParamId ln1_g, ln1_b;
  ParamId wq, bq, wk, bk, wv, bv, wo, bo;
  ParamId ln2_g, ln2_b;
  ParamId w1, b1, w2, b2;
};

/// Attention-pooling head: a learned probe attends over the tokens, followed by a residual MLP.
struct MapHeadParams {
  ParamId probe;
  ParamId wq, bq, wk, bk, wv, bv, wo, bo;
  ParamId ln_g, ln_b;
  ParamId w1, b1, w2, b2;
};

template <typename Scalar>
struct BlockResult {
  Var<Scalar> out;
  Var<Scalar> mhsa;
  Var<Scalar> mlp;
};

// ---------------------------------------------------------------------------
// Building blocks shared by the backbone and the transformer-shaped side networks.

template <typename Scalar, typename Rng>
BlockParams register_block(ParameterStore<Scalar>& store, const std::string& prefix, std::size_t width,
                           std::size_t heads, std::size_t mlp_dim, Rng& rng, bool trainable) {
  if (heads == 0 || width % heads != 0) throw ConfigError("block width must be divisible by heads");
  auto lecun = [&](std::size_t fan_in, Shape shape) {
    return Tensor<Scalar>::truncated_normal(std::move(shape), Scalar(1.0 / std::sqrt(double(fan_in))), rng);
  };
  BlockParams b;
  b.width = width;
  b.heads = heads;
  b.mlp_dim = mlp_dim;
  b.ln1_g = store.add(prefix + ".ln1.weight", Tensor<Scalar>::full({width}, 1), trainable);
  b.ln1_b = store.add(prefix + ".ln1.bias", Tensor<Scalar>::zeros({width}), trainable);
  b.wq = store.add(prefix + ".mhsa.q.weight", lecun(width, {width, width}), trainable);
  b.bq = store.add(prefix + ".mhsa.q.bias", Tensor<Scalar>::zeros({width}), trainable);
  b.wk = store.add(prefix + ".mhsa.k.weight", lecun(width, {width, width}), trainable);
  b.bk = store.add(prefix + ".mhsa.k.bias", Tensor<Scalar>::zeros({width}), trainable);
  b.wv = store.add(prefix + ".mhsa.v.weight", lecun(width, {width, width}), trainable);
  b.bv = store.add(prefix + ".mhsa.v.bias", Tensor<Scalar>::zeros({width}), trainable);
  b.wo = store.add(prefix + ".mhsa.out.weight", lecun(width, {width, width}), trainable);
  b.bo = store.add(prefix + ".mhsa.out.bias", Tensor<Scalar>::zeros({width}), trainable);
  b.ln2_g = store.add(prefix + ".ln2.weight", Tensor<Scalar>::full({width}, 1), trainable);
  b.ln2_b = store.add(prefix + ".ln2.bias", Tensor<Scalar>::zeros({width}), trainable);
  b.w1 = store.add(prefix + ".mlp.fc1.weight", lecun(width, {width, mlp_dim}), trainable);
  b.b1 = store.add(prefix + ".mlp.fc1.bias", Tensor<Scalar>::zeros({mlp_dim}), trainable);
  b.w2 = store.add(prefix + ".mlp.fc2.weight", lecun(mlp_dim, {mlp_dim, width}), trainable);
  b.b2 = store.add(prefix + ".mlp.fc2.bias", Tensor<Scalar>::zeros({width}), trainable);
  return b;
}

template <typename Scalar>
Var<Scalar> linear(Tape<Scalar>& tape, const ParameterStore<Scalar>& store, Var<Scalar> x, ParamId w, ParamId b) {
  return add_bias(matmul(x, tape.param(store, w)), tape.param(store, b));
}

/// Multi-head scaled dot-product attention of q [mq x d] over k, v [mk x d].
template <typename Scalar>
Var<Scalar> multi_head_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, std::size_t heads) {
  const std::size_t mq = q.shape()[0], mk = k.shape()[0], d = q.shape()[1];
  const std::size_t dh = d / heads;
  auto qh = permute(reshape(q, {mq, heads, dh}), {1, 0, 2});
  auto kt = permute(reshape(k, {mk, heads, dh}), {1, 2, 0});
  auto vh = permute(reshape(v, {mk, heads, dh}), {1, 0, 2});
  auto scores = scale(bmm(qh, kt), Scalar(1) / std::sqrt(static_cast<Scalar>(dh)));
  auto attn = softmax(scores);
  auto o = bmm(attn, vh);
  return reshape(permute(o, {1, 0, 2}), {mq, d});
}

template <typename Scalar>
Var<Scalar> project(Tape<Scalar>& tape, const ParameterStore<Scalar>& store, Var<Scalar> x, ParamId w, ParamId b,
                    const ForwardHooks<Scalar>* hooks, Site site) {
  auto y = linear(tape, store, x, w, b);
  if (hooks) {
    if (auto delta = hooks->projection_delta(site, x)) y = add(y, *delta);
  }
  return y;
}

/// Pre-norm block: x1 = x + MHSA(LN(x)); x2 = x1 + MLP(LN(x1)).
template <typename Scalar>
BlockResult<Scalar> transformer_block(Tape<Scalar>& tape, const ParameterStore<Scalar>& store, const BlockParams& p,
                                      Var<Scalar> x, const ForwardHooks<Scalar>* hooks = nullptr,
                                      std::size_t layer = 0) {
  if (x.shape().size() != 2 || x.shape()[1] != p.width) {
    throw DimensionError("block input", x.shape(), Shape{0, p.width});
  }
  auto h = layernorm(x, tape.param(store, p.ln1_g), tape.param(store, p.ln1_b));
  auto q = project(tape, store, h, p.wq, p.bq, hooks, {layer, Projection::q});
  auto k = project(tape, store, h, p.wk, p.bk, hooks, {layer, Projection::k});
  auto v = project(tape, store, h, p.wv, p.bv, hooks, {layer, Projection::v});
  auto o = multi_head_attention(q, k, v, p.heads);
  auto mhsa = project(tape, store, o, p.wo, p.bo, hooks, {layer, Projection::out});
  auto x1 = add(x, mhsa);
  auto h2 = layernorm(x1, tape.param(store, p.ln2_g), tape.param(store, p.ln2_b));
  auto f = linear(tape, store, gelu(linear(tape, store, h2, p.w1, p.b1)), p.w2, p.b2);
  if (hooks) {
    if (auto delta = hooks->projection_delta({layer, Projection::mlp}, h2)) f = add(f, *delta);
  }
  return {add(x1, f), mhsa, f};
}

// ---------------------------------------------------------------------------

/// Vision transformer with tap points. Read-only after construction; forward passes go on caller tapes.
template <typename Scalar>
class Backbone {
 public:
  static Backbone build(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Backbone b;
    b.cfg_ = cfg;
    std::mt19937_64 rng(seed);
    auto& s = b.params_;
    const std::size_t d = cfg.width;
    b.patch_w_ = s.add("backbone.embed.weight",
                       Tensor<Scalar>::truncated_normal({cfg.patch_dim(), d},
                                                        Scalar(1.0 / std::sqrt(double(cfg.patch_dim()))), rng));
    b.patch_b_ = s.add("backbone.embed.bias", Tensor<Scalar>::zeros({d}));
    if (cfg.cls_token) b.cls_ = s.add("backbone.cls", Tensor<Scalar>::truncated_normal({1, d}, Scalar(0.02), rng));
    b.pos_ = s.add("backbone.pos", Tensor<Scalar>::truncated_normal({cfg.tokens(), d}, Scalar(0.02), rng));
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      b.blocks_.push_back(register_block(s, "backbone.block" + std::to_string(l), d, cfg.heads, cfg.mlp_dim, rng, false));
    }
    b.norm_g_ = s.add("backbone.norm.weight", Tensor<Scalar>::full({d}, 1));
    b.norm_b_ = s.add("backbone.norm.bias", Tensor<Scalar>::zeros({d}));
    if (cfg.pool == Pooling::map) {
      auto lecun = [&](std::size_t fan_in, Shape shape) {
        return Tensor<Scalar>::truncated_normal(std::move(shape), Scalar(1.0 / std::sqrt(double(fan_in))), rng);
      };
      const std::size_t h = cfg.mlp_dim;
      MapHeadParams m;
      m.probe = s.add("backbone.map.probe", Tensor<Scalar>::truncated_normal({1, d}, Scalar(0.02), rng));
      m.wq = s.add("backbone.map.mhsa.q.weight", lecun(d, {d, d}));
      m.bq = s.add("backbone.map.mhsa.q.bias", Tensor<Scalar>::zeros({d}));
      m.wk = s.add("backbone.map.mhsa.k.weight", lecun(d, {d, d}));
      m.bk = s.add("backbone.map.mhsa.k.bias", Tensor<Scalar>::zeros({d}));
      m.wv = s.add("backbone.map.mhsa.v.weight", lecun(d, {d, d}));
      m.bv = s.add("backbone.map.mhsa.v.bias", Tensor<Scalar>::zeros({d}));
      m.wo = s.add("backbone.map.mhsa.out.weight", lecun(d, {d, d}));
      m.bo = s.add("backbone.map.mhsa.out.bias", Tensor<Scalar>::zeros({d}));
      m.ln_g = s.add("backbone.map.ln.weight", Tensor<Scalar>::full({d}, 1));
      m.ln_b = s.add("backbone.map.ln.bias", Tensor<Scalar>::zeros({d}));
      m.w1 = s.add("backbone.map.mlp.fc1.weight", lecun(d, {d, h}));
      m.b1 = s.add("backbone.map.mlp.fc1.bias", Tensor<Scalar>::zeros({h}));
      m.w2 = s.add("backbone.map.mlp.fc2.weight", lecun(h, {h, d}));
      m.b2 = s.add("backbone.map.mlp.fc2.bias", Tensor<Scalar>::zeros({d}));
      b.map_ = m;
    }
    return b;
  }

  const BackboneConfig& config() const { return cfg_; }
  ParameterStore<Scalar>& params() { return params_; }
  const ParameterStore<Scalar>& params() const { return params_; }
  const std::vector<BlockParams>& blocks() const { return blocks_; }
  const std::optional<MapHeadParams>& map_head() const { return map_; }

  /// Parameter ids that belong to the pooling head (final norm and attention pooling).
  std::vector<ParamId> pool_param_ids() const {
    std::vector<ParamId> ids{norm_g_, norm_b_};
    if (map_) {
      for (ParamId id : {map_->probe, map_->wq, map_->bq, map_->wk, map_->bk, map_->wv, map_->bv, map_->wo, map_->bo,
                         map_->ln_g, map_->ln_b, map_->w1, map_->b1, map_->w2, map_->b2}) {
        ids.push_back(id);
      }
    }
    return ids;
  }

  /// Non-overlapping patches/tubelets of input [frames x H x W x C], projected to [n x d], with cls token
  /// and positional embedding.
  Var<Scalar> patchify(Tape<Scalar>& tape, const Tensor<Scalar>& input) const {
    const auto& c = cfg_;
    const Shape expect{c.frames, c.image_size, c.image_size, c.channels};
    if (input.shape() != expect) throw DimensionError("patchify input", input.shape(), expect);
    auto guard = tape.scope(Region::backbone);
    const std::size_t g = c.image_size / c.patch;
    const std::size_t nt = c.temporal_tokens();
    Tensor<Scalar> patches({nt * g * g, c.patch_dim()});
    std::size_t row = 0;
    for (std::size_t t = 0; t < nt; ++t) {
      for (std::size_t gy = 0; gy < g; ++gy) {
        for (std::size_t gx = 0; gx < g; ++gx, ++row) {
          std::size_t col = 0;
          for (std::size_t dt = 0; dt < c.tubelet_t; ++dt) {
            for (std::size_t dy = 0; dy < c.patch; ++dy) {
              for (std::size_t dx = 0; dx < c.patch; ++dx) {
                for (std::size_t ch = 0; ch < c.channels; ++ch, ++col) {
                  const std::size_t f = t * c.tubelet_t + dt, y = gy * c.patch + dy, x = gx * c.patch + dx;
                  patches.at(row, col) = input[((f * c.image_size + y) * c.image_size + x) * c.channels + ch];
                }
              }
            }
          }
        }
      }
    }
    auto tokens = linear(tape, params_, tape.constant(std::move(patches)), patch_w_, patch_b_);
    if (c.cls_token) tokens = concat_rows(tape.param(params_, *cls_), tokens);
    return add(tokens, tape.param(params_, pos_));
  }

  BackboneOutputs<Scalar> forward_with_taps(Tape<Scalar>& tape, Var<Scalar> tokens, TapKind tap,
                                            const ForwardHooks<Scalar>* hooks = nullptr) const {
    const Shape expect{cfg_.tokens(), cfg_.width};
    if (tokens.shape() != expect) throw DimensionError("backbone tokens", tokens.shape(), expect);
    auto guard = tape.scope(Region::backbone);
    BackboneOutputs<Scalar> out{tokens, {}, tokens};
    Var<Scalar> x = tokens;
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
      if (hooks) x = hooks->before_block(l, x);
      auto r = transformer_block(tape, params_, blocks_[l], x, hooks, l);
      switch (tap) {
        case TapKind::encoder_output: out.taps.push_back(r.out); break;
        case TapKind::mhsa_output: out.taps.push_back(r.mhsa); break;
        case TapKind::mlp_output: out.taps.push_back(r.mlp); break;
        case TapKind::both:
          out.taps.push_back(r.mhsa);
          out.taps.push_back(r.mlp);
          break;
      }
      x = r.out;
    }
    out.final = x;
    return out;
  }

  /// Final norm and pooling to [1 x d]; recorded in region head.
  Var<Scalar> pool(Tape<Scalar>& tape, Var<Scalar> tokens, const ForwardHooks<Scalar>* hooks = nullptr) const {
    auto guard = tape.scope(Region::head);
    auto hn = layernorm(tokens, tape.param(params_, norm_g_), tape.param(params_, norm_b_));
    switch (cfg_.pool) {
      case Pooling::cls: return slice_rows(hn, 0, 1);
      case Pooling::mean: return mean_rows(hn);
      case Pooling::map: break;
    }
    const auto& m = *map_;
    const std::size_t L = cfg_.depth;
    auto q = project(tape, params_, tape.param(params_, m.probe), m.wq, m.bq, hooks, {L, Projection::q});
    auto k = project(tape, params_, hn, m.wk, m.bk, hooks, {L, Projection::k});
    auto v = project(tape, params_, hn, m.wv, m.bv, hooks, {L, Projection::v});
    auto o = multi_head_attention(q, k, v, cfg_.heads);
    auto attn = project(tape, params_, o, m.wo, m.bo, hooks, {L, Projection::out});
    auto y = layernorm(attn, tape.param(params_, m.ln_g), tape.param(params_, m.ln_b));
    auto f = linear(tape, params_, gelu(linear(tape, params_, y, m.w1, m.b1)), m.w2, m.b2);
    if (hooks) {
      if (auto delta = hooks->projection_delta({L, Projection::mlp}, y)) f = add(f, *delta);
    }
    return add(attn, f);
  }

  /// All backbone parameters, counted from the live store.
  std::size_t parameter_count() const { return params_.total_elements(); }

 private:
  BackboneConfig cfg_;
  ParameterStore<Scalar> params_;
  ParamId patch_w_ = 0, patch_b_ = 0;
  std::optional<ParamId> cls_;
  ParamId pos_ = 0;
  std::vector<BlockParams> blocks_;
  ParamId norm_g_ = 0, norm_b_ = 0;
  std::optional<MapHeadParams> map_;
};

}  // namespace losa
