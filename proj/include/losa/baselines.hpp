#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "losa/adapters.hpp"
#include "losa/methods.hpp"

namespace losa {

/// Whether a backbone parameter name is a bias (".bias" suffix).
inline bool is_bias_name(const std::string& name) {
  return name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

/// Block index parsed from "backbone.block{l}.", or nullopt for non-block parameters.
std::optional<std::size_t> block_index_of(const std::string& name);

/// Backbone parameter names trained by a selective or BitFit method.
bool selected_for_training(const std::string& name, const AdaptationMethod& m, const BackboneConfig& arch);

/// LoRA path on one projection: delta = (x A) B.
struct LoraPath {
  ParamId a = 0, b = 0;
};

/// LST-style ladder: down-projections of b_0..b_L, blocks at width d_side, zero-initialized up-projection.
struct LstParams {
  std::vector<ParamId> down_w, down_b;  // L + 1 entries
  std::vector<BlockParams> blocks;      // L entries
  ParamId up_w = 0, up_b = 0;
};

/// A backbone with one adaptation method applied and a trainable classifier ("head.weight", "head.bias").
/// Method-specific inserts live in a second parameter store so backbone names stay untouched.
template <typename Scalar>
class AdaptedModel {
 public:
  static AdaptedModel build(Backbone<Scalar> backbone, AdaptationMethod method, std::size_t num_classes,
                            std::uint64_t seed) {
    const auto& arch = backbone.config();
    validate_method(method, arch);
    if (num_classes == 0) throw ConfigError("num_classes must be positive");
    AdaptedModel m;
    m.backbone_ = std::move(backbone);
    m.method_ = std::move(method);
    m.classes_ = num_classes;
    std::mt19937_64 rng(seed);
    const std::size_t d = arch.width;
    m.head_w_ = m.extra_.add(
        "head.weight", Tensor<Scalar>::truncated_normal({d, num_classes}, Scalar(1.0 / std::sqrt(double(d))), rng), true);
    m.head_b_ = m.extra_.add("head.bias", Tensor<Scalar>::zeros({num_classes}), true);

    auto& bstore = m.backbone_.params();
    for (std::size_t id = 0; id < bstore.size(); ++id) {
      bstore.set_trainable(id, selected_for_training(bstore[id].name, m.method_, arch));
    }

    if (const auto* cfg = std::get_if<LosaConfig>(&m.method_)) {
      m.side_ = SideNetwork<Scalar>::init(*cfg, arch, m.extra_, rng);
    } else if (const auto* lora = std::get_if<Lora>(&m.method_)) {
      for (const auto& site : lora_sites(*lora, arch)) {
        const std::string prefix = site.layer == arch.depth ? std::string("lora.map.")
                                                             : "lora.block" + std::to_string(site.layer) + ".";
        const std::string name = prefix + std::string(to_string(site.proj));
        LoraPath p;
        p.a = m.extra_.add(name + ".A",
                           Tensor<Scalar>::normal({d, lora->rank}, Scalar(1.0 / std::sqrt(double(d))), rng), true);
        p.b = m.extra_.add(name + ".B", Tensor<Scalar>::zeros({lora->rank, d}), true);
        m.lora_.emplace(std::make_pair(site.layer, site.proj), p);
      }
    } else if (const auto* pt = std::get_if<PromptTuning>(&m.method_)) {
      if (pt->prompts > 0) {
        for (std::size_t l = 0; l < pt->prompt_layers; ++l) {
          m.prompts_.push_back(m.extra_.add("prompt.layer" + std::to_string(l),
                                            Tensor<Scalar>::truncated_normal({pt->prompts, d}, Scalar(0.02), rng), true));
        }
      }
    } else if (const auto* lst = std::get_if<Lst>(&m.method_)) {
      const std::size_t ds = lst->d_side;
      LstParams p;
      for (std::size_t i = 0; i <= arch.depth; ++i) {
        const std::string name = "lst.down" + std::to_string(i);
        p.down_w.push_back(m.extra_.add(
            name + ".weight", Tensor<Scalar>::truncated_normal({d, ds}, Scalar(1.0 / std::sqrt(double(d))), rng), true));
        p.down_b.push_back(m.extra_.add(name + ".bias", Tensor<Scalar>::zeros({ds}), true));
      }
      for (std::size_t i = 0; i < arch.depth; ++i) {
        p.blocks.push_back(register_block(m.extra_, "lst.block" + std::to_string(i), ds, side_heads(ds), 4 * ds, rng, true));
      }
      p.up_w = m.extra_.add("lst.up.weight", Tensor<Scalar>::zeros({ds, d}), true);
      p.up_b = m.extra_.add("lst.up.bias", Tensor<Scalar>::zeros({d}), true);
      m.lst_ = std::move(p);
    }
    return m;
  }

  const Backbone<Scalar>& backbone() const { return backbone_; }
  Backbone<Scalar>& backbone() { return backbone_; }
  ParameterStore<Scalar>& inserts() { return extra_; }
  const ParameterStore<Scalar>& inserts() const { return extra_; }
  const AdaptationMethod& method() const { return method_; }
  std::size_t num_classes() const { return classes_; }
  const std::optional<SideNetwork<Scalar>>& side() const { return side_; }
  const std::map<std::pair<std::size_t, Projection>, LoraPath>& lora_paths() const { return lora_; }

  /// Store holding a parameter name (backbone or inserts).
  ParameterStore<Scalar>& store_of(const std::string& name) {
    if (backbone_.params().contains(name)) return backbone_.params();
    if (extra_.contains(name)) return extra_;
    throw UnknownParameterError(name);
  }
  const ParameterStore<Scalar>& store_of(const std::string& name) const {
    return const_cast<AdaptedModel*>(this)->store_of(name);
  }

  /// Trainable elements excluding the classifier.
  std::size_t learned_params() const {
    return trainable_params() - extra_.value(head_w_).size() - extra_.value(head_b_).size();
  }
  std::size_t trainable_params() const { return backbone_.params().trainable_elements() + extra_.trainable_elements(); }
  std::size_t total_params() const { return backbone_.params().total_elements() + extra_.total_elements(); }

  /// Logits [1 x C] for one input of shape [frames x H x W x C].
  Var<Scalar> logits(Tape<Scalar>& tape, const Tensor<Scalar>& input) const {
    const auto& arch = backbone_.config();
    const Hooks hooks(*this);
    const ForwardHooks<Scalar>* hp = (lora_.empty() && prompts_.empty()) ? nullptr : &hooks;
    auto tokens = backbone_.patchify(tape, input);
    const TapKind tap = side_ ? side_->config().tap : TapKind::encoder_output;
    auto outs = backbone_.forward_with_taps(tape, tokens, tap, hp);
    Var<Scalar> final = outs.final;
    if (side_) {
      final = side_->forward(tape, extra_, outs);
    } else if (lst_) {
      final = lst_forward(tape, outs);
    } else if (!prompts_.empty()) {
      auto guard = tape.scope(Region::baseline_insert);
      const std::size_t extra_rows = prompts_.size() * std::get<PromptTuning>(method_).prompts;
      final = slice_rows(outs.final, extra_rows, arch.tokens());
    }
    auto pooled = backbone_.pool(tape, final, hp);
    auto guard = tape.scope(Region::head);
    return add_bias(matmul(pooled, tape.param(extra_, head_w_)), tape.param(extra_, head_b_));
  }

  Var<Scalar> loss(Tape<Scalar>& tape, const Tensor<Scalar>& input, std::size_t label) const {
    auto z = logits(tape, input);
    auto guard = tape.scope(Region::head);
    return cross_entropy(z, label);
  }

 private:
  class Hooks final : public ForwardHooks<Scalar> {
   public:
    explicit Hooks(const AdaptedModel& m) : m_(m) {}

    std::optional<Var<Scalar>> projection_delta(Site site, Var<Scalar> input) const override {
      auto it = m_.lora_.find({site.layer, site.proj});
      if (it == m_.lora_.end()) return std::nullopt;
      auto& tape = *input.tape;
      auto guard = tape.scope(Region::baseline_insert);
      return matmul(matmul(input, tape.param(m_.extra_, it->second.a)), tape.param(m_.extra_, it->second.b));
    }

    Var<Scalar> before_block(std::size_t layer, Var<Scalar> x) const override {
      if (layer >= m_.prompts_.size()) return x;
      auto& tape = *x.tape;
      auto guard = tape.scope(Region::baseline_insert);
      return concat_rows(tape.param(m_.extra_, m_.prompts_[layer]), x);
    }

   private:
    const AdaptedModel& m_;
  };

  Var<Scalar> lst_forward(Tape<Scalar>& tape, const BackboneOutputs<Scalar>& outs) const {
    auto guard = tape.scope(Region::baseline_insert);
    const auto& p = *lst_;
    auto s = linear(tape, extra_, outs.tokens_in, p.down_w[0], p.down_b[0]);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
      s = add(s, linear(tape, extra_, outs.taps[i], p.down_w[i + 1], p.down_b[i + 1]));
      s = transformer_block(tape, extra_, p.blocks[i], s).out;
    }
    return add(outs.final, linear(tape, extra_, s, p.up_w, p.up_b));
  }

  Backbone<Scalar> backbone_;
  ParameterStore<Scalar> extra_;
  AdaptationMethod method_;
  std::size_t classes_ = 0;
  ParamId head_w_ = 0, head_b_ = 0;
  std::optional<SideNetwork<Scalar>> side_;
  std::map<std::pair<std::size_t, Projection>, LoraPath> lora_;
  std::vector<ParamId> prompts_;
  std::optional<LstParams> lst_;
};

template <typename Scalar>
AdaptedModel<Scalar> adapt(Backbone<Scalar> b, AdaptationMethod m, std::size_t num_classes, std::uint64_t seed) {
  return AdaptedModel<Scalar>::build(std::move(b), std::move(m), num_classes, seed);
}

template <typename Scalar>
AdaptedModel<Scalar> apply_lora(Backbone<Scalar> b, std::size_t rank, std::vector<Projection> components,
                                std::size_t num_classes, std::uint64_t seed) {
  if (components.empty()) throw ConfigError("LoRA needs at least one component");
  return adapt(std::move(b), Lora{rank, std::move(components), {}}, num_classes, seed);
}

template <typename Scalar>
AdaptedModel<Scalar> apply_bitfit(Backbone<Scalar> b, std::size_t num_classes, std::uint64_t seed) {
  return adapt(std::move(b), BitFit{}, num_classes, seed);
}

template <typename Scalar>
AdaptedModel<Scalar> apply_prompt_tuning(Backbone<Scalar> b, std::size_t prompts, std::size_t prompt_layers,
                                         std::size_t num_classes, std::uint64_t seed) {
  return adapt(std::move(b), PromptTuning{prompts, prompt_layers}, num_classes, seed);
}

template <typename Scalar>
AdaptedModel<Scalar> apply_lst(Backbone<Scalar> b, std::size_t d_side, std::size_t num_classes, std::uint64_t seed) {
  return adapt(std::move(b), Lst{d_side}, num_classes, seed);
}

enum class SelectiveMode : std::uint8_t { linear, last_k, attn_only, mlp_only, full };

template <typename Scalar>
AdaptedModel<Scalar> apply_selective(Backbone<Scalar> b, SelectiveMode mode, std::size_t k, std::size_t num_classes,
                                     std::uint64_t seed) {
  AdaptationMethod m;
  switch (mode) {
    case SelectiveMode::linear: m = LinearProbe{}; break;
    case SelectiveMode::last_k: m = LastK{k}; break;
    case SelectiveMode::attn_only: m = AttnOnly{}; break;
    case SelectiveMode::mlp_only: m = MlpOnly{}; break;
    case SelectiveMode::full: m = FullFinetune{}; break;
  }
  return adapt(std::move(b), std::move(m), num_classes, seed);
}

/// Folds every LoRA path into its frozen projection: W' = W + A B. The MLP bypass has no single weight to
/// absorb it and is rejected.
template <typename Scalar>
Backbone<Scalar> merge_lora(const AdaptedModel<Scalar>& model) {
  if (!std::holds_alternative<Lora>(model.method())) throw ConfigError("merge_lora needs a LoRA-adapted model");
  Backbone<Scalar> out = model.backbone();
  const auto& arch = out.config();
  auto& store = out.params();
  for (const auto& [key, path] : model.lora_paths()) {
    const auto [layer, proj] = key;
    if (proj == Projection::mlp) throw ConfigError("the LoRA mlp bypass cannot be merged into a single weight");
    const std::string prefix =
        layer == arch.depth ? std::string("backbone.map.mhsa.") : "backbone.block" + std::to_string(layer) + ".mhsa.";
    const ParamId wid = store.id(prefix + std::string(to_string(proj)) + ".weight");
    Tensor<Scalar> w = store.value(wid);
    w.matrix() += model.inserts().value(path.a).matrix() * model.inserts().value(path.b).matrix();
    store.set_value(wid, std::move(w));
  }
  store.freeze_all();
  return out;
}

/// Plain model on the merged backbone with the LoRA model's classifier.
template <typename Scalar>
AdaptedModel<Scalar> merged_model(const AdaptedModel<Scalar>& model) {
  auto plain = adapt(merge_lora(model), LinearProbe{}, model.num_classes(), 0);
  for (const char* name : {"head.weight", "head.bias"}) {
    const auto& src = model.inserts();
    plain.inserts().set_value(plain.inserts().id(name), src.value(src.id(name)));
  }
  return plain;
}

}  // namespace losa
