#include "losa/methods.hpp"

#include <algorithm>

namespace losa {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

}  // namespace

std::string method_name(const AdaptationMethod& m) {
  return std::visit(Overloaded{
                        [](const LosaConfig&) { return "losa"; },
                        [](const Lora&) { return "lora"; },
                        [](const BitFit&) { return "bitfit"; },
                        [](const PromptTuning&) { return "prompt"; },
                        [](const Lst&) { return "lst"; },
                        [](const LinearProbe&) { return "linear"; },
                        [](const FullFinetune&) { return "full"; },
                        [](const LastK&) { return "last_k"; },
                        [](const AttnOnly&) { return "attn_only"; },
                        [](const MlpOnly&) { return "mlp_only"; },
                    },
                    m);
}

std::vector<std::string> method_names() {
  return {"losa", "lora", "bitfit", "prompt", "lst", "linear", "full", "last_k", "attn_only", "mlp_only"};
}

AdaptationMethod default_method(std::string_view name) {
  if (name == "losa") return LosaConfig{};
  if (name == "lora") return Lora{};
  if (name == "bitfit") return BitFit{};
  if (name == "prompt") return PromptTuning{};
  if (name == "lst") return Lst{};
  if (name == "linear") return LinearProbe{};
  if (name == "full") return FullFinetune{};
  if (name == "last_k") return LastK{};
  if (name == "attn_only") return AttnOnly{};
  if (name == "mlp_only") return MlpOnly{};
  throw ConfigError("unknown method: " + std::string(name));
}

void validate_method(const AdaptationMethod& m, const BackboneConfig& arch) {
  arch.validate();
  std::visit(Overloaded{
                 [&](const LosaConfig& c) { c.validate(arch); },
                 [&](const Lora& l) {
                   if (l.rank < 1 || l.rank > 256) throw ConfigError("LoRA rank must be in 1..256");
                   if (l.components.empty()) throw ConfigError("LoRA needs at least one component");
                   const std::size_t last = arch.depth + (arch.pool == Pooling::map ? 1 : 0);
                   for (auto layer : l.layers) {
                     if (layer >= last) throw ConfigError("LoRA layer index out of range");
                   }
                 },
                 [&](const PromptTuning& p) {
                   if (p.prompts > 24) throw ConfigError("prompts per layer must be in 0..24");
                   if (p.prompts > 0 && (p.prompt_layers < 1 || p.prompt_layers > arch.depth)) {
                     throw ConfigError("prompt layers must be in 1..depth");
                   }
                 },
                 [&](const Lst& l) {
                   if (l.d_side < 1) throw ConfigError("LST side width must be at least 1");
                 },
                 [&](const LastK& k) {
                   if (k.k < 1 || k.k > arch.depth) throw ConfigError("last_k must be in 1..depth");
                 },
                 [](const auto&) {},
             },
             m);
}

std::vector<Site> lora_sites(const Lora& l, const BackboneConfig& arch) {
  std::vector<std::size_t> layers = l.layers;
  if (layers.empty()) {
    const std::size_t last = arch.depth + (arch.pool == Pooling::map ? 1 : 0);
    for (std::size_t i = 0; i < last; ++i) layers.push_back(i);
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  std::vector<Site> sites;
  for (auto layer : layers) {
    for (auto p : kAllProjections) {
      if (std::find(l.components.begin(), l.components.end(), p) != l.components.end()) sites.push_back({layer, p});
    }
  }
  return sites;
}

bool backpropagates_through_backbone(const AdaptationMethod& m) {
  return !(std::holds_alternative<LosaConfig>(m) || std::holds_alternative<Lst>(m) ||
           std::holds_alternative<LinearProbe>(m) ||
           (std::holds_alternative<PromptTuning>(m) && std::get<PromptTuning>(m).prompts == 0));
}

}  // namespace losa
