#pragma once

#include <string>
#include <variant>
#include <vector>

#include "losa/adapters.hpp"

namespace losa {

struct Lora {
  std::size_t rank = 32;
  std::vector<Projection> components{kAllProjections.begin(), kAllProjections.end()};
  /// Layer indices to adapt; empty means every block plus the attention-pooling head (index depth).
  std::vector<std::size_t> layers;
};
struct BitFit {};
struct PromptTuning {
  std::size_t prompts = 16;      // P, prompts per layer
  std::size_t prompt_layers = 24;  // L_p, number of initial blocks that receive prompts
};
struct Lst {
  std::size_t d_side = 48;
};
struct LinearProbe {};
struct FullFinetune {};
struct LastK {
  std::size_t k = 1;
};
struct AttnOnly {};
struct MlpOnly {};

using AdaptationMethod =
    std::variant<LosaConfig, Lora, BitFit, PromptTuning, Lst, LinearProbe, FullFinetune, LastK, AttnOnly, MlpOnly>;

/// Short name used by configs and the CLI: losa, lora, bitfit, prompt, lst, linear, full, last_k, attn_only, mlp_only.
std::string method_name(const AdaptationMethod& m);
std::vector<std::string> method_names();
/// Method with default hyperparameters for a name.
AdaptationMethod default_method(std::string_view name);

/// Checks hyperparameter ranges against an architecture.
void validate_method(const AdaptationMethod& m, const BackboneConfig& arch);

/// Sites a LoRA config touches on this architecture, in layer-major order.
std::vector<Site> lora_sites(const Lora& l, const BackboneConfig& arch);

/// Whether the backbone receives gradients under this method.
bool backpropagates_through_backbone(const AdaptationMethod& m);

}  // namespace losa
