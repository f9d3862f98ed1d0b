#include "losa/adapters.hpp"

namespace losa {

std::string_view to_string(SideInput s) {
  return s == SideInput::backbone_output ? "backbone_output" : "backbone_input";
}

std::string_view to_string(SideVariant v) {
  switch (v) {
    case SideVariant::low_rank_mixer: return "low_rank_mixer";
    case SideVariant::low_rank_mlp: return "low_rank_mlp";
    case SideVariant::transformer: return "transformer";
  }
  return "?";
}

std::string_view to_string(Axis a) {
  switch (a) {
    case Axis::channel: return "channel";
    case Axis::token: return "token";
    case Axis::spatial: return "spatial";
    case Axis::temporal: return "temporal";
  }
  return "?";
}

std::string_view to_string(MixerParity p) { return p == MixerParity::odd_token ? "odd_token" : "even_token"; }

SideInput side_input_from_string(std::string_view s) {
  if (s == "backbone_output") return SideInput::backbone_output;
  if (s == "backbone_input") return SideInput::backbone_input;
  throw ConfigError("unknown side_input: " + std::string(s));
}

SideVariant side_variant_from_string(std::string_view s) {
  for (auto v : {SideVariant::low_rank_mixer, SideVariant::low_rank_mlp, SideVariant::transformer}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown side variant: " + std::string(s));
}

MixerParity mixer_parity_from_string(std::string_view s) {
  if (s == "odd_token") return MixerParity::odd_token;
  if (s == "even_token") return MixerParity::even_token;
  throw ConfigError("unknown mixer parity: " + std::string(s));
}

void LosaConfig::validate(const BackboneConfig& arch) const {
  if (rank == 0) throw ConfigError("LoSA rank must be at least 1");
  const std::size_t total = tap_count(tap, arch.depth);
  if (k_layers && (*k_layers == 0 || *k_layers > total)) {
    throw ConfigError("k_layers must be in 1.." + std::to_string(total));
  }
  if (variant == SideVariant::low_rank_mixer && arch.is_video() && arch.cls_token) {
    throw ConfigError("video token mixing needs a token count that factors into n_t x n_s (no cls token)");
  }
}

Axis mixer_axis_for(std::size_t i, MixerParity parity) {
  if (i == 0) throw ConfigError("mixer ordinals start at 1");
  const bool odd = i % 2 != 0;
  return odd == (parity == MixerParity::odd_token) ? Axis::token : Axis::channel;
}

std::vector<std::size_t> select_tap_layers(std::size_t total, std::size_t k) {
  if (k == 0 || k > total) {
    throw ConfigError("cannot select " + std::to_string(k) + " of " + std::to_string(total) + " taps");
  }
  std::vector<std::size_t> taps(k);
  for (std::size_t j = 1; j <= k; ++j) taps[j - 1] = j * total / k;
  return taps;
}

}  // namespace losa
