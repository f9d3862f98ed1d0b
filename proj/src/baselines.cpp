#include "losa/baselines.hpp"

#include <charconv>

namespace losa {

std::optional<std::size_t> block_index_of(const std::string& name) {
  static constexpr std::string_view kPrefix = "backbone.block";
  if (name.compare(0, kPrefix.size(), kPrefix) != 0) return std::nullopt;
  std::size_t value = 0;
  const char* begin = name.data() + kPrefix.size();
  const char* end = name.data() + name.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr == begin || ptr == end || *ptr != '.') return std::nullopt;
  return value;
}

namespace {

bool contains(const std::string& s, std::string_view part) { return s.find(part) != std::string::npos; }

bool in_pool_head(const std::string& name) {
  return name.rfind("backbone.norm.", 0) == 0 || name.rfind("backbone.map.", 0) == 0;
}

}  // namespace

bool selected_for_training(const std::string& name, const AdaptationMethod& m, const BackboneConfig& arch) {
  const auto block = block_index_of(name);
  if (std::holds_alternative<FullFinetune>(m)) return true;
  if (std::holds_alternative<BitFit>(m)) return is_bias_name(name);
  if (const auto* k = std::get_if<LastK>(&m)) {
    return in_pool_head(name) || (block && *block + k->k >= arch.depth);
  }
  if (std::holds_alternative<AttnOnly>(m)) return block && contains(name, ".mhsa.");
  if (std::holds_alternative<MlpOnly>(m)) return block && contains(name, ".mlp.");
  return false;
}

}  // namespace losa
