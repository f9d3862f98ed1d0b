#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "losa/autodiff.hpp"
#include "losa/backbone.hpp"
#include "losa/methods.hpp"

namespace losa {

enum class OptimizerKind : std::uint8_t { sgd_momentum, adam };

struct OptimizerSpec {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  std::size_t slots() const { return kind == OptimizerKind::adam ? 2 : 1; }
};

std::string_view to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(std::string_view s);

struct MemoryBreakdown {
  std::uint64_t param_bytes = 0;
  std::uint64_t grad_bytes = 0;
  std::uint64_t optimizer_state_bytes = 0;
  std::uint64_t cached_activation_bytes = 0;
  std::uint64_t total_bytes = 0;
};

struct CostOptions {
  std::size_t num_classes = 1000;
  OptimizerSpec optimizer;
  std::size_t bytes_per_element = 4;
};

/// Analytical cost of one (architecture, method) pair at batch size 1.
struct CostReport {
  std::string arch;
  std::string method;
  std::uint64_t learned_params = 0;    // classifier excluded
  std::uint64_t trainable_params = 0;  // classifier included
  std::uint64_t total_params = 0;
  std::uint64_t fwd_macs = 0;
  std::uint64_t bwd_macs = 0;
  double fwd_gmacs = 0;
  double bwd_gmacs = 0;
  std::uint64_t cached_activation_bytes = 0;
  std::uint64_t optimizer_state_bytes = 0;
  std::uint64_t total_train_bytes = 0;
  MemoryBreakdown memory;
  std::array<RegionStats, kRegionCount> per_region{};

  const RegionStats& region(Region r) const { return per_region[static_cast<std::size_t>(r)]; }
};

CostReport analyze(const BackboneConfig& arch, const AdaptationMethod& m, const CostOptions& opts = {});

std::uint64_t count_params(const BackboneConfig& arch, const AdaptationMethod& m);
/// Forward multiply-accumulates in units of 1e9, reported as GFLOPs.
double count_forward_flops(const BackboneConfig& arch, const AdaptationMethod& m, std::size_t num_classes = 1000);
double count_backward_flops(const BackboneConfig& arch, const AdaptationMethod& m, std::size_t num_classes = 1000);
MemoryBreakdown estimate_train_memory(const BackboneConfig& arch, const AdaptationMethod& m, const OptimizerSpec& opt,
                                      std::size_t num_classes = 1000);

/// Parameters of the plain backbone (no classifier).
std::uint64_t backbone_params(const BackboneConfig& arch);

struct ParetoPoint {
  double cost = 0;
  double accuracy = 0;
  std::string label;
};

/// Points not dominated by another point with cost <= and accuracy >=, one of them strict. Input order kept.
std::vector<ParetoPoint> pareto_frontier(const std::vector<ParetoPoint>& points);

}  // namespace losa
