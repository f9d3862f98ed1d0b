#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "losa/backbone.hpp"
#include "losa/costmodel.hpp"
#include "losa/methods.hpp"

namespace losa {

using Json = nlohmann::ordered_json;

Json to_json(const BackboneConfig& c);
/// Accepts either a full description or {"preset": NAME, ...overrides}.
BackboneConfig backbone_from_json(const Json& j);

Json to_json(const LosaConfig& c);
LosaConfig losa_from_json(const Json& j);

/// {"method": NAME, NAME: {hyperparameters}}.
Json to_json(const AdaptationMethod& m);
AdaptationMethod method_from_json(const Json& j);

Json to_json(const TapeStats& s);
TapeStats tape_stats_from_json(const Json& j);
Json to_json(const CostReport& r);
CostReport cost_report_from_json(const Json& j);

/// Architecture registry: {"architectures": [ {...}, ... ]}.
std::vector<BackboneConfig> load_architecture_registry(const std::filesystem::path& path);

Json read_json_file(const std::filesystem::path& path);

}  // namespace losa
