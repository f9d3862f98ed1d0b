#include "losa/config.hpp"
#include "losa/io.hpp"

#include <fstream>

namespace losa {

namespace {

template <typename T>
void maybe(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::vector<std::string> projection_names(const std::vector<Projection>& ps) {
  std::vector<std::string> out;
  for (auto p : ps) out.emplace_back(to_string(p));
  return out;
}

Json region_json(const RegionStats& r) {
  return Json{{"fwd_macs", r.fwd_macs}, {"bwd_macs", r.bwd_macs}, {"cached_bytes", r.cached_bytes}};
}

RegionStats region_from_json(const Json& j) {
  RegionStats r;
  r.fwd_macs = j.at("fwd_macs").get<std::uint64_t>();
  r.bwd_macs = j.at("bwd_macs").get<std::uint64_t>();
  r.cached_bytes = j.at("cached_bytes").get<std::uint64_t>();
  return r;
}

Json regions_json(const std::array<RegionStats, kRegionCount>& rs) {
  Json out = Json::object();
  for (auto r : kAllRegions) out[std::string(to_string(r))] = region_json(rs[static_cast<std::size_t>(r)]);
  return out;
}

std::array<RegionStats, kRegionCount> regions_from_json(const Json& j) {
  std::array<RegionStats, kRegionCount> out{};
  for (auto r : kAllRegions) out[static_cast<std::size_t>(r)] = region_from_json(j.at(std::string(to_string(r))));
  return out;
}

}  // namespace

Json to_json(const BackboneConfig& c) {
  return Json{{"name", c.name},          {"depth", c.depth},         {"width", c.width},
              {"heads", c.heads},        {"mlp_dim", c.mlp_dim},     {"patch", c.patch},
              {"tubelet_t", c.tubelet_t}, {"image_size", c.image_size}, {"frames", c.frames},
              {"channels", c.channels},  {"cls_token", c.cls_token}, {"pool", std::string(to_string(c.pool))}};
}

BackboneConfig backbone_from_json(const Json& j) {
  BackboneConfig c;
  if (j.is_string()) return preset(j.get<std::string>());
  if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
  maybe(j, "name", c.name);
  maybe(j, "depth", c.depth);
  maybe(j, "width", c.width);
  maybe(j, "heads", c.heads);
  maybe(j, "mlp_dim", c.mlp_dim);
  if (j.contains("mlp_ratio")) c.mlp_dim = static_cast<std::size_t>(j.at("mlp_ratio").get<double>() * double(c.width));
  maybe(j, "patch", c.patch);
  maybe(j, "tubelet_t", c.tubelet_t);
  maybe(j, "image_size", c.image_size);
  maybe(j, "frames", c.frames);
  maybe(j, "channels", c.channels);
  maybe(j, "cls_token", c.cls_token);
  if (j.contains("pool")) c.pool = pooling_from_string(j.at("pool").get<std::string>());
  c.validate();
  return c;
}

Json to_json(const LosaConfig& c) {
  Json j;
  j["rank"] = c.rank;
  if (c.k_layers) {
    j["k_layers"] = *c.k_layers;
  } else {
    j["k_layers"] = "all";
  }
  j["tap"] = std::string(to_string(c.tap));
  j["side_input"] = std::string(to_string(c.side_input));
  j["use_biases"] = c.use_biases;
  j["variant"] = std::string(to_string(c.variant));
  j["parity"] = std::string(to_string(c.parity));
  return j;
}

LosaConfig losa_from_json(const Json& j) {
  LosaConfig c;
  maybe(j, "rank", c.rank);
  if (j.contains("k_layers")) {
    const auto& k = j.at("k_layers");
    if (k.is_string()) {
      if (k.get<std::string>() != "all") throw ConfigError("k_layers must be \"all\" or an integer");
      c.k_layers.reset();
    } else {
      c.k_layers = k.get<std::size_t>();
    }
  }
  if (j.contains("tap")) c.tap = tap_kind_from_string(j.at("tap").get<std::string>());
  if (j.contains("side_input")) c.side_input = side_input_from_string(j.at("side_input").get<std::string>());
  maybe(j, "use_biases", c.use_biases);
  if (j.contains("variant")) c.variant = side_variant_from_string(j.at("variant").get<std::string>());
  if (j.contains("parity")) c.parity = mixer_parity_from_string(j.at("parity").get<std::string>());
  return c;
}

Json to_json(const AdaptationMethod& m) {
  const std::string name = method_name(m);
  Json params = Json::object();
  if (const auto* c = std::get_if<LosaConfig>(&m)) {
    params = to_json(*c);
  } else if (const auto* l = std::get_if<Lora>(&m)) {
    params["rank"] = l->rank;
    params["components"] = projection_names(l->components);
    if (!l->layers.empty()) params["layers"] = l->layers;
  } else if (const auto* p = std::get_if<PromptTuning>(&m)) {
    params["prompts"] = p->prompts;
    params["prompt_layers"] = p->prompt_layers;
  } else if (const auto* s = std::get_if<Lst>(&m)) {
    params["d_side"] = s->d_side;
  } else if (const auto* k = std::get_if<LastK>(&m)) {
    params["k"] = k->k;
  }
  Json j;
  j["method"] = name;
  j[name] = params;
  return j;
}

AdaptationMethod method_from_json(const Json& j) {
  const std::string name = j.at("method").get<std::string>();
  AdaptationMethod m = default_method(name);
  const Json params = j.contains(name) ? j.at(name) : Json::object();
  if (auto* c = std::get_if<LosaConfig>(&m)) {
    *c = losa_from_json(params);
  } else if (auto* l = std::get_if<Lora>(&m)) {
    maybe(params, "rank", l->rank);
    if (params.contains("components")) {
      l->components.clear();
      for (const auto& s : params.at("components")) l->components.push_back(projection_from_string(s.get<std::string>()));
    }
    maybe(params, "layers", l->layers);
  } else if (auto* p = std::get_if<PromptTuning>(&m)) {
    maybe(params, "prompts", p->prompts);
    maybe(params, "prompt_layers", p->prompt_layers);
  } else if (auto* s = std::get_if<Lst>(&m)) {
    maybe(params, "d_side", s->d_side);
  } else if (auto* k = std::get_if<LastK>(&m)) {
    maybe(params, "k", k->k);
  }
  return m;
}

Json to_json(const TapeStats& s) {
  Json j;
  j["total_fwd_macs"] = s.total_fwd_macs;
  j["total_bwd_macs"] = s.total_bwd_macs;
  j["cached_bytes"] = s.cached_bytes;
  j["regions"] = regions_json(s.per_region);
  return j;
}

TapeStats tape_stats_from_json(const Json& j) {
  TapeStats s;
  s.total_fwd_macs = j.at("total_fwd_macs").get<std::uint64_t>();
  s.total_bwd_macs = j.at("total_bwd_macs").get<std::uint64_t>();
  s.cached_bytes = j.at("cached_bytes").get<std::uint64_t>();
  s.per_region = regions_from_json(j.at("regions"));
  return s;
}

Json to_json(const CostReport& r) {
  Json j;
  j["arch"] = r.arch;
  j["method"] = r.method;
  j["learned_params"] = r.learned_params;
  j["trainable_params"] = r.trainable_params;
  j["total_params"] = r.total_params;
  j["fwd_macs"] = r.fwd_macs;
  j["bwd_macs"] = r.bwd_macs;
  j["fwd_gmacs"] = r.fwd_gmacs;
  j["bwd_gmacs"] = r.bwd_gmacs;
  j["cached_activation_bytes"] = r.cached_activation_bytes;
  j["optimizer_state_bytes"] = r.optimizer_state_bytes;
  j["total_train_bytes"] = r.total_train_bytes;
  j["memory"] = Json{{"param_bytes", r.memory.param_bytes},
                     {"grad_bytes", r.memory.grad_bytes},
                     {"optimizer_state_bytes", r.memory.optimizer_state_bytes},
                     {"cached_activation_bytes", r.memory.cached_activation_bytes},
                     {"total_bytes", r.memory.total_bytes}};
  j["regions"] = regions_json(r.per_region);
  return j;
}

CostReport cost_report_from_json(const Json& j) {
  CostReport r;
  r.arch = j.at("arch").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.learned_params = j.at("learned_params").get<std::uint64_t>();
  r.trainable_params = j.at("trainable_params").get<std::uint64_t>();
  r.total_params = j.at("total_params").get<std::uint64_t>();
  r.fwd_macs = j.at("fwd_macs").get<std::uint64_t>();
  r.bwd_macs = j.at("bwd_macs").get<std::uint64_t>();
  r.fwd_gmacs = j.at("fwd_gmacs").get<double>();
  r.bwd_gmacs = j.at("bwd_gmacs").get<double>();
  r.cached_activation_bytes = j.at("cached_activation_bytes").get<std::uint64_t>();
  r.optimizer_state_bytes = j.at("optimizer_state_bytes").get<std::uint64_t>();
  r.total_train_bytes = j.at("total_train_bytes").get<std::uint64_t>();
  const auto& m = j.at("memory");
  r.memory.param_bytes = m.at("param_bytes").get<std::uint64_t>();
  r.memory.grad_bytes = m.at("grad_bytes").get<std::uint64_t>();
  r.memory.optimizer_state_bytes = m.at("optimizer_state_bytes").get<std::uint64_t>();
  r.memory.cached_activation_bytes = m.at("cached_activation_bytes").get<std::uint64_t>();
  r.memory.total_bytes = m.at("total_bytes").get<std::uint64_t>();
  r.per_region = regions_from_json(j.at("regions"));
  return r;
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return Json::parse(in);
}

std::vector<BackboneConfig> load_architecture_registry(const std::filesystem::path& path) {
  const Json j = read_json_file(path);
  std::vector<BackboneConfig> out;
  for (const auto& a : j.at("architectures")) out.push_back(backbone_from_json(a));
  return out;
}

}  // namespace losa
