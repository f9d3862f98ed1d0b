#include "losa/backbone.hpp"

#include <array>

namespace losa {

void BackboneConfig::validate() const {
  if (depth == 0) throw ConfigError("depth must be at least 1");
  if (width == 0 || mlp_dim == 0) throw ConfigError("width and mlp_dim must be positive");
  if (heads == 0 || width % heads != 0) throw ConfigError("width must be divisible by heads");
  if (patch == 0 || image_size % patch != 0) throw ConfigError("image_size must be divisible by patch");
  if (tubelet_t == 0 || frames % tubelet_t != 0) throw ConfigError("frames must be divisible by tubelet_t");
  if (channels == 0) throw ConfigError("channels must be positive");
  if (pool == Pooling::cls && !cls_token) throw ConfigError("cls pooling needs a cls token");
}

std::string_view to_string(Pooling p) {
  switch (p) {
    case Pooling::cls: return "cls";
    case Pooling::mean: return "mean";
    case Pooling::map: return "map";
  }
  return "?";
}

Pooling pooling_from_string(std::string_view s) {
  if (s == "cls") return Pooling::cls;
  if (s == "mean") return Pooling::mean;
  if (s == "map") return Pooling::map;
  throw ConfigError("unknown pooling: " + std::string(s));
}

std::string_view to_string(TapKind t) {
  switch (t) {
    case TapKind::encoder_output: return "encoder_output";
    case TapKind::mhsa_output: return "mhsa_output";
    case TapKind::mlp_output: return "mlp_output";
    case TapKind::both: return "both";
  }
  return "?";
}

TapKind tap_kind_from_string(std::string_view s) {
  if (s == "encoder_output") return TapKind::encoder_output;
  if (s == "mhsa_output") return TapKind::mhsa_output;
  if (s == "mlp_output") return TapKind::mlp_output;
  if (s == "both") return TapKind::both;
  throw ConfigError("unknown tap kind: " + std::string(s));
}

std::string_view to_string(Projection p) {
  switch (p) {
    case Projection::q: return "q";
    case Projection::k: return "k";
    case Projection::v: return "v";
    case Projection::out: return "out";
    case Projection::mlp: return "mlp";
  }
  return "?";
}

Projection projection_from_string(std::string_view s) {
  for (auto p : kAllProjections) {
    if (to_string(p) == s) return p;
  }
  throw ConfigError("unknown projection: " + std::string(s));
}

namespace {

BackboneConfig image(std::string name, std::size_t depth, std::size_t width, std::size_t heads, std::size_t mlp,
                     std::size_t patch, bool cls, Pooling pool) {
  BackboneConfig c;
  c.name = std::move(name);
  c.depth = depth;
  c.width = width;
  c.heads = heads;
  c.mlp_dim = mlp;
  c.patch = patch;
  c.image_size = 224;
  c.cls_token = cls;
  c.pool = pool;
  return c;
}

BackboneConfig video(BackboneConfig c, std::string name) {
  c.name = std::move(name);
  c.frames = 32;
  c.tubelet_t = 2;
  c.cls_token = false;
  if (c.pool == Pooling::cls) c.pool = Pooling::mean;
  return c;
}

std::vector<BackboneConfig> all_presets() {
  std::vector<BackboneConfig> v;
  v.push_back(image("ViT-B", 12, 768, 12, 3072, 16, true, Pooling::cls));
  v.push_back(image("ViT-H", 32, 1280, 16, 5120, 14, true, Pooling::cls));
  v.push_back(image("ViT-g", 40, 1408, 16, 6144, 14, false, Pooling::map));
  v.push_back(image("ViT-G", 48, 1664, 16, 8192, 14, false, Pooling::map));
  v.push_back(image("ViT-e", 56, 1792, 16, 15360, 14, false, Pooling::map));
  v.push_back(video(v[1], "ViViT-H"));
  v.push_back(video(v[2], "ViViT-g"));
  v.push_back(video(v[4], "ViViT-e"));

  BackboneConfig toy;
  toy.name = "toy";
  toy.depth = 4;
  toy.width = 64;
  toy.heads = 4;
  toy.mlp_dim = 256;
  toy.patch = 4;
  toy.image_size = 16;
  toy.channels = 3;
  toy.cls_token = true;
  toy.pool = Pooling::cls;
  v.push_back(toy);

  BackboneConfig tv = toy;
  tv.name = "toy-video";
  tv.depth = 2;
  tv.width = 32;
  tv.mlp_dim = 64;
  tv.image_size = 8;
  tv.frames = 4;
  tv.tubelet_t = 2;
  tv.cls_token = false;
  tv.pool = Pooling::mean;
  v.push_back(tv);

  BackboneConfig tm = toy;
  tm.name = "toy-map";
  tm.depth = 2;
  tm.width = 32;
  tm.mlp_dim = 64;
  tm.image_size = 8;
  tm.cls_token = false;
  tm.pool = Pooling::map;
  v.push_back(tm);
  return v;
}

}  // namespace

BackboneConfig preset(std::string_view name) {
  for (auto& c : all_presets()) {
    if (c.name == name) return c;
  }
  throw ConfigError("unknown architecture preset: " + std::string(name));
}

std::vector<std::string> preset_names() {
  std::vector<std::string> names;
  for (auto& c : all_presets()) names.push_back(c.name);
  return names;
}

}  // namespace losa
