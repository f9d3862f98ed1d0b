#include "losa/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace losa {

std::string_view to_string(Generator g) { return g == Generator::source ? "source" : "shifted"; }

Generator generator_from_string(std::string_view s) {
  if (s == "source") return Generator::source;
  if (s == "shifted") return Generator::shifted;
  throw ConfigError("unknown generator: " + std::string(s));
}

void SyntheticTaskSpec::validate() const {
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (num_classes > 16) throw ConfigError("at most 16 classes are supported");
  if (image_size < 8) throw ConfigError("image_size must be at least 8");
  if (frames == 0 || channels == 0) throw ConfigError("frames and channels must be positive");
  if (shift < 0 || shift > 1) throw ConfigError("shift must be in [0, 1]");
}

namespace {

std::array<float, 3> palette(double k, std::size_t classes) {
  std::array<float, 3> c{};
  const double phase = 2 * std::numbers::pi * k / double(classes);
  for (std::size_t j = 0; j < 3; ++j) c[j] = float(std::cos(phase + 2 * std::numbers::pi * double(j) / 3));
  return c;
}

Tensor<float> draw_sample(const SyntheticTaskSpec& s, std::size_t label, std::mt19937_64& rng) {
  const std::size_t H = s.image_size;
  const bool shifted = s.generator == Generator::shifted;
  const double sigma = shifted ? 0.1 + 0.2 * s.shift : 0.1;
  std::normal_distribution<double> noise(0.0, 1.0);

  const std::size_t blob = H / 4 + std::uniform_int_distribution<std::size_t>(0, H / 8)(rng);
  const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, H - blob)(rng);
  const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, H - blob)(rng);
  // Source colours vary only in chroma. Shifted classes move to the grey axis: the chroma becomes a random
  // nuisance and the label sets the brightness offset.
  auto colour = palette(double(label), s.num_classes);
  if (shifted) {
    const auto nuisance = palette(double(std::uniform_int_distribution<std::size_t>(0, s.num_classes - 1)(rng)),
                                  s.num_classes);
    const double level = s.num_classes > 1 ? -1.5 + 3.0 * double(label) / double(s.num_classes - 1) : 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      colour[j] = float((1 - s.shift) * colour[j] + s.shift * (nuisance[j] + level));
    }
  }
  // Motion across frames: one pixel per frame in a random direction, clamped to the image.
  const int dy = int(std::uniform_int_distribution<int>(-1, 1)(rng));
  const int dx = int(std::uniform_int_distribution<int>(-1, 1)(rng));

  Tensor<float> img({s.frames, H, H, s.channels});
  for (std::size_t f = 0; f < s.frames; ++f) {
    const auto clamp = [&](std::size_t p, int d) {
      const long v = long(p) + long(f) * d;
      return std::size_t(std::clamp<long>(v, 0, long(H - blob)));
    };
    const std::size_t fy = s.frames > 1 ? clamp(y0, dy) : y0;
    const std::size_t fx = s.frames > 1 ? clamp(x0, dx) : x0;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < H; ++x) {
        const bool inside = y >= fy && y < fy + blob && x >= fx && x < fx + blob;
        for (std::size_t c = 0; c < s.channels; ++c) {
          const double base = inside ? colour[c % 3] : 0.0;
          img[((f * H + y) * H + x) * s.channels + c] = float(base + sigma * noise(rng));
        }
      }
    }
  }
  return img;
}

Dataset draw_split(const SyntheticTaskSpec& s, std::size_t count, std::mt19937_64& rng) {
  Dataset d;
  d.sample_shape = {s.frames, s.image_size, s.image_size, s.channels};
  d.num_classes = s.num_classes;
  std::vector<std::size_t> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = i % s.num_classes;
  std::shuffle(labels.begin(), labels.end(), rng);
  for (auto label : labels) {
    d.inputs.push_back(draw_sample(s, label, rng));
    d.labels.push_back(label);
  }
  return d;
}

}  // namespace

SyntheticSplits gen_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed * 0x9e3779b97f4a7c15ULL + (spec.generator == Generator::source ? 1 : 2));
  SyntheticSplits out;
  out.train = draw_split(spec, spec.train_samples, rng);
  out.test = draw_split(spec, spec.test_samples, rng);
  return out;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
  if (!std::filesystem::is_directory(dir)) throw IoError("directory does not exist: " + dir.string());
  Shape shape{d.size()};
  shape.insert(shape.end(), d.sample_shape.begin(), d.sample_shape.end());
  std::vector<float> data;
  data.reserve(numel(shape));
  for (const auto& x : d.inputs) data.insert(data.end(), x.data().begin(), x.data().end());
  save_tensor(dir / "images.tensor", Tensor<float>(shape, std::move(data)));
  Json index;
  index["num_classes"] = d.num_classes;
  index["count"] = d.size();
  index["sample_shape"] = d.sample_shape;
  index["images"] = "images.tensor";
  index["labels"] = d.labels;
  write_file_atomic(dir / "index.json", index.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const Json index = read_json_file(dir / "index.json");
  Dataset d;
  d.num_classes = index.at("num_classes").get<std::size_t>();
  d.sample_shape = index.at("sample_shape").get<Shape>();
  d.labels = index.at("labels").get<std::vector<std::size_t>>();
  const auto images = load_tensor(dir / index.at("images").get<std::string>());
  const std::size_t per = numel(d.sample_shape);
  if (images.size() != per * d.labels.size()) throw IoError("dataset image count does not match labels");
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    std::vector<float> x(images.data().begin() + std::ptrdiff_t(i * per),
                         images.data().begin() + std::ptrdiff_t((i + 1) * per));
    d.inputs.emplace_back(d.sample_shape, std::move(x));
  }
  return d;
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (steps == 0) throw ConfigError("steps must be at least 1");
  if (warmup_steps >= steps) throw ConfigError("warmup_steps must be below steps");
  if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must be in [0, 1)");
  if (beta2 < 0 || beta2 >= 1) throw ConfigError("beta2 must be in [0, 1)");
  arch.validate();
  data.validate();
  validate_method(method, arch);
  if (data.image_size != arch.image_size || data.frames != arch.frames || data.channels != arch.channels) {
    throw ConfigError("dataset geometry does not match the architecture");
  }
}

Json to_json(const SyntheticTaskSpec& s) {
  return Json{{"num_classes", s.num_classes},
              {"image_size", s.image_size},
              {"frames", s.frames},
              {"channels", s.channels},
              {"generator", std::string(to_string(s.generator))},
              {"shift", s.shift},
              {"train_samples", s.train_samples},
              {"test_samples", s.test_samples},
              {"seed", s.seed}};
}

SyntheticTaskSpec task_from_json(const Json& j) {
  SyntheticTaskSpec s;
  s.num_classes = j.value("num_classes", s.num_classes);
  s.image_size = j.value("image_size", s.image_size);
  s.frames = j.value("frames", s.frames);
  s.channels = j.value("channels", s.channels);
  if (j.contains("generator")) s.generator = generator_from_string(j.at("generator").get<std::string>());
  s.shift = j.value("shift", s.shift);
  s.train_samples = j.value("train_samples", s.train_samples);
  s.test_samples = j.value("test_samples", s.test_samples);
  s.seed = j.value("seed", s.seed);
  return s;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["arch"] = to_json(c.arch);
  const Json m = to_json(c.method);
  j["method"] = m.at("method");
  j[m.at("method").get<std::string>()] = m.at(m.at("method").get<std::string>());
  j["data"] = to_json(c.data);
  j["optimizer"] = Json{{"kind", std::string(to_string(c.optimizer))}, {"momentum", c.momentum}, {"beta2", c.beta2}};
  j["base_lr"] = c.base_lr;
  j["schedule"] = Json{{"kind", "cosine"}, {"warmup_steps", c.warmup_steps}};
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["grad_clip"] = c.grad_clip;
  j["backbone_checkpoint"] = c.backbone_checkpoint;
  j["pretrain_steps"] = c.pretrain_steps;
  j["pretrain_lr"] = c.pretrain_lr;
  return j;
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  if (j.contains("arch")) c.arch = backbone_from_json(j.at("arch"));
  if (j.contains("method")) c.method = method_from_json(j);
  if (j.contains("data")) {
    c.data = task_from_json(j.at("data"));
  } else {
    c.data.image_size = c.arch.image_size;
    c.data.frames = c.arch.frames;
    c.data.channels = c.arch.channels;
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    if (o.contains("kind")) c.optimizer = optimizer_from_string(o.at("kind").get<std::string>());
    c.momentum = o.value("momentum", c.momentum);
    c.beta2 = o.value("beta2", c.beta2);
  }
  c.base_lr = j.value("base_lr", c.base_lr);
  if (j.contains("schedule")) c.warmup_steps = j.at("schedule").value("warmup_steps", c.warmup_steps);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.backbone_checkpoint = j.value("backbone_checkpoint", c.backbone_checkpoint);
  c.pretrain_steps = j.value("pretrain_steps", c.pretrain_steps);
  c.pretrain_lr = j.value("pretrain_lr", c.pretrain_lr);
  return c;
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (step < cfg.warmup_steps) return cfg.base_lr * double(step) / double(cfg.warmup_steps);
  const double t = double(step - cfg.warmup_steps) / double(cfg.steps - cfg.warmup_steps);
  return 0.5 * cfg.base_lr * (1 + std::cos(std::numbers::pi * std::min(t, 1.0)));
}

StepProbe probe_step(const Model& model, const Tensor<float>& input, std::size_t label) {
  Tape<float> tape;
  auto loss = model.loss(tape, input, label);
  StepProbe p;
  p.loss = loss.value()[0];
  p.grads = tape.backward(loss);
  p.stats = tape.stats();
  return p;
}

std::vector<std::size_t> predict(const Model& model, const Dataset& data) {
  std::vector<std::size_t> out;
  out.reserve(data.size());
  for (const auto& x : data.inputs) {
    Tape<float> tape;
    const auto& z = model.logits(tape, x).value().data();
    out.push_back(std::size_t(std::max_element(z.begin(), z.end()) - z.begin()));
  }
  return out;
}

double evaluate(const Model& model, const Dataset& data) {
  if (data.size() == 0) throw ConfigError("cannot evaluate on an empty dataset");
  const auto pred = predict(model, data);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return double(hits) / double(data.size());
}

RunReport train(const TrainConfig& cfg, Model& model, const Dataset& train_set, const Dataset& eval_set) {
  cfg.validate();
  if (train_set.size() == 0) throw ConfigError("empty training set");
  using Clock = std::chrono::steady_clock;
  RunReport r;
  r.config = to_json(cfg);
  r.arch = cfg.arch.name;
  r.method = method_name(cfg.method);
  r.seed = cfg.seed;
  r.cost = analyze(cfg.arch, cfg.method, {train_set.num_classes, {cfg.optimizer}, 4});
  r.initial_accuracy = evaluate(model, eval_set);

  std::mt19937_64 rng(cfg.seed ^ 0x5deece66dULL);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  std::map<std::string, Tensor<float>> velocity, second_moment;
  const auto start = Clock::now();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const double lr = learning_rate(cfg, step);
    GradientMap<float> acc;
    double loss_sum = 0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      Tape<float> tape;
      Var<float> loss;
      try {
        loss = model.loss(tape, train_set.inputs[i], train_set.labels[i]);
      } catch (const NonFiniteError& e) {
        std::ostringstream msg;
        msg << "non-finite value at step " << step << " (lr " << lr << "): " << e.what();
        throw NonFiniteError(msg.str());
      }
      loss_sum += loss.value()[0];
      auto grads = tape.backward(loss);
      if (step == 0 && b == 0) r.measured = tape.stats();
      for (auto& [name, g] : grads) {
        auto it = acc.find(name);
        if (it == acc.end()) {
          acc.emplace(name, std::move(g));
        } else {
          it->second.matrix() += g.matrix();
        }
      }
    }
    const double loss = loss_sum / double(cfg.batch_size);
    if (!std::isfinite(loss)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << " (lr " << lr << ", loss " << loss << ")";
      throw NonFiniteError(msg.str());
    }
    r.loss_curve.push_back(loss);

    const float inv_b = 1.0f / float(cfg.batch_size);
    double norm_sq = 0;
    for (auto& [name, g] : acc) {
      g.matrix() *= inv_b;
      norm_sq += double(g.matrix().squaredNorm());
    }
    float clip = 1.0f;
    if (cfg.grad_clip > 0 && norm_sq > cfg.grad_clip * cfg.grad_clip) clip = float(cfg.grad_clip / std::sqrt(norm_sq));
    for (auto& [name, g] : acc) {
      auto& store = model.store_of(name);
      const auto id = store.id(name);
      auto& v = velocity.try_emplace(name, Tensor<float>::zeros(g.shape())).first->second;
      Tensor<float> p = store.value(id);
      if (cfg.optimizer == OptimizerKind::adam) {
        const float b1 = float(cfg.momentum), b2 = float(cfg.beta2);
        auto& s = second_moment.try_emplace(name, Tensor<float>::zeros(g.shape())).first->second;
        const auto gc = (clip * g.matrix().array()).eval();
        v.matrix().array() = b1 * v.matrix().array() + (1 - b1) * gc;
        s.matrix().array() = b2 * s.matrix().array() + (1 - b2) * gc.square();
        const double t = double(step + 1);
        const float c1 = float(1 - std::pow(double(b1), t)), c2 = float(1 - std::pow(double(b2), t));
        p.matrix().array() -= float(lr) * (v.matrix().array() / c1) / ((s.matrix().array() / c2).sqrt() + 1e-8f);
      } else {
        v.matrix() = float(cfg.momentum) * v.matrix() + clip * g.matrix();
        p.matrix() -= float(lr) * v.matrix();
      }
      store.set_value(id, std::move(p));
    }
  }
  const double total = std::chrono::duration<double>(Clock::now() - start).count();
  r.wall_clock_total_s = total;
  r.wall_clock_per_step_s = total / double(cfg.steps);
  r.final_accuracy = evaluate(model, eval_set);
  return r;
}

Json to_json(const RunReport& r) {
  Json j;
  j["arch"] = r.arch;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["initial_accuracy"] = r.initial_accuracy;
  j["final_accuracy"] = r.final_accuracy;
  j["loss_curve"] = r.loss_curve;
  j["cost"] = to_json(r.cost);
  j["measured"] = to_json(r.measured);
  j["wall_clock_per_step_s"] = r.wall_clock_per_step_s;
  j["wall_clock_total_s"] = r.wall_clock_total_s;
  j["config"] = r.config;
  return j;
}

RunReport run_report_from_json(const Json& j) {
  RunReport r;
  r.arch = j.at("arch").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.initial_accuracy = j.at("initial_accuracy").get<double>();
  r.final_accuracy = j.at("final_accuracy").get<double>();
  r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  r.cost = cost_report_from_json(j.at("cost"));
  r.measured = tape_stats_from_json(j.at("measured"));
  r.wall_clock_per_step_s = j.at("wall_clock_per_step_s").get<double>();
  r.wall_clock_total_s = j.at("wall_clock_total_s").get<double>();
  r.config = j.at("config");
  return r;
}

std::string csv_header() {
  return "arch,method,seed,initial_accuracy,final_accuracy,final_loss,learned_params,fwd_gmacs,bwd_gmacs,"
         "cached_activation_bytes,total_train_bytes,measured_fwd_macs,measured_bwd_macs,measured_cached_bytes,"
         "wall_clock_per_step_s";
}

std::string csv_row(const RunReport& r) {
  std::ostringstream s;
  s.precision(17);
  s << r.arch << ',' << r.method << ',' << r.seed << ',' << r.initial_accuracy << ',' << r.final_accuracy << ','
    << (r.loss_curve.empty() ? 0.0 : r.loss_curve.back()) << ',' << r.cost.learned_params << ',' << r.cost.fwd_gmacs
    << ',' << r.cost.bwd_gmacs << ',' << r.cost.cached_activation_bytes << ',' << r.cost.total_train_bytes << ','
    << r.measured.total_fwd_macs << ',' << r.measured.total_bwd_macs << ',' << r.measured.cached_bytes << ','
    << r.wall_clock_per_step_s;
  return s.str();
}

void emit_report(const RunReport& r, const std::filesystem::path& path) {
  const auto parent = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
  if (!std::filesystem::is_directory(parent)) throw IoError("report directory does not exist: " + parent.string());
  auto csv = path;
  csv.replace_extension(".csv");
  write_file_atomic(path, to_json(r).dump(2) + "\n");
  write_file_atomic(csv, csv_header() + "\n" + csv_row(r) + "\n");
}

Backbone<float> pretrain_backbone(const BackboneConfig& arch, const SyntheticTaskSpec& source, std::size_t steps,
                                  double lr, std::uint64_t seed) {
  SyntheticTaskSpec spec = source;
  spec.generator = Generator::source;
  const auto data = gen_synthetic(spec);
  auto model = adapt(Backbone<float>::build(arch, seed), FullFinetune{}, spec.num_classes, seed + 1);
  TrainConfig cfg;
  cfg.arch = arch;
  cfg.method = FullFinetune{};
  cfg.data = spec;
  cfg.steps = steps;
  cfg.warmup_steps = std::min<std::size_t>(50, steps / 10);
  cfg.base_lr = lr;
  cfg.seed = seed;
  cfg.grad_clip = 1.0;
  train(cfg, model, data.train, data.test);
  Backbone<float> out = model.backbone();
  out.params().freeze_all();
  return out;
}

namespace {

void copy_values(ParameterStore<float>& store, const Checkpoint& ck) {
  for (std::size_t id = 0; id < store.size(); ++id) {
    const auto& name = store[id].name;
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw IoError("checkpoint is missing " + name);
    store.set_value(id, it->second);
  }
}

}  // namespace

Checkpoint backbone_checkpoint(const Backbone<float>& b) {
  Checkpoint ck;
  ck.meta["arch"] = to_json(b.config());
  for (const auto& p : b.params()) ck.tensors.emplace(p.name, *p.value);
  return ck;
}

Backbone<float> backbone_from_checkpoint(const Checkpoint& ck) {
  auto b = Backbone<float>::build(backbone_from_json(ck.meta.at("arch")), 0);
  copy_values(b.params(), ck);
  return b;
}

Checkpoint model_checkpoint(const Model& model, const Json& extra_meta) {
  Checkpoint ck = backbone_checkpoint(model.backbone());
  const Json m = to_json(model.method());
  ck.meta["method"] = m;
  ck.meta["num_classes"] = model.num_classes();
  for (const auto& [k, v] : extra_meta.items()) ck.meta[k] = v;
  for (const auto& p : model.inserts()) ck.tensors.emplace(p.name, *p.value);
  return ck;
}

Model model_from_checkpoint(const Checkpoint& ck) {
  auto method = method_from_json(ck.meta.at("method"));
  auto model = adapt(backbone_from_checkpoint(ck), std::move(method), ck.meta.at("num_classes").get<std::size_t>(), 0);
  copy_values(model.inserts(), ck);
  return model;
}

RunReport run_experiment(const TrainConfig& cfg, Model* trained) {
  cfg.validate();
  Backbone<float> backbone = cfg.backbone_checkpoint.empty()
                                 ? pretrain_backbone(cfg.arch, cfg.data, cfg.pretrain_steps, cfg.pretrain_lr, 1234)
                                 : backbone_from_checkpoint(load_checkpoint(cfg.backbone_checkpoint));
  if (backbone.config().width != cfg.arch.width || backbone.config().depth != cfg.arch.depth) {
    throw ConfigError("backbone checkpoint does not match the configured architecture");
  }
  const auto data = gen_synthetic(cfg.data);
  auto model = adapt(std::move(backbone), cfg.method, cfg.data.num_classes, cfg.seed);
  auto report = train(cfg, model, data.train, data.test);
  if (trained) *trained = std::move(model);
  return report;
}

}  // namespace losa
