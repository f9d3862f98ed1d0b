#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "losa/baselines.hpp"
#include "losa/config.hpp"
#include "losa/costmodel.hpp"
#include "losa/io.hpp"

namespace losa {

enum class Generator : std::uint8_t { source, shifted };
std::string_view to_string(Generator g);
Generator generator_from_string(std::string_view s);

/// Class-conditional blob images at random positions. Source: the class is the blob's chroma. Shifted: with
/// `shift` = 1 the class is the blob's brightness and its chroma is a random nuisance; lower values blend
/// back toward the source palette. Background noise grows with `shift`.
struct SyntheticTaskSpec {
  std::size_t num_classes = 4;
  std::size_t image_size = 16;
  std::size_t frames = 1;
  std::size_t channels = 3;
  Generator generator = Generator::source;
  double shift = 1.0;
  std::size_t train_samples = 512;
  std::size_t test_samples = 256;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  Shape sample_shape;  // [frames x H x W x C]
  std::size_t num_classes = 0;
  std::vector<Tensor<float>> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.size(); }
};

struct SyntheticSplits {
  Dataset train;
  Dataset test;
};

SyntheticSplits gen_synthetic(const SyntheticTaskSpec& spec);

/// Directory with index.json and images.tensor ([N x frames x H x W x C]).
void save_dataset(const std::filesystem::path& dir, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& dir);

struct TrainConfig {
  BackboneConfig arch = preset("toy");
  AdaptationMethod method = LosaConfig{};
  SyntheticTaskSpec data;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double base_lr = 0.05;
  /// SGD momentum, or Adam's beta1.
  double momentum = 0.9;
  double beta2 = 0.999;
  std::size_t warmup_steps = 50;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0;
  /// Frozen backbone to adapt. Empty: pretrain one on the source task first.
  std::string backbone_checkpoint;
  std::size_t pretrain_steps = 400;
  double pretrain_lr = 0.05;

  void validate() const;
};

Json to_json(const SyntheticTaskSpec& s);
SyntheticTaskSpec task_from_json(const Json& j);
Json to_json(const TrainConfig& c);
/// Missing keys keep their defaults.
TrainConfig train_config_from_json(const Json& j);

/// Linear warmup from 0 to base_lr, then cosine decay to 0 at `steps`.
double learning_rate(const TrainConfig& cfg, std::size_t step);

using Model = AdaptedModel<float>;

struct RunReport {
  Json config;
  std::string arch;
  std::string method;
  std::uint64_t seed = 0;
  double initial_accuracy = 0;
  double final_accuracy = 0;
  std::vector<double> loss_curve;
  CostReport cost;
  TapeStats measured;  // one sample's forward and backward
  double wall_clock_per_step_s = 0;
  double wall_clock_total_s = 0;
};

RunReport train(const TrainConfig& cfg, Model& model, const Dataset& train_set, const Dataset& eval_set);
std::vector<std::size_t> predict(const Model& model, const Dataset& data);
double evaluate(const Model& model, const Dataset& data);

/// One optimizer-free pass: loss, gradients and tape stats for a single sample.
struct StepProbe {
  double loss = 0;
  GradientMap<float> grads;
  TapeStats stats;
};
StepProbe probe_step(const Model& model, const Tensor<float>& input, std::size_t label);

Json to_json(const RunReport& r);
RunReport run_report_from_json(const Json& j);
std::string csv_header();
std::string csv_row(const RunReport& r);
/// Writes the JSON report at `path` and a one-row CSV next to it (same stem, .csv).
void emit_report(const RunReport& r, const std::filesystem::path& path);

/// Trains a fully trainable backbone on the source task and returns it frozen.
Backbone<float> pretrain_backbone(const BackboneConfig& arch, const SyntheticTaskSpec& source, std::size_t steps,
                                  double lr, std::uint64_t seed);

Checkpoint model_checkpoint(const Model& model, const Json& extra_meta = Json::object());
Model model_from_checkpoint(const Checkpoint& ck);
Checkpoint backbone_checkpoint(const Backbone<float>& b);
Backbone<float> backbone_from_checkpoint(const Checkpoint& ck);

/// Backbone (pretrained or loaded), synthetic data, adaptation and training for one config.
RunReport run_experiment(const TrainConfig& cfg, Model* trained = nullptr);

}  // namespace losa
