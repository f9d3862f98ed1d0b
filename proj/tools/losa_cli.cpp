// losa: train, evaluate and cost adaptation methods on the synthetic task.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "losa/harness.hpp"

using namespace losa;
namespace fs = std::filesystem;

namespace {

constexpr const char* kReportDirEnv = "LOSA_REPORT_DIR";

fs::path default_report_dir() {
  const char* env = std::getenv(kReportDirEnv);
  return env && *env ? fs::path(env) : fs::path("reports");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, sep);) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Method hyperparameter flags shared by `train` and `cost`. Unset flags leave the method untouched.
struct MethodFlags {
  std::string name;
  std::optional<std::size_t> rank, k_layers, prompts, prompt_layers, d_side, last_k;
  std::optional<std::string> components, tap;

  void add_to(CLI::App& app) {
    app.add_option("--rank", rank, "LoSA or LoRA rank");
    app.add_option("--k-layers", k_layers, "LoSA side-network layers");
    app.add_option("--tap", tap, "LoSA tap: encoder_output, mhsa_output, mlp_output or both");
    app.add_option("--components", components, "LoRA components, comma separated (q,k,v,out,mlp)");
    app.add_option("--prompts", prompts, "prompt tokens per layer");
    app.add_option("--prompt-layers", prompt_layers, "layers that receive prompts");
    app.add_option("--d-side", d_side, "LST side width");
    app.add_option("--last-k", last_k, "blocks trained by last_k");
  }

  AdaptationMethod apply(AdaptationMethod m) const {
    if (!name.empty() && name != method_name(m)) m = default_method(name);
    if (auto* c = std::get_if<LosaConfig>(&m)) {
      if (rank) c->rank = *rank;
      if (k_layers) c->k_layers = *k_layers;
      if (tap) c->tap = tap_kind_from_string(*tap);
    } else if (auto* l = std::get_if<Lora>(&m)) {
      if (rank) l->rank = *rank;
      if (components) {
        l->components.clear();
        for (const auto& s : split(*components, ',')) l->components.push_back(projection_from_string(s));
      }
    } else if (auto* p = std::get_if<PromptTuning>(&m)) {
      if (prompts) p->prompts = *prompts;
      if (prompt_layers) p->prompt_layers = *prompt_layers;
    } else if (auto* s = std::get_if<Lst>(&m)) {
      if (d_side) s->d_side = *d_side;
    } else if (auto* k = std::get_if<LastK>(&m)) {
      if (last_k) k->k = *last_k;
    }
    return m;
  }
};

BackboneConfig resolve_arch(const std::string& name, const std::string& registry) {
  if (!registry.empty()) {
    for (const auto& a : load_architecture_registry(registry)) {
      if (a.name == name) return a;
    }
    throw ConfigError("architecture " + name + " not in " + registry);
  }
  if (fs::exists(name)) return backbone_from_json(read_json_file(name));
  return preset(name);
}

std::string bytes_str(std::uint64_t b) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  if (b >= (1ull << 30)) {
    s << double(b) / double(1ull << 30) << " GiB";
  } else if (b >= (1ull << 20)) {
    s << double(b) / double(1ull << 20) << " MiB";
  } else if (b >= (1ull << 10)) {
    s << double(b) / double(1ull << 10) << " KiB";
  } else {
    s << b << " B";
  }
  return s.str();
}

void print_table(std::ostream& out, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()));
    for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      out << (i ? "  " : "");
      if (i + 1 < r.size()) {
        out << std::left << std::setw(int(width[i])) << r[i];
      } else {
        out << r[i];
      }
    }
    out << '\n';
  }
}

void print_cost_table(const CostReport& r) {
  auto num = [](auto v) {
    std::ostringstream s;
    s << v;
    return s.str();
  };
  std::vector<std::vector<std::string>> rows{
      {"arch", r.arch},
      {"method", r.method},
      {"learned params", num(r.learned_params)},
      {"trainable params", num(r.trainable_params)},
      {"forward GFLOPs", num(r.fwd_gmacs)},
      {"backward GFLOPs", num(r.bwd_gmacs)},
      {"cached activations", bytes_str(r.cached_activation_bytes)},
      {"optimizer state", bytes_str(r.optimizer_state_bytes)},
      {"total train memory", bytes_str(r.total_train_bytes)}};
  print_table(std::cout, rows);
  std::vector<std::vector<std::string>> regions{{"region", "fwd_macs", "bwd_macs", "cached_bytes"}};
  for (auto reg : kAllRegions) {
    const auto& s = r.region(reg);
    regions.push_back({std::string(to_string(reg)), num(s.fwd_macs), num(s.bwd_macs), num(s.cached_bytes)});
  }
  std::cout << '\n';
  print_table(std::cout, regions);
}

std::vector<RunReport> load_reports(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<RunReport> out;
  for (const auto& f : files) {
    const Json j = read_json_file(f);
    // Skip JSON files that are not run reports (configs, indexes).
    if (!j.is_object() || !j.contains("final_accuracy") || !j.contains("cost")) continue;
    out.push_back(run_report_from_json(j));
  }
  return out;
}

double cost_axis(const RunReport& r, const std::string& axis) {
  if (axis == "fwd_gflops") return r.cost.fwd_gmacs;
  if (axis == "train_gflops") return r.cost.fwd_gmacs + r.cost.bwd_gmacs;
  if (axis == "params") return double(r.cost.learned_params);
  if (axis == "memory") return double(r.cost.total_train_bytes);
  if (axis == "step_time") return r.wall_clock_per_step_s;
  throw ConfigError("unknown cost axis: " + axis);
}

int cmd_train(const std::string& config, std::optional<std::uint64_t> seed, std::optional<std::size_t> steps,
              std::optional<double> lr, std::optional<std::size_t> batch, std::optional<std::string> optimizer,
              std::optional<std::string> backbone, const MethodFlags& mf, const std::string& out_dir,
              const std::string& save) {
  TrainConfig cfg = config.empty() ? TrainConfig{} : train_config_from_json(read_json_file(config));
  if (seed) cfg.seed = *seed;
  if (steps) cfg.steps = *steps;
  if (lr) cfg.base_lr = *lr;
  if (batch) cfg.batch_size = *batch;
  if (optimizer) cfg.optimizer = optimizer_from_string(*optimizer);
  if (backbone) cfg.backbone_checkpoint = *backbone;
  cfg.method = mf.apply(cfg.method);
  cfg.validate();

  Model model = adapt(Backbone<float>::build(cfg.arch, 0), LinearProbe{}, cfg.data.num_classes, 0);
  const auto report = run_experiment(cfg, &model);
  const fs::path dir = out_dir.empty() ? default_report_dir() : fs::path(out_dir);
  fs::create_directories(dir);
  const auto path = dir / (cfg.arch.name + "_" + report.method + "_seed" + std::to_string(cfg.seed) + ".json");
  emit_report(report, path);
  if (!save.empty()) save_checkpoint(save, model_checkpoint(model, Json{{"data", to_json(cfg.data)}}));
  std::cout << report.method << " on " << report.arch << ": accuracy " << report.initial_accuracy << " -> "
            << report.final_accuracy << ", " << report.wall_clock_per_step_s * 1e3 << " ms/step, report "
            << path.string() << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data) {
  const auto model = model_from_checkpoint(load_checkpoint(checkpoint));
  const auto d = load_dataset(data);
  const double acc = evaluate(model, d);
  std::cout << Json{{"checkpoint", checkpoint}, {"data", data}, {"samples", d.size()}, {"accuracy", acc}}.dump(2)
            << '\n';
  return 0;
}

int cmd_cost(const std::string& arch_name, const std::string& registry, const MethodFlags& mf,
             std::size_t classes, const std::string& optimizer, const std::string& format) {
  const auto arch = resolve_arch(arch_name, registry);
  const auto m = mf.apply(default_method(mf.name));
  validate_method(m, arch);
  const auto r = analyze(arch, m, {classes, {optimizer_from_string(optimizer)}, 4});
  if (format == "table" || format == "both") print_cost_table(r);
  if (format == "both") std::cout << '\n';
  if (format == "json" || format == "both") std::cout << to_json(r).dump(2) << '\n';
  return 0;
}

int cmd_pareto(const std::string& dir, const std::string& axis) {
  const auto reports = load_reports(dir);
  if (reports.empty()) throw IoError("no run reports in " + dir);
  std::vector<ParetoPoint> pts;
  for (const auto& r : reports) {
    pts.push_back({cost_axis(r, axis), r.final_accuracy, r.arch + "/" + r.method + "/seed" + std::to_string(r.seed)});
  }
  const auto front = pareto_frontier(pts);
  std::vector<std::vector<std::string>> rows{{"run", axis, "accuracy", "frontier"}};
  for (const auto& p : pts) {
    const bool on = std::any_of(front.begin(), front.end(), [&](const auto& q) { return q.label == p.label; });
    std::ostringstream c, a;
    c << p.cost;
    a << p.accuracy;
    rows.push_back({p.label, c.str(), a.str(), on ? "*" : ""});
  }
  print_table(std::cout, rows);
  return 0;
}

int cmd_report(const std::string& dir, const std::string& out) {
  const auto reports = load_reports(dir);
  std::string csv = csv_header() + "\n";
  for (const auto& r : reports) csv += csv_row(r) + "\n";
  write_file_atomic(out, csv);
  std::cout << "wrote " << reports.size() << " rows to " << out << '\n';
  return 0;
}

int cmd_gen_data(const std::string& out, SyntheticTaskSpec spec, const std::string& generator) {
  spec.generator = generator_from_string(generator);
  const auto splits = gen_synthetic(spec);
  fs::create_directories(fs::path(out) / "train");
  fs::create_directories(fs::path(out) / "test");
  save_dataset(fs::path(out) / "train", splits.train);
  save_dataset(fs::path(out) / "test", splits.test);
  std::cout << "wrote " << splits.train.size() << " train and " << splits.test.size() << " test samples to " << out
            << '\n';
  return 0;
}

int cmd_pretrain(const std::string& arch_name, const std::string& registry, const std::string& out,
                 SyntheticTaskSpec spec, std::size_t steps, double lr, std::uint64_t seed) {
  const auto arch = resolve_arch(arch_name, registry);
  spec.image_size = arch.image_size;
  spec.frames = arch.frames;
  spec.channels = arch.channels;
  const auto b = pretrain_backbone(arch, spec, steps, lr, seed);
  save_checkpoint(out, backbone_checkpoint(b));
  std::cout << "saved " << arch.name << " backbone to " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank side adaptation laboratory"};
  app.require_subcommand(1);

  std::string config, out_dir, save;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps, batch;
  std::optional<double> lr;
  std::optional<std::string> optimizer, backbone;
  MethodFlags train_method;
  auto* train = app.add_subcommand("train", "adapt a frozen backbone on the synthetic task");
  train->add_option("--config", config, "TrainConfig JSON")->check(CLI::ExistingFile);
  train->add_option("--seed", seed);
  train->add_option("--steps", steps);
  train->add_option("--lr", lr, "base learning rate");
  train->add_option("--batch-size", batch);
  train->add_option("--optimizer", optimizer, "sgd_momentum or adam");
  train->add_option("--backbone", backbone, "frozen backbone checkpoint (default: pretrain one)");
  train->add_option("--method", train_method.name, "adaptation method");
  train_method.add_to(*train);
  train->add_option("--out", out_dir, std::string("report directory (default $") + kReportDirEnv + " or ./reports)");
  train->add_option("--save", save, "write the adapted model checkpoint here");

  std::string ckpt, data;
  auto* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on a saved dataset");
  eval->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);

  std::string arch = "ViT-g", registry, cost_opt = "sgd_momentum", format = "both";
  std::size_t classes = 1000;
  MethodFlags cost_method;
  cost_method.name = "losa";
  auto* cost = app.add_subcommand("cost", "analytical parameters, FLOPs and memory");
  cost->add_option("--arch", arch, "preset name, registry entry or JSON file");
  cost->add_option("--registry", registry, "architecture registry JSON");
  cost->add_option("--method", cost_method.name);
  cost_method.add_to(*cost);
  cost->add_option("--classes", classes);
  cost->add_option("--optimizer", cost_opt);
  cost->add_option("--format", format)->check(CLI::IsMember({"table", "json", "both"}));

  std::string reports_dir, axis = "train_gflops";
  auto* pareto = app.add_subcommand("pareto", "accuracy-cost frontier over run reports");
  pareto->add_option("--reports", reports_dir)->required();
  pareto->add_option("--cost", axis, "fwd_gflops, train_gflops, params, memory or step_time")
      ->check(CLI::IsMember({"fwd_gflops", "train_gflops", "params", "memory", "step_time"}));

  std::string runs_dir, table_out;
  auto* report = app.add_subcommand("report", "collect run reports into one CSV");
  report->add_option("--runs", runs_dir)->required();
  report->add_option("--out", table_out)->required();

  SyntheticTaskSpec spec;
  std::string gen_out, generator = "shifted";
  auto* gen = app.add_subcommand("gen-data", "write a synthetic train/test split");
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--generator", generator)->check(CLI::IsMember({"source", "shifted"}));
  gen->add_option("--shift", spec.shift);
  gen->add_option("--classes", spec.num_classes);
  gen->add_option("--image-size", spec.image_size);
  gen->add_option("--frames", spec.frames);
  gen->add_option("--train", spec.train_samples);
  gen->add_option("--test", spec.test_samples);
  gen->add_option("--seed", spec.seed);

  std::string pre_arch = "toy", pre_out;
  std::size_t pre_steps = 400;
  double pre_lr = 0.05;
  std::uint64_t pre_seed = 1234;
  SyntheticTaskSpec pre_spec;
  auto* pre = app.add_subcommand("pretrain", "train a backbone on the source task and save it frozen");
  pre->add_option("--arch", pre_arch);
  pre->add_option("--registry", registry);
  pre->add_option("--out", pre_out)->required();
  pre->add_option("--steps", pre_steps);
  pre->add_option("--lr", pre_lr);
  pre->add_option("--seed", pre_seed);
  pre->add_option("--train", pre_spec.train_samples);
  pre->add_option("--data-seed", pre_spec.seed);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config, seed, steps, lr, batch, optimizer, backbone, train_method, out_dir, save);
    if (*eval) return cmd_eval(ckpt, data);
    if (*cost) return cmd_cost(arch, registry, cost_method, classes, cost_opt, format);
    if (*pareto) return cmd_pareto(reports_dir, axis);
    if (*report) return cmd_report(runs_dir, table_out);
    if (*gen) return cmd_gen_data(gen_out, spec, generator);
    if (*pre) return cmd_pretrain(pre_arch, registry, pre_out, pre_spec, pre_steps, pre_lr, pre_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
