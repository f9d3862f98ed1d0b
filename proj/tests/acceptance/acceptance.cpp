// Acceptance run: one PASS/FAIL line per criterion. Exit status is the number of failed criteria.
//
//   acceptance            all criteria
//   acceptance 1 2 9      a subset

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "../gradcheck.hpp"
#include "../op_cases.hpp"
#include "losa/harness.hpp"

using namespace losa;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [miss: " << what << "]";
    }
  }
};

double millions(std::uint64_t n) { return double(n) / 1e6; }

bool within(double got, double want, double rel) { return std::abs(got - want) <= rel * std::abs(want); }

Tensor<float> random_input(const BackboneConfig& c, std::mt19937_64& rng) {
  return Tensor<float>::normal({c.frames, c.image_size, c.image_size, c.channels}, 1.0f, rng);
}

std::vector<AdaptationMethod> toy_methods() {
  LosaConfig losa;
  losa.rank = 4;
  Lora lora;
  lora.rank = 3;
  return {losa, lora, BitFit{}, PromptTuning{2, 1}, Lst{8}, LinearProbe{}, FullFinetune{}, LastK{1}, AttnOnly{},
          MlpOnly{}};
}

// ---------------------------------------------------------------------------------------------------------------

void params(Outcome& o) {
  const auto g = preset("ViT-g");
  const auto losa = count_params(g, LosaConfig{});
  o.detail << "ViT-g LoSA " << losa;
  o.require(within(millions(losa), 4.298, 1e-3), "ViT-g LoSA 4.298M +-0.1%");

  const std::vector<std::pair<std::size_t, double>> sweep{{1, 0.184}, {2, 0.217}, {4, 0.431}, {8, 0.861}, {40, 4.298}};
  o.detail << "; k-sweep";
  for (const auto& [k, want] : sweep) {
    LosaConfig c;
    c.k_layers = k;
    const double got = millions(count_params(g, c));
    o.detail << ' ' << got;
    o.require(within(got, want, 0.02), "k=" + std::to_string(k));
  }

  const auto b = preset("ViT-B");
  const std::vector<std::pair<std::size_t, double>> vtab{{4, 0.05}, {8, 0.10}, {16, 0.19}};
  o.detail << "; ViT-B";
  for (const auto& [r, want] : vtab) {
    LosaConfig c;
    c.rank = r;
    const double got = std::round(millions(count_params(b, c)) * 100) / 100;
    o.detail << ' ' << got;
    o.require(std::abs(got - want) < 1e-9, "ViT-B r=" + std::to_string(r));
  }

  const std::vector<std::pair<std::size_t, double>> lora{{1, 0.58}, {4, 2.31}, {8, 4.62}, {16, 9.24}, {32, 18.47}};
  o.detail << "; LoRA";
  for (const auto& [r, want] : lora) {
    Lora l;
    l.rank = r;
    const double got = millions(count_params(g, l));
    o.detail << ' ' << got;
    o.require(within(got, want, 0.02), "LoRA r=" + std::to_string(r));
  }

  // (P, L_p, thousands of parameters) as published for the prompt-tuning ablation, rounded to whole thousands.
  const std::vector<std::tuple<std::size_t, std::size_t, double>> grid{
      {1, 1, 1},     {1, 4, 6},     {1, 8, 11},    {1, 16, 23},   {1, 24, 34},   {4, 1, 6},     {4, 4, 23},
      {4, 8, 45},    {4, 16, 90},   {4, 24, 135},  {8, 1, 11},    {8, 4, 45},    {8, 8, 90},    {8, 16, 180},
      {8, 24, 270},  {16, 1, 23},   {16, 4, 90},   {16, 8, 180},  {16, 16, 361}, {16, 24, 541}, {24, 1, 34},
      {24, 4, 135},  {24, 8, 270},  {24, 16, 541}, {24, 24, 811}};
  std::size_t ok = 0;
  for (const auto& [p, l, want] : grid) {
    const double got = double(count_params(g, PromptTuning{p, l})) / 1e3;
    if (std::abs(got - want) <= std::max(0.02 * want, 0.5)) {
      ++ok;
    } else {
      o.require(false, "prompt P=" + std::to_string(p) + " L=" + std::to_string(l));
    }
  }
  o.detail << "; prompt grid " << ok << "/" << grid.size();
}

void flops(Outcome& o) {
  const auto g = preset("ViT-g");
  struct Row {
    std::string name;
    AdaptationMethod m;
    double want, tol;
  };
  const std::vector<Row> rows{{"plain", LinearProbe{}, 267.4, 0.02},
                              {"LoSA", LosaConfig{}, 269.4, 0.02},
                              {"LoRA r32", Lora{}, 272.2, 0.02},
                              {"LST d48", Lst{}, 274.9, 0.03},
                              {"prompt 16/24", PromptTuning{16, 24}, 571.8, 0.03},
                              {"prompt 24/24", PromptTuning{24, 24}, 731.6, 0.03}};
  bool first = true;
  for (const auto& r : rows) {
    const double got = count_forward_flops(g, r.m);
    o.detail << (first ? "" : "; ") << r.name << ' ' << got << " (" << r.want << ")";
    first = false;
    o.require(within(got, r.want, r.tol), r.name);
  }
}

void zero_backbone_backprop(Outcome& o) {
  const auto arch = preset("toy");
  SyntheticTaskSpec spec;
  spec.generator = Generator::shifted;
  spec.train_samples = 16;
  spec.test_samples = 8;
  const auto data = gen_synthetic(spec);
  std::map<std::string, bool> holds;
  for (const AdaptationMethod& m : {AdaptationMethod{LosaConfig{}}, AdaptationMethod{Lora{}},
                                    AdaptationMethod{FullFinetune{}}}) {
    auto model = adapt(Backbone<float>::build(arch, 1), m, spec.num_classes, 2);
    const auto before = backbone_checkpoint(model.backbone()).tensors;
    const auto probe = probe_step(model, data.train.inputs[0], data.train.labels[0]);
    std::size_t backbone_grads = 0;
    for (const auto& [name, g] : probe.grads) backbone_grads += name.rfind("backbone.", 0) == 0;
    TrainConfig cfg;
    cfg.arch = arch;
    cfg.method = m;
    cfg.data = spec;
    cfg.steps = 1;
    cfg.warmup_steps = 0;
    cfg.batch_size = 4;
    // One step, with a learning rate large enough that any gradient would move a weight.
    cfg.base_lr = 0.1;
    train(cfg, model, data.train, data.test);
    const bool unchanged = backbone_checkpoint(model.backbone()).tensors == before;
    const auto bwd = probe.stats.region(Region::backbone).bwd_macs;
    const auto name = method_name(m);
    holds[name] = backbone_grads == 0 && bwd == 0 && unchanged;
    o.detail << (name == "losa" ? "" : "; ") << name << ": backbone grads " << backbone_grads << ", backbone bwd_macs " << bwd << ", weights "
             << (unchanged ? "unchanged" : "changed");
  }
  o.require(holds["losa"], "LoSA keeps the backbone out of backprop");
  o.require(!holds["lora"], "assertions must fail for LoRA");
  o.require(!holds["full"], "assertions must fail for full finetuning");
}

void gradients(Outcome& o) {
  constexpr std::uint64_t kSeeds = 20;
  double worst = 0;
  std::string worst_name;
  std::size_t instances = 0;
  auto record = [&](const std::string& name, const check::GradCheck& r) {
    ++instances;
    if (r.checked == 0) o.require(false, name + " checked nothing");
    if (!(r.max_rel_error < 1e-6)) o.require(false, name);
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      worst_name = name;
    }
  };
  auto cases = check::primitive_op_cases();
  const auto composite = check::composite_op_cases();
  cases.insert(cases.end(), composite.begin(), composite.end());
  for (const auto& c : cases) {
    for (std::uint64_t seed = 0; seed < kSeeds; ++seed) record(c.name, c.run(seed));
  }

  // End-to-end: two-layer backbone, LoSA side network and classifier.
  BackboneConfig arch;
  arch.name = "fd";
  arch.depth = 2;
  arch.width = 16;
  arch.heads = 2;
  arch.mlp_dim = 32;
  arch.patch = 4;
  arch.image_size = 8;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    LosaConfig cfg;
    cfg.rank = 3;
    auto model = adapt(Backbone<double>::build(arch, seed), cfg, 3, seed + 1);
    std::mt19937_64 rng(seed);
    auto& ins = model.inserts();
    for (std::size_t id = 0; id < ins.size(); ++id) {
      // Zero-initialized up-projections would hide the down-projection gradients.
      if (ins[id].name.find(".up.") != std::string::npos) {
        ins.set_value(id, Tensor<double>::normal(ins.value(id).shape(), 0.3, rng));
      }
    }
    const auto img = Tensor<double>::normal({1, 8, 8, 3}, 1.0, rng);
    const std::size_t label = seed % 3;
    record("losa_model", check::check_gradients(ins, [&](Tape<double>& t) { return model.loss(t, img, label); }, seed));
  }
  o.detail << cases.size() << " op cases + 2-layer LoSA model, " << kSeeds << " seeds each (" << instances
           << " instances); worst rel error " << worst << " (" << worst_name << ")";
}

void identity(Outcome& o) {
  const auto arch = preset("toy");
  const auto bb = Backbone<float>::build(arch, 4);
  const auto plain = adapt(bb, LinearProbe{}, 5, 9);
  LosaConfig losa;
  Lora lora;
  std::mt19937_64 rng(17);
  std::vector<Tensor<float>> inputs;
  for (int i = 0; i < 100; ++i) inputs.push_back(random_input(arch, rng));
  for (const AdaptationMethod& m : {AdaptationMethod{losa}, AdaptationMethod{lora}, AdaptationMethod{Lst{}},
                                    AdaptationMethod{BitFit{}}}) {
    const auto model = adapt(bb, m, 5, 9);
    std::size_t same = 0;
    for (const auto& x : inputs) {
      Tape<float> a, b;
      same += model.logits(a, x).value() == plain.logits(b, x).value();
    }
    o.detail << method_name(m) << ' ' << same << "/100; ";
    o.require(same == 100, method_name(m));
  }
  o.detail << "prompt tuning exempt (extra tokens change attention at init)";
}

void accounting(Outcome& o) {
  std::size_t pairs = 0, equal = 0;
  for (const char* name : {"toy", "toy-map", "toy-video"}) {
    const auto arch = preset(name);
    const auto bb = Backbone<float>::build(arch, 1);
    for (const auto& m : toy_methods()) {
      const auto model = adapt(bb, m, 4, 0);
      std::mt19937_64 rng(pairs);
      Tape<float> tape;
      tape.backward(model.loss(tape, random_input(arch, rng), 1));
      const auto st = tape.stats();
      const auto r = analyze(arch, m, {4, {}, 4});
      bool same = st.total_bwd_macs == r.bwd_macs && st.total_bwd_macs == std::uint64_t(std::llround(
                                                                                 count_backward_flops(arch, m, 4) * 1e9)) &&
                  st.total_fwd_macs == r.fwd_macs;
      for (auto reg : kAllRegions) same = same && st.region(reg).bwd_macs == r.region(reg).bwd_macs;
      ++pairs;
      equal += same;
      if (!same) o.require(false, std::string(name) + "/" + method_name(m));
    }
  }
  o.detail << equal << "/" << pairs << " (arch x method) pairs with analytic bwd MACs == tape bwd MACs";
  o.require(pairs >= 12, "at least 12 pairs");
}

void desk_adaptation(Outcome& o) {
  using Clock = std::chrono::steady_clock;
  const auto t0 = Clock::now();
  const auto arch = preset("toy");
  constexpr int kSeeds = 3;
  struct Plan {
    std::string name;
    AdaptationMethod method;
    double lr;
    std::size_t steps;
  };
  LosaConfig losa;
  losa.rank = 16;
  const std::vector<Plan> plans{{"linear", LinearProbe{}, 0.05, 1500},
                                {"losa", losa, 0.05, 1500},
                                {"full", FullFinetune{}, 0.02, 500}};
  std::map<std::string, double> acc, step_s;
  std::map<std::string, std::uint64_t> cached;
  for (int seed = 0; seed < kSeeds; ++seed) {
    SyntheticTaskSpec source;
    source.train_samples = 16384;
    source.test_samples = 512;
    source.seed = 100 + seed;
    const auto backbone = pretrain_backbone(arch, source, 400, 0.05, 1234 + seed);
    SyntheticTaskSpec shifted = source;
    shifted.generator = Generator::shifted;
    shifted.shift = 1.0;
    shifted.seed = 200 + seed;
    const auto data = gen_synthetic(shifted);
    for (const auto& p : plans) {
      TrainConfig cfg;
      cfg.arch = arch;
      cfg.method = p.method;
      cfg.data = shifted;
      cfg.base_lr = p.lr;
      cfg.steps = p.steps;
      cfg.warmup_steps = 30;
      cfg.grad_clip = 1.0;
      cfg.seed = std::uint64_t(seed);
      auto model = adapt(backbone, p.method, shifted.num_classes, 3 + std::uint64_t(seed));
      const auto r = train(cfg, model, data.train, data.test);
      acc[p.name] += r.final_accuracy / kSeeds;
      step_s[p.name] += r.wall_clock_per_step_s / kSeeds;
      cached[p.name] = r.measured.cached_bytes;
    }
  }
  {
    auto model = adapt(Backbone<float>::build(arch, 0), Lora{}, 4, 0);
    std::mt19937_64 rng(0);
    cached["lora"] = probe_step(model, random_input(arch, rng), 0).stats.cached_bytes;
  }
  const double ratio = step_s["losa"] / step_s["full"];
  const double minutes = std::chrono::duration<double>(Clock::now() - t0).count() / 60;
  o.detail.precision(4);
  o.detail << "accuracy linear " << acc["linear"] << ", losa " << acc["losa"] << ", full " << acc["full"]
           << "; step time losa/full " << ratio << "; cached bytes linear " << cached["linear"] << " < losa "
           << cached["losa"] << " < lora " << cached["lora"] << " < full " << cached["full"] << "; " << minutes
           << " min";
  o.require(acc["losa"] >= acc["linear"] + 0.05, "LoSA >= linear probe + 5 points");
  o.require(acc["losa"] >= acc["full"] - 0.03, "LoSA within 3 points of full finetuning");
  o.require(ratio <= 0.7, "LoSA step time <= 0.7x full");
  o.require(cached["linear"] < cached["losa"] && cached["losa"] < cached["lora"] && cached["lora"] < cached["full"],
            "cached activation ordering");
  o.require(minutes < 15, "runtime under 15 min");
}

void merge(Outcome& o) {
  const auto arch = preset("toy-map");
  auto model = apply_lora(Backbone<float>::build(arch, 2), 4,
                          {Projection::q, Projection::k, Projection::v, Projection::out}, 3, 1);
  std::mt19937_64 rng(3);
  for (const auto& [key, path] : model.lora_paths()) {
    model.inserts().set_value(path.b, Tensor<float>::normal({4, arch.width}, 0.2f, rng));
  }
  const auto merged = merged_model(model);
  float worst = 0;
  for (int i = 0; i < 100; ++i) {
    const auto x = random_input(arch, rng);
    Tape<float> a, b;
    worst = std::max(worst, max_abs_diff(model.logits(a, x).value(), merged.logits(b, x).value()));
  }
  const auto plain = adapt(Backbone<float>::build(arch, 2), LinearProbe{}, 3, 1);
  Tape<float> a, b;
  const auto x = random_input(arch, rng);
  merged.logits(a, x);
  plain.logits(b, x);
  o.detail << "max |merged - unmerged| " << worst << " over 100 inputs; fwd MACs merged " << a.stats().total_fwd_macs
           << " plain " << b.stats().total_fwd_macs;
  o.require(worst < 1e-5f, "logit agreement");
  o.require(a.stats().total_fwd_macs == b.stats().total_fwd_macs, "merged FLOPs == plain");
}

void pareto(Outcome& o) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> coarse(0, 7);
  std::size_t agree = 0;
  constexpr int kSets = 1000;
  for (int t = 0; t < kSets; ++t) {
    const std::size_t n = 1 + std::size_t(t % 64);
    std::vector<ParetoPoint> pts;
    for (std::size_t i = 0; i < n; ++i) {
      // Every third set sits on a small grid so ties and duplicates occur.
      const bool grid = t % 3 == 0;
      pts.push_back({grid ? coarse(rng) : u(rng), grid ? coarse(rng) : u(rng), std::to_string(i)});
    }
    std::vector<std::string> brute;
    for (const auto& p : pts) {
      bool dominated = false;
      for (const auto& q : pts) {
        dominated = dominated || (q.cost <= p.cost && q.accuracy >= p.accuracy &&
                                  (q.cost < p.cost || q.accuracy > p.accuracy));
      }
      if (!dominated) brute.push_back(p.label);
    }
    std::vector<std::string> fast;
    for (const auto& p : pareto_frontier(pts)) fast.push_back(p.label);
    agree += fast == brute;
  }
  o.detail << agree << "/" << kSets << " random sets match the brute-force oracle";
  o.require(agree == kSets, "all sets agree");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"parameter counts", params},
      {"FLOP model", flops},
      {"zero backbone backprop", zero_backbone_backprop},
      {"gradient correctness", gradients},
      {"identity at init", identity},
      {"accounting oracle", accounting},
      {"desk-scale adaptation", desk_adaptation},
      {"LoRA merge", merge},
      {"Pareto frontier", pareto}};
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.contains(i + 1)) continue;
    Outcome o;
    const auto start = std::chrono::steady_clock::now();
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [error: " << e.what() << "]";
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !o.pass;
    std::printf("%s %zu %s (%.1fs): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), s,
                o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failed;
}
