#include "losa/costmodel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace losa {

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd_momentum"; }

OptimizerKind optimizer_from_string(std::string_view s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd_momentum" || s == "sgd") return OptimizerKind::sgd_momentum;
  throw ConfigError("unknown optimizer: " + std::string(s));
}

namespace {

using u64 = std::uint64_t;

/// Trainable flags of one transformer block (or of the attention-pooling head, where ln1 is the probe).
struct BlockTrain {
  bool ln1_g = false, ln1_b = false;
  bool wq = false, bq = false, wk = false, bk = false, wv = false, bv = false, wo = false, bo = false;
  bool ln2_g = false, ln2_b = false;
  bool w1 = false, b1 = false, w2 = false, b2 = false;
  std::array<bool, 5> lora{};

  static BlockTrain all() {
    BlockTrain t;
    t.ln1_g = t.ln1_b = t.wq = t.bq = t.wk = t.bk = t.wv = t.bv = t.wo = t.bo = true;
    t.ln2_g = t.ln2_b = t.w1 = t.b1 = t.w2 = t.b2 = true;
    return t;
  }
  bool has_lora(Projection p) const { return lora[static_cast<std::size_t>(p)]; }
};

struct BackboneTrain {
  bool embed_w = false, embed_b = false, cls = false, pos = false;
  std::vector<BlockTrain> blocks;
  bool norm_g = false, norm_b = false;
  BlockTrain map;  // ln1_g doubles as the probe flag; ln2 is the post-attention norm
};

BackboneTrain plan(const BackboneConfig& arch, const AdaptationMethod& m) {
  BackboneTrain t;
  t.blocks.resize(arch.depth);
  const bool full = std::holds_alternative<FullFinetune>(m);
  if (full) {
    t.embed_w = t.embed_b = t.cls = t.pos = t.norm_g = t.norm_b = true;
    for (auto& b : t.blocks) b = BlockTrain::all();
    t.map = BlockTrain::all();
    t.map.ln1_b = false;
  } else if (std::holds_alternative<BitFit>(m)) {
    t.embed_b = t.norm_b = true;
    for (auto* b : {&t.map}) {
      b->bq = b->bk = b->bv = b->bo = b->ln2_b = b->b1 = b->b2 = true;
    }
    for (auto& b : t.blocks) b.ln1_b = b.bq = b.bk = b.bv = b.bo = b.ln2_b = b.b1 = b.b2 = true;
  } else if (const auto* k = std::get_if<LastK>(&m)) {
    for (std::size_t l = arch.depth - k->k; l < arch.depth; ++l) t.blocks[l] = BlockTrain::all();
    t.norm_g = t.norm_b = true;
    t.map = BlockTrain::all();
    t.map.ln1_b = false;
  } else if (std::holds_alternative<AttnOnly>(m)) {
    for (auto& b : t.blocks) b.wq = b.bq = b.wk = b.bk = b.wv = b.bv = b.wo = b.bo = true;
  } else if (std::holds_alternative<MlpOnly>(m)) {
    for (auto& b : t.blocks) b.w1 = b.b1 = b.w2 = b.b2 = true;
  } else if (const auto* lora = std::get_if<Lora>(&m)) {
    for (const auto& s : lora_sites(*lora, arch)) {
      auto& b = s.layer == arch.depth ? t.map : t.blocks[s.layer];
      b.lora[static_cast<std::size_t>(s.proj)] = true;
    }
  }
  if (arch.pool != Pooling::map) t.map = BlockTrain{};
  return t;
}

u64 block_params(u64 w, u64 m) { return 4 * w * w + 2 * w * m + 9 * w + m; }

u64 map_params(u64 d, u64 m) { return d + 4 * (d * d + d) + 2 * d + 2 * d * m + m + d; }

u64 adaptor_params(u64 axis_len, u64 r, bool biases) { return 2 * r * axis_len + 1 + (biases ? r + axis_len : 0); }

u64 trained_block_params(const BlockTrain& b, u64 d, u64 m) {
  u64 n = 0;
  n += (b.ln1_g ? d : 0) + (b.ln1_b ? d : 0) + (b.ln2_g ? d : 0) + (b.ln2_b ? d : 0);
  for (bool w : {b.wq, b.wk, b.wv, b.wo}) n += w ? d * d : 0;
  for (bool w : {b.bq, b.bk, b.bv, b.bo}) n += w ? d : 0;
  n += (b.w1 ? d * m : 0) + (b.b1 ? m : 0) + (b.w2 ? m * d : 0) + (b.b2 ? d : 0);
  return n;
}

struct SideLayerPlan {
  Axis axis = Axis::channel;
};

std::vector<SideLayerPlan> side_plan(const LosaConfig& c, const BackboneConfig& arch) {
  const std::size_t total = tap_count(c.tap, arch.depth);
  const std::size_t k = c.layers_used(arch);
  std::vector<SideLayerPlan> out;
  for (std::size_t j = 1; j <= k; ++j) {
    SideLayerPlan p;
    p.axis = c.variant == SideVariant::low_rank_mixer ? mixer_axis_for(side_ordinal(total, k, j), c.parity)
                                                      : Axis::channel;
    out.push_back(p);
  }
  return out;
}

u64 insert_params(const BackboneConfig& arch, const AdaptationMethod& m) {
  const u64 d = arch.width, L = arch.depth;
  if (const auto* c = std::get_if<LosaConfig>(&m)) {
    c->validate(arch);
    const u64 r = c->rank;
    u64 n = 0;
    for (const auto& layer : side_plan(*c, arch)) {
      if (c->variant == SideVariant::transformer) {
        n += d * r + r + block_params(r, 4 * r) + r * d + d;
      } else if (layer.axis == Axis::channel) {
        n += adaptor_params(d, r, c->use_biases);
      } else if (!arch.is_video()) {
        n += adaptor_params(arch.tokens(), r, c->use_biases);
      } else {
        n += adaptor_params(arch.spatial_tokens(), r, c->use_biases) +
             adaptor_params(arch.temporal_tokens(), r, c->use_biases);
      }
    }
    return n;
  }
  if (const auto* l = std::get_if<Lora>(&m)) return lora_sites(*l, arch).size() * 2 * d * l->rank;
  if (const auto* p = std::get_if<PromptTuning>(&m)) return p->prompts == 0 ? 0 : u64(p->prompts) * p->prompt_layers * d;
  if (const auto* s = std::get_if<Lst>(&m)) {
    const u64 ds = s->d_side;
    return (L + 1) * (d * ds + ds) + L * block_params(ds, 4 * ds) + ds * d + d;
  }
  return 0;
}

u64 trained_backbone_params(const BackboneConfig& arch, const BackboneTrain& t) {
  const u64 d = arch.width, m = arch.mlp_dim;
  u64 n = (t.embed_w ? arch.patch_dim() * d : 0) + (t.embed_b ? d : 0) + (t.cls && arch.cls_token ? d : 0) +
          (t.pos ? arch.tokens() * d : 0) + (t.norm_g ? d : 0) + (t.norm_b ? d : 0);
  for (const auto& b : t.blocks) n += trained_block_params(b, d, m);
  if (arch.pool == Pooling::map) {
    // The probe is tracked by ln1_g; the head has no pre-attention norm.
    BlockTrain mb = t.map;
    n += mb.ln1_g ? d : 0;
    mb.ln1_g = mb.ln1_b = false;
    n += trained_block_params(mb, d, m);
  }
  return n;
}

/// Mirror of the tape's accounting: matmul sites plus retained activations, per region.
class Ledger {
 public:
  explicit Ledger(u64 elem_bytes) : elem_bytes_(elem_bytes) {}

  void mm(Region r, u64 macs, bool a_grad, bool b_grad) {
    auto& s = at(r);
    s.fwd_macs += macs;
    s.bwd_macs += macs * (u64(a_grad) + u64(b_grad));
  }
  void keep(Region r, u64 elements) { at(r).cached_bytes += elements * elem_bytes_; }

  const std::array<RegionStats, kRegionCount>& regions() const { return regions_; }

 private:
  RegionStats& at(Region r) { return regions_[static_cast<std::size_t>(r)]; }
  u64 elem_bytes_;
  std::array<RegionStats, kRegionCount> regions_{};
};

/// Low-rank path x A B of an insert: returns nothing, input gradient flag given.
void lora_path(Ledger& g, u64 rows, u64 d, u64 r, bool in_grad) {
  g.mm(Region::baseline_insert, rows * d * r, in_grad, true);
  g.mm(Region::baseline_insert, rows * r * d, true, true);
  g.keep(Region::baseline_insert, rows * r);
}

/// Pre-norm block over n rows. x lives in x_region; returns whether the output carries a gradient.
bool block(Ledger& g, Region reg, Region x_region, u64 n, u64 d, u64 heads, u64 m, const BlockTrain& t, bool xg,
           u64 lora_rank) {
  const bool hg = xg || t.ln1_g || t.ln1_b;
  if (xg || t.ln1_g) g.keep(x_region, n * d);
  bool keep_h = false;
  auto proj = [&](Projection p, bool w, bool b) {
    g.mm(reg, n * d * d, hg, w);
    const bool lora = t.has_lora(p);
    if (lora) lora_path(g, n, d, lora_rank, hg);
    keep_h = keep_h || w || lora;
    return hg || w || b || lora;
  };
  const bool qg = proj(Projection::q, t.wq, t.bq);
  const bool kg = proj(Projection::k, t.wk, t.bk);
  const bool vg = proj(Projection::v, t.wv, t.bv);
  if (keep_h) g.keep(reg, n * d);

  g.mm(reg, n * n * d, qg, kg);
  if (qg) g.keep(reg, n * d);
  if (kg) g.keep(reg, n * d);
  const bool sg = qg || kg;
  if (sg || vg) g.keep(reg, heads * n * n);
  g.mm(reg, n * n * d, sg, vg);
  if (sg) g.keep(reg, n * d);
  const bool og = sg || vg;

  g.mm(reg, n * d * d, og, t.wo);
  const bool lora_out = t.has_lora(Projection::out);
  if (lora_out) lora_path(g, n, d, lora_rank, og);
  if (t.wo || lora_out) g.keep(reg, n * d);
  const bool outg = og || t.wo || t.bo || lora_out;

  const bool x1g = xg || outg;
  if (x1g || t.ln2_g) g.keep(reg, n * d);
  const bool h2g = x1g || t.ln2_g || t.ln2_b;
  g.mm(reg, n * d * m, h2g, t.w1);
  const bool lora_mlp = t.has_lora(Projection::mlp);
  if (t.w1 || lora_mlp) g.keep(reg, n * d);
  const bool z1g = h2g || t.w1 || t.b1;
  if (z1g) g.keep(reg, n * m);
  g.mm(reg, n * m * d, z1g, t.w2);
  if (t.w2) g.keep(reg, n * m);
  if (lora_mlp) lora_path(g, n, d, lora_rank, h2g);
  const bool fg = z1g || t.w2 || t.b2 || lora_mlp;
  return x1g || fg;
}

/// Final norm, pooling and classifier.
void pool_and_head(Ledger& g, const BackboneConfig& arch, const BackboneTrain& t, Region x_region, bool xg, u64 classes,
                   u64 lora_rank) {
  const u64 n = arch.tokens(), d = arch.width, m = arch.mlp_dim, heads = arch.heads;
  const Region h = Region::head;
  if (xg || t.norm_g) g.keep(x_region, n * d);
  const bool hng = xg || t.norm_g || t.norm_b;
  bool pg = hng;
  if (arch.pool == Pooling::map) {
    const auto& b = t.map;
    const bool probe = b.ln1_g;
    // query from the single probe row
    g.mm(h, d * d, probe, b.wq);
    const bool lq = b.has_lora(Projection::q);
    if (lq) {
      g.mm(Region::baseline_insert, d * lora_rank, probe, true);
      g.mm(Region::baseline_insert, lora_rank * d, true, true);
      g.keep(Region::baseline_insert, lora_rank);
    }
    const bool qg = probe || b.wq || b.bq || lq;
    bool keep_hn = false;
    auto proj = [&](Projection p, bool w, bool bias) {
      g.mm(h, n * d * d, hng, w);
      const bool lora = b.has_lora(p);
      if (lora) lora_path(g, n, d, lora_rank, hng);
      keep_hn = keep_hn || w || lora;
      return hng || w || bias || lora;
    };
    const bool kg = proj(Projection::k, b.wk, b.bk);
    const bool vg = proj(Projection::v, b.wv, b.bv);
    if (keep_hn) g.keep(h, n * d);
    g.mm(h, n * d, qg, kg);
    if (qg) g.keep(h, n * d);
    if (kg) g.keep(h, d);
    const bool sg = qg || kg;
    if (sg || vg) g.keep(h, heads * n);
    g.mm(h, n * d, sg, vg);
    if (sg) g.keep(h, n * d);
    const bool og = sg || vg;
    g.mm(h, d * d, og, b.wo);
    const bool lo = b.has_lora(Projection::out);
    if (lo) lora_path(g, 1, d, lora_rank, og);
    if (b.wo || lo) g.keep(h, d);
    const bool ag = og || b.wo || b.bo || lo;
    if (ag || b.ln2_g) g.keep(h, d);
    const bool yg = ag || b.ln2_g || b.ln2_b;
    g.mm(h, d * m, yg, b.w1);
    const bool lm = b.has_lora(Projection::mlp);
    if (b.w1 || lm) g.keep(h, d);
    const bool z1g = yg || b.w1 || b.b1;
    if (z1g) g.keep(h, m);
    g.mm(h, m * d, z1g, b.w2);
    if (b.w2) g.keep(h, m);
    if (lm) lora_path(g, 1, d, lora_rank, yg);
    pg = ag || z1g || b.w2 || b.b2 || lm;
  }
  g.mm(h, d * classes, pg, true);
  g.keep(h, d);
  g.keep(h, classes);
}

/// rows x axis_len through alpha W_u GeLU(W_d x).
void low_rank(Ledger& g, u64 rows, u64 axis_len, u64 r, bool xg) {
  const Region s = Region::side;
  g.mm(s, rows * axis_len * r, xg, true);
  g.keep(s, rows * axis_len);
  g.keep(s, rows * r);
  g.mm(s, rows * r * axis_len, true, true);
  g.keep(s, rows * r);
  g.keep(s, rows * axis_len);
}

std::array<RegionStats, kRegionCount> walk(const BackboneConfig& arch, const AdaptationMethod& m, u64 classes,
                                           u64 elem_bytes) {
  validate_method(m, arch);
  Ledger g(elem_bytes);
  const auto t = plan(arch, m);
  const u64 n = arch.tokens(), d = arch.width, mlp = arch.mlp_dim, heads = arch.heads, L = arch.depth;
  const Region bb = Region::backbone;
  const u64 lora_rank = std::holds_alternative<Lora>(m) ? std::get<Lora>(m).rank : 0;

  // patch embedding
  g.mm(bb, u64(arch.patch_tokens()) * arch.patch_dim() * d, false, t.embed_w);
  if (t.embed_w) g.keep(bb, u64(arch.patch_tokens()) * arch.patch_dim());
  bool xg = t.embed_w || t.embed_b || (t.cls && arch.cls_token) || t.pos;

  u64 P = 0, Lp = 0;
  if (const auto* p = std::get_if<PromptTuning>(&m)) {
    P = p->prompts;
    Lp = P == 0 ? 0 : p->prompt_layers;
  }
  u64 rows = n;
  for (u64 l = 0; l < L; ++l) {
    Region x_region = bb;
    if (l < Lp) {
      rows += P;
      xg = true;
      x_region = Region::baseline_insert;
    }
    xg = block(g, bb, x_region, rows, d, heads, mlp, t.blocks[l], xg, lora_rank);
  }

  Region x_region = bb;
  if (Lp > 0) x_region = Region::baseline_insert;  // prompt rows stripped

  if (const auto* c = std::get_if<LosaConfig>(&m)) {
    const u64 r = c->rank;
    bool yg = false;
    for (const auto& layer : side_plan(*c, arch)) {
      if (c->variant == SideVariant::transformer) {
        g.mm(Region::side, n * d * r, yg, true);
        g.keep(Region::side, n * d);
        block(g, Region::side, Region::side, n, r, side_heads(r), 4 * r, BlockTrain::all(), true, 0);
        g.mm(Region::side, n * r * d, true, true);
        g.keep(Region::side, n * r);
      } else if (layer.axis == Axis::channel) {
        low_rank(g, n, d, r, yg);
      } else if (!arch.is_video()) {
        low_rank(g, d, n, r, yg);
      } else {
        const u64 ns = arch.spatial_tokens(), nt = arch.temporal_tokens();
        low_rank(g, nt * d, ns, r, yg);
        low_rank(g, ns * d, nt, r, yg);
      }
      yg = true;
    }
    xg = xg || yg;
    if (yg) x_region = Region::side;
  } else if (const auto* s = std::get_if<Lst>(&m)) {
    const u64 ds = s->d_side;
    const Region ins = Region::baseline_insert;
    for (u64 i = 0; i <= L; ++i) {
      g.mm(ins, n * d * ds, false, true);
      g.keep(bb, n * d);
      if (i > 0) block(g, ins, ins, n, ds, side_heads(ds), 4 * ds, BlockTrain::all(), true, 0);
    }
    g.mm(ins, n * ds * d, true, true);
    g.keep(ins, n * ds);
    xg = true;
    x_region = ins;
  }

  pool_and_head(g, arch, t, x_region, xg, classes, lora_rank);
  return g.regions();
}

}  // namespace

std::uint64_t backbone_params(const BackboneConfig& arch) {
  arch.validate();
  const u64 d = arch.width, m = arch.mlp_dim;
  u64 n = arch.patch_dim() * d + d + (arch.cls_token ? d : 0) + arch.tokens() * d;
  n += arch.depth * block_params(d, m);
  n += 2 * d;
  if (arch.pool == Pooling::map) n += map_params(d, m);
  return n;
}

std::uint64_t count_params(const BackboneConfig& arch, const AdaptationMethod& m) {
  validate_method(m, arch);
  return trained_backbone_params(arch, plan(arch, m)) + insert_params(arch, m);
}

CostReport analyze(const BackboneConfig& arch, const AdaptationMethod& m, const CostOptions& opts) {
  CostReport r;
  r.arch = arch.name;
  r.method = method_name(m);
  r.learned_params = count_params(arch, m);
  const u64 head = u64(arch.width) * opts.num_classes + opts.num_classes;
  r.trainable_params = r.learned_params + head;
  r.total_params = backbone_params(arch) + insert_params(arch, m) + head;
  r.per_region = walk(arch, m, opts.num_classes, opts.bytes_per_element);
  for (const auto& s : r.per_region) {
    r.fwd_macs += s.fwd_macs;
    r.bwd_macs += s.bwd_macs;
    r.cached_activation_bytes += s.cached_bytes;
  }
  r.fwd_gmacs = double(r.fwd_macs) / 1e9;
  r.bwd_gmacs = double(r.bwd_macs) / 1e9;
  const u64 eb = opts.bytes_per_element;
  auto& mem = r.memory;
  mem.param_bytes = r.total_params * eb;
  mem.grad_bytes = r.trainable_params * eb;
  mem.optimizer_state_bytes = opts.optimizer.slots() * r.trainable_params * eb;
  mem.cached_activation_bytes = r.cached_activation_bytes;
  mem.total_bytes = mem.param_bytes + mem.grad_bytes + mem.optimizer_state_bytes + mem.cached_activation_bytes;
  r.optimizer_state_bytes = mem.optimizer_state_bytes;
  r.total_train_bytes = mem.total_bytes;
  return r;
}

double count_forward_flops(const BackboneConfig& arch, const AdaptationMethod& m, std::size_t num_classes) {
  return analyze(arch, m, {num_classes, {}, 4}).fwd_gmacs;
}

double count_backward_flops(const BackboneConfig& arch, const AdaptationMethod& m, std::size_t num_classes) {
  return analyze(arch, m, {num_classes, {}, 4}).bwd_gmacs;
}

MemoryBreakdown estimate_train_memory(const BackboneConfig& arch, const AdaptationMethod& m, const OptimizerSpec& opt,
                                      std::size_t num_classes) {
  return analyze(arch, m, {num_classes, opt, 4}).memory;
}

std::vector<ParetoPoint> pareto_frontier(const std::vector<ParetoPoint>& points) {
  if (points.empty()) throw ConfigError("pareto_frontier needs at least one point");
  for (const auto& p : points) {
    if (std::isnan(p.cost) || std::isnan(p.accuracy)) throw ConfigError("pareto point is NaN");
  }
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].cost != points[b].cost) return points[a].cost < points[b].cost;
    return points[a].accuracy > points[b].accuracy;
  });
  std::vector<bool> keep(points.size(), false);
  bool have_best = false;
  double best = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    const double cost = points[order[i]].cost;
    const double top = points[order[i]].accuracy;
    while (j < order.size() && points[order[j]].cost == cost) {
      const auto& p = points[order[j]];
      if (p.accuracy == top && (!have_best || top > best)) keep[order[j]] = true;
      ++j;
    }
    if (!have_best || top > best) best = top;
    have_best = true;
    i = j;
  }
  std::vector<ParetoPoint> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (keep[i]) out.push_back(points[i]);
  }
  return out;
}

}  // namespace losa
