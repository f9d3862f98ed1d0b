#pragma once

// Differentiable primitives recorded on a Tape. Only matmul/bmm carry MAC cost; every other op is free
// under the MAC-only ledger.
//
// Retention (what an op keeps alive for its backward rule):
//   matmul/bmm   other operand, per input that needs a gradient
//   gelu         its input
//   layernorm    its input (for the input or gamma gradient)
//   softmax      its own output
//   scale_by     the other operand
//   cross_ent.   its logits
//   add, add_bias, scale, permute, reshape, concat/slice/mean/sum keep nothing.

#include <cmath>
#include <numbers>

#include "losa/autodiff.hpp"

namespace losa {

namespace detail {

template <typename Scalar>
void require_same_tape(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.tape != b.tape) throw TapeError("operands recorded on different tapes");
}

template <typename Scalar>
void accumulate(Tensor<Scalar>& dst, const Tensor<Scalar>& src) {
  auto& d = dst.data();
  const auto& s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// out[permuted index] = in[index]; out axis k is input axis perm[k].
template <typename Scalar>
Tensor<Scalar> permute_copy(const Tensor<Scalar>& in, const std::vector<std::size_t>& perm) {
  const auto& ishape = in.shape();
  Shape oshape(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) oshape[k] = ishape[perm[k]];
  Tensor<Scalar> out(oshape);
  const auto istride = strides_of(ishape);
  std::vector<std::size_t> src_stride(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) src_stride[k] = istride[perm[k]];
  std::vector<std::size_t> idx(perm.size(), 0);
  const std::size_t total = out.size();
  for (std::size_t o = 0; o < total; ++o) {
    std::size_t src = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) src += idx[k] * src_stride[k];
    out[o] = in[src];
    for (std::size_t k = idx.size(); k-- > 0;) {
      if (++idx[k] < oshape[k]) break;
      idx[k] = 0;
    }
  }
  return out;
}

inline std::vector<std::size_t> inverse_perm(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = k;
  return inv;
}

template <typename Scalar>
Scalar gelu_value(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x / std::numbers::sqrt2_v<Scalar>));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
  return cdf + x * pdf;
}

}  // namespace detail

/// c = a b for a [m x k], b [k x n].
template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul inner dimensions", av.shape(), bv.shape());
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<Scalar> out({m, n});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  const std::uint64_t macs = static_cast<std::uint64_t>(m) * k * n;
  auto pa = a.tape->shared_value(a.id);
  auto pb = b.tape->shared_value(b.id);
  return a.tape->record(
      OpKind::matmul, {a.id, b.id}, std::move(out), macs, {macs, macs}, {{b.id}, {a.id}},
      [pa, pb](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
        if (grads[0]) grads[0]->matrix().noalias() += g.matrix() * pb->matrix().transpose();
        if (grads[1]) grads[1]->matrix().noalias() += pa->matrix().transpose() * g.matrix();
      });
}

/// Batched matmul over the leading axis: [B x m x k] . [B x k x n].
template <typename Scalar>
Var<Scalar> bmm(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1)) {
    throw DimensionError("bmm dimensions", av.shape(), bv.shape());
  }
  const std::size_t B = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  Tensor<Scalar> out({B, m, n});
  for (std::size_t i = 0; i < B; ++i) {
    MMap(out.data().data() + i * m * n, ei(m), ei(n)).noalias() =
        CMap(av.data().data() + i * m * k, ei(m), ei(k)) * CMap(bv.data().data() + i * k * n, ei(k), ei(n));
  }
  const std::uint64_t macs = static_cast<std::uint64_t>(B) * m * k * n;
  auto pa = a.tape->shared_value(a.id);
  auto pb = b.tape->shared_value(b.id);
  return a.tape->record(
      OpKind::bmm, {a.id, b.id}, std::move(out), macs, {macs, macs}, {{b.id}, {a.id}},
      [pa, pb, B, m, k, n, ei](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
        for (std::size_t i = 0; i < B; ++i) {
          CMap gi(g.data().data() + i * m * n, ei(m), ei(n));
          if (grads[0]) {
            MMap(grads[0]->data().data() + i * m * k, ei(m), ei(k)).noalias() +=
                gi * CMap(pb->data().data() + i * k * n, ei(k), ei(n)).transpose();
          }
          if (grads[1]) {
            MMap(grads[1]->data().data() + i * k * n, ei(k), ei(n)).noalias() +=
                CMap(pa->data().data() + i * m * k, ei(m), ei(k)).transpose() * gi;
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.shape() != bv.shape()) throw DimensionError("add shapes", av.shape(), bv.shape());
  Tensor<Scalar> out = av;
  detail::accumulate(out, bv);
  return a.tape->record(OpKind::add, {a.id, b.id}, std::move(out), 0, {0, 0}, {},
                        [](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                          for (auto* slot : grads) {
                            if (slot) detail::accumulate(*slot, g);
                          }
                        });
}

/// x + bias broadcast over every row; bias has x's last extent.
template <typename Scalar>
Var<Scalar> add_bias(Var<Scalar> x, Var<Scalar> bias) {
  detail::require_same_tape(x, bias);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (bv.size() != xv.cols()) throw DimensionError("add_bias width", xv.shape(), bv.shape());
  Tensor<Scalar> out = xv;
  using Row = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
  out.matrix().rowwise() += Eigen::Map<const Row>(bv.data().data(), static_cast<Eigen::Index>(bv.size()));
  return x.tape->record(OpKind::add_bias, {x.id, bias.id}, std::move(out), 0, {0, 0}, {},
                        [](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                          if (grads[0]) detail::accumulate(*grads[0], g);
                          if (grads[1]) {
                            using Row = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
                            Eigen::Map<Row>(grads[1]->data().data(), static_cast<Eigen::Index>(grads[1]->size())) +=
                                g.matrix().colwise().sum();
                          }
                        });
}

/// x * c for a fixed constant c.
template <typename Scalar>
Var<Scalar> scale(Var<Scalar> x, Scalar c) {
  Tensor<Scalar> out = x.value();
  for (auto& v : out.data()) v *= c;
  return x.tape->record(OpKind::scale, {x.id}, std::move(out), 0, {0}, {},
                        [c](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                          if (!grads[0]) return;
                          auto& d = grads[0]->data();
                          for (std::size_t i = 0; i < d.size(); ++i) d[i] += c * g[i];
                        });
}

/// alpha * x for a single-element alpha.
template <typename Scalar>
Var<Scalar> scale_by(Var<Scalar> x, Var<Scalar> alpha) {
  detail::require_same_tape(x, alpha);
  if (alpha.value().size() != 1) throw DimensionError("scale_by needs a scalar", alpha.shape(), Shape{});
  const Scalar s = alpha.value()[0];
  Tensor<Scalar> out = x.value();
  for (auto& v : out.data()) v *= s;
  auto px = x.tape->shared_value(x.id);
  return x.tape->record(OpKind::scale_by, {x.id, alpha.id}, std::move(out), 0, {0, 0}, {{alpha.id}, {x.id}},
                        [px, s](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                          if (grads[0]) {
                            auto& d = grads[0]->data();
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
                          }
                          if (grads[1]) {
                            Scalar acc = 0;
                            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * (*px)[i];
                            (*grads[1])[0] += acc;
                          }
                        });
}

/// Exact (erf) Gaussian error linear unit.
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> x) {
  Tensor<Scalar> out = x.value();
  for (auto& v : out.data()) v = detail::gelu_value(v);
  auto px = x.tape->shared_value(x.id);
  return x.tape->record(OpKind::gelu, {x.id}, std::move(out), 0, {0}, {{x.id}},
                        [px](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                          if (!grads[0]) return;
                          auto& d = grads[0]->data();
                          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * detail::gelu_derivative((*px)[i]);
                        });
}

/// LayerNorm over the last axis with affine gamma, beta.
template <typename Scalar>
Var<Scalar> layernorm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, Scalar eps = Scalar(1e-6)) {
  detail::require_same_tape(x, gamma);
  detail::require_same_tape(x, beta);
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gamma.value().size() != cols || beta.value().size() != cols) {
    throw DimensionError("layernorm affine width", xv.shape(), gamma.shape());
  }
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<Scalar> out(xv.shape());
  std::vector<Scalar> mean(rows), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* row = xv.data().data() + r * cols;
    Scalar mu = 0;
    for (std::size_t c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<Scalar>(cols);
    Scalar var = 0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<Scalar>(cols);
    const Scalar rs = Scalar(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = (row[c] - mu) * rs * gv[c] + bv[c];
  }
  auto px = x.tape->shared_value(x.id);
  auto pg = x.tape->shared_value(gamma.id);
  return x.tape->record(
      OpKind::layernorm, {x.id, gamma.id, beta.id}, std::move(out), 0, {0, 0, 0}, {{x.id}, {x.id}, {}},
      [px, pg, mean = std::move(mean), rstd = std::move(rstd), rows, cols](const Tensor<Scalar>& g,
                                                                           std::vector<Tensor<Scalar>*>& grads) {
        const auto& xv = *px;
        const auto& gv = *pg;
        for (std::size_t r = 0; r < rows; ++r) {
          const Scalar* row = xv.data().data() + r * cols;
          const Scalar* grow = g.data().data() + r * cols;
          if (grads[1] || grads[2]) {
            for (std::size_t c = 0; c < cols; ++c) {
              const Scalar xhat = (row[c] - mean[r]) * rstd[r];
              if (grads[1]) (*grads[1])[c] += grow[c] * xhat;
              if (grads[2]) (*grads[2])[c] += grow[c];
            }
          }
          if (grads[0]) {
            Scalar sum_dy = 0, sum_dy_xhat = 0;
            for (std::size_t c = 0; c < cols; ++c) {
              const Scalar dy = grow[c] * gv[c];
              const Scalar xhat = (row[c] - mean[r]) * rstd[r];
              sum_dy += dy;
              sum_dy_xhat += dy * xhat;
            }
            const Scalar inv_n = Scalar(1) / static_cast<Scalar>(cols);
            Scalar* out = grads[0]->data().data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) {
              const Scalar dy = grow[c] * gv[c];
              const Scalar xhat = (row[c] - mean[r]) * rstd[r];
              out[c] += rstd[r] * (dy - inv_n * sum_dy - xhat * inv_n * sum_dy_xhat);
            }
          }
        }
      });
}

/// Softmax over the last axis.
template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x) {
  const auto& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor<Scalar> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* in = xv.data().data() + r * cols;
    Scalar* o = out.data().data() + r * cols;
    const Scalar mx = *std::max_element(in, in + cols);
    Scalar z = 0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  auto* tape = x.tape;
  const NodeId self = tape->size();
  return tape->record(OpKind::softmax, {x.id}, std::move(out), 0, {0}, {{Tape<Scalar>::kSelf}},
                      [tape, self, rows, cols](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                        if (!grads[0]) return;
                        const auto& y = tape->value(self);
                        for (std::size_t r = 0; r < rows; ++r) {
                          const Scalar* yr = y.data().data() + r * cols;
                          const Scalar* gr = g.data().data() + r * cols;
                          Scalar dot = 0;
                          for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
                          Scalar* out = grads[0]->data().data() + r * cols;
                          for (std::size_t c = 0; c < cols; ++c) out[c] += yr[c] * (gr[c] - dot);
                        }
                      });
}

/// Axis permutation; output axis k is input axis perm[k].
template <typename Scalar>
Var<Scalar> permute(Var<Scalar> x, std::vector<std::size_t> perm) {
  const auto& xv = x.value();
  if (perm.size() != xv.rank()) throw DimensionError("permute rank", xv.shape(), Shape(perm.begin(), perm.end()));
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) throw DimensionError("permute is not a permutation", xv.shape(), Shape(perm.begin(), perm.end()));
    seen[p] = true;
  }
  Tensor<Scalar> out = detail::permute_copy(xv, perm);
  const auto inv = detail::inverse_perm(perm);
  return x.tape->record(OpKind::permute, {x.id}, std::move(out), 0, {0}, {},
                        [inv](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                          if (grads[0]) detail::accumulate(*grads[0], detail::permute_copy(g, inv));
                        });
}

template <typename Scalar>
Var<Scalar> transpose(Var<Scalar> x) {
  if (x.value().rank() != 2) throw DimensionError("transpose needs rank 2", x.shape(), Shape{});
  return permute(x, {1, 0});
}

template <typename Scalar>
Var<Scalar> reshape(Var<Scalar> x, Shape shape) {
  const auto& xv = x.value();
  if (numel(shape) != xv.size()) throw DimensionError("reshape element count", xv.shape(), shape);
  Tensor<Scalar> out(std::move(shape), xv.data());
  return x.tape->record(OpKind::reshape, {x.id}, std::move(out), 0, {0}, {},
                        [](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                          if (!grads[0]) return;
                          auto& d = grads[0]->data();
                          for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
                        });
}

/// Stack a on top of b along axis 0.
template <typename Scalar>
Var<Scalar> concat_rows(Var<Scalar> a, Var<Scalar> b) {
  detail::require_same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != bv.rank() || av.rank() == 0 ||
      !std::equal(av.shape().begin() + 1, av.shape().end(), bv.shape().begin() + 1)) {
    throw DimensionError("concat_rows trailing dims", av.shape(), bv.shape());
  }
  Shape shape = av.shape();
  shape[0] += bv.dim(0);
  std::vector<Scalar> data;
  data.reserve(av.size() + bv.size());
  data.insert(data.end(), av.data().begin(), av.data().end());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  const std::size_t split = av.size();
  return a.tape->record(OpKind::concat_rows, {a.id, b.id}, Tensor<Scalar>(std::move(shape), std::move(data)), 0,
                        {0, 0}, {}, [split](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                          if (grads[0]) {
                            auto& d = grads[0]->data();
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
                          }
                          if (grads[1]) {
                            auto& d = grads[1]->data();
                            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[split + i];
                          }
                        });
}

/// Rows [begin, begin + count) along axis 0.
template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> x, std::size_t begin, std::size_t count) {
  const auto& xv = x.value();
  if (xv.rank() == 0 || begin + count > xv.dim(0)) {
    throw DimensionError("slice_rows out of range", xv.shape(), Shape{begin, count});
  }
  Shape shape = xv.shape();
  shape[0] = count;
  const std::size_t row = xv.size() / xv.dim(0);
  std::vector<Scalar> data(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * row),
                           xv.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * row));
  const std::size_t offset = begin * row;
  return x.tape->record(OpKind::slice_rows, {x.id}, Tensor<Scalar>(std::move(shape), std::move(data)), 0, {0}, {},
                        [offset](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                          if (!grads[0]) return;
                          auto& d = grads[0]->data();
                          for (std::size_t i = 0; i < g.size(); ++i) d[offset + i] += g[i];
                        });
}

/// Column means of a [m x n] matrix, as [1 x n].
template <typename Scalar>
Var<Scalar> mean_rows(Var<Scalar> x) {
  const auto& xv = x.value();
  if (xv.rank() != 2 || xv.dim(0) == 0) throw DimensionError("mean_rows needs a non-empty matrix", xv.shape(), Shape{});
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor<Scalar> out({1, n});
  out.matrix() = xv.matrix().colwise().mean();
  return x.tape->record(OpKind::mean_rows, {x.id}, std::move(out), 0, {0}, {},
                        [m](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                          if (!grads[0]) return;
                          grads[0]->matrix().rowwise() += g.matrix().row(0) / static_cast<Scalar>(m);
                        });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  Scalar acc = 0;
  for (auto v : x.value().data()) acc += v;
  return x.tape->record(OpKind::sum, {x.id}, Tensor<Scalar>::scalar(acc), 0, {0}, {},
                        [](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                          if (!grads[0]) return;
                          for (auto& v : grads[0]->data()) v += g[0];
                        });
}

/// Softmax cross-entropy of one row of logits against a class index.
template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, std::size_t label) {
  const auto& lv = logits.value();
  const std::size_t classes = lv.size();
  if (label >= classes) throw DimensionError("label out of range", lv.shape(), Shape{label});
  const Scalar mx = *std::max_element(lv.data().begin(), lv.data().end());
  Scalar z = 0;
  for (auto v : lv.data()) z += std::exp(v - mx);
  const Scalar lse = mx + std::log(z);
  auto pl = logits.tape->shared_value(logits.id);
  return logits.tape->record(OpKind::cross_entropy, {logits.id}, Tensor<Scalar>::scalar(lse - lv[label]), 0, {0},
                             {{logits.id}},
                             [pl, lse, label](const Tensor<Scalar>& g, std::vector<Tensor<Scalar>*>& grads) {
                               if (!grads[0]) return;
                               auto& d = grads[0]->data();
                               for (std::size_t i = 0; i < d.size(); ++i) {
                                 const Scalar p = std::exp((*pl)[i] - lse);
                                 d[i] += g[0] * (p - (i == label ? Scalar(1) : Scalar(0)));
                               }
                             });
}

}  // namespace losa
