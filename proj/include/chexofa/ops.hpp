#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "chexofa/tape.hpp"

namespace cxo {

namespace detail {

inline constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC = 0.044715;

inline std::string dims(Eigen::Index r, Eigen::Index c) {
  return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

template <typename Scalar>
void require_same_tape(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b, const char* op) {
  if (&a.tape() != &b.tape()) throw ContractError(std::string(op) + ": operands live on different tapes");
}

}  // namespace detail

template <typename Scalar>
BasicVar<Scalar> matmul(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::require_same_tape(a, b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + detail::dims(a.rows(), a.cols()) + " x " +
                     detail::dims(b.rows(), b.cols()));
  }
  MatrixX<Scalar> out(a.rows(), b.cols());
  out.noalias() = a.value() * b.value();
  auto& tape = a.tape();
  return tape.record("matmul", std::move(out), {a, b}, [&tape, ia = a.id(), ib = b.id()] {
    return [&tape, ia, ib](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      if (tape.needs_grad(ia)) grads.accumulate(ia, g * tape.value(ib).transpose());
      if (tape.needs_grad(ib)) grads.accumulate(ib, tape.value(ia).transpose() * g);
    };
  });
}

/// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
template <typename Scalar>
BasicVar<Scalar> add(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::require_same_tape(a, b, "add");
  auto& tape = a.tape();
  if (a.rows() == b.rows() && a.cols() == b.cols()) {
    return tape.record("add", a.value() + b.value(), {a, b}, [ia = a.id(), ib = b.id()] {
      return [ia, ib](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
        grads.accumulate(ia, g);
        grads.accumulate(ib, g);
      };
    });
  }
  if (b.rows() == 1 && a.cols() == b.cols()) {
    MatrixX<Scalar> out = a.value().rowwise() + b.value().row(0);
    return tape.record("add", std::move(out), {a, b}, [ia = a.id(), ib = b.id()] {
      return [ia, ib](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
        grads.accumulate(ia, g);
        grads.accumulate(ib, g.colwise().sum());
      };
    });
  }
  throw ShapeError("add: incompatible shapes " + detail::dims(a.rows(), a.cols()) + " and " +
                   detail::dims(b.rows(), b.cols()));
}

/// Elementwise (Hadamard) product.
template <typename Scalar>
BasicVar<Scalar> mul(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::require_same_tape(a, b, "mul");
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("mul: shape mismatch " + detail::dims(a.rows(), a.cols()) + " vs " +
                     detail::dims(b.rows(), b.cols()));
  }
  auto& tape = a.tape();
  MatrixX<Scalar> out = a.value().cwiseProduct(b.value());
  return tape.record("mul", std::move(out), {a, b}, [&tape, ia = a.id(), ib = b.id()] {
    return [&tape, ia, ib](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      if (tape.needs_grad(ia)) grads.accumulate(ia, g.cwiseProduct(tape.value(ib)));
      if (tape.needs_grad(ib)) grads.accumulate(ib, g.cwiseProduct(tape.value(ia)));
    };
  });
}

template <typename Scalar>
BasicVar<Scalar> scale(const BasicVar<Scalar>& a, Scalar s) {
  return a.tape().record("scale", a.value() * s, {a}, [ia = a.id(), s] {
    return [ia, s](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) { grads.accumulate(ia, g * s); };
  });
}

template <typename Scalar>
BasicVar<Scalar> sum(const BasicVar<Scalar>& a) {
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record("sum", std::move(out), {a}, [ia = a.id(), r = a.rows(), c = a.cols()] {
    return [ia, r, c](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      grads.accumulate(ia, MatrixX<Scalar>::Constant(r, c, g(0, 0)));
    };
  });
}

template <typename Scalar>
BasicVar<Scalar> transpose(const BasicVar<Scalar>& a) {
  MatrixX<Scalar> out = a.value().transpose();
  return a.tape().record("transpose", std::move(out), {a}, [ia = a.id()] {
    return [ia](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) { grads.accumulate(ia, g.transpose()); };
  });
}

/// Softmax along `axis` (0 = down columns, 1 = along rows), max-subtracted.
template <typename Scalar>
BasicVar<Scalar> softmax(const BasicVar<Scalar>& x, int axis = 1) {
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1, got " + std::to_string(axis));
  const auto& v = x.value();
  MatrixX<Scalar> y(v.rows(), v.cols());
  if (axis == 1) {
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      auto e = (v.row(r).array() - v.row(r).maxCoeff()).exp();
      y.row(r) = e / e.sum();
    }
  } else {
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      auto e = (v.col(c).array() - v.col(c).maxCoeff()).exp();
      y.col(c) = e / e.sum();
    }
  }
  auto& tape = x.tape();
  auto out = tape.record("softmax", std::move(y), {x}, [&tape, ix = x.id(), axis]() -> typename BasicTape<Scalar>::BackwardFn {
    // Invoked right after the output node is appended.
    const NodeId iy = tape.size() - 1;
    return [&tape, ix, iy, axis](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      const auto& yv = tape.value(iy);
      if (axis == 1) {
        auto dot = g.cwiseProduct(yv).rowwise().sum();
        grads.accumulate(ix, yv.cwiseProduct(g - dot.replicate(1, g.cols())));
      } else {
        auto dot = g.cwiseProduct(yv).colwise().sum();
        grads.accumulate(ix, yv.cwiseProduct(g - dot.replicate(g.rows(), 1)));
      }
    };
  });
  return out;
}

/// Mean token cross-entropy of `logits` (one row per position) against
/// `targets`. Positions whose target equals `pad_id` contribute nothing and
/// are excluded from the mean.
template <typename Scalar>
BasicVar<Scalar> cross_entropy(const BasicVar<Scalar>& logits, std::span<const int> targets, int pad_id) {
  const auto& v = logits.value();
  if (static_cast<std::size_t>(v.rows()) != targets.size()) {
    throw ShapeError("cross_entropy: " + std::to_string(v.rows()) + " logit rows vs " +
                     std::to_string(targets.size()) + " targets");
  }
  const Eigen::Index vocab = v.cols();
  auto probs = std::make_shared<MatrixX<Scalar>>(v.rows(), v.cols());
  Scalar total = 0;
  std::size_t count = 0;
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    const Scalar m = v.row(r).maxCoeff();
    auto e = (v.row(r).array() - m).exp();
    const Scalar z = e.sum();
    probs->row(r) = e / z;
    if (t == pad_id) continue;
    if (t < 0 || t >= vocab) {
      throw IndexError("cross_entropy: target id " + std::to_string(t) + " outside [0, " + std::to_string(vocab) + ")");
    }
    total += -(v(r, t) - m - std::log(z));
    ++count;
  }
  MatrixX<Scalar> out(1, 1);
  out(0, 0) = count ? total / static_cast<Scalar>(count) : Scalar(0);
  std::vector<int> tgt(targets.begin(), targets.end());
  return logits.tape().record("cross_entropy", std::move(out), {logits},
                              [il = logits.id(), probs, tgt = std::move(tgt), pad_id, count] {
    return [il, probs, tgt, pad_id, count](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      MatrixX<Scalar> d = *probs;
      const Scalar w = count ? g(0, 0) / static_cast<Scalar>(count) : Scalar(0);
      for (Eigen::Index r = 0; r < d.rows(); ++r) {
        const int t = tgt[static_cast<std::size_t>(r)];
        if (t == pad_id) {
          d.row(r).setZero();
        } else {
          d(r, t) -= 1;
          d.row(r) *= w;
        }
      }
      grads.accumulate(il, d);
    };
  });
}

inline constexpr double kLayerNormEps = 1e-10;

/// Row-wise layer normalization with learned gain and bias (both 1 x n).
template <typename Scalar>
BasicVar<Scalar> layer_norm(const BasicVar<Scalar>& x, const BasicVar<Scalar>& gain, const BasicVar<Scalar>& bias) {
  const auto& v = x.value();
  const Eigen::Index n = v.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw ShapeError("layer_norm: gain/bias must be [1x" + std::to_string(n) + "]");
  }
  auto xhat = std::make_shared<MatrixX<Scalar>>(v.rows(), n);
  auto inv_std = std::make_shared<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    const Scalar mu = v.row(r).mean();
    auto centered = v.row(r).array() - mu;
    const Scalar var = centered.square().mean();
    const Scalar is = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
    (*inv_std)(r) = is;
    xhat->row(r) = centered * is;
  }
  MatrixX<Scalar> y = (xhat->array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  auto& tape = x.tape();
  return tape.record("layer_norm", std::move(y), {x, gain, bias},
                     [&tape, ix = x.id(), ig = gain.id(), ib = bias.id(), xhat, inv_std] {
    return [&tape, ix, ig, ib, xhat, inv_std](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      if (tape.needs_grad(ig)) grads.accumulate(ig, g.cwiseProduct(*xhat).colwise().sum());
      if (tape.needs_grad(ib)) grads.accumulate(ib, g.colwise().sum());
      if (!tape.needs_grad(ix)) return;
      MatrixX<Scalar> dxhat = g.array().rowwise() * tape.value(ig).row(0).array();
      const Scalar n = static_cast<Scalar>(dxhat.cols());
      MatrixX<Scalar> dx(dxhat.rows(), dxhat.cols());
      for (Eigen::Index r = 0; r < dx.rows(); ++r) {
        const Scalar m1 = dxhat.row(r).sum() / n;
        const Scalar m2 = dxhat.row(r).dot(xhat->row(r)) / n;
        dx.row(r) = (*inv_std)(r) * (dxhat.row(r).array() - m1 - xhat->row(r).array() * m2);
      }
      grads.accumulate(ix, dx);
    };
  });
}

namespace detail {

// tanh(z) = 1 - 2 / (exp(2z) + 1); Eigen vectorizes exp for doubles, not tanh.
template <typename Derived>
auto fast_tanh(const Eigen::ArrayBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  return Scalar(1) - Scalar(2) / ((Scalar(2) * z.cwiseMin(Scalar(40)).cwiseMax(Scalar(-40))).exp() + Scalar(1));
}

}  // namespace detail

/// GELU, tanh approximation.
template <typename Scalar>
BasicVar<Scalar> gelu(const BasicVar<Scalar>& x) {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Scalar k = Scalar(detail::kGeluK);
  const Scalar c = Scalar(detail::kGeluC);
  const auto v = x.value().array();
  auto t = std::make_shared<Array>(detail::fast_tanh(k * (v + c * v.cube())));
  MatrixX<Scalar> y = (Scalar(0.5) * v * (Scalar(1) + *t)).matrix();
  auto& tape = x.tape();
  return tape.record("gelu", std::move(y), {x}, [&tape, ix = x.id(), t, k, c] {
    return [&tape, ix, t, k, c](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      const auto a = tape.value(ix).array();
      const auto d = Scalar(0.5) * (Scalar(1) + *t) + Scalar(0.5) * a * (Scalar(1) - t->square()) * k * (Scalar(1) + Scalar(3) * c * a.square());
      grads.accumulate(ix, (g.array() * d).matrix());
    };
  });
}

/// Rows of `table` selected by `ids`.
template <typename Scalar>
BasicVar<Scalar> embedding_lookup(const BasicVar<Scalar>& table, std::span<const int> ids) {
  const auto& t = table.value();
  MatrixX<Scalar> out(static_cast<Eigen::Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) {
      throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) + " outside [0, " + std::to_string(t.rows()) + ")");
    }
    out.row(static_cast<Eigen::Index>(i)) = t.row(ids[i]);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  auto& tape = table.tape();
  return tape.record("embedding_lookup", std::move(out), {table}, [&tape, it = table.id(), idv = std::move(idv)] {
    return [&tape, it, idv](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      auto& dst = grads.raw(it);
      if (dst.size() == 0) dst = MatrixX<Scalar>::Zero(tape.value(it).rows(), tape.value(it).cols());
      for (std::size_t i = 0; i < idv.size(); ++i) dst.row(idv[i]) += g.row(static_cast<Eigen::Index>(i));
    };
  });
}

/// Row-wise concatenation.
template <typename Scalar>
BasicVar<Scalar> concat(const std::vector<BasicVar<Scalar>>& parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat: column counts differ (" + std::to_string(cols) + " vs " + std::to_string(p.cols()) + ")");
    rows += p.rows();
  }
  MatrixX<Scalar> out(rows, cols);
  std::vector<std::pair<NodeId, Eigen::Index>> spans;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id(), p.rows());
    r += p.rows();
  }
  auto& tape = parts.front().tape();
  return tape.record_n("concat", std::move(out), parts, [spans = std::move(spans)] {
    return [spans](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      Eigen::Index off = 0;
      for (const auto& [id, n] : spans) {
        grads.accumulate(id, g.middleRows(off, n));
        off += n;
      }
    };
  });
}

/// Rows [begin, begin + count).
template <typename Scalar>
BasicVar<Scalar> slice(const BasicVar<Scalar>& x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 1 || begin + count > x.rows()) {
    throw IndexError("slice: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) + ") outside " +
                     detail::dims(x.rows(), x.cols()));
  }
  auto& tape = x.tape();
  MatrixX<Scalar> out = x.value().middleRows(begin, count);
  return tape.record("slice", std::move(out), {x}, [&tape, ix = x.id(), begin, count] {
    return [&tape, ix, begin, count](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      auto& dst = grads.raw(ix);
      if (dst.size() == 0) dst = MatrixX<Scalar>::Zero(tape.value(ix).rows(), tape.value(ix).cols());
      dst.middleRows(begin, count) += g;
    };
  });
}

/// Flat gather: output element i is `x.flat[index[i]]`, or 0 where the index
/// is negative. Used for im2col and patch flattening.
template <typename Scalar>
BasicVar<Scalar> gather(const BasicVar<Scalar>& x, std::shared_ptr<const std::vector<std::int64_t>> index,
                        Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(index->size()) != rows * cols) {
    throw ShapeError("gather: index table has " + std::to_string(index->size()) + " entries for " + detail::dims(rows, cols));
  }
  const Scalar* src = x.value().data();
  const auto n = static_cast<std::int64_t>(x.value().size());
  MatrixX<Scalar> out(rows, cols);
  Scalar* dst = out.data();
  for (std::size_t i = 0; i < index->size(); ++i) {
    const auto j = (*index)[i];
    if (j >= n) throw IndexError("gather: source index " + std::to_string(j) + " out of range");
    dst[i] = j < 0 ? Scalar(0) : src[j];
  }
  auto& tape = x.tape();
  return tape.record("gather", std::move(out), {x}, [&tape, ix = x.id(), index] {
    return [&tape, ix, index](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      auto& d = grads.raw(ix);
      if (d.size() == 0) d = MatrixX<Scalar>::Zero(tape.value(ix).rows(), tape.value(ix).cols());
      Scalar* dp = d.data();
      const Scalar* gp = g.data();
      for (std::size_t i = 0; i < index->size(); ++i) {
        const auto j = (*index)[i];
        if (j >= 0) dp[j] += gp[i];
      }
    };
  });
}

/// Inverted dropout with drop probability `p`.
template <typename Scalar, typename Rng>
BasicVar<Scalar> dropout(const BasicVar<Scalar>& x, Scalar p, Rng& rng) {
  if (p <= 0) return x;
  if (p >= 1) throw ContractError("dropout: probability must be < 1");
  // One 64-bit draw per element against a fixed threshold; 2^-64 resolution.
  const auto threshold = static_cast<std::uint64_t>(static_cast<long double>(p) * 18446744073709551616.0L);
  auto mask = std::make_shared<MatrixX<Scalar>>(x.rows(), x.cols());
  const Scalar s = Scalar(1) / (Scalar(1) - p);
  for (Eigen::Index i = 0; i < mask->size(); ++i) mask->data()[i] = static_cast<std::uint64_t>(rng()) >= threshold ? s : Scalar(0);
  MatrixX<Scalar> out = x.value().cwiseProduct(*mask);
  return x.tape().record("dropout", std::move(out), {x}, [ix = x.id(), mask] {
    return [ix, mask](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) { grads.accumulate(ix, g.cwiseProduct(*mask)); };
  });
}

/// One attention block of a packed batch: queries rows [q_begin, q_begin+q_len)
/// attend to key rows [k_begin, k_begin+k_len). Key ranges may be shared
/// between segments (beam hypotheses over one encoder memory).
struct AttentionSegment {
  Eigen::Index q_begin = 0;
  Eigen::Index q_len = 0;
  Eigen::Index k_begin = 0;
  Eigen::Index k_len = 0;
};

struct AttentionLayout {
  std::vector<AttentionSegment> segments;
  std::vector<unsigned char> key_valid;  // empty = every key row valid
  bool causal = false;                   // query i sees keys <= i within its segment
};

/// Multi-head scaled dot-product attention over a packed batch. Heads are
/// contiguous column blocks of width cols / heads.
template <typename Scalar>
BasicVar<Scalar> attention(const BasicVar<Scalar>& q, const BasicVar<Scalar>& k, const BasicVar<Scalar>& v, int heads,
                           std::shared_ptr<const AttentionLayout> layout) {
  const Eigen::Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw ShapeError("attention: q " + detail::dims(q.rows(), q.cols()) + ", k " + detail::dims(k.rows(), k.cols()) +
                     ", v " + detail::dims(v.rows(), v.cols()));
  }
  if (heads < 1 || d % heads != 0) throw ShapeError("attention: width " + std::to_string(d) + " not divisible by heads");
  if (!layout->key_valid.empty() && static_cast<Eigen::Index>(layout->key_valid.size()) != k.rows()) {
    throw ShapeError("attention: key mask length differs from key rows");
  }
  const Eigen::Index dh = d / heads;
  const Scalar sc = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  MatrixX<Scalar> out = MatrixX<Scalar>::Zero(q.rows(), d);
  auto probs = std::make_shared<std::vector<MatrixX<Scalar>>>();
  probs->reserve(layout->segments.size() * static_cast<std::size_t>(heads));
  for (const auto& seg : layout->segments) {
    if (seg.q_begin + seg.q_len > q.rows() || seg.k_begin + seg.k_len > k.rows()) {
      throw IndexError("attention: segment outside packed batch");
    }
    if (layout->causal && seg.q_len > seg.k_len) throw ShapeError("attention: causal segment with q_len > k_len");
    for (int h = 0; h < heads; ++h) {
      MatrixX<Scalar> s(seg.q_len, seg.k_len);
      s.noalias() = Q.block(seg.q_begin, h * dh, seg.q_len, dh) * K.block(seg.k_begin, h * dh, seg.k_len, dh).transpose();
      s *= sc;
      for (Eigen::Index i = 0; i < seg.q_len; ++i) {
        Scalar m = -std::numeric_limits<Scalar>::infinity();
        for (Eigen::Index j = 0; j < seg.k_len; ++j) {
          const bool masked = (layout->causal && j > i) || (!layout->key_valid.empty() && !layout->key_valid[seg.k_begin + j]);
          if (masked) {
            s(i, j) = -std::numeric_limits<Scalar>::infinity();
          } else {
            m = std::max(m, s(i, j));
          }
        }
        if (m == -std::numeric_limits<Scalar>::infinity()) {
          s.row(i).setZero();  // fully masked row attends to nothing
          continue;
        }
        auto e = (s.row(i).array() - m).exp();
        s.row(i) = e / e.sum();
      }
      out.block(seg.q_begin, h * dh, seg.q_len, dh).noalias() = s * V.block(seg.k_begin, h * dh, seg.k_len, dh);
      probs->push_back(std::move(s));
    }
  }
  auto& tape = q.tape();
  return tape.record("attention", std::move(out), {q, k, v},
                     [&tape, iq = q.id(), ik = k.id(), iv = v.id(), heads, dh, sc, layout, probs] {
    return [&tape, iq, ik, iv, heads, dh, sc, layout, probs](const MatrixX<Scalar>& g, BasicGradients<Scalar>& grads) {
      const auto& Q = tape.value(iq);
      const auto& K = tape.value(ik);
      const auto& V = tape.value(iv);
      MatrixX<Scalar> dQ = MatrixX<Scalar>::Zero(Q.rows(), Q.cols());
      MatrixX<Scalar> dK = MatrixX<Scalar>::Zero(K.rows(), K.cols());
      MatrixX<Scalar> dV = MatrixX<Scalar>::Zero(V.rows(), V.cols());
      std::size_t p = 0;
      for (const auto& seg : layout->segments) {
        for (int h = 0; h < heads; ++h, ++p) {
          const auto& P = (*probs)[p];
          const auto gO = g.block(seg.q_begin, h * dh, seg.q_len, dh);
          dV.block(seg.k_begin, h * dh, seg.k_len, dh).noalias() += P.transpose() * gO;
          MatrixX<Scalar> dP(seg.q_len, seg.k_len);
          dP.noalias() = gO * V.block(seg.k_begin, h * dh, seg.k_len, dh).transpose();
          auto rowdot = dP.cwiseProduct(P).rowwise().sum();
          MatrixX<Scalar> dS = P.cwiseProduct(dP - rowdot.replicate(1, dP.cols())) * sc;
          dQ.block(seg.q_begin, h * dh, seg.q_len, dh).noalias() += dS * K.block(seg.k_begin, h * dh, seg.k_len, dh);
          dK.block(seg.k_begin, h * dh, seg.k_len, dh).noalias() += dS.transpose() * Q.block(seg.q_begin, h * dh, seg.q_len, dh);
        }
      }
      if (tape.needs_grad(iq)) grads.accumulate(iq, dQ);
      if (tape.needs_grad(ik)) grads.accumulate(ik, dK);
      if (tape.needs_grad(iv)) grads.accumulate(iv, dV);
    };
  });
}

}  // namespace cxo
