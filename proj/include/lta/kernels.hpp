#pragma once

// Numeric kernels: linear maps, softmax, SiLU, RMSNorm, multi-head attention,
// feed-forward blocks and sinusoidal positions, each paired with a manual
// backward pass. Backward functions recompute forward intermediates from their
// inputs instead of threading caches around; at the matrix sizes this project
// runs at, the recompute is cheaper than the bookkeeping.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "lta/types.hpp"

namespace lta {

namespace detail {
template <typename Scalar>
inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename Scalar>
inline Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
inline Scalar softplus(Scalar x) {
  // log(1+e^x), overflow-safe
  if (x > Scalar(30)) return x;
  return std::log1p(std::exp(x));
}

template <typename Scalar>
MatrixX<Scalar> silu(const MatrixX<Scalar>& x) {
  return x.unaryExpr([](Scalar v) { return v * sigmoid(v); });
}

// d/dx [x*sigmoid(x)] = sigmoid(x) * (1 + x*(1-sigmoid(x)))
template <typename Scalar>
MatrixX<Scalar> silu_backward(const MatrixX<Scalar>& g, const MatrixX<Scalar>& x) {
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Index i = 0; i < x.size(); ++i) {
    const Scalar s = sigmoid(x(i));
    out(i) = g(i) * s * (Scalar(1) + x(i) * (Scalar(1) - s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear

template <typename Scalar>
MatrixX<Scalar> linear(const MatrixX<Scalar>& x, const Param<Scalar>& w) {
  detail::require<Scalar>(x.cols() == w.rows(), "linear: input width " +
                                                    std::to_string(x.cols()) +
                                                    " != weight rows " + std::to_string(w.rows()));
  return x * w.value;
}

template <typename Scalar>
MatrixX<Scalar> linear(const MatrixX<Scalar>& x, const Param<Scalar>& w, const Param<Scalar>& b) {
  detail::require<Scalar>(b.rows() == 1 && b.cols() == w.cols(), "linear: bias shape mismatch");
  MatrixX<Scalar> out = linear(x, w);
  out.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(b.value.data(),
                                                                              b.value.cols());
  return out;
}

template <typename Scalar>
MatrixX<Scalar> linear_backward(const MatrixX<Scalar>& g, const MatrixX<Scalar>& x,
                                Param<Scalar>& w, Param<Scalar>* b = nullptr) {
  w.accumulate(x.transpose() * g);
  if (b) b->accumulate(g.colwise().sum());
  return g * w.value.transpose();
}

// ---------------------------------------------------------------------------
// softmax

template <typename Scalar>
MatrixX<Scalar> softmax_rows(const MatrixX<Scalar>& x) {
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    out.row(i) = (x.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

// Backward through softmax given the forward probabilities p.
template <typename Scalar>
MatrixX<Scalar> softmax_rows_backward(const MatrixX<Scalar>& g, const MatrixX<Scalar>& p) {
  MatrixX<Scalar> out(p.rows(), p.cols());
  for (Index i = 0; i < p.rows(); ++i) {
    const Scalar dot = g.row(i).cwiseProduct(p.row(i)).sum();
    out.row(i) = (p.row(i).array() * (g.row(i).array() - dot)).matrix();
  }
  return out;
}

// Row-wise log-softmax, max-shifted. In float (run mode) the log-probability
// is clamped at log(1e-12); double (test mode) stays exact.
template <typename Scalar>
MatrixX<Scalar> log_softmax_rows(const MatrixX<Scalar>& x) {
  MatrixX<Scalar> out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Scalar m = x.row(i).maxCoeff();
    const Scalar lse = std::log((x.row(i).array() - m).exp().sum());
    out.row(i) = x.row(i).array() - m - lse;
  }
  if constexpr (std::is_same_v<Scalar, float>) {
    const Scalar floor = std::log(Scalar(1e-12f));
    out = out.cwiseMax(floor);
  }
  return out;
}

// ---------------------------------------------------------------------------
// RMSNorm

template <typename Scalar>
struct RmsNormParams {
  Param<Scalar> scale;  // 1 x D, elementwise
  Scalar eps = Scalar(1e-6);

  RmsNormParams() = default;
  RmsNormParams(Index dim, Scalar eps_, bool trainable = true)
      : scale(Param<Scalar>::constant(1, dim, Scalar(1), trainable)), eps(eps_) {}
  Index dim() const { return scale.cols(); }
};

// out = r / sqrt(mean(r^2) + eps) .* scale, mean over the feature axis per row
template <typename Scalar>
MatrixX<Scalar> rms_norm(const MatrixX<Scalar>& r, const RmsNormParams<Scalar>& p) {
  detail::require<Scalar>(r.cols() == p.dim(), "rms_norm: width mismatch");
  const Scalar d = Scalar(r.cols());
  MatrixX<Scalar> out(r.rows(), r.cols());
  for (Index i = 0; i < r.rows(); ++i) {
    const Scalar m = r.row(i).squaredNorm() / d + p.eps;
    out.row(i) = r.row(i) * (Scalar(1) / std::sqrt(m));
  }
  out.array().rowwise() *= Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>>(
      p.scale.value.data(), p.scale.value.cols());
  return out;
}

template <typename Scalar>
MatrixX<Scalar> rms_norm_backward(const MatrixX<Scalar>& g, const MatrixX<Scalar>& r,
                                  RmsNormParams<Scalar>& p) {
  const Scalar d = Scalar(r.cols());
  MatrixX<Scalar> gr(r.rows(), r.cols());
  MatrixX<Scalar> gscale = MatrixX<Scalar>::Zero(1, r.cols());
  const auto w = Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>>(p.scale.value.data(),
                                                                           p.scale.value.cols());
  for (Index i = 0; i < r.rows(); ++i) {
    const Scalar m = r.row(i).squaredNorm() / d + p.eps;
    const Scalar s = Scalar(1) / std::sqrt(m);
    // y = r*s (pre-scale); out = y .* w
    gscale.row(0).array() += g.row(i).array() * r.row(i).array() * s;
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> gy = g.row(i).array() * w;
    const Scalar dot = (gy * r.row(i).array()).sum();
    gr.row(i) = (gy * s - r.row(i).array() * (dot * s * s * s / d)).matrix();
  }
  p.scale.accumulate(gscale);
  return gr;
}

// ---------------------------------------------------------------------------
// positions

// Fixed sinusoidal table: row t, even column 2k = sin(t / 10000^(2k/D)),
// odd column 2k+1 = cos of the same angle.
template <typename Scalar>
MatrixX<Scalar> position_encoding(Index n, Index dim) {
  detail::require<Scalar>(n >= 1 && dim >= 1, "position_encoding: n and D must be >= 1");
  MatrixX<Scalar> p(n, dim);
  for (Index t = 0; t < n; ++t) {
    for (Index j = 0; j < dim; ++j) {
      const double k = double(j / 2);
      const double angle = double(t) / std::pow(10000.0, 2.0 * k / double(dim));
      p(t, j) = Scalar(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// multi-head attention

template <typename Scalar>
struct AttentionHead {
  Param<Scalar> wq, wk, wv;  // D x (D/h)
};

template <typename Scalar>
struct AttentionWeights {
  std::vector<AttentionHead<Scalar>> heads;
  Param<Scalar> wo;  // D x D
  Index dim = 0;

  AttentionWeights() = default;
  AttentionWeights(Index dim_, Index num_heads, bool trainable = true) : dim(dim_) {
    detail::require<Scalar>(num_heads >= 1 && dim_ % num_heads == 0,
                            "attention: D must be divisible by head count");
    const Index dh = dim_ / num_heads;
    heads.resize(size_t(num_heads));
    for (auto& h : heads) {
      h.wq = Param<Scalar>(dim_, dh, trainable);
      h.wk = Param<Scalar>(dim_, dh, trainable);
      h.wv = Param<Scalar>(dim_, dh, trainable);
    }
    wo = Param<Scalar>(dim_, dim_, trainable);
  }

  Index num_heads() const { return Index(heads.size()); }
  Index head_dim() const { return dim / num_heads(); }

  void init_random(Rng& rng, Scalar stddev) {
    for (auto& h : heads) {
      h.wq.value = random_normal<Scalar>(h.wq.rows(), h.wq.cols(), stddev, rng);
      h.wk.value = random_normal<Scalar>(h.wk.rows(), h.wk.cols(), stddev, rng);
      h.wv.value = random_normal<Scalar>(h.wv.rows(), h.wv.cols(), stddev, rng);
    }
    wo.value = random_normal<Scalar>(wo.rows(), wo.cols(), stddev, rng);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    for (size_t i = 0; i < heads.size(); ++i) {
      const std::string hp = prefix + ".h" + std::to_string(i);
      fn(hp + ".wq", heads[i].wq);
      fn(hp + ".wk", heads[i].wk);
      fn(hp + ".wv", heads[i].wv);
    }
    fn(prefix + ".wo", wo);
  }
};

namespace detail {
template <typename Scalar>
inline constexpr Scalar mask_value() {
  return Scalar(-1e30);
}
}  // namespace detail

// Scaled dot-product attention over all heads: rows of X attend to rows of Y.
// With causal=true (requires X and Y the same length), row i attends to
// rows 0..i only.
template <typename Scalar>
MatrixX<Scalar> mha(const MatrixX<Scalar>& x, const MatrixX<Scalar>& y,
                    const AttentionWeights<Scalar>& w, bool causal = false) {
  detail::require<Scalar>(x.cols() == w.dim && y.cols() == w.dim, "mha: width mismatch");
  detail::require<Scalar>(!causal || x.rows() == y.rows(), "mha: causal needs square attention");
  const Index dh = w.head_dim();
  const Scalar inv_scale = Scalar(1) / std::sqrt(Scalar(dh));
  MatrixX<Scalar> concat(x.rows(), w.dim);
  for (Index h = 0; h < w.num_heads(); ++h) {
    const auto& hw = w.heads[size_t(h)];
    const MatrixX<Scalar> q = x * hw.wq.value;
    const MatrixX<Scalar> k = y * hw.wk.value;
    const MatrixX<Scalar> v = y * hw.wv.value;
    MatrixX<Scalar> scores = q * k.transpose() * inv_scale;
    if (causal) {
      for (Index i = 0; i < scores.rows(); ++i)
        for (Index j = i + 1; j < scores.cols(); ++j) scores(i, j) = detail::mask_value<Scalar>();
    }
    const MatrixX<Scalar> probs = softmax_rows(scores);
    concat.middleCols(h * dh, dh) = probs * v;
  }
  return concat * w.wo.value;
}

// Accumulates into w; adds input gradients into gx/gy (callers pass zeroed or
// partially filled buffers; self-attention sums both contributions itself).
template <typename Scalar>
void mha_backward(const MatrixX<Scalar>& g, const MatrixX<Scalar>& x, const MatrixX<Scalar>& y,
                  AttentionWeights<Scalar>& w, MatrixX<Scalar>& gx, MatrixX<Scalar>& gy,
                  bool causal = false) {
  const Index dh = w.head_dim();
  const Scalar inv_scale = Scalar(1) / std::sqrt(Scalar(dh));

  // recompute the concat of head outputs for the wo gradient
  MatrixX<Scalar> concat(x.rows(), w.dim);
  std::vector<MatrixX<Scalar>> probs_h(size_t(w.num_heads()));
  std::vector<MatrixX<Scalar>> q_h(size_t(w.num_heads())), k_h(size_t(w.num_heads())),
      v_h(size_t(w.num_heads()));
  for (Index h = 0; h < w.num_heads(); ++h) {
    const auto& hw = w.heads[size_t(h)];
    q_h[size_t(h)] = x * hw.wq.value;
    k_h[size_t(h)] = y * hw.wk.value;
    v_h[size_t(h)] = y * hw.wv.value;
    MatrixX<Scalar> scores = q_h[size_t(h)] * k_h[size_t(h)].transpose() * inv_scale;
    if (causal) {
      for (Index i = 0; i < scores.rows(); ++i)
        for (Index j = i + 1; j < scores.cols(); ++j) scores(i, j) = detail::mask_value<Scalar>();
    }
    probs_h[size_t(h)] = softmax_rows(scores);
    concat.middleCols(h * dh, dh) = probs_h[size_t(h)] * v_h[size_t(h)];
  }

  w.wo.accumulate(concat.transpose() * g);
  const MatrixX<Scalar> gconcat = g * w.wo.value.transpose();

  for (Index h = 0; h < w.num_heads(); ++h) {
    auto& hw = w.heads[size_t(h)];
    const auto& probs = probs_h[size_t(h)];
    const MatrixX<Scalar> ghead = gconcat.middleCols(h * dh, dh);
    const MatrixX<Scalar> gprobs = ghead * v_h[size_t(h)].transpose();
    const MatrixX<Scalar> gv = probs.transpose() * ghead;
    const MatrixX<Scalar> gscores = softmax_rows_backward(gprobs, probs) * inv_scale;
    const MatrixX<Scalar> gq = gscores * k_h[size_t(h)];
    const MatrixX<Scalar> gk = gscores.transpose() * q_h[size_t(h)];

    hw.wq.accumulate(x.transpose() * gq);
    hw.wk.accumulate(y.transpose() * gk);
    hw.wv.accumulate(y.transpose() * gv);
    gx += gq * hw.wq.value.transpose();
    gy += gk * hw.wk.value.transpose();
    gy += gv * hw.wv.value.transpose();
  }
}

// ---------------------------------------------------------------------------
// feed-forward

template <typename Scalar>
struct FfnWeights {
  Param<Scalar> w1, b1, w2, b2;

  FfnWeights() = default;
  FfnWeights(Index dim, Index hidden, bool trainable = true)
      : w1(dim, hidden, trainable),
        b1(1, hidden, trainable),
        w2(hidden, dim, trainable),
        b2(1, dim, trainable) {}

  void init_random(Rng& rng, Scalar stddev) {
    w1.value = random_normal<Scalar>(w1.rows(), w1.cols(), stddev, rng);
    w2.value = random_normal<Scalar>(w2.rows(), w2.cols(), stddev, rng);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
    fn(prefix + ".w2", w2);
    fn(prefix + ".b2", b2);
  }
};

// out = (silu(x*W1 + b1)) * W2 + b2; any residual is the caller's business
template <typename Scalar>
MatrixX<Scalar> ffn(const MatrixX<Scalar>& x, const FfnWeights<Scalar>& w) {
  return linear(silu(linear(x, w.w1, w.b1)), w.w2, w.b2);
}

template <typename Scalar>
MatrixX<Scalar> ffn_backward(const MatrixX<Scalar>& g, const MatrixX<Scalar>& x,
                             FfnWeights<Scalar>& w) {
  const MatrixX<Scalar> h = linear(x, w.w1, w.b1);
  const MatrixX<Scalar> a = silu(h);
  const MatrixX<Scalar> ga = linear_backward(g, a, w.w2, &w.b2);
  const MatrixX<Scalar> gh = silu_backward(ga, h);
  return linear_backward(gh, x, w.w1, &w.b1);
}

}  // namespace lta
