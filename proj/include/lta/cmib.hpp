#pragma once

// Cross-Modality Interaction Block. Each stream (text, vision, query) gets a
// self-attention term plus one cross-attention term per peer stream, summed;
// the block wraps that with sinusoidal positions, pre/post RMSNorm, residuals
// and a per-stream feed-forward. Nine independent attention parameter sets —
// no tying across the cross terms.

#include <array>
#include <string>
#include <vector>

#include "lta/kernels.hpp"
#include "lta/types.hpp"

namespace lta {

template <typename Scalar>
struct CmiaWeights {
  // indexed [output stream][source stream]; diagonal = self-attention
  std::array<std::array<AttentionWeights<Scalar>, 3>, 3> attn;
  Index dim = 0;

  CmiaWeights() = default;
  CmiaWeights(Index dim_, Index num_heads) : dim(dim_) {
    for (auto& row : attn)
      for (auto& a : row) a = AttentionWeights<Scalar>(dim_, num_heads);
  }

  void init_random(Rng& rng, Scalar stddev) {
    for (auto& row : attn)
      for (auto& a : row) a.init_random(rng, stddev);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    static const char* kStream[3] = {"t", "v", "q"};
    for (int o = 0; o < 3; ++o)
      for (int s = 0; s < 3; ++s)
        attn[size_t(o)][size_t(s)].visit(prefix + "." + kStream[o] + "_from_" + kStream[s], fn);
  }
};

// O_T = MHA(I_T,I_T) + MHA(I_T,I_V) + MHA(I_T,I_Q), and analogously for the
// vision and query streams.
template <typename Scalar>
std::array<MatrixX<Scalar>, 3> cmia_forward(const MatrixX<Scalar>& i_t, const MatrixX<Scalar>& i_v,
                                            const MatrixX<Scalar>& i_q,
                                            const CmiaWeights<Scalar>& w) {
  const std::array<const MatrixX<Scalar>*, 3> in = {&i_t, &i_v, &i_q};
  for (const auto* m : in)
    if (m->cols() != w.dim) throw DimensionError("cmia: stream width != block width");
  std::array<MatrixX<Scalar>, 3> out;
  for (int o = 0; o < 3; ++o) {
    out[size_t(o)] = MatrixX<Scalar>::Zero(in[size_t(o)]->rows(), w.dim);
    for (int s = 0; s < 3; ++s)
      out[size_t(o)] += mha(*in[size_t(o)], *in[size_t(s)], w.attn[size_t(o)][size_t(s)]);
  }
  return out;
}

template <typename Scalar>
std::array<MatrixX<Scalar>, 3> cmia_backward(const std::array<MatrixX<Scalar>, 3>& g,
                                             const MatrixX<Scalar>& i_t,
                                             const MatrixX<Scalar>& i_v,
                                             const MatrixX<Scalar>& i_q, CmiaWeights<Scalar>& w) {
  const std::array<const MatrixX<Scalar>*, 3> in = {&i_t, &i_v, &i_q};
  std::array<MatrixX<Scalar>, 3> gin;
  for (int s = 0; s < 3; ++s)
    gin[size_t(s)] = MatrixX<Scalar>::Zero(in[size_t(s)]->rows(), in[size_t(s)]->cols());
  for (int o = 0; o < 3; ++o)
    for (int s = 0; s < 3; ++s)
      mha_backward(g[size_t(o)], *in[size_t(o)], *in[size_t(s)], w.attn[size_t(o)][size_t(s)],
                   gin[size_t(o)], gin[size_t(s)]);
  return gin;
}

template <typename Scalar>
struct CmibBlockParams {
  CmiaWeights<Scalar> cmia;
  std::array<RmsNormParams<Scalar>, 3> pre_norm;
  std::array<RmsNormParams<Scalar>, 3> post_norm;
  std::array<FfnWeights<Scalar>, 3> ffn;

  CmibBlockParams() = default;
  CmibBlockParams(Index dim, Index num_heads, Index ffn_dim, Scalar eps) : cmia(dim, num_heads) {
    for (int s = 0; s < 3; ++s) {
      pre_norm[size_t(s)] = RmsNormParams<Scalar>(dim, eps);
      post_norm[size_t(s)] = RmsNormParams<Scalar>(dim, eps);
      ffn[size_t(s)] = FfnWeights<Scalar>(dim, ffn_dim);
    }
  }

  void init_random(Rng& rng, Scalar stddev) {
    cmia.init_random(rng, stddev);
    for (auto& f : ffn) f.init_random(rng, stddev);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    static const char* kStream[3] = {"t", "v", "q"};
    cmia.visit(prefix + ".cmia", fn);
    for (int s = 0; s < 3; ++s) {
      fn(prefix + ".pre_norm." + kStream[s] + ".scale", pre_norm[size_t(s)].scale);
      fn(prefix + ".post_norm." + kStream[s] + ".scale", post_norm[size_t(s)].scale);
      ffn[size_t(s)].visit(prefix + ".ffn." + kStream[s], fn);
    }
  }
};

template <typename Scalar>
struct CmibParams {
  std::vector<CmibBlockParams<Scalar>> blocks;
  Index dim = 0;

  CmibParams() = default;
  CmibParams(Index dim_, Index num_heads, Index ffn_dim, Index depth, Scalar eps) : dim(dim_) {
    if (depth < 1) throw InputError("cmib: depth must be >= 1");
    blocks.assign(size_t(depth), CmibBlockParams<Scalar>(dim_, num_heads, ffn_dim, eps));
  }

  void init_random(Rng& rng, Scalar stddev) {
    for (auto& b : blocks) b.init_random(rng, stddev);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].visit(prefix + ".block" + std::to_string(i), fn);
  }
};

// Backward needs only the input of each block; everything inside is recomputed.
template <typename Scalar>
struct CmibTrace {
  std::vector<std::array<MatrixX<Scalar>, 3>> block_inputs;
};

// Per stream and per block:
//   o  = CMIA(RMSNorm(x + P)) + x
//   o' = FFN(RMSNorm(o)) + o
// P is the sinusoidal table for that stream's own length, positions from 0,
// added in the first block only.
template <typename Scalar>
std::array<MatrixX<Scalar>, 3> cmib_forward(const MatrixX<Scalar>& f_t, const MatrixX<Scalar>& f_v,
                                            const MatrixX<Scalar>& f_q,
                                            const CmibParams<Scalar>& p,
                                            CmibTrace<Scalar>* trace = nullptr) {
  std::array<MatrixX<Scalar>, 3> x = {f_t, f_v, f_q};
  for (const auto& m : x)
    if (m.cols() != p.dim) throw DimensionError("cmib: stream width != block width");

  for (size_t bi = 0; bi < p.blocks.size(); ++bi) {
    const auto& block = p.blocks[bi];
    if (trace) trace->block_inputs.push_back(x);
    std::array<MatrixX<Scalar>, 3> normed;
    for (int s = 0; s < 3; ++s) {
      MatrixX<Scalar> with_pos = x[size_t(s)];
      if (bi == 0) with_pos += position_encoding<Scalar>(x[size_t(s)].rows(), p.dim);
      normed[size_t(s)] = rms_norm(with_pos, block.pre_norm[size_t(s)]);
    }
    const std::array<MatrixX<Scalar>, 3> mixed =
        cmia_forward(normed[0], normed[1], normed[2], block.cmia);
    for (int s = 0; s < 3; ++s) {
      const MatrixX<Scalar> o = mixed[size_t(s)] + x[size_t(s)];
      x[size_t(s)] = ffn(rms_norm(o, block.post_norm[size_t(s)]), block.ffn[size_t(s)]) + o;
    }
  }
  return x;
}

template <typename Scalar>
std::array<MatrixX<Scalar>, 3> cmib_backward(const std::array<MatrixX<Scalar>, 3>& g_out,
                                             CmibParams<Scalar>& p, const CmibTrace<Scalar>& trace) {
  std::array<MatrixX<Scalar>, 3> g = g_out;
  for (size_t bi = p.blocks.size(); bi-- > 0;) {
    auto& block = p.blocks[bi];
    const auto& x = trace.block_inputs[bi];

    // recompute forward intermediates for this block
    std::array<MatrixX<Scalar>, 3> with_pos, normed;
    for (int s = 0; s < 3; ++s) {
      with_pos[size_t(s)] = x[size_t(s)];
      if (bi == 0)
        with_pos[size_t(s)] += position_encoding<Scalar>(x[size_t(s)].rows(), p.dim);
      normed[size_t(s)] = rms_norm(with_pos[size_t(s)], block.pre_norm[size_t(s)]);
    }
    const std::array<MatrixX<Scalar>, 3> mixed =
        cmia_forward(normed[0], normed[1], normed[2], block.cmia);
    std::array<MatrixX<Scalar>, 3> o;
    for (int s = 0; s < 3; ++s) o[size_t(s)] = mixed[size_t(s)] + x[size_t(s)];

    // o' = ffn(rms(o)) + o
    std::array<MatrixX<Scalar>, 3> g_o;
    for (int s = 0; s < 3; ++s) {
      const MatrixX<Scalar> no = rms_norm(o[size_t(s)], block.post_norm[size_t(s)]);
      const MatrixX<Scalar> g_no = ffn_backward(g[size_t(s)], no, block.ffn[size_t(s)]);
      g_o[size_t(s)] =
          g[size_t(s)] + rms_norm_backward(g_no, o[size_t(s)], block.post_norm[size_t(s)]);
    }

    // o = cmia(normed) + x
    const std::array<MatrixX<Scalar>, 3> g_normed =
        cmia_backward(g_o, normed[0], normed[1], normed[2], block.cmia);
    for (int s = 0; s < 3; ++s) {
      g[size_t(s)] = g_o[size_t(s)] + rms_norm_backward(g_normed[size_t(s)], with_pos[size_t(s)],
                                                        block.pre_norm[size_t(s)]);
    }
  }
  return g;
}

}  // namespace lta
