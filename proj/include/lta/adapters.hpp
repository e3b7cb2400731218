#pragma once

// Input adaptation: the hash-bucket tokenizer standing in for a real subword
// tokenizer, the frozen token-embedding table with per-label mean pooling, the
// shared SiLU feature adapter for vision and query features, the per-modality
// down/up projections, and the trainable query bank.

#include <algorithm>
#include <cctype>
#include <string>
#include <unordered_map>
#include <vector>

#include "lta/kernels.hpp"
#include "lta/types.hpp"

namespace lta {

struct Vocabulary {
  std::vector<std::string> names;  // index = class id, ids dense in [0, K)
  std::unordered_map<std::string, int> ids;
  int token_buckets = 512;

  int num_classes() const { return int(names.size()); }
  int none_id() const { return num_classes(); }  // extra stop class, never a past target

  const std::string& name_of(int id) const {
    if (id < 0 || id >= num_classes()) throw InputError("vocabulary: class id out of range");
    return names[size_t(id)];
  }

  int id_of(const std::string& name) const {
    const auto it = ids.find(name);
    if (it == ids.end()) throw InputError("vocabulary: unknown action name '" + name + "'");
    return it->second;
  }

  static Vocabulary from_names(std::vector<std::string> names_, int token_buckets_ = 512) {
    Vocabulary v;
    v.token_buckets = token_buckets_;
    v.names = std::move(names_);
    for (size_t i = 0; i < v.names.size(); ++i) {
      if (!v.ids.emplace(v.names[i], int(i)).second)
        throw ParseError("vocabulary: duplicate action name '" + v.names[i] + "'");
    }
    return v;
  }

  std::uint64_t hash() const {
    std::uint64_t h = fnv1a64("vocab");
    for (const auto& n : names) {
      h = fnv1a64(n.data(), n.size(), h);
      h = fnv1a64("\n", 1, h);
    }
    return h;
  }
};

// Lowercase, split on whitespace/underscore, hash every piece into a bucket.
inline std::vector<int> tokenize(const std::string& label, const Vocabulary& vocab) {
  if (label.empty()) throw InputError("tokenize: empty label");
  std::vector<int> tokens;
  std::string piece;
  auto flush = [&] {
    if (!piece.empty()) {
      tokens.push_back(int(fnv1a64(piece) % std::uint64_t(vocab.token_buckets)));
      piece.clear();
    }
  };
  for (char c : label) {
    if (c == '_' || std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      piece.push_back(char(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  if (tokens.empty()) throw InputError("tokenize: label '" + label + "' has no tokens");
  return tokens;
}

// Frozen seeded embedding table; rows are unit-scale so downstream norms see
// O(1) inputs regardless of width.
template <typename Scalar>
struct EmbeddingTable {
  Param<Scalar> table;  // token_buckets x embed_dim, trainable == false
  std::uint64_t seed = 0;

  static EmbeddingTable make(Index buckets, Index embed_dim, std::uint64_t seed) {
    EmbeddingTable e;
    e.seed = seed;
    Rng rng(derive_seed(seed, fnv1a64("embedding")));
    e.table = Param<Scalar>(buckets, embed_dim, /*trainable=*/false);
    e.table.value =
        random_normal<Scalar>(buckets, embed_dim, Scalar(1) / std::sqrt(Scalar(embed_dim)), rng);
    return e;
  }
};

// Mean of the token-embedding rows for one label: one output row per label.
template <typename Scalar>
RowVectorX<Scalar> embed_label(const std::string& label, const Vocabulary& vocab,
                               const EmbeddingTable<Scalar>& emb) {
  const std::vector<int> tokens = tokenize(label, vocab);
  RowVectorX<Scalar> out = RowVectorX<Scalar>::Zero(emb.table.cols());
  for (int t : tokens) out += emb.table.value.row(t);
  return out / Scalar(tokens.size());
}

template <typename Scalar>
MatrixX<Scalar> embed_classes(const std::vector<int>& class_ids, const Vocabulary& vocab,
                              const EmbeddingTable<Scalar>& emb) {
  MatrixX<Scalar> out(Index(class_ids.size()), emb.table.cols());
  for (size_t i = 0; i < class_ids.size(); ++i)
    out.row(Index(i)) = embed_label(vocab.name_of(class_ids[i]), vocab, emb);
  return out;
}

// ---------------------------------------------------------------------------
// feature adapter (shared by the vision and query paths)

template <typename Scalar>
struct AdapterWeights {
  Param<Scalar> w0, b0, w1, b1;

  AdapterWeights() = default;
  AdapterWeights(Index in_dim, Index mid_dim, Index out_dim)
      : w0(in_dim, mid_dim), b0(1, mid_dim), w1(mid_dim, out_dim), b1(1, out_dim) {}

  void init_random(Rng& rng) {
    w0.value = random_normal<Scalar>(w0.rows(), w0.cols(),
                                     Scalar(1) / std::sqrt(Scalar(w0.rows())), rng);
    w1.value = random_normal<Scalar>(w1.rows(), w1.cols(),
                                     Scalar(1) / std::sqrt(Scalar(w1.rows())), rng);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w0", w0);
    fn(prefix + ".b0", b0);
    fn(prefix + ".w1", w1);
    fn(prefix + ".b1", b1);
  }
};

// rowwise W1 * SiLU(W0 * F + b0) + b1
template <typename Scalar>
MatrixX<Scalar> adapt_features(const MatrixX<Scalar>& f, const AdapterWeights<Scalar>& w) {
  return linear(silu(linear(f, w.w0, w.b0)), w.w1, w.b1);
}

template <typename Scalar>
MatrixX<Scalar> adapt_features_backward(const MatrixX<Scalar>& g, const MatrixX<Scalar>& f,
                                        AdapterWeights<Scalar>& w) {
  const MatrixX<Scalar> h = linear(f, w.w0, w.b0);
  const MatrixX<Scalar> a = silu(h);
  const MatrixX<Scalar> ga = linear_backward(g, a, w.w1, &w.b1);
  const MatrixX<Scalar> gh = silu_backward(ga, h);
  return linear_backward(gh, f, w.w0, &w.b0);
}

// ---------------------------------------------------------------------------
// multimodal down/up projections

enum class Modality { text, vision, query };
enum class ProjDir { down, up };

inline Modality parse_modality(const std::string& s) {
  if (s == "text") return Modality::text;
  if (s == "vision") return Modality::vision;
  if (s == "query") return Modality::query;
  throw InputError("unknown modality '" + s + "' (expected text|vision|query)");
}

template <typename Scalar>
struct ProjectionPair {
  Param<Scalar> down;  // embed_dim x cmib_dim
  Param<Scalar> up;    // cmib_dim x embed_dim

  ProjectionPair() = default;
  ProjectionPair(Index embed_dim, Index cmib_dim)
      : down(embed_dim, cmib_dim), up(cmib_dim, embed_dim) {}

  void init_random(Rng& rng) {
    down.value = random_normal<Scalar>(down.rows(), down.cols(),
                                       Scalar(1) / std::sqrt(Scalar(down.rows())), rng);
    up.value = random_normal<Scalar>(up.rows(), up.cols(),
                                     Scalar(1) / std::sqrt(Scalar(up.rows())), rng);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + ".down", down);
    fn(prefix + ".up", up);
  }
};

// Three independent pairs by default; one shared pair behind a flag.
template <typename Scalar>
struct Projections {
  std::vector<ProjectionPair<Scalar>> pairs;
  bool shared = false;

  Projections() = default;
  Projections(Index embed_dim, Index cmib_dim, bool shared_) : shared(shared_) {
    pairs.assign(shared ? 1 : 3, ProjectionPair<Scalar>(embed_dim, cmib_dim));
  }

  ProjectionPair<Scalar>& pair_for(Modality m) {
    return pairs[shared ? 0 : size_t(static_cast<int>(m))];
  }
  const ProjectionPair<Scalar>& pair_for(Modality m) const {
    return pairs[shared ? 0 : size_t(static_cast<int>(m))];
  }

  void init_random(Rng& rng) {
    for (auto& p : pairs) p.init_random(rng);
  }

  template <typename Fn>
  void visit(Fn&& fn) {
    static const char* kNames[3] = {"text", "vision", "query"};
    for (size_t i = 0; i < pairs.size(); ++i)
      pairs[i].visit(std::string("proj.") + (shared ? "shared" : kNames[i]), fn);
  }
};

template <typename Scalar>
MatrixX<Scalar> project(const MatrixX<Scalar>& f, const Projections<Scalar>& proj, Modality m,
                        ProjDir dir) {
  const auto& pair = proj.pair_for(m);
  return linear(f, dir == ProjDir::down ? pair.down : pair.up);
}

template <typename Scalar>
MatrixX<Scalar> project_backward(const MatrixX<Scalar>& g, const MatrixX<Scalar>& f,
                                 Projections<Scalar>& proj, Modality m, ProjDir dir) {
  auto& pair = proj.pair_for(m);
  return linear_backward(g, f, dir == ProjDir::down ? pair.down : pair.up);
}

// ---------------------------------------------------------------------------
// query bank

template <typename Scalar>
struct QueryBank {
  Param<Scalar> weights;  // num_queries x feature_dim, trainable
  Scalar init_value = Scalar(0.5);
};

template <typename Scalar>
QueryBank<Scalar> init_query_bank(Index num_queries, Index feature_dim, Scalar c) {
  QueryBank<Scalar> q;
  q.init_value = c;
  q.weights = Param<Scalar>::constant(num_queries, feature_dim, c, /*trainable=*/true);
  return q;
}

}  // namespace lta
