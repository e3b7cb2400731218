#pragma once

// Versioned binary checkpoints: "ALLM" magic, format version, the canonical
// model-config block with its hash, the vocabulary hash, then every named
// parameter as (name, rows, cols, float32 row-major data). The loader refuses
// anything whose config or vocabulary does not match the live model.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "lta/backbone.hpp"
#include "lta/types.hpp"

namespace lta {

namespace ckpt_detail {

constexpr char kMagic[4] = {'A', 'L', 'L', 'M'};
constexpr std::uint32_t kVersion = 1;

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}
inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}
inline std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), std::streamsize(n));
  return s;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace ckpt_detail

template <typename Scalar>
void save_checkpoint(Model<Scalar>& model, const std::filesystem::path& path) {
  namespace d = ckpt_detail;
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write checkpoint " + path.string());

  out.write(d::kMagic, 4);
  d::write_u32(out, d::kVersion);
  d::write_u64(out, model.cfg.hash());
  d::write_string(out, model.cfg.canonical());
  d::write_u64(out, model.vocab.hash());

  std::uint32_t count = 0;
  model.visit_params([&](const std::string&, Param<Scalar>&) { ++count; });
  d::write_u32(out, count);

  model.visit_params([&](const std::string& name, Param<Scalar>& p) {
    d::write_string(out, name);
    d::write_u32(out, std::uint32_t(p.rows()));
    d::write_u32(out, std::uint32_t(p.cols()));
    std::vector<float> buf(size_t(p.size()));
    for (Index i = 0; i < p.size(); ++i) buf[size_t(i)] = float(p.value(i));
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(buf.size() * 4));
  });
  if (!out) throw ParseError("short write on checkpoint " + path.string());
}

// Fills the parameters of an already-built model; the model's config and
// vocabulary must match what the checkpoint was written with.
template <typename Scalar>
void load_checkpoint(Model<Scalar>& model, const std::filesystem::path& path) {
  namespace d = ckpt_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());

  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != std::string(d::kMagic, 4))
    throw IntegrityError("checkpoint " + path.string() + ": bad magic");
  const std::uint32_t version = d::read_u32(in);
  if (version != d::kVersion)
    throw IntegrityError("checkpoint " + path.string() + ": unsupported version " +
                         std::to_string(version));

  const std::uint64_t stored_hash = d::read_u64(in);
  const std::string stored_config = d::read_string(in);
  const std::uint64_t own_hash = model.cfg.hash();
  if (stored_hash != own_hash || stored_config != model.cfg.canonical())
    throw IntegrityError("checkpoint config mismatch: stored " + d::hash_hex(stored_hash) +
                         " vs current " + d::hash_hex(own_hash));
  const std::uint64_t stored_vocab = d::read_u64(in);
  if (stored_vocab != model.vocab.hash())
    throw IntegrityError("checkpoint vocabulary mismatch: stored " + d::hash_hex(stored_vocab) +
                         " vs current " + d::hash_hex(model.vocab.hash()));

  const std::uint32_t count = d::read_u32(in);
  std::map<std::string, MatrixX<Scalar>> stored;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = d::read_string(in);
    const std::uint32_t rows = d::read_u32(in);
    const std::uint32_t cols = d::read_u32(in);
    std::vector<float> buf(size_t(rows) * cols);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * 4));
    if (!in) throw IntegrityError("checkpoint " + path.string() + ": truncated at " + name);
    MatrixX<Scalar> m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index j = 0; j < m.size(); ++j) m(j) = Scalar(buf[size_t(j)]);
    stored.emplace(name, std::move(m));
  }

  model.visit_params([&](const std::string& name, Param<Scalar>& p) {
    const auto it = stored.find(name);
    if (it == stored.end())
      throw IntegrityError("checkpoint " + path.string() + ": missing parameter " + name);
    if (it->second.rows() != p.rows() || it->second.cols() != p.cols())
      throw IntegrityError("checkpoint " + path.string() + ": shape mismatch for " + name);
    p.value = it->second;
    stored.erase(it);
  });
  if (!stored.empty())
    throw IntegrityError("checkpoint " + path.string() + ": unknown parameter " +
                         stored.begin()->first);
}

}  // namespace lta
