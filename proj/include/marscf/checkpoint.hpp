#pragma once

// Versioned binary model container. Byte layout (all integers little-endian):
//
//   offset  size  field
//   0       4     magic "MSCF"
//   4       4     format version (u32, currently 1)
//   8       40    FlowConfig: channels, size, levels, flow_steps, coupling
//                 (0 affine / 1 mixlogcdf), width, mix_components,
//                 prior_hidden, prior_cond, prior_layers (10 x i32)
//   ...           actnorm section: u32 count, then count x u8 initialized flags
//                 (levels x flow_steps, level-major, step order)
//   ...           invconv structure section: u32 count, then per step:
//                 i32 C, C x i32 pivot rows, C x i8 diagonal signs
//   ...           tensor section: u64 count, then per tensor:
//                 u32 name length, name bytes, u32 rank, rank x i64 dims,
//                 numel x f64 values (IEEE-754 bit patterns)
//   ...           optimizer section: u8 present flag; if 1: i64 step count,
//                 u64 entry count, then per entry: u32 name length, name,
//                 u64 vector length, length x f64 first moments,
//                 length x f64 infinity-norm moments
//   end-8   8     FNV-1a 64-bit checksum of every preceding byte
//
// The tensor section stores every named parameter in visit_params order, so a
// round-trip is bit-exact.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "model.hpp"
#include "optim.hpp"

namespace marscf {
namespace detail {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a(const std::uint8_t* p, size_t n,
                           std::uint64_t h = kFnvOffset) {
  for (size_t i = 0; i < n; ++i) h = (h ^ p[i]) * kFnvPrime;
  return h;
}

struct ByteWriter {
  std::vector<std::uint8_t> buf;
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
};

struct ByteReader {
  const std::uint8_t* p;
  size_t n, pos = 0;
  void need(size_t k) const {
    check(pos + k <= n, "checkpoint: truncated at byte " + std::to_string(pos));
  }
  std::uint8_t u8() {
    need(1);
    return p[pos++];
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p + pos), len);
    pos += len;
    return s;
  }
};

}  // namespace detail

constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, Model& model,
                            const Adamax* opt = nullptr) {
  detail::ByteWriter w;
  w.raw("MSCF", 4);
  w.u32(kCheckpointVersion);

  const FlowConfig& cfg = model.config();
  w.i32(cfg.channels);
  w.i32(cfg.size);
  w.i32(cfg.levels);
  w.i32(cfg.flow_steps);
  w.i32(cfg.coupling == CouplingKind::affine ? 0 : 1);
  w.i32(cfg.width);
  w.i32(cfg.mix_components);
  w.i32(cfg.prior_hidden);
  w.i32(cfg.prior_cond);
  w.i32(cfg.prior_layers);

  w.u32(static_cast<std::uint32_t>(cfg.levels) * cfg.flow_steps);
  for (int i = 0; i < cfg.levels; ++i)
    for (auto& step : model.level_steps(i))
      w.u8(step.actnorm().initialized() ? 1 : 0);

  w.u32(static_cast<std::uint32_t>(cfg.levels) * cfg.flow_steps);
  for (int i = 0; i < cfg.levels; ++i)
    for (auto& step : model.level_steps(i)) {
      const auto& conv = step.invconv();
      w.i32(conv.channels());
      for (int v : conv.pivots()) w.i32(v);
      for (double s : conv.signs()) w.u8(s > 0 ? 1 : 0);
    }

  std::vector<std::pair<std::string, Tensor>> params;
  model.visit_params([&](const std::string& name, Tensor& t) { params.emplace_back(name, t); });
  w.u64(params.size());
  for (auto& [name, t] : params) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (int d = 0; d < t.rank(); ++d) w.i64(t.dim(d));
    for (std::int64_t i = 0; i < t.size(); ++i) w.f64(t.data()[i]);
  }

  w.u8(opt ? 1 : 0);
  if (opt) {
    w.i64(opt->steps());
    w.u64(opt->moments().size());
    for (const auto& [name, mom] : opt->moments()) {
      w.str(name);
      w.u64(mom.m.size());
      for (double v : mom.m) w.f64(v);
      for (double v : mom.u) w.f64(v);
    }
  }

  w.u64(detail::fnv1a(w.buf.data(), w.buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  check(out.good(), "checkpoint: cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(w.buf.data()),
            static_cast<std::streamsize>(w.buf.size()));
  check(out.good(), "checkpoint: write failed for " + path);
}

/// Reads the config, reconstructs a model with matching architecture, and
/// restores all parameters, actnorm flags, invconv structure, and (when
/// present and requested) optimizer moments.
inline Model load_checkpoint(const std::string& path, Adamax* opt = nullptr) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "checkpoint: cannot open " + path);
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  check(buf.size() >= 16, "checkpoint: file too small: " + path);

  detail::ByteReader tail{buf.data() + buf.size() - 8, 8};
  const std::uint64_t want = tail.u64();
  const std::uint64_t got = detail::fnv1a(buf.data(), buf.size() - 8);
  check(want == got, "checkpoint: checksum mismatch in " + path);

  detail::ByteReader r{buf.data(), buf.size() - 8};
  char magic[4];
  r.need(4);
  std::memcpy(magic, r.p, 4);
  r.pos += 4;
  check(std::memcmp(magic, "MSCF", 4) == 0, "checkpoint: bad magic in " + path);
  check(r.u32() == kCheckpointVersion, "checkpoint: unsupported version in " + path);

  FlowConfig cfg;
  cfg.channels = r.i32();
  cfg.size = r.i32();
  cfg.levels = r.i32();
  cfg.flow_steps = r.i32();
  cfg.coupling = r.i32() == 0 ? CouplingKind::affine : CouplingKind::mixlogcdf;
  cfg.width = r.i32();
  cfg.mix_components = r.i32();
  cfg.prior_hidden = r.i32();
  cfg.prior_cond = r.i32();
  cfg.prior_layers = r.i32();
  cfg.validate();

  Rng rng(0);  // structure only; every value is overwritten below
  Model model(cfg, rng);

  check(r.u32() == static_cast<std::uint32_t>(cfg.levels) * cfg.flow_steps,
        "checkpoint: actnorm flag count mismatch");
  for (int i = 0; i < cfg.levels; ++i)
    for (auto& step : model.level_steps(i))
      if (r.u8()) step.actnorm().mark_initialized();

  check(r.u32() == static_cast<std::uint32_t>(cfg.levels) * cfg.flow_steps,
        "checkpoint: invconv section count mismatch");
  for (int i = 0; i < cfg.levels; ++i)
    for (auto& step : model.level_steps(i)) {
      const int C = r.i32();
      check(C == step.invconv().channels(), "checkpoint: invconv channel mismatch");
      std::vector<int> piv(C);
      std::vector<double> sign(C);
      for (int k = 0; k < C; ++k) piv[k] = r.i32();
      for (int k = 0; k < C; ++k) sign[k] = r.u8() ? 1.0 : -1.0;
      step.invconv().set_factor_structure(piv, sign);
    }

  std::vector<std::pair<std::string, Tensor>> params;
  model.visit_params([&](const std::string& name, Tensor& t) { params.emplace_back(name, t); });
  const std::uint64_t count = r.u64();
  check(count == params.size(), "checkpoint: parameter count mismatch");
  for (auto& [name, t] : params) {
    const std::string stored_name = r.str();
    check(stored_name == name, "checkpoint: expected parameter " + name + ", found " +
                                   stored_name);
    const std::uint32_t rank = r.u32();
    check(rank == static_cast<std::uint32_t>(t.rank()), "checkpoint: rank mismatch for " + name);
    for (int d = 0; d < t.rank(); ++d)
      check(r.i64() == t.dim(d), "checkpoint: shape mismatch for " + name);
    for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = r.f64();
  }

  const bool has_opt = r.u8() != 0;
  if (has_opt && opt) {
    opt->set_step_count(r.i64());
    const std::uint64_t entries = r.u64();
    for (std::uint64_t e = 0; e < entries; ++e) {
      const std::string name = r.str();
      const std::uint64_t len = r.u64();
      auto& mom = opt->moments()[name];
      mom.m.resize(len);
      mom.u.resize(len);
      for (auto& v : mom.m) v = r.f64();
      for (auto& v : mom.u) v = r.f64();
    }
  }
  return model;
}

}  // namespace marscf
