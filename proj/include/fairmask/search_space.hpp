#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fairmask/errors.hpp"
#include "fairmask/rng.hpp"

namespace fairmask {

// Per-block module kinds, in canonical bit order. One LN bit drives both
// normalization layers of a block.
enum class ModuleKind : int { kMhsa = 0, kMlp = 1, kLn = 2 };
inline constexpr int kNumKinds = 3;

inline std::string to_string(ModuleKind k) {
  switch (k) {
    case ModuleKind::kMhsa: return "mhsa";
    case ModuleKind::kMlp: return "mlp";
    case ModuleKind::kLn: return "ln";
  }
  return "?";
}

inline ModuleKind kind_from_string(const std::string& s) {
  if (s == "mhsa") return ModuleKind::kMhsa;
  if (s == "mlp") return ModuleKind::kMlp;
  if (s == "ln") return ModuleKind::kLn;
  throw ConfigError("unknown module kind '" + s + "'");
}

/// Binary update mask over (block, module kind). Bit true = module updated.
class Mask {
public:
  Mask() = default;
  explicit Mask(int n_blocks, bool value = false)
      : n_blocks_(n_blocks), bits_(static_cast<std::size_t>(n_blocks) * kNumKinds, value ? 1 : 0) {
    if (n_blocks < 1) throw ConfigError("mask: need at least one block");
  }

  int n_blocks() const { return n_blocks_; }

  bool get(int block, ModuleKind kind) const { return bits_[index(block, kind)] != 0; }
  void set(int block, ModuleKind kind, bool v) { bits_[index(block, kind)] = v ? 1 : 0; }

  int count() const {
    int c = 0;
    for (auto b : bits_) c += b;
    return c;
  }

  bool operator==(const Mask& other) const = default;

private:
  std::size_t index(int block, ModuleKind kind) const {
    if (block < 0 || block >= n_blocks_) throw ConfigError("mask: block index out of range");
    return static_cast<std::size_t>(block) * kNumKinds + static_cast<std::size_t>(kind);
  }

  int n_blocks_ = 0;
  std::vector<std::uint8_t> bits_;
};

inline Mask full_ft(int n_blocks) { return Mask(n_blocks, true); }
inline Mask linear_readout(int n_blocks) { return Mask(n_blocks, false); }

inline Mask attention_only(int n_blocks) {
  Mask m(n_blocks);
  for (int b = 0; b < n_blocks; ++b) m.set(b, ModuleKind::kMhsa, true);
  return m;
}

inline Mask layernorm_only(int n_blocks) {
  Mask m(n_blocks);
  for (int b = 0; b < n_blocks; ++b) m.set(b, ModuleKind::kLn, true);
  return m;
}

/// Search space: which module kinds are searched (unsearched kinds stay
/// frozen) and the log-uniform learning-rate range.
struct SearchSpace {
  int n_blocks = 12;
  std::vector<ModuleKind> searched_kinds{ModuleKind::kMhsa, ModuleKind::kMlp, ModuleKind::kLn};
  double lr_lo = 1e-5;
  double lr_hi = 1e-1;

  void validate() const {
    if (n_blocks < 1) throw ConfigError("search space: need at least one block");
    if (searched_kinds.empty()) throw ConfigError("search space: need at least one searched kind");
    if (!(lr_lo > 0.0 && lr_lo < lr_hi)) throw ConfigError("search space: need 0 < lr_lo < lr_hi");
  }

  int n_bits() const { return n_blocks * static_cast<int>(searched_kinds.size()); }

  bool contains(const Mask& m) const {
    if (m.n_blocks() != n_blocks) return false;
    for (int b = 0; b < n_blocks; ++b)
      for (int k = 0; k < kNumKinds; ++k) {
        const auto kind = static_cast<ModuleKind>(k);
        const bool searched =
            std::find(searched_kinds.begin(), searched_kinds.end(), kind) != searched_kinds.end();
        if (!searched && m.get(b, kind)) return false;
      }
    return true;
  }
};

struct TrialConfig {
  Mask mask;
  double learning_rate = 1e-3;
};

/// Row-major (block-major, kind-minor) bit string over the searched kinds.
inline std::string encode(const Mask& m, const SearchSpace& space) {
  std::string s;
  s.reserve(static_cast<std::size_t>(space.n_bits()));
  for (int b = 0; b < space.n_blocks; ++b)
    for (ModuleKind k : space.searched_kinds) s.push_back(m.get(b, k) ? '1' : '0');
  return s;
}

/// Full-space encoding (all three kinds).
inline std::string encode(const Mask& m) {
  SearchSpace full;
  full.n_blocks = m.n_blocks();
  return encode(m, full);
}

inline Mask decode(const std::string& bits, const SearchSpace& space) {
  space.validate();
  if (bits.size() != static_cast<std::size_t>(space.n_bits()))
    throw ConfigError("decode: expected " + std::to_string(space.n_bits()) + " bits, got " +
                      std::to_string(bits.size()));
  Mask m(space.n_blocks);
  std::size_t i = 0;
  for (int b = 0; b < space.n_blocks; ++b)
    for (ModuleKind k : space.searched_kinds) {
      const char c = bits[i++];
      if (c != '0' && c != '1') throw ConfigError("decode: bit string must be 0/1");
      m.set(b, k, c == '1');
    }
  return m;
}

/// Startup prior: fair coin per searched bit, log-uniform learning rate.
inline TrialConfig sample_prior(const SearchSpace& space, Rng& rng) {
  space.validate();
  TrialConfig cfg;
  cfg.mask = Mask(space.n_blocks);
  for (int b = 0; b < space.n_blocks; ++b)
    for (ModuleKind k : space.searched_kinds) cfg.mask.set(b, k, rng.coin());
  cfg.learning_rate = std::pow(10.0, rng.uniform(std::log10(space.lr_lo), std::log10(space.lr_hi)));
  return cfg;
}

}  // namespace fairmask
