#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace avflow {

enum class ErrKind {
  ShapeMismatch,
  NonFinite,
  NotScalar,
  StateMismatch,
  NotARotation,
  InsufficientData,
  ModelNotLoaded,
  DimensionMismatch,
  FrameCountMismatch,
  ConfigMismatch,
  OddHeadDim,
  TOutOfRange,
  MisalignedBatch,
  NonFiniteLoss,
  BadLexicon,
  Io,
  CorruptRecord,
  UnknownSymbol,
  EmptyText,
  LengthMismatch,
  DegenerateCovariance,
  TooFewSamples,
  NoMotionBeats,
  EmptyInput,
  ConfigInvalid,
  CorpusUnreadable,
  DivergedLoss,
  MissingVariant,
  NoParticipantStreams,
  MissingCheckpoint,
  NonFiniteState,
  Internal,
};

const char* err_kind_name(ErrKind k);

class Error : public std::runtime_error {
 public:
  Error(ErrKind kind, const std::string& msg)
      : std::runtime_error(std::string(err_kind_name(kind)) + ": " + msg), kind_(kind) {}
  ErrKind kind() const { return kind_; }

 private:
  ErrKind kind_;
};

[[noreturn]] inline void fail(ErrKind kind, const std::string& msg) { throw Error(kind, msg); }

// xoshiro256++ with splitmix64 seeding. Stream derivation and the normal
// sampler are implemented here so results do not depend on the platform's
// <random> distributions.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& si : s_) si = splitmix64(x);
    has_spare_ = false;
    spare_ = 0.0;
  }

  // Independent child stream; mixing keeps distinct (seed, key) pairs apart.
  Rng fork(uint64_t key) const {
    uint64_t h = s_[0] ^ (0x9e3779b97f4a7c15ULL + key);
    h ^= s_[2] + (key << 17);
    return Rng(h ^ splitmix64(h));
  }

  uint64_t next_u64() {
    uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  uint32_t next_u32() { return static_cast<uint32_t>(next_u64() >> 32); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [lo, hi] inclusive
  int64_t uniform_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  // Box-Muller, platform independent
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  void state(uint64_t out[4]) const {
    for (int i = 0; i < 4; ++i) out[i] = s_[i];
  }
  void set_state(const uint64_t in[4]) {
    for (int i = 0; i < 4; ++i) s_[i] = in[i];
    has_spare_ = false;
  }

 private:
  static uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t s_[4] = {};
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace avflow
