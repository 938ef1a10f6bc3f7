#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "optsearch/dsl.hpp"

namespace optsearch {

using Vec = std::vector<double>;

struct RuntimeConfig {
  double delta = 1e-8;      // division guard
  double beta1 = 0.9;
  double beta2 = 0.999;
  double beta3 = 0.999;
  bool bias_correction = true;
  double log_guard = 1e-12;
  /// Read the second parameter of the noise operands as a standard
  /// deviation instead of a variance.
  bool noise_as_stddev = false;

  /// Throws InvalidSpec when a field is out of range.
  void check() const;
};

/// Counter-based generator: the i-th draw depends only on (seed, stream id, i).
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::string_view stream_id);

  std::uint64_t next_u64();
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller; consumes two draws.
  double normal();
  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  std::uint64_t position() const { return counter_; }
  void seek(std::uint64_t index) { counter_ = index; }

  /// An independent stream keyed by this stream's key and `child`.
  RngStream split(std::string_view child) const;

 private:
  explicit RngStream(std::uint64_t key) : key_(key) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);
std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b);

/// Element-wise unary. drop consumes one uniform per element from `rng`.
/// Throws OverflowError on any non-finite output.
Vec apply_unary(Unary fn, std::span<const double> x, RngStream& rng, const RuntimeConfig& config);

/// Element-wise binary; x and y must have equal length.
Vec apply_binary(Binary fn, std::span<const double> x, std::span<const double> y,
                 const RuntimeConfig& config);

double sign_of(double x);
double pow_signed(double x, double y, double delta);

enum class DecayKind {
  none,            // f = 1
  zero,            // f = 0
  linear,          // ld
  cyclical,        // cd_n
  restart,         // rd_n
  annealed_noise,  // eps_t (sampled, see sample_noise)
};

struct DecaySpec {
  DecayKind kind = DecayKind::none;
  double n = 0.5;

  friend bool operator==(const DecaySpec&, const DecaySpec&) = default;
};

/// Value of a deterministic decay at step t of a T-step horizon.
/// Throws InvalidHorizon for T <= 0 and std::invalid_argument for
/// annealed_noise or a non-positive n.
double decay_value(const DecaySpec& spec, double t, double T);

enum class NoiseKind { eps, eps_t };

/// Gaussian draws: eps has variance 0.01, eps_t variance 1/(1+t)^0.55
/// (standard deviations instead when config.noise_as_stddev is set).
Vec sample_noise(NoiseKind kind, double t, std::size_t size, RngStream& rng,
                 const RuntimeConfig& config = {});

}  // namespace optsearch
