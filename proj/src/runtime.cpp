#include "optsearch/runtime.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "optsearch/errors.hpp"

namespace optsearch {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

std::uint64_t hash_label(std::string_view label) {
  // FNV-1a
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void check_finite(const Vec& out, std::string_view what) {
  for (double x : out) {
    if (!std::isfinite(x)) throw OverflowError("non-finite output from " + std::string(what));
  }
}

double clip(double x, double l) { return std::min(std::max(x, -l), l); }

}  // namespace

void RuntimeConfig::check() const {
  if (!(delta > 0.0)) throw InvalidSpec("delta must be positive");
  if (!(log_guard > 0.0)) throw InvalidSpec("log_guard must be positive");
  for (double b : {beta1, beta2, beta3}) {
    if (!(b > 0.0 && b < 1.0)) throw InvalidSpec("EMA decay rates must lie in (0, 1)");
  }
}

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b + kGolden));
}

RngStream::RngStream(std::uint64_t seed, std::string_view stream_id)
    : key_(hash_combine(mix64(seed), hash_label(stream_id))) {}

std::uint64_t RngStream::next_u64() {
  const std::uint64_t draw = mix64(key_ + (counter_ + 1) * kGolden);
  ++counter_;
  return draw;
}

double RngStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double RngStream::normal() {
  // 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t bound) {
  if (bound <= 1) {
    next_u64();
    return 0;
  }
  // Rejection keeps the result unbiased.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
  std::uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return x % bound;
}

RngStream RngStream::split(std::string_view child) const {
  return RngStream(hash_combine(key_, hash_label(child)));
}

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

double pow_signed(double x, double y, double delta) {
  const double s = sign_of(x);
  if (s == 0.0) return 0.0;
  double base = std::abs(x);
  if (y <= 0.0) base = std::max(base, delta);
  return s * std::pow(base, y);
}

Vec apply_unary(Unary fn, std::span<const double> x, RngStream& rng, const RuntimeConfig& config) {
  Vec out(x.begin(), x.end());
  auto dropout = [&](double p) {
    for (double& e : out) {
      if (rng.uniform() < p) e = 0.0;
    }
  };
  switch (fn) {
    case Unary::id:
      break;
    case Unary::neg:
      for (double& e : out) e = -e;
      break;
    case Unary::exp:
      for (double& e : out) e = std::exp(e);
      break;
    case Unary::log:
      for (double& e : out) e = std::log(std::abs(e) + config.log_guard);
      break;
    case Unary::sqrt:
      for (double& e : out) e = std::sqrt(std::abs(e));
      break;
    case Unary::clip5:
      for (double& e : out) e = clip(e, 1e-5);
      break;
    case Unary::clip4:
      for (double& e : out) e = clip(e, 1e-4);
      break;
    case Unary::clip3:
      for (double& e : out) e = clip(e, 1e-3);
      break;
    case Unary::drop1:
      dropout(0.1);
      break;
    case Unary::drop3:
      dropout(0.3);
      break;
    case Unary::drop5:
      dropout(0.5);
      break;
    case Unary::sign:
      for (double& e : out) e = sign_of(e);
      break;
    case Unary::sigmoid:
      for (double& e : out) e = 1.0 / (1.0 + std::exp(-e));
      break;
  }
  check_finite(out, to_string(fn));
  return out;
}

Vec apply_binary(Binary fn, std::span<const double> x, std::span<const double> y,
                 const RuntimeConfig& config) {
  if (x.size() != y.size()) throw std::invalid_argument("apply_binary: shape mismatch");
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    switch (fn) {
      case Binary::add: out[i] = x[i] + y[i]; break;
      case Binary::sub: out[i] = x[i] - y[i]; break;
      case Binary::mul: out[i] = x[i] * y[i]; break;
      case Binary::div: out[i] = x[i] / (y[i] + config.delta); break;
      case Binary::pow: out[i] = pow_signed(x[i], y[i], config.delta); break;
      case Binary::left: out[i] = x[i]; break;
    }
  }
  check_finite(out, to_string(fn));
  return out;
}

double decay_value(const DecaySpec& spec, double t, double T) {
  if (!(T > 0.0)) throw InvalidHorizon("decay horizon T must be positive");
  switch (spec.kind) {
    case DecayKind::none:
      return 1.0;
    case DecayKind::zero:
      return 0.0;
    case DecayKind::linear:
      return 1.0 - t / T;
    case DecayKind::cyclical:
      if (!(spec.n > 0.0)) throw std::invalid_argument("cyclical decay needs n > 0");
      return 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * spec.n * (t / T)));
    case DecayKind::restart:
      if (!(spec.n > 0.0)) throw std::invalid_argument("restart decay needs n > 0");
      return 0.5 * (1.0 + std::cos(std::numbers::pi * std::fmod(t * spec.n, T) / T));
    case DecayKind::annealed_noise:
      throw std::invalid_argument("annealed noise is sampled, not evaluated");
  }
  return 1.0;
}

Vec sample_noise(NoiseKind kind, double t, std::size_t size, RngStream& rng,
                 const RuntimeConfig& config) {
  const double second = kind == NoiseKind::eps ? 0.01 : 1.0 / std::pow(1.0 + t, 0.55);
  const double stddev = config.noise_as_stddev ? second : std::sqrt(second);
  Vec out(size);
  for (double& e : out) e = stddev * rng.normal();
  return out;
}

}  // namespace optsearch
