#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "optsearch/dsl.hpp"
#include "optsearch/runtime.hpp"
#include "optsearch/search_space.hpp"

namespace optsearch {

struct ControllerConfig {
  std::size_t hidden_size = 150;
  std::size_t embedding_size = 32;
  double init_scale = 0.08;
};

struct PpoConfig {
  double clip = 0.2;
  std::size_t epochs = 4;
  double entropy_coef = 0.0015;
  double baseline_decay = 0.95;
  double learning_rate = 1e-5;
  std::size_t batch_size = 5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void check() const;  // throws InvalidSpec
};

struct Trajectory {
  std::vector<std::size_t> tokens;
  /// log-probability of each token under the distribution it was drawn from.
  std::vector<double> logps;
  std::vector<std::vector<char>> masks;
  double reward = 0.0;

  double logp() const;
};

/// Masked categorical distribution at one step.
struct StepDistribution {
  Eigen::VectorXd logits;
  std::vector<char> allowed;
  Eigen::VectorXd probs;  // exactly 0 where !allowed
};

/// Reward baseline; unset until the first batch.
struct Baseline {
  double value = 0.0;
  bool initialized = false;
};

struct PpoStats {
  double surrogate = 0.0;  // clipped surrogate at entry (ratio 1)
  double entropy = 0.0;    // mean per-sequence entropy at entry
  double kl = 0.0;         // mean(old logp - new logp) after the update
  double mean_reward = 0.0;
  double baseline = 0.0;   // value used for the advantages
};

/// Single-layer LSTM over the token sequence. The input at step k is the
/// embedding of the token chosen at step k-1 (a learned start vector at
/// step 0); each step has its own embedding table and output projection
/// because vocabularies differ per step. All parameters, plus the Adam
/// moments of the policy optimizer, live in flat vectors.
class ControllerPolicy {
 public:
  ControllerPolicy(std::vector<std::size_t> vocab_sizes, ControllerConfig config,
                   std::uint64_t seed);

  const std::vector<std::size_t>& vocab_sizes() const { return vocab_; }
  std::size_t length() const { return vocab_.size(); }
  const ControllerConfig& config() const { return config_; }

  Eigen::VectorXd& theta() { return theta_; }
  const Eigen::VectorXd& theta() const { return theta_; }
  std::size_t num_parameters() const { return static_cast<std::size_t>(theta_.size()); }

  /// Teacher-forced log-probability of a full or partial token sequence.
  double sequence_logp(std::span<const std::size_t> tokens, const ActionSpace& space) const;

  // Policy optimizer state.
  Eigen::VectorXd adam_m;
  Eigen::VectorXd adam_v;
  std::int64_t adam_t = 0;
  Baseline baseline;
  std::uint64_t samples_done = 0;

  void save(std::ostream& out) const;
  static ControllerPolicy load(std::istream& in);

  // Offsets into theta.
  struct Layout {
    std::size_t start = 0;               // embedding
    std::vector<std::size_t> embedding;  // step k >= 1: E x vocab[k-1], one column per token
    std::size_t w = 0;                   // 4H x (E + H), column-major
    std::size_t b = 0;                   // 4H
    std::vector<std::size_t> proj;       // vocab[k] x H, column-major
    std::vector<std::size_t> proj_bias;  // vocab[k]
    std::size_t total = 0;
  };
  const Layout& layout() const { return layout_; }

 private:
  std::vector<std::size_t> vocab_;
  ControllerConfig config_;
  Layout layout_;
  Eigen::VectorXd theta_;
};

StepDistribution step_logits(const ControllerPolicy& policy, std::span<const std::size_t> prefix,
                             const ActionSpace& space);

std::vector<Trajectory> sample_batch(const ControllerPolicy& policy, std::size_t batch_size,
                                     const ActionSpace& space, RngStream& rng);

/// Clipped surrogate objective plus entropy bonus (to be maximized) and,
/// when `grad` is non-null, its exact gradient with respect to theta.
double ppo_objective(const ControllerPolicy& policy, std::span<const Trajectory> batch,
                     std::span<const double> old_logps, std::span<const double> advantages,
                     const PpoConfig& config, Eigen::VectorXd* grad,
                     double* entropy_out = nullptr);

/// Runs config.epochs Adam ascent steps on the batch, then folds the batch
/// mean reward into the baseline. Throws NonFiniteGradient after restoring
/// the previous parameters.
PpoStats ppo_update(ControllerPolicy& policy, std::span<const Trajectory> batch,
                    Baseline& baseline, const PpoConfig& config);

/// Teacher-forced log-probabilities of the batch under the current policy,
/// using each trajectory's recorded masks.
std::vector<double> batch_logps(const ControllerPolicy& policy, std::span<const Trajectory> batch);

/// Monte-Carlo estimate of the sequence entropy: the mean over sampled
/// paths of the summed exact per-step entropies.
double entropy(const ControllerPolicy& policy, const ActionSpace& space, std::size_t budget,
               RngStream& rng);

/// sum_k log V_k: the entropy of a uniform policy over an unmasked space.
double uniform_entropy(const ActionSpace& space);

}  // namespace optsearch
