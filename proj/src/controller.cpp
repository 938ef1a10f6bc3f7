#include "optsearch/controller.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>

#include "optsearch/errors.hpp"

namespace optsearch {

namespace {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using ConstMap = Eigen::Map<const MatrixXd>;
using ConstVecMap = Eigen::Map<const VectorXd>;
using MutMap = Eigen::Map<MatrixXd>;
using MutVecMap = Eigen::Map<VectorXd>;

constexpr const char* kCheckpointMagic = "optsearch-controller";
constexpr int kCheckpointVersion = 1;

MatrixXd sigmoid(const MatrixXd& z) { return (1.0 + (-z.array()).exp()).inverse().matrix(); }

struct StepCache {
  MatrixXd x, h_prev, c_prev;
  MatrixXd i, f, g, o, c, tc, h;
  MatrixXd probs;     // V x B, zero where masked
  MatrixXd logprobs;  // V x B, valid where allowed
  std::vector<std::vector<char>> allowed;  // per sequence
};

// Shared LSTM machinery. Either follows given tokens (teacher forcing) or
// samples them.
class Rollout {
 public:
  explicit Rollout(const ControllerPolicy& policy)
      : policy_(policy),
        H_(static_cast<Index>(policy.config().hidden_size)),
        E_(static_cast<Index>(policy.config().embedding_size)) {}

  // Input embeddings for step k given the previous tokens.
  MatrixXd inputs(std::size_t k, const std::vector<std::vector<std::size_t>>& tokens,
                  Index batch) const {
    const auto& lay = policy_.layout();
    const double* th = policy_.theta().data();
    MatrixXd x(E_, batch);
    if (k == 0) {
      const ConstVecMap start(th + lay.start, E_);
      x.colwise() = start;
    } else {
      const ConstMap table(th + lay.embedding[k], E_,
                           static_cast<Index>(policy_.vocab_sizes()[k - 1]));
      for (Index b = 0; b < batch; ++b) x.col(b) = table.col(static_cast<Index>(tokens[b][k - 1]));
    }
    return x;
  }

  // Advances the LSTM one step; fills everything in `cache` except the
  // masked distribution.
  void cell(std::size_t k, StepCache& cache) const {
    const auto& lay = policy_.layout();
    const double* th = policy_.theta().data();
    const ConstMap w(th + lay.w, 4 * H_, E_ + H_);
    const ConstVecMap bias(th + lay.b, 4 * H_);
    MatrixXd z = w.leftCols(E_) * cache.x;
    z.noalias() += w.rightCols(H_) * cache.h_prev;
    z.colwise() += bias;
    cache.i = sigmoid(z.topRows(H_));
    cache.f = sigmoid(z.middleRows(H_, H_));
    cache.g = z.middleRows(2 * H_, H_).array().tanh().matrix();
    cache.o = sigmoid(z.bottomRows(H_));
    cache.c = cache.f.cwiseProduct(cache.c_prev) + cache.i.cwiseProduct(cache.g);
    cache.tc = cache.c.array().tanh().matrix();
    cache.h = cache.o.cwiseProduct(cache.tc);
    const Index v = static_cast<Index>(policy_.vocab_sizes()[k]);
    const ConstMap proj(th + lay.proj[k], v, H_);
    const ConstVecMap pb(th + lay.proj_bias[k], v);
    logits_ = proj * cache.h;
    logits_.colwise() += pb;
  }

  // Masked softmax of the current logits, column by column.
  void distribution(StepCache& cache) const {
    const Index v = logits_.rows();
    const Index batch = logits_.cols();
    cache.probs = MatrixXd::Zero(v, batch);
    cache.logprobs = MatrixXd::Constant(v, batch, -std::numeric_limits<double>::infinity());
    for (Index b = 0; b < batch; ++b) {
      const auto& allowed = cache.allowed[static_cast<std::size_t>(b)];
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < v; ++j) {
        if (allowed[static_cast<std::size_t>(j)]) mx = std::max(mx, logits_(j, b));
      }
      double total = 0.0;
      for (Index j = 0; j < v; ++j) {
        if (allowed[static_cast<std::size_t>(j)]) total += std::exp(logits_(j, b) - mx);
      }
      const double log_total = std::log(total);
      for (Index j = 0; j < v; ++j) {
        if (!allowed[static_cast<std::size_t>(j)]) continue;
        cache.logprobs(j, b) = logits_(j, b) - mx - log_total;
        cache.probs(j, b) = std::exp(cache.logprobs(j, b));
      }
    }
  }

  const MatrixXd& logits() const { return logits_; }

  // Runs `steps` steps. When `sample` is set, tokens are drawn from `rng`
  // with masks from `space`; otherwise tokens and masks are read from
  // `tokens`/`masks`; sampled tokens' log-probabilities go to `logps`.
  // Caches are kept when `keep` is set.
  void run(std::size_t steps, Index batch, std::vector<std::vector<std::size_t>>& tokens,
           std::vector<std::vector<std::vector<char>>>& masks, const ActionSpace* space,
           RngStream* rng, bool keep, std::vector<std::vector<double>>* logps = nullptr) {
    caches_.clear();
    MatrixXd h = MatrixXd::Zero(H_, batch);
    MatrixXd c = MatrixXd::Zero(H_, batch);
    for (std::size_t k = 0; k < steps; ++k) {
      StepCache cache;
      cache.x = inputs(k, tokens, batch);
      cache.h_prev = std::move(h);
      cache.c_prev = std::move(c);
      cell(k, cache);
      cache.allowed.resize(static_cast<std::size_t>(batch));
      for (Index b = 0; b < batch; ++b) {
        auto& allowed = cache.allowed[static_cast<std::size_t>(b)];
        if (space) {
          space->mask(k, tokens[static_cast<std::size_t>(b)], allowed);
        } else {
          allowed = masks[static_cast<std::size_t>(b)][k];
        }
      }
      distribution(cache);
      if (rng) {
        for (Index b = 0; b < batch; ++b) {
          auto& seq = tokens[static_cast<std::size_t>(b)];
          seq.push_back(draw(cache, b, *rng));
          if (logps) {
            (*logps)[static_cast<std::size_t>(b)].push_back(
                cache.logprobs(static_cast<Index>(seq.back()), b));
          }
          masks[static_cast<std::size_t>(b)].push_back(cache.allowed[static_cast<std::size_t>(b)]);
        }
      }
      h = cache.h;
      c = cache.c;
      if (keep) {
        caches_.push_back(std::move(cache));
      } else {
        last_ = std::move(cache);
      }
    }
  }

  std::vector<StepCache>& caches() { return caches_; }
  const StepCache& last() const { return last_; }

 private:
  static std::size_t draw(const StepCache& cache, Index b, RngStream& rng) {
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t chosen = 0;
    bool any = false;
    for (Index j = 0; j < cache.probs.rows(); ++j) {
      if (!cache.allowed[static_cast<std::size_t>(b)][static_cast<std::size_t>(j)]) continue;
      chosen = static_cast<std::size_t>(j);
      any = true;
      acc += cache.probs(j, b);
      if (u < acc) return chosen;
    }
    if (!any) throw EmptySupport("no allowed token");
    return chosen;  // rounding: the last allowed token
  }

  const ControllerPolicy& policy_;
  Index H_;
  Index E_;
  mutable MatrixXd logits_;
  std::vector<StepCache> caches_;
  StepCache last_;
};

double column_entropy(const StepCache& cache, Index b) {
  double h = 0.0;
  for (Index j = 0; j < cache.probs.rows(); ++j) {
    const double p = cache.probs(j, b);
    if (p > 0.0) h -= p * cache.logprobs(j, b);
  }
  return h;
}

void write_vector(std::ostream& out, const char* name, const VectorXd& v) {
  out << name << ' ' << v.size() << '\n';
  out << std::hexfloat;
  for (Index i = 0; i < v.size(); ++i) out << v(i) << (i + 1 == v.size() ? "" : " ");
  out << std::defaultfloat << '\n';
}

std::string expect_word(std::istream& in, const char* word) {
  std::string got;
  if (!(in >> got) || got != word) {
    throw ConfigError(std::string("checkpoint: expected '") + word + "', got '" + got + "'");
  }
  return got;
}

double read_double(std::istream& in) {
  std::string text;
  if (!(in >> text)) throw ConfigError("checkpoint: truncated");
  char* end = nullptr;
  const double value = std::strtod(text.c_str(), &end);
  if (end == text.c_str() || *end != '\0') throw ConfigError("checkpoint: bad number '" + text + "'");
  return value;
}

VectorXd read_vector(std::istream& in, const char* name) {
  expect_word(in, name);
  Index n = 0;
  if (!(in >> n) || n < 0) throw ConfigError("checkpoint: bad length");
  VectorXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = read_double(in);
  return v;
}

}  // namespace

void PpoConfig::check() const {
  if (!(clip > 0.0 && clip < 1.0)) throw InvalidSpec("ppo clip must lie in (0, 1)");
  if (!(entropy_coef >= 0.0)) throw InvalidSpec("entropy coefficient must be >= 0");
  if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) {
    throw InvalidSpec("baseline decay must lie in [0, 1)");
  }
  if (!(learning_rate > 0.0)) throw InvalidSpec("policy learning rate must be positive");
  if (epochs == 0) throw InvalidSpec("ppo epochs must be positive");
  if (batch_size == 0) throw InvalidSpec("ppo batch size must be positive");
}

double Trajectory::logp() const { return std::accumulate(logps.begin(), logps.end(), 0.0); }

ControllerPolicy::ControllerPolicy(std::vector<std::size_t> vocab_sizes, ControllerConfig config,
                                   std::uint64_t seed)
    : vocab_(std::move(vocab_sizes)), config_(config) {
  if (vocab_.empty()) throw InvalidSpec("controller needs at least one step");
  if (config_.hidden_size == 0 || config_.embedding_size == 0) {
    throw InvalidSpec("controller sizes must be positive");
  }
  for (std::size_t v : vocab_) {
    if (v == 0) throw EmptySupport("empty step vocabulary");
  }
  const std::size_t H = config_.hidden_size;
  const std::size_t E = config_.embedding_size;
  std::size_t off = 0;
  layout_.start = off;
  off += E;
  layout_.embedding.assign(vocab_.size(), 0);
  for (std::size_t k = 1; k < vocab_.size(); ++k) {
    layout_.embedding[k] = off;
    off += E * vocab_[k - 1];
  }
  layout_.w = off;
  off += 4 * H * (E + H);
  layout_.b = off;
  off += 4 * H;
  for (std::size_t v : vocab_) {
    layout_.proj.push_back(off);
    off += v * H;
    layout_.proj_bias.push_back(off);
    off += v;
  }
  layout_.total = off;

  theta_.resize(static_cast<Index>(off));
  RngStream rng(seed, "controller-init");
  for (Index i = 0; i < theta_.size(); ++i) {
    theta_(i) = config_.init_scale * (2.0 * rng.uniform() - 1.0);
  }
  adam_m = VectorXd::Zero(theta_.size());
  adam_v = VectorXd::Zero(theta_.size());
}

double ControllerPolicy::sequence_logp(std::span<const std::size_t> tokens,
                                       const ActionSpace& space) const {
  double total = 0.0;
  // Teacher forcing one token at a time keeps masks tied to the prefix.
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    const StepDistribution d = step_logits(*this, tokens.subspan(0, k), space);
    if (!d.allowed.at(tokens[k])) return -std::numeric_limits<double>::infinity();
    total += std::log(d.probs(static_cast<Index>(tokens[k])));
  }
  return total;
}

void ControllerPolicy::save(std::ostream& out) const {
  out << kCheckpointMagic << " v" << kCheckpointVersion << '\n';
  out << "vocab " << vocab_.size();
  for (std::size_t v : vocab_) out << ' ' << v;
  out << '\n';
  out << "hidden " << config_.hidden_size << " embedding " << config_.embedding_size
      << " init_scale " << std::hexfloat << config_.init_scale << std::defaultfloat << '\n';
  out << "adam_t " << adam_t << '\n';
  out << "baseline " << (baseline.initialized ? 1 : 0) << ' ' << std::hexfloat << baseline.value
      << std::defaultfloat << '\n';
  out << "samples_done " << samples_done << '\n';
  write_vector(out, "theta", theta_);
  write_vector(out, "adam_m", adam_m);
  write_vector(out, "adam_v", adam_v);
  out << "end\n";
}

ControllerPolicy ControllerPolicy::load(std::istream& in) {
  std::string magic, version;
  if (!(in >> magic >> version) || magic != kCheckpointMagic) {
    throw ConfigError("not a controller checkpoint");
  }
  if (version != "v" + std::to_string(kCheckpointVersion)) {
    throw ConfigError("unsupported checkpoint version " + version);
  }
  expect_word(in, "vocab");
  std::size_t n = 0;
  in >> n;
  std::vector<std::size_t> vocab(n);
  for (auto& v : vocab) in >> v;
  ControllerConfig config;
  expect_word(in, "hidden");
  in >> config.hidden_size;
  expect_word(in, "embedding");
  in >> config.embedding_size;
  expect_word(in, "init_scale");
  config.init_scale = read_double(in);
  if (!in) throw ConfigError("checkpoint: bad header");

  ControllerPolicy policy(vocab, config, 0);
  expect_word(in, "adam_t");
  in >> policy.adam_t;
  expect_word(in, "baseline");
  int init = 0;
  in >> init;
  policy.baseline.initialized = init != 0;
  policy.baseline.value = read_double(in);
  expect_word(in, "samples_done");
  in >> policy.samples_done;
  policy.theta_ = read_vector(in, "theta");
  policy.adam_m = read_vector(in, "adam_m");
  policy.adam_v = read_vector(in, "adam_v");
  expect_word(in, "end");
  const auto total = static_cast<Index>(policy.layout_.total);
  if (policy.theta_.size() != total || policy.adam_m.size() != total ||
      policy.adam_v.size() != total) {
    throw ConfigError("checkpoint: parameter count does not match its layout");
  }
  return policy;
}

StepDistribution step_logits(const ControllerPolicy& policy, std::span<const std::size_t> prefix,
                             const ActionSpace& space) {
  if (prefix.size() >= policy.length()) throw InvalidSpec("prefix already complete");
  std::vector<std::vector<std::size_t>> tokens{{prefix.begin(), prefix.end()}};
  std::vector<std::vector<std::vector<char>>> masks(1);
  for (std::size_t k = 0; k < prefix.size(); ++k) {
    std::vector<char> allowed;
    space.mask(k, prefix.subspan(0, k), allowed);
    masks[0].push_back(std::move(allowed));
  }
  std::vector<char> allowed;
  space.mask(prefix.size(), prefix, allowed);
  masks[0].push_back(allowed);

  Rollout rollout(policy);
  rollout.run(prefix.size() + 1, 1, tokens, masks, nullptr, nullptr, false);
  StepDistribution d;
  d.logits = rollout.logits().col(0);
  d.allowed = std::move(allowed);
  d.probs = rollout.last().probs.col(0);
  return d;
}

std::vector<Trajectory> sample_batch(const ControllerPolicy& policy, std::size_t batch_size,
                                     const ActionSpace& space, RngStream& rng) {
  if (space.vocab_sizes() != policy.vocab_sizes()) {
    throw InvalidSpec("policy and action space vocabularies differ");
  }
  // Chunked so memory stays bounded; the chunk size is fixed, so the draws
  // are still a function of (rng, batch_size) only.
  constexpr std::size_t kChunk = 1024;
  std::vector<Trajectory> out;
  out.reserve(batch_size);
  for (std::size_t done = 0; done < batch_size; done += kChunk) {
    const std::size_t n = std::min(kChunk, batch_size - done);
    std::vector<std::vector<std::size_t>> tokens(n);
    std::vector<std::vector<std::vector<char>>> masks(n);
    std::vector<std::vector<double>> logps(n);
    Rollout rollout(policy);
    rollout.run(policy.length(), static_cast<Index>(n), tokens, masks, &space, &rng, false, &logps);
    for (std::size_t b = 0; b < n; ++b) {
      Trajectory t;
      t.tokens = std::move(tokens[b]);
      t.masks = std::move(masks[b]);
      t.logps = std::move(logps[b]);
      out.push_back(std::move(t));
    }
  }
  return out;
}

std::vector<double> batch_logps(const ControllerPolicy& policy,
                                std::span<const Trajectory> batch) {
  std::vector<double> out(batch.size());
  std::vector<std::vector<std::size_t>> tokens;
  std::vector<std::vector<std::vector<char>>> masks;
  for (const auto& t : batch) {
    tokens.push_back(t.tokens);
    masks.push_back(t.masks);
  }
  Rollout rollout(policy);
  rollout.run(policy.length(), static_cast<Index>(batch.size()), tokens, masks, nullptr, nullptr,
              true);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    double lp = 0.0;
    for (std::size_t k = 0; k < policy.length(); ++k) {
      lp += rollout.caches()[k].logprobs(static_cast<Index>(tokens[b][k]), static_cast<Index>(b));
    }
    out[b] = lp;
  }
  return out;
}

double ppo_objective(const ControllerPolicy& policy, std::span<const Trajectory> batch,
                     std::span<const double> old_logps, std::span<const double> advantages,
                     const PpoConfig& config, VectorXd* grad, double* entropy_out) {
  const std::size_t B = batch.size();
  if (B == 0) throw InvalidSpec("empty PPO batch");
  const std::size_t L = policy.length();
  std::vector<std::vector<std::size_t>> tokens;
  std::vector<std::vector<std::vector<char>>> masks;
  for (const auto& t : batch) {
    if (t.tokens.size() != L || t.masks.size() != L) {
      throw InvalidSpec("trajectory length does not match the policy");
    }
    tokens.push_back(t.tokens);
    masks.push_back(t.masks);
  }
  Rollout rollout(policy);
  rollout.run(L, static_cast<Index>(B), tokens, masks, nullptr, nullptr, true);
  auto& caches = rollout.caches();

  const double inv_b = 1.0 / double(B);
  double objective = 0.0;
  double entropy_total = 0.0;
  std::vector<double> coef(B);  // d surrogate_b / d logp_b
  for (std::size_t b = 0; b < B; ++b) {
    double lp = 0.0;
    for (std::size_t k = 0; k < L; ++k) {
      lp += caches[k].logprobs(static_cast<Index>(tokens[b][k]), static_cast<Index>(b));
      entropy_total += column_entropy(caches[k], static_cast<Index>(b));
    }
    const double ratio = std::exp(lp - old_logps[b]);
    const double a = advantages[b];
    const double unclipped = ratio * a;
    const double clipped = std::clamp(ratio, 1.0 - config.clip, 1.0 + config.clip) * a;
    objective += std::min(unclipped, clipped) * inv_b;
    coef[b] = unclipped <= clipped ? unclipped : 0.0;
  }
  objective += config.entropy_coef * entropy_total * inv_b;
  if (entropy_out) *entropy_out = entropy_total * inv_b;
  if (!grad) return objective;

  const auto& lay = policy.layout();
  const Index H = static_cast<Index>(policy.config().hidden_size);
  const Index E = static_cast<Index>(policy.config().embedding_size);
  const double* th = policy.theta().data();
  grad->setZero(policy.theta().size());
  double* gd = grad->data();
  const ConstMap w(th + lay.w, 4 * H, E + H);
  MutMap gw(gd + lay.w, 4 * H, E + H);
  MutVecMap gb(gd + lay.b, 4 * H);

  MatrixXd dh_next = MatrixXd::Zero(H, static_cast<Index>(B));
  MatrixXd dc_next = MatrixXd::Zero(H, static_cast<Index>(B));
  for (std::size_t kk = L; kk-- > 0;) {
    StepCache& cache = caches[kk];
    const Index V = static_cast<Index>(policy.vocab_sizes()[kk]);
    MatrixXd dlogits = MatrixXd::Zero(V, static_cast<Index>(B));
    for (std::size_t b = 0; b < B; ++b) {
      const Index bi = static_cast<Index>(b);
      const double h = column_entropy(cache, bi);
      for (Index j = 0; j < V; ++j) {
        const double p = cache.probs(j, bi);
        if (p == 0.0) continue;  // masked: no gradient
        const double onehot = static_cast<std::size_t>(j) == tokens[b][kk] ? 1.0 : 0.0;
        dlogits(j, bi) = inv_b * (coef[b] * (onehot - p) -
                                  config.entropy_coef * p * (cache.logprobs(j, bi) + h));
      }
    }
    const ConstMap proj(th + lay.proj[kk], V, H);
    MutMap gproj(gd + lay.proj[kk], V, H);
    MutVecMap gpb(gd + lay.proj_bias[kk], V);
    gproj.noalias() += dlogits * cache.h.transpose();
    gpb += dlogits.rowwise().sum();

    MatrixXd dh = proj.transpose() * dlogits + dh_next;
    const MatrixXd d_o = dh.cwiseProduct(cache.tc);
    const MatrixXd dc =
        dh.cwiseProduct(cache.o).cwiseProduct((1.0 - cache.tc.array().square()).matrix()) +
        dc_next;
    const MatrixXd di = dc.cwiseProduct(cache.g);
    const MatrixXd dg = dc.cwiseProduct(cache.i);
    const MatrixXd df = dc.cwiseProduct(cache.c_prev);
    dc_next = dc.cwiseProduct(cache.f);

    MatrixXd dz(4 * H, static_cast<Index>(B));
    dz.topRows(H) = (di.array() * cache.i.array() * (1.0 - cache.i.array())).matrix();
    dz.middleRows(H, H) = (df.array() * cache.f.array() * (1.0 - cache.f.array())).matrix();
    dz.middleRows(2 * H, H) = (dg.array() * (1.0 - cache.g.array().square())).matrix();
    dz.bottomRows(H) = (d_o.array() * cache.o.array() * (1.0 - cache.o.array())).matrix();

    gw.leftCols(E).noalias() += dz * cache.x.transpose();
    gw.rightCols(H).noalias() += dz * cache.h_prev.transpose();
    gb += dz.rowwise().sum();
    const MatrixXd dx = w.leftCols(E).transpose() * dz;
    dh_next = w.rightCols(H).transpose() * dz;

    if (kk == 0) {
      MutVecMap gstart(gd + lay.start, E);
      gstart += dx.rowwise().sum();
    } else {
      MutMap gemb(gd + lay.embedding[kk], E, static_cast<Index>(policy.vocab_sizes()[kk - 1]));
      for (std::size_t b = 0; b < B; ++b) {
        gemb.col(static_cast<Index>(tokens[b][kk - 1])) += dx.col(static_cast<Index>(b));
      }
    }
  }
  return objective;
}

PpoStats ppo_update(ControllerPolicy& policy, std::span<const Trajectory> batch,
                    Baseline& baseline, const PpoConfig& config) {
  config.check();
  if (batch.empty()) throw InvalidSpec("empty PPO batch");
  PpoStats stats;
  for (const auto& t : batch) stats.mean_reward += t.reward;
  stats.mean_reward /= double(batch.size());
  if (!baseline.initialized) {
    baseline.value = stats.mean_reward;
    baseline.initialized = true;
  }
  stats.baseline = baseline.value;

  // Old log-probabilities under the parameters at entry, so the first
  // epoch starts from ratio exactly 1.
  const std::vector<double> old = batch_logps(policy, batch);
  std::vector<double> adv(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) adv[b] = batch[b].reward - baseline.value;

  const VectorXd theta0 = policy.theta();
  const VectorXd m0 = policy.adam_m;
  const VectorXd v0 = policy.adam_v;
  const std::int64_t t0 = policy.adam_t;
  auto restore = [&] {
    policy.theta() = theta0;
    policy.adam_m = m0;
    policy.adam_v = v0;
    policy.adam_t = t0;
  };

  VectorXd grad;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double ent = 0.0;
    const double obj = ppo_objective(policy, batch, old, adv, config, &grad, &ent);
    if (epoch == 0) {
      stats.surrogate = obj - config.entropy_coef * ent;
      stats.entropy = ent;
    }
    if (!grad.allFinite() || !std::isfinite(obj)) {
      restore();
      throw NonFiniteGradient("non-finite policy gradient");
    }
    ++policy.adam_t;
    const double b1 = config.adam_beta1;
    const double b2 = config.adam_beta2;
    policy.adam_m = b1 * policy.adam_m + (1.0 - b1) * grad;
    policy.adam_v = b2 * policy.adam_v + (1.0 - b2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1, double(policy.adam_t));
    const double c2 = 1.0 - std::pow(b2, double(policy.adam_t));
    // Ascent on the objective.
    policy.theta().array() += config.learning_rate * (policy.adam_m.array() / c1) /
                              ((policy.adam_v.array() / c2).sqrt() + config.adam_eps);
    if (!policy.theta().allFinite()) {
      restore();
      throw NonFiniteGradient("policy parameters became non-finite");
    }
  }

  const std::vector<double> fresh = batch_logps(policy, batch);
  for (std::size_t b = 0; b < batch.size(); ++b) stats.kl += (old[b] - fresh[b]);
  stats.kl /= double(batch.size());

  baseline.value = config.baseline_decay * baseline.value +
                   (1.0 - config.baseline_decay) * stats.mean_reward;
  policy.samples_done += batch.size();
  return stats;
}

double entropy(const ControllerPolicy& policy, const ActionSpace& space, std::size_t budget,
               RngStream& rng) {
  if (budget == 0) return 0.0;
  constexpr std::size_t kChunk = 1000;
  double total = 0.0;
  for (std::size_t done = 0; done < budget; done += kChunk) {
    const std::size_t n = std::min(kChunk, budget - done);
    std::vector<std::vector<std::size_t>> tokens(n);
    std::vector<std::vector<std::vector<char>>> masks(n);
    Rollout rollout(policy);
    rollout.run(policy.length(), static_cast<Index>(n), tokens, masks, &space, &rng, true);
    for (const auto& cache : rollout.caches()) {
      for (std::size_t b = 0; b < n; ++b) total += column_entropy(cache, static_cast<Index>(b));
    }
  }
  return total / double(budget);
}

double uniform_entropy(const ActionSpace& space) {
  double h = 0.0;
  for (std::size_t k = 0; k < space.length(); ++k) h += std::log(double(space.vocab_size(k)));
  return h;
}

}  // namespace optsearch
