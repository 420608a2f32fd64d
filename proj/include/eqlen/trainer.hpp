#pragma once

/**
 * The outer loop: rollout -> reward -> loss -> update, with a metrics row
 * per step, for every algorithm variant and ablation flag.
 *
 * Determinism: step `s` rolls out with derive_seed(config.seed, s), each
 * question keyed by its own id inside the rollout engines, so reruns of a
 * config are bitwise-identical regardless of the worker count (workers only
 * parallelize the per-question rollouts; reduction order stays sequential
 * over the question list).
 *
 * The algorithm choice pins the advantage family (the config's family field
 * is overridden): grpo -> group-normalized, dr_grpo -> centered-only,
 * rloo -> leave-one-out, and likewise for the equal-length variants.
 *
 * Compute matching: compare_arms trains arm A for its configured step count,
 * then trains arm B until B's cumulative decoded tokens are as close as
 * possible to A's total (one-step granularity, last step dropped when that
 * lands nearer). Decoded tokens are the hardware-independent cost unit.
 */

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <eqlen/core.hpp>
#include <eqlen/optim.hpp>
#include <eqlen/policy.hpp>
#include <eqlen/reward.hpp>
#include <eqlen/rng.hpp>
#include <eqlen/rollout.hpp>

namespace eqlen::trainer {

inline constexpr int kSchemaVersion = 1;

enum class Algorithm { grpo, dr_grpo, rloo, eqlen_grpo, eqlen_rloo };

NLOHMANN_JSON_SERIALIZE_ENUM(Algorithm, {
    {Algorithm::grpo, "grpo"},
    {Algorithm::dr_grpo, "dr_grpo"},
    {Algorithm::rloo, "rloo"},
    {Algorithm::eqlen_grpo, "eqlen_grpo"},
    {Algorithm::eqlen_rloo, "eqlen_rloo"},
})

/** True for the algorithms that roll out dual-track and train on pairs. */
inline bool uses_pairs(Algorithm a) {
  return a == Algorithm::eqlen_grpo || a == Algorithm::eqlen_rloo;
}

struct TrainConfig {
  int schema_version = kSchemaVersion;
  Algorithm algorithm = Algorithm::eqlen_grpo;
  Vocab vocab{16, 0};
  // Order-1 tables share one row per previous token; higher orders split
  // the same reward signal across exponentially more contexts and need far
  // longer runs before anything visible happens.
  std::int32_t policy_order = 1;
  rollout::RolloutConfig rollout;
  optim::AdvantageSpec advantage;
  // The loss averages over questions, subgroups, pairs, and tokens, so a
  // single logit coordinate sees ~1e-4-scale gradients; the stock step
  // size compensates (clipping and the finiteness guards bound each step).
  double lr = 20.0;
  std::int64_t steps = 100;
  std::int64_t epochs_per_rollout = 1;
  reward::RewardAggregation aggregation = reward::RewardAggregation::max;
  bool prefix_in_gradient = false;  // ablation; ignored by non-pair algorithms
  std::uint64_t seed = 7;

  void validate() const {
    if (schema_version != kSchemaVersion)
      throw std::invalid_argument("train.schema_version unsupported (expected 1)");
    vocab.validate();
    if (policy_order < 1) throw std::invalid_argument("train.policy_order must be >= 1");
    rollout.validate(uses_pairs(algorithm));
    advantage.validate();
    if (!(lr > 0.0) || !std::isfinite(lr))
      throw std::invalid_argument("train.lr must be positive and finite");
    if (steps < 0) throw std::invalid_argument("train.steps must be >= 0");
    if (epochs_per_rollout < 1)
      throw std::invalid_argument("train.epochs_per_rollout must be >= 1");
  }

  bool operator==(const TrainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"schema_version", c.schema_version},
       {"algorithm", c.algorithm},
       {"vocab", c.vocab},
       {"policy_order", c.policy_order},
       {"rollout", c.rollout},
       {"advantage", c.advantage},
       {"lr", c.lr},
       {"steps", c.steps},
       {"epochs_per_rollout", c.epochs_per_rollout},
       {"aggregation", c.aggregation},
       {"prefix_in_gradient", c.prefix_in_gradient},
       {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("schema_version").get_to(c.schema_version);
  j.at("algorithm").get_to(c.algorithm);
  j.at("vocab").get_to(c.vocab);
  j.at("policy_order").get_to(c.policy_order);
  j.at("rollout").get_to(c.rollout);
  j.at("advantage").get_to(c.advantage);
  j.at("lr").get_to(c.lr);
  j.at("steps").get_to(c.steps);
  j.at("epochs_per_rollout").get_to(c.epochs_per_rollout);
  j.at("aggregation").get_to(c.aggregation);
  j.at("prefix_in_gradient").get_to(c.prefix_in_gradient);
  j.at("seed").get_to(c.seed);
}

// ===== Metrics =====

struct MetricsRow {
  std::int64_t step = 0;
  double mean_reward = 0.0;       // over scored responses of this step's rollouts
  double loss = 0.0;              // first-epoch (on-rollout) objective value
  double grad_norm = 0.0;         // first-epoch gradient 2-norm
  std::int64_t pairs_harvested = 0;
  std::int64_t pairs_skipped = 0;
  std::int64_t trailing_tokens = 0;
  std::int64_t effective_samples = 0;
  std::int64_t tokens_decoded = 0;
  double entropy = 0.0;           // rollout policy, averaged over question contexts

  bool operator==(const MetricsRow&) const = default;
};

inline void to_json(nlohmann::json& j, const MetricsRow& r) {
  j = {{"step", r.step},
       {"mean_reward", r.mean_reward},
       {"loss", r.loss},
       {"grad_norm", r.grad_norm},
       {"pairs_harvested", r.pairs_harvested},
       {"pairs_skipped", r.pairs_skipped},
       {"trailing_tokens", r.trailing_tokens},
       {"effective_samples", r.effective_samples},
       {"tokens_decoded", r.tokens_decoded},
       {"entropy", r.entropy}};
}
inline void from_json(const nlohmann::json& j, MetricsRow& r) {
  j.at("step").get_to(r.step);
  j.at("mean_reward").get_to(r.mean_reward);
  j.at("loss").get_to(r.loss);
  j.at("grad_norm").get_to(r.grad_norm);
  j.at("pairs_harvested").get_to(r.pairs_harvested);
  j.at("pairs_skipped").get_to(r.pairs_skipped);
  j.at("trailing_tokens").get_to(r.trailing_tokens);
  j.at("effective_samples").get_to(r.effective_samples);
  j.at("tokens_decoded").get_to(r.tokens_decoded);
  j.at("entropy").get_to(r.entropy);
}

inline const char* metrics_csv_header() {
  return "step,mean_reward,loss,grad_norm,pairs_harvested,pairs_skipped,"
         "trailing_tokens,effective_samples,tokens_decoded,entropy";
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = metrics_csv_header();
  out += '\n';
  for (const MetricsRow& r : rows) {
    out += std::to_string(r.step);
    out += ',';
    out += eqlen::detail::fmt_double(r.mean_reward);
    out += ',';
    out += eqlen::detail::fmt_double(r.loss);
    out += ',';
    out += eqlen::detail::fmt_double(r.grad_norm);
    out += ',';
    out += std::to_string(r.pairs_harvested);
    out += ',';
    out += std::to_string(r.pairs_skipped);
    out += ',';
    out += std::to_string(r.trailing_tokens);
    out += ',';
    out += std::to_string(r.effective_samples);
    out += ',';
    out += std::to_string(r.tokens_decoded);
    out += ',';
    out += eqlen::detail::fmt_double(r.entropy);
    out += '\n';
  }
  return out;
}

inline std::string metrics_jsonl(const std::vector<MetricsRow>& rows) {
  std::string out;
  for (const MetricsRow& r : rows) {
    out += nlohmann::json(r).dump();
    out += '\n';
  }
  return out;
}

// ===== Failure reporting =====

/**
 * Non-finite loss or gradient: carries the offending rollout for the dump
 * plus the metrics of the steps that completed before the abort.
 */
class TrainAbortError : public std::runtime_error {
 public:
  TrainAbortError(std::string message, nlohmann::json diagnostic,
                  std::vector<MetricsRow> partial = {})
      : std::runtime_error(std::move(message)),
        diagnostic_(std::move(diagnostic)),
        partial_metrics_(std::move(partial)) {}
  const nlohmann::json& diagnostic() const { return diagnostic_; }
  const std::vector<MetricsRow>& partial_metrics() const { return partial_metrics_; }

 private:
  nlohmann::json diagnostic_;
  std::vector<MetricsRow> partial_metrics_;
};

// ===== Question sets and starting policies =====

/** All-zero logits: the uniform starting policy over `vocab`. */
inline PolicyTable uniform_policy(const Vocab& vocab, std::int32_t order) {
  PolicyTable p;
  p.order = order;
  p.default_logits.assign(static_cast<std::size_t>(vocab.size), 0.0);
  p.validate();
  return p;
}

/**
 * The default task set: `count` answer-match questions with one- or
 * two-token prompts and uniformly drawn non-EOS targets, giving a varied
 * EOS-timing distribution to exercise harvesting.
 */
inline std::vector<Question> make_questions(std::int64_t count = 32,
                                            const Vocab& vocab = Vocab{16, 0},
                                            std::uint64_t seed = 11) {
  if (count < 1) throw std::invalid_argument("make_questions count must be >= 1");
  vocab.validate();
  if (vocab.size < 3)
    throw std::invalid_argument("make_questions needs at least two non-EOS tokens");
  rng::Stream stream{seed, 4, 0, 0, 0};
  const auto non_eos = [&]() -> TokenId {
    const std::int64_t draw = stream.next_below(vocab.size - 1);
    const TokenId t = static_cast<TokenId>(draw);
    return t >= vocab.eos_id ? t + 1 : t;  // skip over the EOS id
  };
  std::vector<Question> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    Question q;
    q.question_id = i + 1;
    q.prompt_tokens.push_back(non_eos());
    if (stream.next_unit() < 0.5) q.prompt_tokens.push_back(non_eos());
    q.target_token = non_eos();
    out.push_back(std::move(q));
  }
  return out;
}

// ===== The loop =====

struct TrainResult {
  PolicyTable policy;
  std::vector<MetricsRow> metrics;
};

namespace detail {

/** The algorithm's advantage family overrides whatever the config carried. */
inline optim::AdvantageSpec spec_for(const TrainConfig& config) {
  optim::AdvantageSpec spec = config.advantage;
  switch (config.algorithm) {
    case Algorithm::grpo:
    case Algorithm::eqlen_grpo:
      spec.family = optim::AdvantageFamily::grpo_norm;
      break;
    case Algorithm::dr_grpo:
      spec.family = optim::AdvantageFamily::dr_grpo;
      break;
    case Algorithm::rloo:
    case Algorithm::eqlen_rloo:
      spec.family = optim::AdvantageFamily::rloo;
      break;
  }
  return spec;
}

inline optim::LossResult loss_for(const TrainConfig& config, const PolicyTable& policy,
                                  const PolicyTable& old_policy, const GroupRollout& rollout,
                                  const Question& question, const optim::AdvantageSpec& spec) {
  switch (config.algorithm) {
    case Algorithm::eqlen_grpo:
      return optim::loss_eqlen_total(policy, old_policy, rollout, question, spec,
                                     config.prefix_in_gradient);
    case Algorithm::eqlen_rloo:
      return optim::loss_eqlen_rloo(policy, old_policy, rollout, question, spec,
                                    config.prefix_in_gradient);
    default:
      return optim::loss_grpo(policy, old_policy, rollout, question, spec);
  }
}

/** Map fn over [0, n) on `threads` workers; results land by index. */
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  for (std::thread& t : pool) t.join();
}

/**
 * Shared body of train/compare_arms. Runs at most `max_steps` steps; when
 * `token_target` is nonnegative, stops at the step count whose cumulative
 * decoded tokens land nearest the target (the final step is rolled back
 * when overshooting by more than the previous undershoot).
 */
inline TrainResult train_loop(const TrainConfig& config, const std::vector<Question>& questions,
                              const reward::Verifier& verifier, const PolicyTable& start,
                              std::int64_t max_steps, std::int64_t token_target, int threads) {
  config.validate();
  if (questions.empty()) throw std::invalid_argument("train requires a nonempty question set");
  for (const Question& q : questions)
    for (TokenId t : q.prompt_tokens)
      if (!config.vocab.contains(t))
        throw std::invalid_argument("train question prompt token outside the vocabulary");

  const optim::AdvantageSpec spec = spec_for(config);
  const bool dual = uses_pairs(config.algorithm);
  const std::size_t num_q = questions.size();

  TrainResult result;
  result.policy = start;
  std::int64_t tokens_total = 0;

  for (std::int64_t step = 0; step < max_steps; ++step) {
    const std::uint64_t step_seed = rng::derive_seed(config.seed, static_cast<std::uint64_t>(step));
    const PolicyTable old_policy = result.policy;

    std::vector<GroupRollout> rollouts(num_q);
    parallel_for(num_q, threads, [&](std::size_t i) {
      const Question& q = questions[i];
      if (dual) {
        rollouts[i] = rollout::rollout_dualtrack(old_policy, config.vocab, q, config.rollout,
                                                 step_seed);
        reward::propagate_rewards(rollouts[i], verifier, config.vocab, q, config.aggregation);
      } else {
        rollouts[i] = rollout::rollout_independent(old_policy, config.vocab, q, config.rollout,
                                                   step_seed);
        reward::score_group(rollouts[i], verifier, config.vocab, q);
      }
    });

    MetricsRow row;
    row.step = step;
    double reward_sum = 0.0;
    std::int64_t reward_count = 0;
    for (std::size_t i = 0; i < num_q; ++i) {
      const GroupRollout& r = rollouts[i];
      if (dual) {
        for (const auto& [node, value] : r.tree.leaf_rewards) {
          reward_sum += value;
          ++reward_count;
        }
        row.pairs_harvested += static_cast<std::int64_t>(r.pairs.size());
        for (const SegmentPair& p : r.pairs) row.pairs_skipped += p.skipped ? 1 : 0;
      } else {
        for (const Trajectory& t : r.trajectories) {
          reward_sum += t.reward;
          ++reward_count;
        }
      }
      row.trailing_tokens += rollout::trailing_tokens(r);
      row.effective_samples += rollout::effective_sample_count(r);
      row.tokens_decoded += r.token_budget_used;
    }
    row.mean_reward = reward_count > 0 ? reward_sum / static_cast<double>(reward_count) : 0.0;
    double entropy_sum = 0.0;
    for (const Question& q : questions)
      entropy_sum += policy::entropy(
          old_policy, policy::context_after(old_policy, q.question_id, q.prompt_tokens));
    row.entropy = entropy_sum / static_cast<double>(num_q);

    PolicyTable before_step = result.policy;  // for token-target rollback
    for (std::int64_t epoch = 0; epoch < config.epochs_per_rollout; ++epoch) {
      double loss_sum = 0.0;
      GradientVector grad;
      for (std::size_t i = 0; i < num_q; ++i) {
        const optim::LossResult part =
            loss_for(config, result.policy, old_policy, rollouts[i], questions[i], spec);
        if (!std::isfinite(part.loss) || !part.grad.is_finite())
          throw TrainAbortError(
              "train aborted: non-finite loss at step " + std::to_string(step),
              nlohmann::json{{"step", step},
                             {"epoch", epoch},
                             {"question_id", questions[i].question_id},
                             {"loss", eqlen::detail::fmt_double(part.loss)},
                             {"rollout", rollouts[i]}},
              result.metrics);
        loss_sum += part.loss;
        grad.axpy(1.0, part.grad);
      }
      grad.divide(static_cast<double>(num_q));
      const double loss = loss_sum / static_cast<double>(num_q);
      if (epoch == 0) {
        row.loss = loss;
        row.grad_norm = grad.norm2();
      }
      result.policy = optim::sgd_step(result.policy, grad, config.lr);
    }

    // compute-matched stop: keep the step count whose token total lands nearest
    if (token_target >= 0) {
      const std::int64_t after = tokens_total + row.tokens_decoded;
      if (after >= token_target) {
        if (after - token_target > token_target - tokens_total) {
          result.policy = std::move(before_step);  // previous count was closer
        } else {
          tokens_total = after;
          result.metrics.push_back(row);
        }
        return result;
      }
    }
    tokens_total += row.tokens_decoded;
    result.metrics.push_back(std::move(row));
  }
  return result;
}

}  // namespace detail

/**
 * Run `config.steps` iterations from `start` (default: the uniform policy).
 * Each iteration: roll out with the step policy frozen as pi_old, propagate
 * rewards, then `epochs_per_rollout` gradient steps against that rollout,
 * recomputing the clipped objective after each update. One MetricsRow per
 * step; zero steps returns the starting policy unchanged.
 */
inline TrainResult train(const TrainConfig& config, const std::vector<Question>& questions,
                         const reward::Verifier& verifier, int threads = 1) {
  config.validate();
  return detail::train_loop(config, questions, verifier,
                            uniform_policy(config.vocab, config.policy_order), config.steps,
                            /*token_target=*/-1, threads);
}

inline TrainResult train_from(const TrainConfig& config, const std::vector<Question>& questions,
                              const reward::Verifier& verifier, const PolicyTable& start,
                              int threads = 1) {
  config.validate();
  return detail::train_loop(config, questions, verifier, start, config.steps,
                            /*token_target=*/-1, threads);
}

// ===== Paired comparison =====

struct ArmReport {
  Algorithm algorithm = Algorithm::grpo;
  std::int64_t steps_run = 0;
  double final_mean_reward = 0.0;
  double final_entropy = 0.0;
  std::int64_t effective_samples = 0;  // summed over steps
  std::int64_t tokens_decoded = 0;     // summed over steps
  std::vector<MetricsRow> metrics;
};

inline void to_json(nlohmann::json& j, const ArmReport& a) {
  j = {{"algorithm", a.algorithm},
       {"steps_run", a.steps_run},
       {"final_mean_reward", a.final_mean_reward},
       {"final_entropy", a.final_entropy},
       {"effective_samples", a.effective_samples},
       {"tokens_decoded", a.tokens_decoded},
       {"metrics", a.metrics}};
}

struct CompareReport {
  ArmReport arm_a, arm_b;
  double token_mismatch_rel = 0.0;  // |tokens_a - tokens_b| / tokens_a
};

inline void to_json(nlohmann::json& j, const CompareReport& r) {
  j = {{"arm_a", r.arm_a},
       {"arm_b", r.arm_b},
       {"token_mismatch_rel", r.token_mismatch_rel}};
}

namespace detail {

inline ArmReport summarize(Algorithm algorithm, const TrainResult& result) {
  ArmReport arm;
  arm.algorithm = algorithm;
  arm.steps_run = static_cast<std::int64_t>(result.metrics.size());
  for (const MetricsRow& r : result.metrics) {
    arm.effective_samples += r.effective_samples;
    arm.tokens_decoded += r.tokens_decoded;
  }
  if (!result.metrics.empty()) {
    arm.final_mean_reward = result.metrics.back().mean_reward;
    arm.final_entropy = result.metrics.back().entropy;
  }
  arm.metrics = result.metrics;
  return arm;
}

}  // namespace detail

/**
 * Compute-matched two-arm comparison. Arm A runs its configured steps; arm B
 * then runs until its cumulative decoded tokens land nearest A's total (so
 * identical configs run identical steps). Both configs must share the seed
 * and the per-rollout token budget.
 */
inline CompareReport compare_arms(const TrainConfig& config_a, const TrainConfig& config_b,
                                  const std::vector<Question>& questions,
                                  const reward::Verifier& verifier, int threads = 1) {
  config_a.validate();
  config_b.validate();
  if (config_a.seed != config_b.seed)
    throw std::invalid_argument("compare_arms requires both configs to share a seed");
  if (config_a.rollout.effective_budget() != config_b.rollout.effective_budget())
    throw std::invalid_argument(
        "compare_arms requires both configs to share a per-rollout token budget");

  const TrainResult a =
      detail::train_loop(config_a, questions, verifier,
                         uniform_policy(config_a.vocab, config_a.policy_order), config_a.steps,
                         /*token_target=*/-1, threads);
  std::int64_t target = 0;
  for (const MetricsRow& r : a.metrics) target += r.tokens_decoded;

  // generous step cap: the matcher stops on tokens, this only bounds runaway
  const std::int64_t cap = std::max<std::int64_t>(4 * std::max(config_a.steps, config_b.steps), 8);
  const TrainResult b =
      detail::train_loop(config_b, questions, verifier,
                         uniform_policy(config_b.vocab, config_b.policy_order), cap, target,
                         threads);

  CompareReport report;
  report.arm_a = detail::summarize(config_a.algorithm, a);
  report.arm_b = detail::summarize(config_b.algorithm, b);
  if (report.arm_a.tokens_decoded > 0)
    report.token_mismatch_rel =
        std::fabs(static_cast<double>(report.arm_a.tokens_decoded) -
                  static_cast<double>(report.arm_b.tokens_decoded)) /
        static_cast<double>(report.arm_a.tokens_decoded);
  return report;
}

/** EQLEN_THREADS caps the rollout worker count; unset or invalid -> 1. */
inline int env_thread_cap() {
  const char* raw = std::getenv("EQLEN_THREADS");
  if (raw == nullptr) return 1;
  const long value = std::strtol(raw, nullptr, 10);
  if (value < 1) return 1;
  if (value > 256) return 256;
  return static_cast<int>(value);
}

}  // namespace eqlen::trainer
