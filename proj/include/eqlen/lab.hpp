#pragma once

/**
 * The numerical laboratory: executable reproductions of the two analytic
 * results and the sample-efficiency accounting.
 *
 * Proposition 1 (prefix suppression): a canonical question has three
 * responses — A1 (short, correct), B1+A2 (incorrect), and B1+B2+A3 (long,
 * correct) — with |A1| = |B1| and |A2| = |B2|. Group-normalized training on
 * the pairing (A1, B1+A2) pushes every token of B1 down although B1 also
 * prefixes a correct response; the equal-length pairing scores B1 by the
 * best of its extensions, skips the tied first pair, and masks the
 * inherited prefix, so B1's coordinates receive exactly zero gradient.
 *
 * Proposition 2 (the learning tax): when the two pairings alternate with
 * probabilities (p, 1-p), B1's gradient is +-v scaled by the responses'
 * lengths. At p = L- / (L- + L+) the mean is exactly zero while the
 * per-step variance stays positive, so the parameter drift is an unbiased
 * random walk with RMS growth ~ sqrt(T). Both pairing events move along
 * the same vector v, so the simulation tracks the scalar coefficient and
 * scales by ||v|| at the end.
 *
 * Efficiency: recorded reference counts (8,520 baseline effective samples
 * vs 51,456 equal-length samples per 48.0 compute units) plus a simulated
 * two-arm comparison under matched decoded-token budgets.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <eqlen/core.hpp>
#include <eqlen/optim.hpp>
#include <eqlen/policy.hpp>
#include <eqlen/reward.hpp>
#include <eqlen/rng.hpp>
#include <eqlen/rollout.hpp>

namespace eqlen::lab {

// ===== Proposition 1 =====

/**
 * The canonical three-response construction. The segment lengths satisfy
 * |a1| = |b1| and |a2| = |b2| (the equal-length harvests), a1/a2/a3 end in
 * EOS, and b1/b2 are EOS-free survivor segments.
 */
struct Prop1Instance {
  Vocab vocab{8, 0};
  PolicyTable policy;   // must give every response nonzero probability
  Question question;    // target read by the answer-match verifier
  reward::Verifier verifier{reward::VerifierKind::answer_match};
  std::vector<TokenId> a1, b1, a2, b2, a3;

  void validate() const {
    vocab.validate();
    policy.validate();
    if (policy.vocab_size() != static_cast<std::size_t>(vocab.size))
      throw std::invalid_argument("Prop1Instance policy width differs from vocab");
    if (a1.empty() || a1.size() != b1.size())
      throw std::invalid_argument("Prop1Instance requires |a1| = |b1| > 0");
    if (a2.empty() || a2.size() != b2.size())
      throw std::invalid_argument("Prop1Instance requires |a2| = |b2| > 0");
    if (a3.empty()) throw std::invalid_argument("Prop1Instance requires a nonempty a3");
    for (const auto* seg : {&a1, &a2, &a3})
      if (seg->back() != vocab.eos_id)
        throw std::invalid_argument("Prop1Instance terminated segments must end in EOS");
    for (const auto* seg : {&b1, &b2})
      for (TokenId t : *seg)
        if (t == vocab.eos_id)
          throw std::invalid_argument("Prop1Instance survivor segments must be EOS-free");
  }

  /** Sizes 4/4, 6/6, 5 over a vocabulary of 8 with a uniform starting policy. */
  static Prop1Instance canonical() {
    Prop1Instance inst;
    inst.policy.order = 2;
    inst.policy.default_logits.assign(8, 0.0);
    inst.question.question_id = 1;
    inst.question.target_token = 3;
    inst.a1 = {1, 2, 3, 0};
    inst.b1 = {4, 5, 6, 4};
    inst.a2 = {6, 7, 6, 7, 1, 0};
    inst.b2 = {7, 5, 7, 5, 2, 2};
    inst.a3 = {7, 7, 2, 3, 0};
    inst.validate();
    return inst;
  }
};

/** Pi_t pi(b_t | prompt, b_<t): the probability the policy emits b1 verbatim. */
inline double prefix_probability(const PolicyTable& policy, const Prop1Instance& inst) {
  return std::exp(policy::sequence_log_prob(policy, inst.question.question_id,
                                            inst.question.prompt_tokens, inst.b1));
}

/** Every (context, token) coordinate of the rows that generate b1's tokens. */
inline std::vector<std::pair<Context, TokenId>> b1_prefix_coords(const Prop1Instance& inst) {
  std::vector<std::pair<Context, TokenId>> coords;
  Context ctx = policy::context_after(inst.policy, inst.question.question_id,
                                      inst.question.prompt_tokens);
  for (TokenId t : inst.b1) {
    for (std::int32_t v = 0; v < inst.vocab.size; ++v) coords.emplace_back(ctx, v);
    advance_window(ctx.window, t);
  }
  return coords;
}

/** The group-of-two baseline material: responses a1 and b1+a2, scored. */
inline GroupRollout prop1_baseline_rollout(const Prop1Instance& inst) {
  GroupRollout r;
  r.question_id = inst.question.question_id;
  r.family = RolloutFamily::independent;
  Trajectory t0;
  t0.track_id = 0;
  t0.tokens = inst.a1;
  t0.terminated = true;
  Trajectory t1;
  t1.track_id = 1;
  t1.tokens = inst.b1;
  t1.tokens.insert(t1.tokens.end(), inst.a2.begin(), inst.a2.end());
  t1.terminated = true;
  r.trajectories = {std::move(t0), std::move(t1)};
  r.token_budget_used =
      static_cast<std::int64_t>(r.trajectories[0].tokens.size() + r.trajectories[1].tokens.size());
  reward::score_group(r, inst.verifier, inst.vocab, inst.question);
  r.validate();
  return r;
}

/**
 * The same material as equal-length pairs: harvest 1 pairs (a1, b1), harvest
 * 2 pairs (a2, b2) under the inherited prefix b1, and a3 terminates b2's
 * extension. Rewards propagate with max-over-extensions, so (a1, b1) ties at
 * (1, 1) and is skipped while (a2, b2) scores (0, 1) and trains.
 */
inline GroupRollout prop1_eqlen_rollout(const Prop1Instance& inst) {
  GroupRollout r;
  r.question_id = inst.question.question_id;
  r.family = RolloutFamily::dual_track;

  const auto node = [](std::int64_t id, std::int64_t parent, std::int64_t track,
                       std::int64_t start, std::vector<TokenId> tokens, bool terminal,
                       std::int64_t pair_index, int side) {
    TreeNode n;
    n.node_id = id;
    n.parent = parent;
    n.subgroup = 0;
    n.track_id = track;
    n.start = start;
    n.end = start + static_cast<std::int64_t>(tokens.size());
    n.tokens = std::move(tokens);
    n.terminal = terminal;
    n.expired = !terminal;
    n.pair_index = pair_index;
    n.side = side;
    return n;
  };
  const std::int64_t l1 = static_cast<std::int64_t>(inst.a1.size());
  const std::int64_t l2 = static_cast<std::int64_t>(inst.a2.size());
  r.tree.nodes = {
      node(0, -1, 0, 0, inst.a1, true, 0, +1),
      node(1, -1, 1, 0, inst.b1, false, 0, -1),
      node(2, 1, 2, l1, inst.a2, true, 1, +1),
      node(3, 1, 3, l1, inst.b2, false, 1, -1),
      node(4, 3, 4, l1 + l2, inst.a3, true, -1, +1),
  };

  SegmentPair first;
  first.pair_index = 0;
  first.subgroup_index = 0;
  first.context_tokens = inst.question.prompt_tokens;
  first.seg_plus = inst.a1;
  first.seg_minus = inst.b1;
  first.length = l1;
  first.plus_node = 0;
  first.minus_node = 1;
  SegmentPair second;
  second.pair_index = 1;
  second.subgroup_index = 0;
  second.context_tokens = inst.question.prompt_tokens;
  second.context_tokens.insert(second.context_tokens.end(), inst.b1.begin(), inst.b1.end());
  second.seg_plus = inst.a2;
  second.seg_minus = inst.b2;
  second.length = l2;
  second.plus_node = 2;
  second.minus_node = 3;
  r.pairs = {std::move(first), std::move(second)};

  r.token_budget_used = static_cast<std::int64_t>(inst.a1.size() + inst.b1.size() +
                                                  inst.a2.size() + inst.b2.size() + inst.a3.size());
  reward::propagate_rewards(r, inst.verifier, inst.vocab, inst.question,
                            reward::RewardAggregation::max);
  r.validate();
  return r;
}

struct Prop1Report {
  double prefix_prob_before = 0.0;
  double prefix_prob_after_grpo = 0.0;
  double prefix_prob_grad_eqlen = 0.0;  // gradient norm on b1's generating coordinates
};

inline void to_json(nlohmann::json& j, const Prop1Report& r) {
  j = {{"prefix_prob_before", r.prefix_prob_before},
       {"prefix_prob_after_grpo", r.prefix_prob_after_grpo},
       {"prefix_prob_grad_eqlen", r.prefix_prob_grad_eqlen}};
}

/**
 * One group-normalized step (G = 2, on-policy) on the pairing (a1, b1+a2),
 * reporting b1's generation probability before and after, plus the
 * equal-length gradient's norm restricted to b1's generating coordinates
 * (exactly zero: the tied pair is skipped and the prefix is masked).
 */
inline Prop1Report run_prop1(const Prop1Instance& inst, double lr) {
  inst.validate();
  if (!(lr > 0.0)) throw std::invalid_argument("run_prop1 lr must be positive");

  // reject degenerate instances where a response has underflowed to zero
  const std::vector<TokenId> long_correct = [&] {
    std::vector<TokenId> r = inst.b1;
    r.insert(r.end(), inst.b2.begin(), inst.b2.end());
    r.insert(r.end(), inst.a3.begin(), inst.a3.end());
    return r;
  }();
  const std::vector<TokenId> incorrect = [&] {
    std::vector<TokenId> r = inst.b1;
    r.insert(r.end(), inst.a2.begin(), inst.a2.end());
    return r;
  }();
  for (const auto* resp : {&inst.a1, &incorrect, &long_correct}) {
    const double prob = std::exp(policy::sequence_log_prob(
        inst.policy, inst.question.question_id, inst.question.prompt_tokens, *resp));
    if (!(prob > 0.0))
      throw std::invalid_argument("Prop1Instance response has zero probability under the policy");
  }

  Prop1Report report;
  report.prefix_prob_before = prefix_probability(inst.policy, inst);

  const optim::AdvantageSpec spec;  // group-normalized, length_norm on, eps 0.2
  const GroupRollout baseline = prop1_baseline_rollout(inst);
  const optim::LossResult loss =
      optim::loss_grpo(inst.policy, inst.policy, baseline, inst.question, spec);
  const PolicyTable stepped = optim::sgd_step(inst.policy, loss.grad, lr);
  report.prefix_prob_after_grpo = prefix_probability(stepped, inst);

  const GroupRollout eqlen = prop1_eqlen_rollout(inst);
  const optim::LossResult pair_loss =
      optim::loss_eqlen_total(inst.policy, inst.policy, eqlen, inst.question, spec);
  report.prefix_prob_grad_eqlen = pair_loss.grad.restricted_norm2(b1_prefix_coords(inst));
  return report;
}

// ===== Proposition 2 =====

/** The drift construction: the canonical instance plus the pairing probability. */
struct Prop2Instance {
  Prop1Instance base;
  double p = 0.0;            // probability of the (a1, b1+a2) pairing event
  std::uint64_t seed = 97;

  std::int64_t length_minus() const {
    return static_cast<std::int64_t>(base.b1.size() + base.a2.size());
  }
  std::int64_t length_plus() const {
    return static_cast<std::int64_t>(base.b1.size() + base.b2.size() + base.a3.size());
  }

  void validate() const {
    base.validate();
    if (!(p > 0.0) || !(p < 1.0))
      throw std::invalid_argument("Prop2Instance.p must lie strictly inside (0, 1)");
  }

  /** p = L- / (L- + L+): the zero-mean regime (0.4 for the canonical sizes). */
  static Prop2Instance canonical() {
    Prop2Instance inst;
    inst.base = Prop1Instance::canonical();
    const double lm = static_cast<double>(inst.length_minus());
    const double lp = static_cast<double>(inst.length_plus());
    inst.p = lm / (lm + lp);
    inst.validate();
    return inst;
  }
};

/** v: the summed score-function rows of b1's tokens under the instance policy. */
inline GradientVector b1_gradient_vector(const Prop2Instance& inst) {
  const PolicyTable& p = inst.base.policy;
  GradientVector v;
  Context ctx = policy::context_after(p, inst.base.question.question_id,
                                      inst.base.question.prompt_tokens);
  for (TokenId t : inst.base.b1) {
    const std::vector<double> probs = policy::token_distribution(p, ctx);
    std::vector<double>& row = v.materialize_row(ctx, p.vocab_size());
    for (std::size_t i = 0; i < probs.size(); ++i)
      row[i] += (static_cast<TokenId>(i) == t ? 1.0 : 0.0) - probs[i];
    advance_window(ctx.window, t);
  }
  return v;
}

/** ||v||^2 (p / L-^2 + (1-p) / L+^2): the uncentered per-step second moment. */
inline double closed_form_variance(const Prop2Instance& inst) {
  const GradientVector v = b1_gradient_vector(inst);
  double v2 = 0.0;
  for (const auto& [ctx, row] : v.rows)
    for (double x : row) v2 += x * x;
  const double lm = static_cast<double>(inst.length_minus());
  const double lp = static_cast<double>(inst.length_plus());
  return v2 * (inst.p / (lm * lm) + (1.0 - inst.p) / (lp * lp));
}

/** 4 sigma / sqrt(T * trials): the band the Monte-Carlo mean must land in at zero mean. */
inline double clt_bound(const Prop2Instance& inst, std::int64_t num_steps, std::int64_t trials) {
  return 4.0 * std::sqrt(closed_form_variance(inst)) /
         std::sqrt(static_cast<double>(num_steps) * static_cast<double>(trials));
}

struct Prop2Report {
  double grad_mean_norm = 0.0;
  double grad_variance = 0.0;
  std::vector<std::int64_t> checkpoints;  // T/10, 2T/10, ..., T
  std::vector<double> drift_std;          // std over trials of the cumulative drift
  double fitted_slope = 0.0;              // log drift_std vs log T regression
};

inline void to_json(nlohmann::json& j, const Prop2Report& r) {
  j = {{"grad_mean_norm", r.grad_mean_norm},
       {"grad_variance", r.grad_variance},
       {"checkpoints", r.checkpoints},
       {"drift_std", r.drift_std},
       {"fitted_slope", r.fitted_slope}};
}

/** The drift_std time series as deterministic CSV text. */
inline std::string drift_csv(const Prop2Report& r) {
  std::string out = "T,drift_std\n";
  for (std::size_t i = 0; i < r.checkpoints.size(); ++i) {
    out += std::to_string(r.checkpoints[i]);
    out += ',';
    out += eqlen::detail::fmt_double(r.drift_std[i]);
    out += '\n';
  }
  return out;
}

/**
 * Simulate T pairing events per trial. With probability p the incorrect
 * pairing fires (b1 coefficient -1/L-); otherwise the long-correct pairing
 * fires (+1/L+). Both move along the same vector v, so the walk is tracked
 * as a scalar and scaled by ||v||. Reports the Monte-Carlo gradient mean
 * norm, the per-step variance, and the Rayleigh growth of the cumulative
 * drift across ten checkpoints.
 */
inline Prop2Report run_prop2(const Prop2Instance& inst, std::int64_t num_steps,
                             std::int64_t trials) {
  inst.validate();
  if (num_steps < 100) throw std::invalid_argument("run_prop2 requires num_steps >= 100");
  if (trials < 30) throw std::invalid_argument("run_prop2 requires trials >= 30");

  const double v_norm = b1_gradient_vector(inst).norm2();
  const double step_minus = -1.0 / static_cast<double>(inst.length_minus());
  const double step_plus = 1.0 / static_cast<double>(inst.length_plus());

  Prop2Report report;
  for (std::int64_t j = 1; j <= 10; ++j) report.checkpoints.push_back(num_steps * j / 10);

  double sum_s = 0.0, sum_s2 = 0.0;
  std::vector<std::vector<double>> drift(10, std::vector<double>(static_cast<std::size_t>(trials)));
  for (std::int64_t trial = 0; trial < trials; ++trial) {
    rng::Stream stream{inst.seed, 2, trial, 0, 0};
    double s = 0.0;
    std::size_t next_cp = 0;
    for (std::int64_t t = 1; t <= num_steps; ++t) {
      const double g = stream.next_unit() < inst.p ? step_minus : step_plus;
      s += g;
      sum_s += g;
      sum_s2 += g * g;
      if (next_cp < 10 && t == report.checkpoints[next_cp]) {
        drift[next_cp][static_cast<std::size_t>(trial)] = s;
        ++next_cp;
      }
    }
  }

  const double n = static_cast<double>(num_steps) * static_cast<double>(trials);
  const double mean_s = sum_s / n;
  report.grad_mean_norm = std::fabs(mean_s) * v_norm;
  report.grad_variance = (sum_s2 / n - mean_s * mean_s) * (v_norm * v_norm);

  for (std::size_t c = 0; c < 10; ++c) {
    double m = 0.0;
    for (double s : drift[c]) m += s;
    m /= static_cast<double>(trials);
    double var = 0.0;
    for (double s : drift[c]) var += (s - m) * (s - m);
    var /= static_cast<double>(trials);
    report.drift_std.push_back(std::sqrt(var) * v_norm);
  }

  // least-squares slope of log(drift_std) against log(T)
  double mx = 0.0, my = 0.0;
  std::vector<double> xs(10), ys(10);
  for (std::size_t c = 0; c < 10; ++c) {
    xs[c] = std::log(static_cast<double>(report.checkpoints[c]));
    ys[c] = std::log(std::max(report.drift_std[c], 1e-300));
    mx += xs[c];
    my += ys[c];
  }
  mx /= 10.0;
  my /= 10.0;
  double num = 0.0, den = 0.0;
  for (std::size_t c = 0; c < 10; ++c) {
    num += (xs[c] - mx) * (ys[c] - my);
    den += (xs[c] - mx) * (xs[c] - mx);
  }
  report.fitted_slope = num / den;
  return report;
}

// ===== Efficiency accounting =====

/**
 * Recorded reference counts: a baseline run collecting 8,520 effective
 * samples per 48.0 compute units against 51,456 for the equal-length run.
 * The rounded per-unit rates (178 vs 1,072) give the headline ratio.
 */
struct ReferenceAccounting {
  double baseline_per_unit_raw = 0.0;   // 177.5
  std::int64_t baseline_per_unit = 0;   // 178 after rounding
  double eqlen_per_unit = 0.0;          // 1072
  double ratio = 0.0;                   // ~6.02
};

inline ReferenceAccounting reference_accounting() {
  ReferenceAccounting acc;
  acc.baseline_per_unit_raw = 8520.0 / 48.0;
  acc.baseline_per_unit = std::llround(acc.baseline_per_unit_raw);
  acc.eqlen_per_unit = 51456.0 / 48.0;
  acc.ratio = acc.eqlen_per_unit / static_cast<double>(acc.baseline_per_unit);
  return acc;
}

inline void to_json(nlohmann::json& j, const ReferenceAccounting& a) {
  j = {{"baseline_per_unit_raw", a.baseline_per_unit_raw},
       {"baseline_per_unit", a.baseline_per_unit},
       {"eqlen_per_unit", a.eqlen_per_unit},
       {"ratio", a.ratio}};
}

struct EfficiencyReport {
  double pairs_per_subgroup = 0.0;           // harvested pairs per dual-track subgroup
  std::int64_t effective_samples_eqlen = 0;  // non-skipped pair members
  std::int64_t effective_samples_grpo = 0;   // trajectories in groups with reward signal
  std::int64_t tokens_eqlen = 0;
  std::int64_t tokens_grpo = 0;
  double samples_per_token_ratio = 0.0;      // (eqlen rate) / (baseline rate)
  double ratio_ci_lo = 0.0;                  // bootstrap 95% interval over questions
  double ratio_ci_hi = 0.0;
};

inline void to_json(nlohmann::json& j, const EfficiencyReport& r) {
  const auto num = [](double x) -> nlohmann::json {
    if (std::isfinite(x)) return x;
    return x > 0 ? "inf" : (x < 0 ? "-inf" : "nan");
  };
  j = {{"pairs_per_subgroup", r.pairs_per_subgroup},
       {"effective_samples_eqlen", r.effective_samples_eqlen},
       {"effective_samples_grpo", r.effective_samples_grpo},
       {"tokens_eqlen", r.tokens_eqlen},
       {"tokens_grpo", r.tokens_grpo},
       {"samples_per_token_ratio", num(r.samples_per_token_ratio)},
       {"ratio_ci_lo", num(r.ratio_ci_lo)},
       {"ratio_ci_hi", num(r.ratio_ci_hi)}};
}

namespace detail {

/** Effective-sample and token tallies of one question under both arms. */
struct ArmCounts {
  std::int64_t eff_eqlen = 0, tok_eqlen = 0;
  std::int64_t eff_grpo = 0, tok_grpo = 0;
  std::int64_t pairs = 0;
};

inline double rate_ratio(std::int64_t eff_e, std::int64_t tok_e, std::int64_t eff_g,
                         std::int64_t tok_g) {
  if (tok_e <= 0 || tok_g <= 0) return std::numeric_limits<double>::quiet_NaN();
  const double re = static_cast<double>(eff_e) / static_cast<double>(tok_e);
  const double rg = static_cast<double>(eff_g) / static_cast<double>(tok_g);
  return re / rg;  // rg == 0 yields +inf: recorded, never asserted
}

}  // namespace detail

/**
 * Two-arm efficiency comparison under one matched decoded-token budget per
 * question: the dual-track arm uses `config` as given, the baseline arm the
 * same config with `baseline_group` trajectories. Both arms share the seed
 * and policy. The ratio's 95% interval comes from a 200-resample bootstrap
 * over questions.
 */
inline EfficiencyReport run_efficiency(const PolicyTable& policy, const Vocab& vocab,
                                       const std::vector<Question>& questions,
                                       const rollout::RolloutConfig& config,
                                       std::int32_t baseline_group,
                                       const reward::Verifier& verifier, std::uint64_t seed,
                                       reward::RewardAggregation aggregation =
                                           reward::RewardAggregation::max) {
  if (questions.empty()) throw std::invalid_argument("run_efficiency requires questions");
  rollout::RolloutConfig dual_cfg = config;
  dual_cfg.token_budget = config.effective_budget();  // pin one budget for both arms
  rollout::RolloutConfig base_cfg = dual_cfg;
  base_cfg.group_size = baseline_group;
  dual_cfg.validate(/*dual_track=*/true);
  base_cfg.validate(/*dual_track=*/false);

  std::vector<detail::ArmCounts> per_question;
  per_question.reserve(questions.size());
  for (const Question& q : questions) {
    detail::ArmCounts counts;
    GroupRollout dual = rollout::rollout_dualtrack(policy, vocab, q, dual_cfg, seed);
    reward::propagate_rewards(dual, verifier, vocab, q, aggregation);
    counts.eff_eqlen = rollout::effective_sample_count(dual);
    counts.tok_eqlen = dual.token_budget_used;
    counts.pairs = static_cast<std::int64_t>(dual.pairs.size());

    GroupRollout base = rollout::rollout_independent(policy, vocab, q, base_cfg, seed);
    reward::score_group(base, verifier, vocab, q);
    counts.eff_grpo = rollout::effective_sample_count(base);
    counts.tok_grpo = base.token_budget_used;
    per_question.push_back(counts);
  }

  EfficiencyReport report;
  std::int64_t pairs_total = 0;
  for (const detail::ArmCounts& c : per_question) {
    report.effective_samples_eqlen += c.eff_eqlen;
    report.tokens_eqlen += c.tok_eqlen;
    report.effective_samples_grpo += c.eff_grpo;
    report.tokens_grpo += c.tok_grpo;
    pairs_total += c.pairs;
  }
  const std::int64_t subgroups_total =
      static_cast<std::int64_t>(questions.size()) * (dual_cfg.group_size / 2);
  report.pairs_per_subgroup =
      static_cast<double>(pairs_total) / static_cast<double>(subgroups_total);
  report.samples_per_token_ratio =
      detail::rate_ratio(report.effective_samples_eqlen, report.tokens_eqlen,
                         report.effective_samples_grpo, report.tokens_grpo);

  // Bootstrap over questions: resample the per-question tallies, recompute the
  // pooled ratio, and take the 2.5% / 97.5% order statistics.
  constexpr int kResamples = 200;
  std::vector<double> samples;
  samples.reserve(kResamples);
  rng::Stream stream{seed, 3, 0, 0, 0};
  for (int b = 0; b < kResamples; ++b) {
    std::int64_t ee = 0, te = 0, eg = 0, tg = 0;
    for (std::size_t i = 0; i < per_question.size(); ++i) {
      const detail::ArmCounts& c = per_question[static_cast<std::size_t>(
          stream.next_below(static_cast<std::int64_t>(per_question.size())))];
      ee += c.eff_eqlen;
      te += c.tok_eqlen;
      eg += c.eff_grpo;
      tg += c.tok_grpo;
    }
    const double ratio = detail::rate_ratio(ee, te, eg, tg);
    if (std::isfinite(ratio)) samples.push_back(ratio);
  }
  if (samples.empty()) {
    report.ratio_ci_lo = report.ratio_ci_hi = report.samples_per_token_ratio;
  } else {
    std::sort(samples.begin(), samples.end());
    const auto pick = [&](double q) {
      const std::size_t idx = static_cast<std::size_t>(
          q * static_cast<double>(samples.size() - 1) + 0.5);
      return samples[std::min(idx, samples.size() - 1)];
    };
    report.ratio_ci_lo = pick(0.025);
    report.ratio_ci_hi = pick(0.975);
  }
  return report;
}

}  // namespace eqlen::lab
