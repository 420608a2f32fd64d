#pragma once

/**
 * Randomized finite-difference verification of every analytic gradient
 * path. Each check builds a batch of randomized loss instances (policies,
 * rollouts, rewards), computes the analytic gradient, and compares it
 * against the central-difference oracle over the full candidate coordinate
 * set — every (context, token) coordinate any gradient-bearing token could
 * touch, plus everything the analytic gradient actually touched. Probing
 * the superset catches both wrong values and gradient leaked into
 * coordinates that must stay zero (masked tokens, skipped pairs,
 * zero-advantage trajectories).
 *
 * The `corrupt` switch deliberately perturbs one analytic entry before the
 * comparison; it exists so the test suite can demonstrate the harness
 * rejects a wrong gradient (a checker that cannot fail verifies nothing).
 */

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <eqlen/core.hpp>
#include <eqlen/optim.hpp>
#include <eqlen/policy.hpp>
#include <eqlen/rng.hpp>

namespace eqlen::gradcheck {

// ===== Configuration and report =====

enum class LossKind { grpo, dr_grpo, rloo, eqlen_pair, eqlen_total, eqlen_rloo };

NLOHMANN_JSON_SERIALIZE_ENUM(LossKind, {
    {LossKind::grpo, "grpo"},
    {LossKind::dr_grpo, "dr_grpo"},
    {LossKind::rloo, "rloo"},
    {LossKind::eqlen_pair, "eqlen_pair"},
    {LossKind::eqlen_total, "eqlen_total"},
    {LossKind::eqlen_rloo, "eqlen_rloo"},
})

struct CheckConfig {
  LossKind kind = LossKind::grpo;
  int instances = 50;
  std::uint64_t seed = 2024;
  double epsilon_clip = 0.2;       // +infinity checks the unclipped path
  double fd_step = 1e-5;
  double tolerance = 1e-6;         // relative L2 error bound per instance
  double old_policy_jitter = 0.04; // logit nudge building pi_old (keeps ratios off the clip kink)
  bool prefix_in_gradient = false; // ablation toggle for the eqlen kinds
  bool corrupt = false;            // sabotage hook: verify the harness can fail

  void validate() const {
    if (instances < 1) throw std::invalid_argument("gradcheck.instances must be >= 1");
    if (!(fd_step > 0.0)) throw std::invalid_argument("gradcheck.fd_step must be positive");
    if (!(tolerance > 0.0)) throw std::invalid_argument("gradcheck.tolerance must be positive");
  }
};

struct CheckReport {
  LossKind kind = LossKind::grpo;
  int instances = 0;
  double worst_rel_err = 0.0;
  double mean_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::vector<double> rel_errs;  // one per instance
};

inline void to_json(nlohmann::json& j, const CheckReport& r) {
  j = {{"kind", r.kind},           {"instances", r.instances},
       {"worst_rel_err", r.worst_rel_err}, {"mean_rel_err", r.mean_rel_err},
       {"tolerance", r.tolerance}, {"pass", r.pass}};
}

// ===== Randomized instances =====

namespace detail {

inline double uniform(rng::Stream& s, double lo, double hi) {
  return lo + (hi - lo) * s.next_unit();
}

inline PolicyTable random_policy(rng::Stream& s, std::size_t vocab, int order) {
  PolicyTable p;
  p.order = order;
  p.default_logits.resize(vocab);
  for (double& x : p.default_logits) x = uniform(s, -1.5, 1.5);
  p.validate();
  return p;
}

/** pi_old: the policy with every default logit nudged, so ratios differ from 1. */
inline PolicyTable jittered(const PolicyTable& p, rng::Stream& s, double jitter) {
  PolicyTable old = p;
  for (double& x : old.default_logits) x += uniform(s, -jitter, jitter);
  return old;
}

inline std::vector<TokenId> random_tokens(rng::Stream& s, std::size_t len, std::size_t vocab) {
  std::vector<TokenId> out(len);
  for (TokenId& t : out) t = static_cast<TokenId>(s.next_below(static_cast<std::int64_t>(vocab)));
  return out;
}

/** Group rewards guaranteed non-degenerate (the zero-signal case is covered by unit tests). */
inline std::vector<double> random_rewards(rng::Stream& s, std::size_t n) {
  std::vector<double> r(n);
  const bool binary = s.next_unit() < 0.5;
  for (double& x : r) x = binary ? static_cast<double>(s.next_below(2)) : s.next_unit();
  bool equal = true;
  for (double x : r) equal = equal && (x == r.front());
  if (equal) r.front() = r.front() == 1.0 ? 0.0 : r.front() + 0.5;
  return r;
}

/** One randomized instance: everything a loss evaluation needs. */
struct Instance {
  PolicyTable policy;
  PolicyTable old_policy;
  Question question;
  GroupRollout rollout;                           // trajectory kinds and eqlen totals
  optim::MaskedSegment plus, minus;               // eqlen_pair kind
};

inline Instance make_instance(const CheckConfig& cfg, int index) {
  rng::Stream s{cfg.seed, static_cast<std::int64_t>(cfg.kind), index, 0, 0};
  Instance inst;
  const std::size_t vocab = 4 + static_cast<std::size_t>(s.next_below(5));
  const int order = 1 + static_cast<int>(s.next_below(2));
  inst.policy = random_policy(s, vocab, order);
  inst.old_policy = jittered(inst.policy, s, cfg.old_policy_jitter);
  inst.question.question_id = 7 + index;
  inst.question.prompt_tokens = random_tokens(s, static_cast<std::size_t>(s.next_below(4)), vocab);

  if (cfg.kind == LossKind::grpo || cfg.kind == LossKind::dr_grpo || cfg.kind == LossKind::rloo) {
    inst.rollout.question_id = inst.question.question_id;
    inst.rollout.family = RolloutFamily::independent;
    const std::size_t g = 2 + static_cast<std::size_t>(s.next_below(5));
    const std::vector<double> rewards = random_rewards(s, g);
    for (std::size_t i = 0; i < g; ++i) {
      Trajectory t;
      t.track_id = static_cast<std::int64_t>(i);
      t.tokens = random_tokens(s, 1 + static_cast<std::size_t>(s.next_below(6)), vocab);
      t.reward = rewards[i];
      t.scored = true;
      inst.rollout.trajectories.push_back(std::move(t));
    }
    return inst;
  }

  if (cfg.kind == LossKind::eqlen_pair) {
    const std::size_t len = 1 + static_cast<std::size_t>(s.next_below(5));
    std::vector<char> mask(len, 1);
    for (char& m : mask) m = s.next_unit() < 0.75 ? 1 : 0;
    mask[static_cast<std::size_t>(s.next_below(static_cast<std::int64_t>(len)))] = 1;
    const std::vector<TokenId> ctx = random_tokens(s, static_cast<std::size_t>(s.next_below(5)), vocab);
    const double a = uniform(s, 0.25, 2.0);
    const auto build = [&](double adv) {
      optim::MaskedSegment m;
      m.question_id = inst.question.question_id;
      m.context_tokens = ctx;
      m.tokens = random_tokens(s, len, vocab);
      m.token_mask = mask;
      m.advantage = adv;
      m.old_log_probs = policy::per_token_log_probs(inst.old_policy, m.question_id,
                                                    m.context_tokens, m.tokens);
      return m;
    };
    inst.plus = build(a);
    inst.minus = build(-a);
    return inst;
  }

  // eqlen_total / eqlen_rloo: a hand-built dual-track rollout with chained
  // contexts, mixed binary/real rewards, and the occasional skipped pair.
  inst.rollout.question_id = inst.question.question_id;
  inst.rollout.family = RolloutFamily::dual_track;
  const std::int64_t subgroups = 1 + s.next_below(2);
  for (std::int64_t sg = 0; sg < subgroups; ++sg) {
    std::vector<TokenId> ctx = inst.question.prompt_tokens;
    const std::int64_t n_pairs = 1 + s.next_below(3);
    for (std::int64_t j = 0; j < n_pairs; ++j) {
      SegmentPair p;
      p.pair_index = j;
      p.subgroup_index = sg;
      p.context_tokens = ctx;
      p.length = 1 + s.next_below(4);
      p.seg_plus = random_tokens(s, static_cast<std::size_t>(p.length), vocab);
      p.seg_minus = random_tokens(s, static_cast<std::size_t>(p.length), vocab);
      p.reward_plus = static_cast<double>(s.next_below(2));
      p.reward_minus = s.next_unit() < 0.35 ? p.reward_plus : s.next_unit();
      p.rewards_filled = true;
      if (std::fabs(p.reward_plus - p.reward_minus) <= kRewardEqualTol) {
        p.skipped = true;
        p.skip_reason = SkipReason::equal_reward;
      }
      ctx.insert(ctx.end(), p.seg_minus.begin(), p.seg_minus.end());
      if (!validate_pair(p)) throw std::logic_error("gradcheck built an invalid pair");
      inst.rollout.pairs.push_back(std::move(p));
    }
  }
  return inst;
}

// ===== Coordinate enumeration =====

using CoordSet = std::set<std::pair<Context, TokenId>>;

/** Every (context, token) coordinate a segment's active tokens can touch. */
inline void add_walk_coords(const PolicyTable& p, std::int64_t question_id,
                            const std::vector<TokenId>& context_tokens,
                            const std::vector<TokenId>& tokens, const std::vector<char>& mask,
                            CoordSet& coords) {
  Context ctx = policy::context_after(p, question_id, context_tokens);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (mask.empty() || mask[i])
      for (std::size_t v = 0; v < p.vocab_size(); ++v)
        coords.insert({ctx, static_cast<TokenId>(v)});
    advance_window(ctx.window, tokens[i]);
  }
}

/** Candidate support of an instance's loss, plus wherever the analytic gradient lives. */
inline std::vector<std::pair<Context, TokenId>> coord_union(const CheckConfig& cfg,
                                                            const Instance& inst,
                                                            const GradientVector& analytic) {
  CoordSet coords;
  const PolicyTable& p = inst.policy;
  if (cfg.kind == LossKind::grpo || cfg.kind == LossKind::dr_grpo || cfg.kind == LossKind::rloo) {
    for (const Trajectory& t : inst.rollout.trajectories)
      add_walk_coords(p, inst.rollout.question_id, inst.question.prompt_tokens, t.tokens, {},
                      coords);
  } else if (cfg.kind == LossKind::eqlen_pair) {
    add_walk_coords(p, inst.plus.question_id, inst.plus.context_tokens, inst.plus.tokens,
                    inst.plus.token_mask, coords);
    add_walk_coords(p, inst.minus.question_id, inst.minus.context_tokens, inst.minus.tokens,
                    inst.minus.token_mask, coords);
  } else {
    for (const SegmentPair& pr : inst.rollout.pairs) {  // skipped pairs included on purpose
      add_walk_coords(p, inst.rollout.question_id, pr.context_tokens, pr.seg_plus, {}, coords);
      add_walk_coords(p, inst.rollout.question_id, pr.context_tokens, pr.seg_minus, {}, coords);
    }
  }
  for (const auto& [ctx, row] : analytic.rows)
    for (std::size_t v = 0; v < row.size(); ++v) coords.insert({ctx, static_cast<TokenId>(v)});
  return {coords.begin(), coords.end()};
}

}  // namespace detail

// ===== The check =====

/** Analytic gradient and loss functional for one instance of the configured kind. */
inline std::pair<GradientVector, std::function<double(const PolicyTable&)>> instance_paths(
    const CheckConfig& cfg, const detail::Instance& inst) {
  optim::AdvantageSpec spec;
  spec.epsilon_clip = cfg.epsilon_clip;
  switch (cfg.kind) {
    case LossKind::grpo:
    case LossKind::dr_grpo:
    case LossKind::rloo:
      spec.family = cfg.kind == LossKind::grpo    ? optim::AdvantageFamily::grpo_norm
                    : cfg.kind == LossKind::dr_grpo ? optim::AdvantageFamily::dr_grpo
                                                    : optim::AdvantageFamily::rloo;
      return {optim::loss_grpo(inst.policy, inst.old_policy, inst.rollout, inst.question, spec).grad,
              [&inst, spec](const PolicyTable& p) {
                return optim::loss_grpo(p, inst.old_policy, inst.rollout, inst.question, spec).loss;
              }};
    case LossKind::eqlen_pair:
      return {optim::loss_eqlen_pair(inst.policy, inst.plus, inst.minus, spec).grad,
              [&inst, spec](const PolicyTable& p) {
                return optim::loss_eqlen_pair(p, inst.plus, inst.minus, spec).loss;
              }};
    case LossKind::eqlen_total:
      return {optim::loss_eqlen_total(inst.policy, inst.old_policy, inst.rollout, inst.question,
                                      spec, cfg.prefix_in_gradient)
                  .grad,
              [&inst, spec, &cfg](const PolicyTable& p) {
                return optim::loss_eqlen_total(p, inst.old_policy, inst.rollout, inst.question,
                                               spec, cfg.prefix_in_gradient)
                    .loss;
              }};
    case LossKind::eqlen_rloo:
      return {optim::loss_eqlen_rloo(inst.policy, inst.old_policy, inst.rollout, inst.question,
                                     spec, cfg.prefix_in_gradient)
                  .grad,
              [&inst, spec, &cfg](const PolicyTable& p) {
                return optim::loss_eqlen_rloo(p, inst.old_policy, inst.rollout, inst.question,
                                              spec, cfg.prefix_in_gradient)
                    .loss;
              }};
  }
  throw std::invalid_argument("unknown gradcheck loss kind");
}

/**
 * Run the configured number of randomized instances; the per-instance
 * relative error is ||g_analytic - g_fd||_2 / max(||g_analytic||, ||g_fd||,
 * 1e-12) over the candidate-coordinate union.
 */
inline CheckReport run_check(const CheckConfig& cfg) {
  cfg.validate();
  CheckReport report;
  report.kind = cfg.kind;
  report.instances = cfg.instances;
  report.tolerance = cfg.tolerance;
  double sum = 0.0;
  for (int i = 0; i < cfg.instances; ++i) {
    const detail::Instance inst = detail::make_instance(cfg, i);
    auto [analytic, f] = instance_paths(cfg, inst);
    if (cfg.corrupt && !analytic.rows.empty()) analytic.rows.begin()->second.front() += 1e-3;
    const std::vector<std::pair<Context, TokenId>> coords =
        detail::coord_union(cfg, inst, analytic);
    const GradientVector fd = policy::fd_gradient(f, inst.policy, cfg.fd_step, coords);
    double diff2 = 0.0;
    for (const auto& [ctx, tok] : coords) {
      const double d = analytic.entry(ctx, tok) - fd.entry(ctx, tok);
      diff2 += d * d;
    }
    const double denom = std::max({analytic.restricted_norm2(coords),
                                   fd.restricted_norm2(coords), 1e-12});
    const double rel = std::sqrt(diff2) / denom;
    report.rel_errs.push_back(rel);
    report.worst_rel_err = std::max(report.worst_rel_err, rel);
    sum += rel;
  }
  report.mean_rel_err = sum / static_cast<double>(cfg.instances);
  report.pass = report.worst_rel_err <= cfg.tolerance;
  return report;
}

/** One check per loss kind (shared instance count and seed); clipped and unclipped. */
inline std::vector<CheckReport> check_all(std::uint64_t seed, int instances) {
  std::vector<CheckReport> out;
  for (LossKind kind : {LossKind::grpo, LossKind::dr_grpo, LossKind::rloo, LossKind::eqlen_pair,
                        LossKind::eqlen_total, LossKind::eqlen_rloo}) {
    for (double eps : {0.2, std::numeric_limits<double>::infinity()}) {
      CheckConfig cfg;
      cfg.kind = kind;
      cfg.instances = instances;
      cfg.seed = seed;
      cfg.epsilon_clip = eps;
      out.push_back(run_check(cfg));
    }
  }
  return out;
}

}  // namespace eqlen::gradcheck
