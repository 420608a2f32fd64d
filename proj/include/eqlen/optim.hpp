#pragma once

/**
 * Advantages, clipped surrogate losses, and analytic policy gradients for
 * the five algorithm variants (grpo, dr_grpo, rloo over whole trajectories;
 * eqlen_grpo, eqlen_rloo over equal-length segment pairs), plus the SGD
 * update.
 *
 * Exactness conventions, chosen so the library's algebraic identities hold
 * bitwise rather than approximately:
 *  - Two-sample normalized advantages are computed as the sign of the reward
 *    difference, because (r - mean)/sigma_pop is exactly +-1 for any
 *    two-sample group in real arithmetic and naive evaluation would lose
 *    that identity to rounding.
 *  - Every advantage vector is closed to an exactly-zero left-to-right sum
 *    by replacing its last entry with the negated prefix sum (an ulp-scale
 *    correction; see advantages_for).
 *  - Length normalization divides an already-accumulated unscaled gradient
 *    by L as the final operation, so grad(off)[i] / L == grad(on)[i] holds
 *    bitwise coordinatewise. Multiplying back is NOT exact in floating
 *    point; the division direction is the one in which the scaling claim is
 *    literally true.
 *  - Gradient accumulation is sequential and deterministic (token order
 *    within segments, pair order within subgroups, ascending subgroup
 *    index). This is the documented reproducible reduction mode; there is
 *    no nondeterministic fast path.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <eqlen/core.hpp>
#include <eqlen/policy.hpp>

namespace eqlen::optim {

// ===== Advantage specification =====

enum class AdvantageFamily { grpo_norm, dr_grpo, rloo };
enum class LengthNorm { on, off };

NLOHMANN_JSON_SERIALIZE_ENUM(AdvantageFamily, {
    {AdvantageFamily::grpo_norm, "grpo_norm"},
    {AdvantageFamily::dr_grpo, "dr_grpo"},
    {AdvantageFamily::rloo, "rloo"},
})
NLOHMANN_JSON_SERIALIZE_ENUM(LengthNorm, {
    {LengthNorm::on, "on"},
    {LengthNorm::off, "off"},
})

struct AdvantageSpec {
  AdvantageFamily family = AdvantageFamily::grpo_norm;
  double epsilon_clip = 0.2;        // >= 0; +infinity disables clipping
  LengthNorm length_norm = LengthNorm::on;
  bool count_skipped_in_divisor = true;  // N_k counts skipped pairs (they contribute 0)

  /** dr_grpo removes length normalization along with the std normalization. */
  LengthNorm effective_length_norm() const {
    return family == AdvantageFamily::dr_grpo ? LengthNorm::off : length_norm;
  }

  void validate() const {
    if (std::isnan(epsilon_clip) || epsilon_clip < 0.0)
      throw std::invalid_argument("advantage.epsilon_clip must be >= 0 (or infinity to disable)");
  }

  bool operator==(const AdvantageSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const AdvantageSpec& s) {
  j = {{"family", s.family},
       {"length_norm", s.length_norm},
       {"count_skipped_in_divisor", s.count_skipped_in_divisor}};
  // JSON has no infinity literal; an unclipped spec round-trips as a string.
  if (std::isinf(s.epsilon_clip)) j["epsilon_clip"] = "inf";
  else j["epsilon_clip"] = s.epsilon_clip;
}
inline void from_json(const nlohmann::json& j, AdvantageSpec& s) {
  j.at("family").get_to(s.family);
  j.at("length_norm").get_to(s.length_norm);
  j.at("count_skipped_in_divisor").get_to(s.count_skipped_in_divisor);
  const nlohmann::json& e = j.at("epsilon_clip");
  if (e.is_string()) {
    if (e.get<std::string>() != "inf")
      throw std::invalid_argument("advantage.epsilon_clip string form must be \"inf\"");
    s.epsilon_clip = std::numeric_limits<double>::infinity();
  } else {
    e.get_to(s.epsilon_clip);
  }
}

// ===== Advantages =====

/** Advantage vector plus the activity flag (false for zero-signal groups). */
struct GroupAdvantages {
  std::vector<double> values;
  bool active = false;
};

namespace detail {

inline bool all_equal(const std::vector<double>& xs) {
  for (double x : xs)
    if (x != xs.front()) return false;
  return true;
}

/**
 * Close a vector to an exactly-zero left-to-right sum: the last entry is
 * replaced by the negated prefix sum of the others, so the sequential sum
 * pairs P with -P and lands on +0.0 regardless of earlier rounding. The
 * correction is the accumulated rounding residual, ulp-scale in practice.
 */
inline void close_zero_sum(std::vector<double>& xs) {
  double prefix = 0.0;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) prefix += xs[i];
  xs.back() = -prefix;
}

}  // namespace detail

/**
 * Group-normalized advantages (r_i - mean)/sigma with population std.
 * Zero-variance groups return all zeros flagged inactive. Two-sample groups
 * return exactly +-1 (the identity every pairwise-equivalence claim rests
 * on), and active groups always sum to exactly zero.
 */
inline GroupAdvantages grpo_advantages(const std::vector<double>& rewards) {
  const std::size_t n = rewards.size();
  if (n < 2) throw std::invalid_argument("advantages require a group of at least 2");
  if (detail::all_equal(rewards)) return {std::vector<double>(n, 0.0), false};
  if (n == 2) {
    const double s = rewards[0] > rewards[1] ? 1.0 : -1.0;
    return {{s, -s}, true};
  }
  double sum = 0.0;
  for (double r : rewards) sum += r;
  const double mean = sum / static_cast<double>(n);
  std::vector<double> dev(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dev[i] = rewards[i] - mean;
    var += dev[i] * dev[i];
  }
  var /= static_cast<double>(n);
  const double sigma = std::sqrt(var);
  if (sigma == 0.0) return {std::vector<double>(n, 0.0), false};
  for (double& d : dev) d /= sigma;
  detail::close_zero_sum(dev);
  return {std::move(dev), true};
}

/** Leave-one-out advantages A_i = r_i - mean of the others; sums to exactly zero. */
inline std::vector<double> rloo_advantages(const std::vector<double>& rewards) {
  const std::size_t n = rewards.size();
  if (n < 2) throw std::invalid_argument("advantages require a group of at least 2");
  if (detail::all_equal(rewards)) return std::vector<double>(n, 0.0);
  if (n == 2) return {rewards[0] - rewards[1], rewards[1] - rewards[0]};
  double sum = 0.0;
  for (double r : rewards) sum += r;
  std::vector<double> a(n);
  for (std::size_t i = 0; i < n; ++i)
    a[i] = rewards[i] - (sum - rewards[i]) / static_cast<double>(n - 1);
  detail::close_zero_sum(a);
  return a;
}

/** Mean-subtracted advantages (no std normalization); sums to exactly zero. */
inline std::vector<double> dr_grpo_advantages(const std::vector<double>& rewards) {
  const std::size_t n = rewards.size();
  if (n < 2) throw std::invalid_argument("advantages require a group of at least 2");
  if (detail::all_equal(rewards)) return std::vector<double>(n, 0.0);
  double sum = 0.0;
  for (double r : rewards) sum += r;
  const double mean = sum / static_cast<double>(n);
  std::vector<double> a(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = rewards[i] - mean;
  detail::close_zero_sum(a);
  return a;
}

/** Uniform dispatch; `active` is false exactly when every advantage is zero. */
inline GroupAdvantages advantages_for(AdvantageFamily family, const std::vector<double>& rewards) {
  switch (family) {
    case AdvantageFamily::grpo_norm:
      return grpo_advantages(rewards);
    case AdvantageFamily::rloo: {
      std::vector<double> a = rloo_advantages(rewards);
      const bool active = std::any_of(a.begin(), a.end(), [](double x) { return x != 0.0; });
      return {std::move(a), active};
    }
    case AdvantageFamily::dr_grpo: {
      std::vector<double> a = dr_grpo_advantages(rewards);
      const bool active = std::any_of(a.begin(), a.end(), [](double x) { return x != 0.0; });
      return {std::move(a), active};
    }
  }
  throw std::invalid_argument("unknown advantage family");
}

// ===== Clipped surrogate =====

namespace detail {

/**
 * Value and gradient coefficient of min(rho*A, clamp(rho, 1-eps, 1+eps)*A).
 * The subgradient flows through the unclipped branch wherever the min
 * selects it (ties included, so the on-policy point rho = 1 always carries
 * gradient A*rho); the clipped branch is a constant with zero gradient.
 * epsilon = +infinity makes the clamp the identity and disables clipping.
 */
struct ClipEval {
  double value = 0.0;
  double coeff = 0.0;  // multiplies grad log pi at this token
};

inline ClipEval clip_eval(double ratio, double advantage, double epsilon) {
  const double unclipped = ratio * advantage;
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage;
  if (unclipped <= clipped) return {unclipped, advantage * ratio};
  return {clipped, 0.0};
}

}  // namespace detail

/** The surrogate term min(rho*A, clip(rho, 1-eps, 1+eps)*A). */
inline double clipped_term(double ratio, double advantage, double epsilon) {
  return detail::clip_eval(ratio, advantage, epsilon).value;
}

// ===== Masked segments =====

/**
 * One gradient-bearing piece of text: `tokens` conditioned on
 * `context_tokens` (which never contribute gradient), a per-token mask,
 * the segment's scalar advantage, and per-token log-probabilities recorded
 * under the rollout-time policy snapshot for ratio computation.
 */
struct MaskedSegment {
  std::int64_t question_id = 0;
  std::vector<TokenId> context_tokens;
  std::vector<TokenId> tokens;
  std::vector<char> token_mask;       // 1 = contributes loss and gradient
  double advantage = 0.0;
  std::vector<double> old_log_probs;  // one per token, under pi_old

  std::int64_t active_tokens() const {
    std::int64_t n = 0;
    for (char m : token_mask) n += m ? 1 : 0;
    return n;
  }

  void validate() const {
    if (tokens.empty()) throw std::invalid_argument("MaskedSegment.tokens must be nonempty");
    if (token_mask.size() != tokens.size())
      throw std::invalid_argument("MaskedSegment.token_mask size must match tokens");
    if (old_log_probs.size() != tokens.size())
      throw std::invalid_argument("MaskedSegment.old_log_probs size must match tokens");
  }

  bool operator==(const MaskedSegment&) const = default;
};

/**
 * Lower a SegmentPair to its two MaskedSegments. Advantages come from the
 * pair's two rewards through `family` (a two-sample group). By default each
 * segment is conditioned on the pair's full accumulated context and every
 * segment token carries gradient. With `prefix_in_gradient` (the degraded
 * ablation) the inherited prefix — everything in the context beyond the
 * question prompt — moves inside both segments ahead of their own tokens,
 * unmasked, with the segment's advantage broadcast over it.
 */
inline std::pair<MaskedSegment, MaskedSegment> pair_to_masked_segments(
    const PolicyTable& old_policy, const Question& question, const SegmentPair& pair,
    AdvantageFamily family, bool prefix_in_gradient = false) {
  if (!validate_pair(pair)) throw std::invalid_argument("pair_to_masked_segments: invalid pair");
  const GroupAdvantages adv = advantages_for(family, {pair.reward_plus, pair.reward_minus});

  const std::size_t prompt_len = question.prompt_tokens.size();
  if (pair.context_tokens.size() < prompt_len ||
      !std::equal(question.prompt_tokens.begin(), question.prompt_tokens.end(),
                  pair.context_tokens.begin()))
    throw std::invalid_argument("pair context does not extend the question prompt");

  const auto build = [&](const std::vector<TokenId>& seg, double a) {
    MaskedSegment m;
    m.question_id = question.question_id;
    m.advantage = a;
    if (!prefix_in_gradient) {
      m.context_tokens = pair.context_tokens;
      m.tokens = seg;
    } else {
      m.context_tokens.assign(pair.context_tokens.begin(),
                              pair.context_tokens.begin() + static_cast<std::ptrdiff_t>(prompt_len));
      m.tokens.assign(pair.context_tokens.begin() + static_cast<std::ptrdiff_t>(prompt_len),
                      pair.context_tokens.end());
      m.tokens.insert(m.tokens.end(), seg.begin(), seg.end());
    }
    m.token_mask.assign(m.tokens.size(), 1);
    m.old_log_probs =
        policy::per_token_log_probs(old_policy, m.question_id, m.context_tokens, m.tokens);
    return m;
  };
  return {build(pair.seg_plus, adv.values[0]), build(pair.seg_minus, adv.values[1])};
}

// ===== Loss core =====

/** Loss value with its analytic gradient (of the loss, i.e. descent direction is -grad). */
struct LossResult {
  double loss = 0.0;
  GradientVector grad;
  bool active = false;           // false: zero-signal input (inactive group / all skipped)
  std::int64_t active_tokens = 0;

  bool operator==(const LossResult&) const = default;
};

namespace detail {

enum class TermMode {
  ratio_clip,      // term = min(rho*A, clip(rho)*A), coeff A*rho on the unclipped branch
  plain_logprob,   // term = A * log pi, coeff A (the pure REINFORCE-with-baseline form)
};

/** Unscaled per-segment sums: value = sum of term values, grad = sum coeff * grad log pi. */
struct SegmentAccum {
  double value = 0.0;
  GradientVector grad;
  std::int64_t active = 0;
};

/**
 * Walk one masked segment under the current policy. Masked-out tokens
 * contribute nothing but still advance the conditioning window. This single
 * routine serves every loss variant so that coefficient sequences which are
 * bitwise equal produce bitwise-equal gradients.
 */
inline SegmentAccum accumulate_segment(const PolicyTable& policy, const MaskedSegment& seg,
                                       double epsilon, TermMode mode) {
  seg.validate();
  const std::size_t width = policy.vocab_size();
  Context ctx = policy::context_after(policy, seg.question_id, seg.context_tokens);
  SegmentAccum acc;
  for (std::size_t i = 0; i < seg.tokens.size(); ++i) {
    const TokenId tok = seg.tokens[i];
    if (seg.token_mask[i]) {
      const double lp = policy::log_prob(policy, ctx, tok);
      double value, coeff;
      if (mode == TermMode::ratio_clip) {
        const double ratio = std::exp(lp - seg.old_log_probs[i]);
        const ClipEval e = clip_eval(ratio, seg.advantage, epsilon);
        value = e.value;
        coeff = e.coeff;
      } else {
        value = seg.advantage * lp;
        coeff = seg.advantage;
      }
      acc.value += value;
      if (coeff != 0.0) {
        const std::vector<double> p = policy::token_distribution(policy, ctx);
        std::vector<double>& row = acc.grad.materialize_row(ctx, width);
        for (std::size_t v = 0; v < width; ++v)
          row[v] += coeff * ((static_cast<TokenId>(v) == tok ? 1.0 : 0.0) - p[v]);
      }
      acc.active += 1;
    }
    advance_window(ctx.window, tok);
  }
  return acc;
}

}  // namespace detail

// ===== Whole-trajectory loss (grpo / dr_grpo / rloo) =====

/**
 * Group loss over an independent rollout:
 *   -(1/G) sum_i (1/|o_i| if length_norm on) sum_t min(rho*A_i, clip(rho)*A_i)
 * with A from the spec's family (dr_grpo implies length_norm off). The
 * family only selects the advantage map; the surrogate is shared. An
 * inactive group (zero-variance rewards) yields loss 0 and a zero gradient.
 */
inline LossResult loss_grpo(const PolicyTable& policy, const PolicyTable& old_policy,
                            const GroupRollout& rollout, const Question& question,
                            const AdvantageSpec& spec) {
  spec.validate();
  if (rollout.family != RolloutFamily::independent)
    throw std::invalid_argument("loss_grpo requires an independent rollout");
  std::vector<double> rewards;
  rewards.reserve(rollout.trajectories.size());
  for (const Trajectory& t : rollout.trajectories) {
    if (!t.scored) throw std::invalid_argument("loss_grpo requires scored trajectories");
    rewards.push_back(t.reward);
  }
  const GroupAdvantages adv = advantages_for(spec.family, rewards);
  LossResult out;
  if (!adv.active) return out;

  const bool norm = spec.effective_length_norm() == LengthNorm::on;
  const double g = static_cast<double>(rollout.trajectories.size());
  double loss_acc = 0.0;
  for (std::size_t i = 0; i < rollout.trajectories.size(); ++i) {
    if (adv.values[i] == 0.0) continue;  // identical to walking it: every term is zero
    const Trajectory& t = rollout.trajectories[i];
    MaskedSegment seg;
    seg.question_id = rollout.question_id;
    seg.context_tokens = question.prompt_tokens;
    seg.tokens = t.tokens;
    seg.token_mask.assign(t.tokens.size(), 1);
    seg.advantage = adv.values[i];
    seg.old_log_probs =
        policy::per_token_log_probs(old_policy, rollout.question_id, seg.context_tokens, seg.tokens);
    detail::SegmentAccum acc =
        detail::accumulate_segment(policy, seg, spec.epsilon_clip, detail::TermMode::ratio_clip);
    const double len = static_cast<double>(t.tokens.size());
    if (norm) {
      loss_acc += acc.value / len;
      acc.grad.divide(len);
    } else {
      loss_acc += acc.value;
    }
    out.grad.axpy(1.0, acc.grad);
    out.active_tokens += acc.active;
  }
  out.grad.scale(-1.0);
  out.grad.divide(g);
  out.loss = -loss_acc / g;
  out.active = true;
  return out;
}

// ===== Equal-length pair losses =====

/**
 * One pair's loss from its two masked segments:
 *   -(1/2) sum_{s in {+,-}} (1/L if length_norm on) sum_t term
 * where L is the shared active-token count of the two segments. The
 * unscaled sums are accumulated first; then -0.5 (exact) and, for
 * length_norm on, one final division by L — so the off-norm gradient equals
 * the on-norm gradient times L exactly in the division direction.
 */
inline LossResult loss_eqlen_pair(const PolicyTable& policy, const MaskedSegment& plus,
                                  const MaskedSegment& minus, const AdvantageSpec& spec,
                                  detail::TermMode mode = detail::TermMode::ratio_clip) {
  spec.validate();
  detail::SegmentAccum acc = detail::accumulate_segment(policy, plus, spec.epsilon_clip, mode);
  const detail::SegmentAccum acc_minus =
      detail::accumulate_segment(policy, minus, spec.epsilon_clip, mode);
  if (acc.active != acc_minus.active || acc.active == 0)
    throw std::invalid_argument("segment pair active-token counts must match and be positive");

  LossResult out;
  out.active_tokens = acc.active + acc_minus.active;
  acc.grad.axpy(1.0, acc_minus.grad);
  acc.grad.scale(-0.5);
  double value = -0.5 * (acc.value + acc_minus.value);
  if (spec.effective_length_norm() == LengthNorm::on) {
    const double len = static_cast<double>(acc.active);
    acc.grad.divide(len);
    value /= len;
  }
  out.grad = std::move(acc.grad);
  out.loss = value;
  out.active = true;
  return out;
}

namespace detail {

/** Shared assembly for the two eqlen total losses (they differ only in TermMode/family). */
inline LossResult eqlen_total_impl(const PolicyTable& policy, const PolicyTable& old_policy,
                                   const GroupRollout& rollout, const Question& question,
                                   const AdvantageSpec& spec, bool prefix_in_gradient,
                                   TermMode mode) {
  spec.validate();
  if (rollout.family != RolloutFamily::dual_track)
    throw std::invalid_argument("eqlen losses require a dual-track rollout");

  // Ascending subgroup order, pair order within each (engine order).
  std::map<std::int64_t, std::vector<const SegmentPair*>> by_subgroup;
  for (const SegmentPair& p : rollout.pairs) by_subgroup[p.subgroup_index].push_back(&p);

  LossResult out;
  double loss_acc = 0.0;
  std::int64_t active_subgroups = 0;
  for (const auto& [sg, pairs] : by_subgroup) {
    std::int64_t n_k = 0;
    for (const SegmentPair* p : pairs)
      if (spec.count_skipped_in_divisor || !p->skipped) n_k += 1;
    if (n_k == 0) continue;  // no counted pairs: excluded from the outer average
    active_subgroups += 1;

    double sub_loss = 0.0;
    GradientVector sub_grad;
    for (const SegmentPair* p : pairs) {
      if (p->skipped) continue;  // contributes exactly zero
      const auto [seg_plus, seg_minus] =
          pair_to_masked_segments(old_policy, question, *p, spec.family, prefix_in_gradient);
      LossResult pair_loss = loss_eqlen_pair(policy, seg_plus, seg_minus, spec, mode);
      sub_loss += pair_loss.loss;
      sub_grad.axpy(1.0, pair_loss.grad);
      out.active_tokens += pair_loss.active_tokens;
      out.active = true;
    }
    const double nk = static_cast<double>(n_k);
    loss_acc += sub_loss / nk;
    sub_grad.divide(nk);
    out.grad.axpy(1.0, sub_grad);
  }
  if (active_subgroups == 0) return LossResult{};  // flagged inactive: nothing to average
  const double k = static_cast<double>(active_subgroups);
  out.loss = loss_acc / k;
  out.grad.divide(k);
  return out;
}

}  // namespace detail

/**
 * Total equal-length objective: (1/K) sum_k (1/N_k) sum_i pair-loss, where
 * N_k counts the subgroup's pairs (skipped ones contribute zero but count,
 * unless count_skipped_in_divisor is off) and K is the number of subgroups
 * with N_k > 0. All subgroups empty: loss 0, zero gradient, active=false.
 */
inline LossResult loss_eqlen_total(const PolicyTable& policy, const PolicyTable& old_policy,
                                   const GroupRollout& rollout, const Question& question,
                                   const AdvantageSpec& spec, bool prefix_in_gradient = false) {
  return detail::eqlen_total_impl(policy, old_policy, rollout, question, spec, prefix_in_gradient,
                                  detail::TermMode::ratio_clip);
}

/**
 * The leave-one-out pair objective: advantages A+ = r+ - r-, A- = r- - r+.
 * With clipping disabled (epsilon_clip = infinity) this is the pure
 * -A * log pi form — gradient coefficient A at every token, no ratio — and
 * on-policy it reproduces loss_eqlen_total's gradients bitwise for binary
 * rewards. With finite epsilon it is the clipped ratio surrogate.
 */
inline LossResult loss_eqlen_rloo(const PolicyTable& policy, const PolicyTable& old_policy,
                                  const GroupRollout& rollout, const Question& question,
                                  const AdvantageSpec& spec, bool prefix_in_gradient = false) {
  AdvantageSpec rloo_spec = spec;
  rloo_spec.family = AdvantageFamily::rloo;
  const detail::TermMode mode = std::isinf(spec.epsilon_clip)
                                    ? detail::TermMode::plain_logprob
                                    : detail::TermMode::ratio_clip;
  return detail::eqlen_total_impl(policy, old_policy, rollout, question, rloo_spec,
                                  prefix_in_gradient, mode);
}

// ===== Update =====

/**
 * Plain SGD on the logits: theta' = theta - lr * grad. The gradient is
 * validated as finite before any mutation (no partial updates); rows absent
 * from the policy are materialized from its default logits first. The
 * updated table is validated, so an overflowing step fails loudly.
 */
inline PolicyTable sgd_step(const PolicyTable& policy, const GradientVector& grad, double lr) {
  if (!(lr > 0.0) || std::isinf(lr)) throw std::invalid_argument("sgd_step lr must be positive and finite");
  if (!grad.is_finite()) throw std::invalid_argument("sgd_step rejects non-finite gradients");
  PolicyTable out = policy;
  for (const auto& [ctx, row] : grad.rows) {
    std::vector<double>& logits = out.materialize_row(ctx);
    if (logits.size() != row.size())
      throw std::invalid_argument("gradient row width differs from policy vocabulary");
    for (std::size_t v = 0; v < row.size(); ++v) {
      logits[v] -= lr * row[v];
      if (!std::isfinite(logits[v]))
        throw std::runtime_error("sgd_step produced a non-finite logit (step too large)");
    }
  }
  out.validate();
  return out;
}

}  // namespace eqlen::optim
