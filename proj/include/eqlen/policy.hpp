#pragma once

/**
 * Tabular softmax policy operations: distributions, sampling, log-probs,
 * score-function gradients, sequence scoring, entropy, and a central
 * finite-difference oracle used to cross-check every analytic gradient.
 *
 * All softmax work is max-shifted / log-sum-exp so results stay finite for
 * logit magnitudes up to ~1e3.
 */

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include <eqlen/core.hpp>
#include <eqlen/rng.hpp>

namespace eqlen::policy {

// ===== Distributions =====

namespace detail {

inline void check_context(const PolicyTable& p, const Context& ctx) {
  if (ctx.window.size() != static_cast<std::size_t>(p.order))
    throw std::invalid_argument("context window width differs from policy order");
}

inline void check_token(const PolicyTable& p, TokenId tok) {
  if (tok < 0 || static_cast<std::size_t>(tok) >= p.vocab_size())
    throw std::invalid_argument("token id outside the policy vocabulary");
}

}  // namespace detail

/** Softmax over the context's logit row. Entries are positive and sum to 1 within ~1e-15. */
inline std::vector<double> token_distribution(const PolicyTable& p, const Context& ctx) {
  detail::check_context(p, ctx);
  const std::vector<double>& logits = p.row(ctx);
  double m = -std::numeric_limits<double>::infinity();
  for (double l : logits) {
    if (!std::isfinite(l)) throw std::invalid_argument("policy logit not finite");
    m = std::max(m, l);
  }
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    out[v] = std::exp(logits[v] - m);
    z += out[v];
  }
  for (double& x : out) x /= z;
  return out;
}

/** log pi(tok | ctx) via log-sum-exp (never materializes the distribution). */
inline double log_prob(const PolicyTable& p, const Context& ctx, TokenId tok) {
  detail::check_context(p, ctx);
  detail::check_token(p, tok);
  const std::vector<double>& logits = p.row(ctx);
  double m = -std::numeric_limits<double>::infinity();
  for (double l : logits) {
    if (!std::isfinite(l)) throw std::invalid_argument("policy logit not finite");
    m = std::max(m, l);
  }
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return logits[static_cast<std::size_t>(tok)] - m - std::log(z);
}

/** Shannon entropy (nats) of the context's token distribution. */
inline double entropy(const PolicyTable& p, const Context& ctx) {
  const std::vector<double> probs = token_distribution(p, ctx);
  double h = 0.0;
  for (double q : probs)
    if (q > 0.0) h -= q * std::log(q);
  return h;
}

// ===== Sampling =====

/** One token draw by inverse-CDF walk over token_distribution (deterministic given the stream). */
inline TokenId sample_token(const PolicyTable& p, const Context& ctx, rng::Stream& stream) {
  const std::vector<double> probs = token_distribution(p, ctx);
  const double u = stream.next_unit();
  double acc = 0.0;
  for (std::size_t v = 0; v < probs.size(); ++v) {
    acc += probs[v];
    if (u < acc) return static_cast<TokenId>(v);
  }
  return static_cast<TokenId>(probs.size() - 1);  // guard against acc rounding below 1
}

// ===== Gradients =====

/**
 * Score-function gradient of log pi(tok | ctx) w.r.t. the context's logit
 * row: entry (ctx, v) = 1{v == tok} - pi(v | ctx). Zero outside that row.
 */
inline GradientVector grad_log_prob(const PolicyTable& p, const Context& ctx, TokenId tok) {
  detail::check_token(p, tok);
  const std::vector<double> probs = token_distribution(p, ctx);
  GradientVector g;
  std::vector<double>& row = g.materialize_row(ctx, probs.size());
  for (std::size_t v = 0; v < probs.size(); ++v) row[v] = -probs[v];
  row[static_cast<std::size_t>(tok)] += 1.0;
  return g;
}

// ===== Sequence scoring =====

/**
 * Walks the context window from the start of the question: first through
 * `context_tokens` (prompt + any inherited prefix, which condition but do
 * not score), then scores each token of `segment` in turn.
 * Returns per-token log-probs, one per segment token.
 */
inline std::vector<double> per_token_log_probs(const PolicyTable& p, std::int64_t question_id,
                                               std::span<const TokenId> context_tokens,
                                               std::span<const TokenId> segment) {
  Context ctx{question_id, initial_window(p.order)};
  for (TokenId t : context_tokens) advance_window(ctx.window, t);
  std::vector<double> out;
  out.reserve(segment.size());
  for (TokenId t : segment) {
    out.push_back(log_prob(p, ctx, t));
    advance_window(ctx.window, t);
  }
  return out;
}

/** Sum of per_token_log_probs: log pi(segment | question, context_tokens). */
inline double sequence_log_prob(const PolicyTable& p, std::int64_t question_id,
                                std::span<const TokenId> context_tokens,
                                std::span<const TokenId> segment) {
  double s = 0.0;
  for (double lp : per_token_log_probs(p, question_id, context_tokens, segment)) s += lp;
  return s;
}

/** The Context in force just after conditioning on `context_tokens` (before any segment token). */
inline Context context_after(const PolicyTable& p, std::int64_t question_id,
                             std::span<const TokenId> context_tokens) {
  Context ctx{question_id, initial_window(p.order)};
  for (TokenId t : context_tokens) advance_window(ctx.window, t);
  return ctx;
}

// ===== Finite-difference oracle =====

/**
 * Central-difference gradient of an arbitrary scalar functional of the
 * policy, restricted to the given coordinates. Used as the oracle against
 * every analytic gradient path. Throws if `f` returns a non-finite value at
 * any probe point.
 */
inline GradientVector fd_gradient(const std::function<double(const PolicyTable&)>& f,
                                  const PolicyTable& p, double step,
                                  const std::vector<std::pair<Context, TokenId>>& coords) {
  if (!(step > 0.0)) throw std::invalid_argument("fd step must be positive");
  GradientVector g;
  for (const auto& [ctx, tok] : coords) {
    detail::check_token(p, tok);
    PolicyTable probe = p;
    std::vector<double>& row = probe.materialize_row(ctx);
    const double base = row[static_cast<std::size_t>(tok)];
    row[static_cast<std::size_t>(tok)] = base + step;
    const double hi = f(probe);
    row[static_cast<std::size_t>(tok)] = base - step;
    const double lo = f(probe);
    if (!std::isfinite(hi) || !std::isfinite(lo))
      throw std::runtime_error("fd_gradient: functional returned a non-finite value");
    g.materialize_row(ctx, p.vocab_size())[static_cast<std::size_t>(tok)] =
        (hi - lo) / (2.0 * step);
  }
  return g;
}

}  // namespace eqlen::policy
