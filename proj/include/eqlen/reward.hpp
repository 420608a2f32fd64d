#pragma once

/**
 * Verifiers and retrospective reward propagation.
 *
 * A verifier scores one complete response (the generated tokens, inherited
 * prefix included, prompt excluded). Responses that never emitted EOS score
 * 0 under every kind. The dual-track engine cannot know a surviving
 * segment's value at harvest time, so reward_minus is filled retrospectively
 * here: it aggregates the verifier scores of the terminated leaves that
 * descend from the surviving segment in the generation tree. A pair whose
 * two rewards tie carries no signal and is marked skipped; a surviving
 * segment whose every extension was cut by the budget is skipped with the
 * distinct reason `no_extension`.
 */

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include <eqlen/core.hpp>

namespace eqlen::reward {

// ===== Verifiers =====

enum class VerifierKind { answer_match, parity, custom_table };

struct Verifier {
  VerifierKind kind = VerifierKind::answer_match;
  bool operator==(const Verifier&) const = default;
};

NLOHMANN_JSON_SERIALIZE_ENUM(VerifierKind, {
    {VerifierKind::answer_match, "answer_match"},
    {VerifierKind::parity, "parity"},
    {VerifierKind::custom_table, "custom_table"},
})

inline void to_json(nlohmann::json& j, const Verifier& v) { j = {{"kind", v.kind}}; }
inline void from_json(const nlohmann::json& j, Verifier& v) { j.at("kind").get_to(v.kind); }

/**
 * Score one response. `tokens` is everything the policy generated for this
 * trajectory (inherited prefix included). Unterminated responses (no final
 * EOS) score 0 regardless of kind:
 *   - answer_match: 1 iff the token immediately preceding EOS equals the target
 *   - parity:       1 iff the non-EOS token count has the question's parity bit
 *   - custom_table: the table's value for the token preceding EOS (absent -> 0)
 */
inline double score_trajectory(const Verifier& verifier, const Vocab& vocab, const Question& q,
                               std::span<const TokenId> tokens) {
  if (tokens.empty() || tokens.back() != vocab.eos_id) return 0.0;
  switch (verifier.kind) {
    case VerifierKind::answer_match:
      return tokens.size() >= 2 && tokens[tokens.size() - 2] == q.target_token ? 1.0 : 0.0;
    case VerifierKind::parity:
      return static_cast<std::int64_t>(tokens.size() - 1) % 2 == q.parity_bit ? 1.0 : 0.0;
    case VerifierKind::custom_table: {
      if (tokens.size() < 2) return 0.0;
      auto it = q.reward_table.find(tokens[tokens.size() - 2]);
      return it == q.reward_table.end() ? 0.0 : it->second;
    }
  }
  throw std::invalid_argument("unknown verifier kind");
}

// ===== Aggregation over extensions =====

enum class RewardAggregation { max, mean };
enum class DescendantMode { transitive, one_hop };

NLOHMANN_JSON_SERIALIZE_ENUM(RewardAggregation, {
    {RewardAggregation::max, "max"},
    {RewardAggregation::mean, "mean"},
})
NLOHMANN_JSON_SERIALIZE_ENUM(DescendantMode, {
    {DescendantMode::transitive, "transitive"},
    {DescendantMode::one_hop, "one_hop"},
})

namespace detail {

/** Terminal nodes strictly below `id` (node-id order). one_hop restricts to direct children. */
inline std::vector<std::int64_t> terminal_descendants(const GenerationTree& tree, std::int64_t id,
                                                      DescendantMode mode) {
  std::vector<std::int64_t> out;
  if (mode == DescendantMode::one_hop) {
    for (std::int64_t c : tree.children(id))
      if (tree.nodes[static_cast<std::size_t>(c)].terminal) out.push_back(c);
    return out;
  }
  // Transitive: nodes are topologically ordered (parent < child), so one
  // forward sweep with a membership mask finds the whole subtree.
  std::vector<char> below(tree.nodes.size(), 0);
  for (const TreeNode& n : tree.nodes) {
    if (n.parent == id || (n.parent >= 0 && below[static_cast<std::size_t>(n.parent)])) {
      below[static_cast<std::size_t>(n.node_id)] = 1;
      if (n.terminal) out.push_back(n.node_id);
    }
  }
  return out;
}

inline double aggregate(const std::vector<double>& xs, RewardAggregation how) {
  if (xs.empty()) throw std::invalid_argument("aggregate over empty reward set");
  if (how == RewardAggregation::max) return *std::max_element(xs.begin(), xs.end());
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

}  // namespace detail

// ===== Skip rule =====

/**
 * A pair is skipped exactly when its rewards tie (within kRewardEqualTol;
 * binary rewards therefore compare exactly). `no_extension` pairs were
 * already skipped before reward_minus existed and are left untouched.
 */
inline void apply_skip_rule(std::vector<SegmentPair>& pairs) {
  for (SegmentPair& p : pairs) {
    if (p.skip_reason == SkipReason::no_extension) continue;
    if (!p.rewards_filled) continue;
    if (std::fabs(p.reward_plus - p.reward_minus) <= kRewardEqualTol) {
      p.skipped = true;
      p.skip_reason = SkipReason::equal_reward;
    } else {
      p.skipped = false;
      p.skip_reason = SkipReason::none;
    }
  }
}

// ===== Propagation =====

/**
 * Fill leaf rewards, pair rewards, and skip flags for a dual-track rollout.
 *
 * Every terminal tree node is scored on its full response (ancestor chain +
 * own segment). Then, per pair: reward_plus is the terminated track's leaf
 * score; reward_minus is either the surviving track's own direct score
 * (dual termination, or a subgroup closed at a harvest boundary by
 * pair_mode/cap — truncated responses score 0) or the aggregation of the
 * surviving segment's terminated descendants. Survivors with zero scored
 * descendants (every extension budget-cut) become `no_extension` skips.
 */
inline void propagate_rewards(GroupRollout& rollout, const Verifier& verifier, const Vocab& vocab,
                              const Question& question,
                              RewardAggregation aggregation = RewardAggregation::max,
                              DescendantMode mode = DescendantMode::transitive) {
  if (rollout.family != RolloutFamily::dual_track)
    throw std::invalid_argument("propagate_rewards requires a dual-track rollout");
  GenerationTree& tree = rollout.tree;

  tree.leaf_rewards.clear();
  for (const TreeNode& n : tree.nodes) {
    if (!n.terminal) continue;
    std::vector<TokenId> response = tree.ancestor_tokens(n.node_id);
    response.insert(response.end(), n.tokens.begin(), n.tokens.end());
    tree.leaf_rewards[n.node_id] = score_trajectory(verifier, vocab, question, response);
  }

  for (SegmentPair& p : rollout.pairs) {
    p.reward_plus = tree.leaf_rewards.at(p.plus_node);
    if (p.minus_direct_score) {
      const TreeNode& m = tree.nodes.at(static_cast<std::size_t>(p.minus_node));
      if (m.terminal) {
        p.reward_minus = tree.leaf_rewards.at(p.minus_node);
      } else {
        std::vector<TokenId> response = tree.ancestor_tokens(p.minus_node);
        response.insert(response.end(), m.tokens.begin(), m.tokens.end());
        p.reward_minus = score_trajectory(verifier, vocab, question, response);
      }
      p.rewards_filled = true;
    } else {
      const auto leaves = detail::terminal_descendants(tree, p.minus_node, mode);
      if (leaves.empty()) {
        p.skipped = true;
        p.skip_reason = SkipReason::no_extension;
        p.rewards_filled = false;
        continue;
      }
      std::vector<double> scores;
      scores.reserve(leaves.size());
      for (std::int64_t id : leaves) scores.push_back(tree.leaf_rewards.at(id));
      p.reward_minus = detail::aggregate(scores, aggregation);
      p.rewards_filled = true;
    }
  }
  apply_skip_rule(rollout.pairs);
}

/** Score every trajectory of an independent rollout (unterminated ones score 0). */
inline void score_group(GroupRollout& rollout, const Verifier& verifier, const Vocab& vocab,
                        const Question& question) {
  if (rollout.family != RolloutFamily::independent)
    throw std::invalid_argument("score_group requires an independent rollout");
  for (Trajectory& t : rollout.trajectories) {
    t.reward = score_trajectory(verifier, vocab, question, t.tokens);
    t.scored = true;
  }
}

}  // namespace eqlen::reward
