// Verifiers, retrospective reward propagation through the generation tree,
// descendant aggregation modes, and the skip rule.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <eqlen/policy.hpp>
#include <eqlen/reward.hpp>
#include <eqlen/rollout.hpp>

using namespace eqlen;
using reward::DescendantMode;
using reward::RewardAggregation;
using reward::Verifier;
using reward::VerifierKind;
using rollout::RolloutConfig;
using rollout::ScriptedSchedule;

namespace {

Vocab small_vocab() { return Vocab{8, 0}; }

PolicyTable uniform_policy(std::int32_t vocab_size) {
  PolicyTable p;
  p.order = 1;
  p.default_logits.assign(static_cast<std::size_t>(vocab_size), 0.0);
  return p;
}

Question table_question() {
  Question q;
  q.question_id = 1;
  q.target_token = 1;
  q.reward_table = {{2, 1.0}, {3, 0.8}, {5, 0.5}};
  return q;
}

/**
 * Hand-built two-survivor chain with distinct rewards under the custom
 * table: three harvests on one subgroup, the last closed at the harvest
 * boundary (truncated survivor scored directly).
 *
 *   n0 [2,0]*  n1 [3,4]      pair 0
 *   n2 [5,0]*  n3 [3,6]      pair 1 (children of n1)
 *   n4 [3,0]*  n5 [7,7]      pair 2 (children of n3; n5 closed, truncated)
 */
GroupRollout chain_rollout() {
  GroupRollout r;
  r.question_id = 1;
  r.family = RolloutFamily::dual_track;

  const auto node = [&r](std::int64_t id, std::int64_t parent, std::int64_t start,
                         std::vector<TokenId> toks, bool terminal, bool expired,
                         std::int64_t pair_index, int side) {
    TreeNode n;
    n.node_id = id;
    n.parent = parent;
    n.subgroup = 0;
    n.track_id = id;
    n.start = start;
    n.end = start + static_cast<std::int64_t>(toks.size());
    n.tokens = std::move(toks);
    n.terminal = terminal;
    n.expired = expired;
    n.harvested = true;
    n.pair_index = pair_index;
    n.side = side;
    r.tree.nodes.push_back(std::move(n));
  };
  node(0, -1, 0, {2, 0}, true, false, 0, +1);
  node(1, -1, 0, {3, 4}, false, false, 0, -1);
  node(2, 1, 2, {5, 0}, true, false, 1, +1);
  node(3, 1, 2, {3, 6}, false, false, 1, -1);
  node(4, 3, 4, {3, 0}, true, false, 2, +1);
  node(5, 3, 4, {7, 7}, false, true, 2, -1);

  const auto pair = [&r](std::int64_t idx, std::vector<TokenId> ctx, std::vector<TokenId> plus,
                         std::vector<TokenId> minus, std::int64_t pn, std::int64_t mn,
                         bool direct) {
    SegmentPair p;
    p.pair_index = idx;
    p.subgroup_index = 0;
    p.context_tokens = std::move(ctx);
    p.seg_plus = std::move(plus);
    p.seg_minus = std::move(minus);
    p.length = static_cast<std::int64_t>(p.seg_plus.size());
    p.plus_node = pn;
    p.minus_node = mn;
    p.minus_direct_score = direct;
    r.pairs.push_back(std::move(p));
  };
  pair(0, {}, {2, 0}, {3, 4}, 0, 1, false);
  pair(1, {3, 4}, {5, 0}, {3, 6}, 2, 3, false);
  pair(2, {3, 4, 3, 6}, {3, 0}, {7, 7}, 4, 5, true);

  r.token_budget_used = 12;
  r.validate();
  return r;
}

}  // namespace

TEST_CASE("score_trajectory handles every verifier kind and its guards") {
  const Vocab v = small_vocab();
  Question q = table_question();
  q.parity_bit = 0;

  Verifier answer{VerifierKind::answer_match};
  CHECK(reward::score_trajectory(answer, v, q, std::vector<TokenId>{3, 1, 0}) == 1.0);
  CHECK(reward::score_trajectory(answer, v, q, std::vector<TokenId>{1, 3, 0}) == 0.0);
  CHECK(reward::score_trajectory(answer, v, q, std::vector<TokenId>{1, 0}) == 1.0);
  // Unterminated, empty, and answerless responses all score zero.
  CHECK(reward::score_trajectory(answer, v, q, std::vector<TokenId>{1, 1}) == 0.0);
  CHECK(reward::score_trajectory(answer, v, q, std::vector<TokenId>{}) == 0.0);
  CHECK(reward::score_trajectory(answer, v, q, std::vector<TokenId>{0}) == 0.0);

  Verifier parity{VerifierKind::parity};
  CHECK(reward::score_trajectory(parity, v, q, std::vector<TokenId>{1, 1, 0}) == 1.0);  // 2 tokens
  CHECK(reward::score_trajectory(parity, v, q, std::vector<TokenId>{1, 0}) == 0.0);     // 1 token
  CHECK(reward::score_trajectory(parity, v, q, std::vector<TokenId>{0}) == 1.0);        // 0 tokens
  q.parity_bit = 1;
  CHECK(reward::score_trajectory(parity, v, q, std::vector<TokenId>{1, 0}) == 1.0);

  Verifier table{VerifierKind::custom_table};
  CHECK(reward::score_trajectory(table, v, q, std::vector<TokenId>{1, 3, 0}) == 0.8);
  CHECK(reward::score_trajectory(table, v, q, std::vector<TokenId>{3, 5, 0}) == 0.5);
  CHECK(reward::score_trajectory(table, v, q, std::vector<TokenId>{3, 7, 0}) == 0.0);  // absent
  CHECK(reward::score_trajectory(table, v, q, std::vector<TokenId>{0}) == 0.0);

  const nlohmann::json j = table;
  CHECK(j.at("kind") == "custom_table");
  CHECK(table == j.get<Verifier>());
}

TEST_CASE("propagation fills leaf rewards from full ancestor-chain responses") {
  GroupRollout r = chain_rollout();
  const Verifier table{VerifierKind::custom_table};
  reward::propagate_rewards(r, table, small_vocab(), table_question());

  // Leaves: n0 -> [2,0]=1.0, n2 -> [3,4,5,0]=0.5, n4 -> [3,4,3,6,3,0]=0.8.
  REQUIRE(r.tree.leaf_rewards.size() == 3);
  CHECK(r.tree.leaf_rewards.at(0) == 1.0);
  CHECK(r.tree.leaf_rewards.at(2) == 0.5);
  CHECK(r.tree.leaf_rewards.at(4) == 0.8);

  // Transitive max over the surviving segment's terminated descendants.
  CHECK(r.pairs[0].reward_plus == 1.0);
  CHECK(r.pairs[0].reward_minus == 0.8);  // max(0.5 via n2, 0.8 via n4)
  CHECK(r.pairs[1].reward_plus == 0.5);
  CHECK(r.pairs[1].reward_minus == 0.8);  // n4 only
  // The closed survivor's truncated response [3,4,3,6,7,7] never terminated.
  CHECK(r.pairs[2].reward_plus == 0.8);
  CHECK(r.pairs[2].reward_minus == 0.0);

  for (const SegmentPair& p : r.pairs) {
    CHECK(p.rewards_filled);
    CHECK_FALSE(p.skipped);
    CHECK(p.skip_reason == SkipReason::none);
  }
  r.validate();
  CHECK(rollout::effective_sample_count(r) == 6);
}

TEST_CASE("aggregation and descendant modes change reward_minus as specified") {
  const Verifier table{VerifierKind::custom_table};

  GroupRollout r = chain_rollout();
  reward::propagate_rewards(r, table, small_vocab(), table_question(), RewardAggregation::mean,
                            DescendantMode::transitive);
  CHECK(r.pairs[0].reward_minus == doctest::Approx(0.65).epsilon(1e-15));  // mean(0.5, 0.8)
  CHECK(r.pairs[1].reward_minus == 0.8);

  GroupRollout h = chain_rollout();
  reward::propagate_rewards(h, table, small_vocab(), table_question(), RewardAggregation::max,
                            DescendantMode::one_hop);
  // Direct children of n1: n2 (terminal, 0.5) and n3 (not terminal).
  CHECK(h.pairs[0].reward_minus == 0.5);
  CHECK(h.pairs[1].reward_minus == 0.8);
}

TEST_CASE("skip rule marks ties, respects the tolerance, leaves the rest") {
  std::vector<SegmentPair> pairs(4);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    pairs[i].length = 1;
    pairs[i].seg_plus = {1};
    pairs[i].seg_minus = {2};
    pairs[i].rewards_filled = true;
  }
  pairs[0].reward_plus = 0.5;
  pairs[0].reward_minus = 0.5 + 1e-13;  // inside tolerance: a tie
  pairs[1].reward_plus = 0.5;
  pairs[1].reward_minus = 0.5 + 1e-9;   // outside tolerance: signal
  pairs[2].rewards_filled = false;       // untouched
  pairs[3].rewards_filled = false;       // no_extension stays skipped
  pairs[3].skipped = true;
  pairs[3].skip_reason = SkipReason::no_extension;

  reward::apply_skip_rule(pairs);
  CHECK(pairs[0].skipped);
  CHECK(pairs[0].skip_reason == SkipReason::equal_reward);
  CHECK_FALSE(pairs[1].skipped);
  CHECK_FALSE(pairs[2].skipped);
  CHECK(pairs[2].skip_reason == SkipReason::none);
  CHECK(pairs[3].skipped);
  CHECK(pairs[3].skip_reason == SkipReason::no_extension);
  for (const SegmentPair& p : pairs) CHECK(validate_pair(p));

  // Re-running after rewards change un-skips a previously tied pair.
  pairs[0].reward_minus = 0.25;
  reward::apply_skip_rule(pairs);
  CHECK_FALSE(pairs[0].skipped);
  CHECK(pairs[0].skip_reason == SkipReason::none);
}

TEST_CASE("scripted rollout with a uniform filler ties every pair") {
  // All plus responses end <filler, EOS> and the dual-terminated survivor
  // matches its sibling exactly, so every reward ties and every pair skips.
  ScriptedSchedule s;
  s.eos_steps_per_lane = {{3}, {5}, {9}, {9}};
  RolloutConfig c;
  c.group_size = 2;
  c.max_len = 64;
  GroupRollout r = rollout::rollout_dualtrack(uniform_policy(8), small_vocab(), table_question(),
                                              c, 1, &s);
  reward::propagate_rewards(r, Verifier{VerifierKind::answer_match}, small_vocab(),
                            table_question());
  REQUIRE(r.pairs.size() == 3);
  for (const SegmentPair& p : r.pairs) {
    CHECK(p.reward_plus == 1.0);  // answer token is the filler = target
    CHECK(p.reward_minus == 1.0);
    CHECK(p.skipped);
    CHECK(p.skip_reason == SkipReason::equal_reward);
  }
  CHECK(rollout::effective_sample_count(r) == 0);
  r.validate();
}

TEST_CASE("dual termination scores the survivor as its own leaf") {
  ScriptedSchedule s;
  s.eos_steps_per_lane = {{3}, {3}};
  RolloutConfig c;
  c.group_size = 2;
  c.max_len = 64;
  GroupRollout r = rollout::rollout_dualtrack(uniform_policy(8), small_vocab(), table_question(),
                                              c, 1, &s);
  REQUIRE(r.pairs.size() == 1);
  REQUIRE(r.pairs[0].dual_termination);
  reward::propagate_rewards(r, Verifier{VerifierKind::answer_match}, small_vocab(),
                            table_question());
  CHECK(r.tree.leaf_rewards.size() == 2);  // both sides are scored leaves
  CHECK(r.pairs[0].rewards_filled);
  CHECK(r.pairs[0].reward_plus == 1.0);
  CHECK(r.pairs[0].reward_minus == 1.0);
  CHECK(r.pairs[0].skipped);
}

TEST_CASE("survivors whose every extension was cut become no_extension skips") {
  ScriptedSchedule s;
  s.eos_steps_per_lane = {{3}};
  RolloutConfig c;
  c.group_size = 2;
  c.max_len = 64;

  // Trailing segments exist but none terminated.
  c.token_budget = 12;
  GroupRollout r = rollout::rollout_dualtrack(uniform_policy(8), small_vocab(), table_question(),
                                              c, 1, &s);
  reward::propagate_rewards(r, Verifier{VerifierKind::answer_match}, small_vocab(),
                            table_question());
  REQUIRE(r.pairs.size() == 1);
  CHECK(r.pairs[0].skipped);
  CHECK(r.pairs[0].skip_reason == SkipReason::no_extension);
  CHECK_FALSE(r.pairs[0].rewards_filled);
  CHECK(validate_pair(r.pairs[0]));
  CHECK(rollout::effective_sample_count(r) == 0);
  r.validate();

  // Budget ends exactly at the harvest: the survivor has no children at all.
  c.token_budget = 6;
  GroupRollout r2 = rollout::rollout_dualtrack(uniform_policy(8), small_vocab(), table_question(),
                                               c, 1, &s);
  reward::propagate_rewards(r2, Verifier{VerifierKind::answer_match}, small_vocab(),
                            table_question());
  REQUIRE(r2.pairs.size() == 1);
  CHECK(r2.pairs[0].skip_reason == SkipReason::no_extension);
}

TEST_CASE("propagation rejects the wrong rollout family and vice versa") {
  GroupRollout indep;
  indep.family = RolloutFamily::independent;
  CHECK_THROWS_AS(reward::propagate_rewards(indep, Verifier{}, small_vocab(), table_question()),
                  std::invalid_argument);
  GroupRollout dual = chain_rollout();
  CHECK_THROWS_AS(reward::score_group(dual, Verifier{}, small_vocab(), table_question()),
                  std::invalid_argument);
}

TEST_CASE("independent groups score every trajectory in place") {
  const Vocab v = small_vocab();
  RolloutConfig c;
  c.group_size = 8;
  c.max_len = 16;
  Question q = table_question();

  GroupRollout r = rollout::rollout_independent(uniform_policy(8), v, q, c, 3);
  reward::score_group(r, Verifier{VerifierKind::answer_match}, v, q);
  for (const Trajectory& t : r.trajectories) {
    CHECK(t.scored);
    if (!t.terminated) {
      CHECK(t.reward == 0.0);
    } else {
      const bool hit = t.tokens.size() >= 2 && t.tokens[t.tokens.size() - 2] == q.target_token;
      CHECK(t.reward == (hit ? 1.0 : 0.0));
    }
  }
}
