#pragma once

/**
 * Decoding engines.
 *
 * rollout_independent: G trajectories sampled independently (the classic
 * group baseline).
 *
 * rollout_dualtrack: G/2 subgroups of two synchronized tracks decoding one
 * token per track per step. When a track emits EOS, the equal-length window
 * since the previous harvest becomes a SegmentPair (terminated track =
 * seg_plus, survivor = seg_minus); the survivor continues and a fresh track
 * launches with the survivor's full sequence as an inherited (copied, not
 * decoded) prefix. Repeats until the pair cap, dual termination, or the
 * length/token budget. Every decoded segment is recorded in a
 * GenerationTree so rewards can be propagated retrospectively; tokens
 * decoded after the last harvest on budget-cut tracks are recorded as
 * trailing segments the optimizer never sees.
 *
 * All randomness flows through counter-based streams keyed by
 * (seed, question, track, relaunch): a relaunch opens a new key, the
 * survivor keeps its own, so subgroups are independent and rollouts are
 * bitwise reproducible in any execution order.
 */

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <eqlen/core.hpp>
#include <eqlen/policy.hpp>
#include <eqlen/rng.hpp>

namespace eqlen::rollout {

// ===== Configuration =====

enum class PairMode { multi, single_pair };
enum class RelaunchMode { survivor_keeps, fresh_both };

NLOHMANN_JSON_SERIALIZE_ENUM(PairMode, {
    {PairMode::multi, "multi"},
    {PairMode::single_pair, "single"},
})
NLOHMANN_JSON_SERIALIZE_ENUM(RelaunchMode, {
    {RelaunchMode::survivor_keeps, "survivor_keeps"},
    {RelaunchMode::fresh_both, "fresh_both"},
})

struct RolloutConfig {
  std::int32_t group_size = 8;             // G: trajectories (independent) or 2x subgroups (dual)
  std::int64_t max_len = 64;               // per-track decoded-token cap
  std::int64_t max_pairs_per_subgroup = 8; // harvest cap per subgroup
  PairMode pair_mode = PairMode::multi;
  RelaunchMode relaunch = RelaunchMode::survivor_keeps;
  std::int64_t token_budget = -1;          // total decoded-token cap; -1 = group_size * max_len

  std::int64_t effective_budget() const {
    return token_budget < 0 ? static_cast<std::int64_t>(group_size) * max_len : token_budget;
  }

  /** Throws std::invalid_argument naming the offending field. */
  void validate(bool dual_track) const {
    if (group_size < 2) throw std::invalid_argument("rollout.group_size must be >= 2");
    if (dual_track && group_size % 2 != 0)
      throw std::invalid_argument("rollout.group_size must be even for equal-length pairing");
    if (max_len < 1) throw std::invalid_argument("rollout.max_len must be >= 1");
    if (max_pairs_per_subgroup < 1 || max_pairs_per_subgroup > 1024)
      throw std::invalid_argument("rollout.max_pairs_per_subgroup must lie in [1, 1024]");
    if (token_budget >= 0 && token_budget < group_size)
      throw std::invalid_argument("rollout.token_budget must allow at least one token per track");
  }

  bool operator==(const RolloutConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const RolloutConfig& c) {
  j = {{"group_size", c.group_size},
       {"max_len", c.max_len},
       {"max_pairs_per_subgroup", c.max_pairs_per_subgroup},
       {"pair_mode", c.pair_mode},
       {"relaunch", c.relaunch},
       {"token_budget", c.token_budget}};
}
inline void from_json(const nlohmann::json& j, RolloutConfig& c) {
  j.at("group_size").get_to(c.group_size);
  j.at("max_len").get_to(c.max_len);
  j.at("max_pairs_per_subgroup").get_to(c.max_pairs_per_subgroup);
  j.at("pair_mode").get_to(c.pair_mode);
  j.at("relaunch").get_to(c.relaunch);
  j.at("token_budget").get_to(c.token_budget);
}

// ===== Scripted termination (test stub) =====

/**
 * Deterministic stand-in for sampling: lane `l` of every subgroup emits EOS
 * exactly at the global steps listed in eos_steps_per_lane[l] and the filler
 * token otherwise (lanes beyond the list never terminate). Lets tests pin
 * harvest schedules exactly.
 */
struct ScriptedSchedule {
  std::vector<std::vector<std::int64_t>> eos_steps_per_lane;
  TokenId filler_token = 1;

  bool emits_eos(std::int64_t lane, std::int64_t step) const {
    if (lane < 0 || lane >= static_cast<std::int64_t>(eos_steps_per_lane.size())) return false;
    for (std::int64_t s : eos_steps_per_lane[static_cast<std::size_t>(lane)])
      if (s == step) return true;
    return false;
  }

  void validate(const Vocab& v) const {
    if (!v.contains(filler_token) || filler_token == v.eos_id)
      throw std::invalid_argument("ScriptedSchedule.filler_token must be a non-EOS vocab token");
  }

  bool operator==(const ScriptedSchedule&) const = default;
};

inline void to_json(nlohmann::json& j, const ScriptedSchedule& s) {
  j = {{"eos_steps_per_lane", s.eos_steps_per_lane}, {"filler_token", s.filler_token}};
}
inline void from_json(const nlohmann::json& j, ScriptedSchedule& s) {
  j.at("eos_steps_per_lane").get_to(s.eos_steps_per_lane);
  j.at("filler_token").get_to(s.filler_token);
}

// ===== Independent engine =====

inline GroupRollout rollout_independent(const PolicyTable& policy, const Vocab& vocab,
                                        const Question& question, const RolloutConfig& config,
                                        std::uint64_t seed) {
  config.validate(/*dual_track=*/false);
  vocab.validate();
  policy.validate();
  if (policy.vocab_size() != static_cast<std::size_t>(vocab.size))
    throw std::invalid_argument("policy vocabulary width differs from vocab.size");

  const std::int64_t per_track_cap =
      std::min<std::int64_t>(config.max_len, config.effective_budget() / config.group_size);

  GroupRollout out;
  out.question_id = question.question_id;
  out.family = RolloutFamily::independent;
  for (std::int32_t i = 0; i < config.group_size; ++i) {
    rng::Stream stream = rng::track_stream(seed, question.question_id, i, 0);
    Context ctx = policy::context_after(policy, question.question_id, question.prompt_tokens);
    Trajectory t;
    t.track_id = i;
    for (std::int64_t s = 0; s < per_track_cap; ++s) {
      const TokenId tok = policy::sample_token(policy, ctx, stream);
      t.tokens.push_back(tok);
      advance_window(ctx.window, tok);
      if (tok == vocab.eos_id) {
        t.terminated = true;
        break;
      }
    }
    out.token_budget_used += static_cast<std::int64_t>(t.tokens.size());
    out.trajectories.push_back(std::move(t));
  }
  return out;
}

// ===== Dual-track engine =====

namespace detail {

// Lane capacity bound per subgroup: 2 initial + up to 2 launches per harvest.
inline constexpr std::int64_t kLaneStride = 4096;

struct LiveTrack {
  std::size_t track_idx;  // into the subgroup-local track list
  rng::Stream stream;
  Context ctx;
};

}  // namespace detail

inline GroupRollout rollout_dualtrack(const PolicyTable& policy, const Vocab& vocab,
                                      const Question& question, const RolloutConfig& config,
                                      std::uint64_t seed,
                                      const ScriptedSchedule* script = nullptr) {
  config.validate(/*dual_track=*/true);
  vocab.validate();
  policy.validate();
  if (policy.vocab_size() != static_cast<std::size_t>(vocab.size))
    throw std::invalid_argument("policy vocabulary width differs from vocab.size");
  if (script) script->validate(vocab);

  const std::int64_t subgroups = config.group_size / 2;
  // The budget splits evenly across subgroups (they stay independent); two
  // tracks decode per step, so the per-subgroup step cap is budget/2 more.
  const std::int64_t budget_per_subgroup = config.effective_budget() / subgroups;
  const std::int64_t step_cap = std::min<std::int64_t>(config.max_len, budget_per_subgroup / 2);
  if (step_cap < 1)
    throw std::invalid_argument("rollout.token_budget must allow at least one step per subgroup");

  GroupRollout out;
  out.question_id = question.question_id;
  out.family = RolloutFamily::dual_track;

  for (std::int64_t sg = 0; sg < subgroups; ++sg) {
    std::vector<Track> tracks;
    std::vector<detail::LiveTrack> live;
    std::int64_t next_lane = 0;

    const auto launch = [&](std::int64_t relaunch_count, const std::vector<TokenId>& prefix,
                            const Context& ctx, std::int64_t parent_pair) {
      const std::int64_t lane = next_lane++;
      Track t;
      t.track_id = sg * detail::kLaneStride + lane;
      t.subgroup = sg;
      t.lane = lane;
      t.relaunch_count = relaunch_count;
      t.tokens = prefix;
      t.inherited_prefix_len = static_cast<std::int64_t>(prefix.size());
      t.parent_pair_index = parent_pair;
      tracks.push_back(std::move(t));
      live.push_back(detail::LiveTrack{
          tracks.size() - 1,
          rng::track_stream(seed, question.question_id, tracks.back().track_id, relaunch_count),
          ctx});
    };

    const Context root_ctx =
        policy::context_after(policy, question.question_id, question.prompt_tokens);
    launch(0, {}, root_ctx, -1);
    launch(0, {}, root_ctx, -1);

    std::vector<TokenId> x = question.prompt_tokens;  // conditional input of the next pair
    std::int64_t last_harvest = 0;
    std::int64_t prev_minus_node = -1;
    std::int64_t pairs_in_subgroup = 0;
    std::int64_t steps_executed = 0;
    bool closed = false;

    for (std::int64_t step = 1; step <= step_cap && !closed; ++step) {
      // Synchronous decode, lane order.
      for (detail::LiveTrack& lt : live) {
        Track& t = tracks[lt.track_idx];
        const TokenId tok = script ? (script->emits_eos(t.lane, step) ? vocab.eos_id
                                                                      : script->filler_token)
                                   : policy::sample_token(policy, lt.ctx, lt.stream);
        t.tokens.push_back(tok);
        advance_window(lt.ctx.window, tok);
      }
      steps_executed = step;

      const bool eos0 = tracks[live[0].track_idx].tokens.back() == vocab.eos_id;
      const bool eos1 = tracks[live[1].track_idx].tokens.back() == vocab.eos_id;
      if (!eos0 && !eos1) continue;

      // ----- Harvest -----
      const bool dual = eos0 && eos1;
      // Simultaneous termination: the lower track id supplies seg_plus.
      const std::size_t plus_slot = dual ? 0 : (eos0 ? 0 : 1);
      const std::size_t minus_slot = 1 - plus_slot;
      Track& plus_track = tracks[live[plus_slot].track_idx];
      Track& minus_track = tracks[live[minus_slot].track_idx];
      const std::int64_t length = step - last_harvest;

      SegmentPair pair;
      pair.pair_index = pairs_in_subgroup;
      pair.subgroup_index = sg;
      pair.context_tokens = x;
      pair.seg_plus.assign(plus_track.tokens.begin() + last_harvest,
                           plus_track.tokens.begin() + step);
      pair.seg_minus.assign(minus_track.tokens.begin() + last_harvest,
                            minus_track.tokens.begin() + step);
      pair.length = length;
      pair.dual_termination = dual;

      const auto add_node = [&](const Track& t, bool terminal, bool expired, int side) {
        TreeNode n;
        n.node_id = static_cast<std::int64_t>(out.tree.nodes.size());
        n.parent = prev_minus_node;
        n.subgroup = sg;
        n.track_id = t.track_id;
        n.start = last_harvest;
        n.end = step;
        n.tokens.assign(t.tokens.begin() + last_harvest, t.tokens.begin() + step);
        n.terminal = terminal;
        n.expired = expired;
        n.harvested = true;
        n.pair_index = pair.pair_index;
        n.side = side;
        out.tree.nodes.push_back(std::move(n));
        return out.tree.nodes.back().node_id;
      };

      pair.plus_node = add_node(plus_track, /*terminal=*/true, /*expired=*/false, +1);
      plus_track.status = TrackStatus::terminated;

      pairs_in_subgroup += 1;
      const bool cap_reached = pairs_in_subgroup >= config.max_pairs_per_subgroup;
      const bool mode_close = config.pair_mode == PairMode::single_pair;

      if (dual) {
        pair.minus_node = add_node(minus_track, /*terminal=*/true, /*expired=*/false, -1);
        minus_track.status = TrackStatus::terminated;
        pair.minus_direct_score = true;
        closed = true;
      } else if (mode_close || cap_reached) {
        // Subgroup closes at a harvest boundary: the survivor is retired
        // fully harvested and its truncated response is scored directly.
        pair.minus_node = add_node(minus_track, /*terminal=*/false, /*expired=*/true, -1);
        minus_track.status = TrackStatus::expired;
        pair.minus_direct_score = true;
        closed = true;
      } else {
        // Interior chain node: the sequence continues past it, either via the
        // survivor or via fresh tracks inheriting it as a prefix.
        pair.minus_node = add_node(minus_track, /*terminal=*/false, /*expired=*/false, -1);
        const std::vector<TokenId> inherited = minus_track.tokens;
        const Context inherited_ctx = live[minus_slot].ctx;

        if (config.relaunch == RelaunchMode::fresh_both) {
          // Ablation: retire the survivor too and restart two fresh tracks
          // from the inherited prefix (no stream continuity).
          minus_track.status = TrackStatus::expired;
          live.clear();
          launch(pairs_in_subgroup, inherited, inherited_ctx, pair.pair_index);
          launch(pairs_in_subgroup, inherited, inherited_ctx, pair.pair_index);
        } else {
          // Survivor persists with its own stream; one fresh track inherits
          // its full sequence as a masked prefix.
          detail::LiveTrack survivor = live[minus_slot];
          live.clear();
          live.push_back(survivor);
          launch(pairs_in_subgroup, inherited, inherited_ctx, pair.pair_index);
        }
        x.insert(x.end(), pair.seg_minus.begin(), pair.seg_minus.end());
        prev_minus_node = pair.minus_node;
        last_harvest = step;
      }

      out.pairs.push_back(std::move(pair));
    }

    // Budget/length cut with live tracks: record trailing segments.
    if (!closed) {
      for (detail::LiveTrack& lt : live) {
        Track& t = tracks[lt.track_idx];
        t.status = TrackStatus::expired;
        if (steps_executed > last_harvest) {
          TreeNode n;
          n.node_id = static_cast<std::int64_t>(out.tree.nodes.size());
          n.parent = prev_minus_node;
          n.subgroup = sg;
          n.track_id = t.track_id;
          n.start = last_harvest;
          n.end = steps_executed;
          n.tokens.assign(t.tokens.begin() + last_harvest, t.tokens.begin() + steps_executed);
          n.terminal = false;
          n.expired = true;
          n.harvested = false;
          n.pair_index = -1;
          n.side = 0;
          out.tree.nodes.push_back(std::move(n));
          out.trailing += steps_executed - last_harvest;
        }
      }
    }

    out.token_budget_used += 2 * steps_executed;
    for (Track& t : tracks) out.tracks.push_back(std::move(t));
  }

  out.validate();
  return out;
}

// ===== Derived accounting =====

/** Decoded tokens belonging to no harvested segment, recomputed from the tree. */
inline std::int64_t trailing_tokens(const GroupRollout& rollout) {
  if (rollout.family != RolloutFamily::dual_track) return 0;
  std::int64_t n = 0;
  for (const TreeNode& node : rollout.tree.nodes)
    if (!node.harvested) n += static_cast<std::int64_t>(node.tokens.size());
  return n;
}

/**
 * Samples that carry learning signal: 2 x non-skipped pairs for dual-track
 * rollouts; for independent rollouts, the trajectories whose reward differs
 * from the group mean (an all-equal group normalizes to zero advantages).
 */
inline std::int64_t effective_sample_count(const GroupRollout& rollout) {
  if (rollout.family == RolloutFamily::dual_track) {
    std::int64_t n = 0;
    for (const SegmentPair& p : rollout.pairs)
      if (!p.skipped) n += 2;
    return n;
  }
  if (rollout.trajectories.empty()) return 0;
  bool all_equal = true;
  double sum = 0.0;
  for (const Trajectory& t : rollout.trajectories) {
    all_equal = all_equal && t.reward == rollout.trajectories.front().reward;
    sum += t.reward;
  }
  if (all_equal) return 0;
  const double mean = sum / static_cast<double>(rollout.trajectories.size());
  std::int64_t n = 0;
  for (const Trajectory& t : rollout.trajectories)
    if (t.reward != mean) n += 1;
  return n;
}

}  // namespace eqlen::rollout
