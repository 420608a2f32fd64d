#pragma once

/**
 * Core value types: vocabulary, contexts, the tabular softmax policy, tracks,
 * equal-length segment pairs, the generation tree, group rollouts, sparse
 * gradients, and questions — plus JSON (de)serialization and the pair
 * validity predicate.
 *
 * Everything here is a plain value with deterministic ordering (std::map
 * keyed by Context) so that iteration order, serialization bytes, and
 * arithmetic reduction order are all reproducible run-to-run.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace eqlen {

using TokenId = std::int32_t;

/** Sentinel occupying context-window slots before any token exists. */
inline constexpr TokenId kBos = -1;

/** Tolerance below which two real rewards are treated as equal (binary rewards compare exactly). */
inline constexpr double kRewardEqualTol = 1e-12;

// ===== Vocabulary =====

struct Vocab {
  std::int32_t size = 0;      // token ids are 0..size-1
  TokenId eos_id = 0;

  void validate() const {
    if (size < 2) throw std::invalid_argument("Vocab.size must be >= 2");
    if (eos_id < 0 || eos_id >= size)
      throw std::invalid_argument("Vocab.eos_id must lie in [0, size)");
  }
  bool contains(TokenId t) const { return t >= 0 && t < size; }
  bool operator==(const Vocab&) const = default;
};

// ===== Context =====

/**
 * Conditioning state of the tabular policy: the question identity plus a
 * fixed-width window of the most recent tokens (left-padded with kBos).
 */
struct Context {
  std::int64_t question_id = 0;
  std::vector<TokenId> window;

  bool operator==(const Context&) const = default;
  // Ordering gives std::map a deterministic iteration order.
  bool operator<(const Context& o) const {
    if (question_id != o.question_id) return question_id < o.question_id;
    return window < o.window;
  }
};

/** All-kBos window of width `order`. */
inline std::vector<TokenId> initial_window(int order) {
  if (order < 1) throw std::invalid_argument("context order must be >= 1");
  return std::vector<TokenId>(static_cast<std::size_t>(order), kBos);
}

/** Shift `tok` into the window (drops the oldest slot). */
inline void advance_window(std::vector<TokenId>& window, TokenId tok) {
  if (window.empty()) throw std::invalid_argument("context window must be non-empty");
  std::rotate(window.begin(), window.begin() + 1, window.end());
  window.back() = tok;
}

// ===== Policy table =====

/**
 * Tabular softmax policy. A context not present in `logits` falls back to
 * `default_logits`, whose length defines the vocabulary size. Logits are raw
 * reals; distributions are produced by the policy operations (max-shifted
 * softmax), which stay finite for |logit| up to ~1e3.
 */
struct PolicyTable {
  int order = 2;
  std::map<Context, std::vector<double>> logits;
  std::vector<double> default_logits;

  std::size_t vocab_size() const { return default_logits.size(); }

  void validate() const {
    if (order < 1) throw std::invalid_argument("PolicyTable.order must be >= 1");
    if (default_logits.size() < 2)
      throw std::invalid_argument("PolicyTable.default_logits must cover a vocabulary of >= 2");
    for (const auto& [ctx, row] : logits) {
      if (row.size() != default_logits.size())
        throw std::invalid_argument("PolicyTable row width differs from default_logits");
      if (ctx.window.size() != static_cast<std::size_t>(order))
        throw std::invalid_argument("PolicyTable context window width differs from order");
    }
  }

  /** Row for `ctx`, falling back to default_logits for unseen contexts. */
  const std::vector<double>& row(const Context& ctx) const {
    auto it = logits.find(ctx);
    return it == logits.end() ? default_logits : it->second;
  }

  /** Row for `ctx`, materializing it from default_logits if absent (for updates). */
  std::vector<double>& materialize_row(const Context& ctx) {
    auto it = logits.find(ctx);
    if (it == logits.end()) it = logits.emplace(ctx, default_logits).first;
    return it->second;
  }

  bool operator==(const PolicyTable&) const = default;
};

// ===== Tracks =====

enum class TrackStatus {
  active,      // still decoding
  terminated,  // emitted EOS (a scored leaf)
  expired,     // stopped without EOS: budget/length cut, or retired at a mode/cap close
};

/**
 * One decoding track. `tokens` is the full global sequence from step 1,
 * including any inherited prefix (the first `inherited_prefix_len` tokens
 * were copied from the surviving track at launch, not decoded).
 */
struct Track {
  std::int64_t track_id = 0;       // globally unique within a rollout (RNG key)
  std::int64_t subgroup = 0;
  std::int64_t lane = 0;           // launch index within the subgroup (0,1 initial)
  std::int64_t relaunch_count = 0; // harvest index at which this track was launched
  std::vector<TokenId> tokens;
  std::int64_t inherited_prefix_len = 0;
  TrackStatus status = TrackStatus::active;
  std::int64_t parent_pair_index = -1;  // harvest that launched this track, -1 for initial

  bool operator==(const Track&) const = default;
};

// ===== Segment pairs =====

enum class SkipReason { none, equal_reward, no_extension };

/**
 * One harvested equal-length pair. Both segments were decoded synchronously
 * from the same conditional input `context_tokens` (question prompt +
 * inherited prefix); seg_plus ends in EOS, seg_minus is the surviving
 * track's slice over the same window.
 */
struct SegmentPair {
  std::int64_t pair_index = 0;     // harvest order within the subgroup (0-based)
  std::int64_t subgroup_index = 0;
  std::vector<TokenId> context_tokens;  // conditional input x_i (prompt + inherited prefix)
  std::vector<TokenId> seg_plus;
  std::vector<TokenId> seg_minus;
  std::int64_t length = 0;

  double reward_plus = 0.0;
  double reward_minus = 0.0;
  bool rewards_filled = false;     // reward_minus is retrospective; false until propagation
  bool skipped = false;
  SkipReason skip_reason = SkipReason::none;

  bool dual_termination = false;   // both tracks emitted EOS on the same step
  bool minus_direct_score = false; // seg_minus scored directly (dual termination or mode/cap close)
  std::int64_t plus_node = -1;     // GenerationTree node ids
  std::int64_t minus_node = -1;

  bool operator==(const SegmentPair&) const = default;
};

/**
 * Pair validity predicate: equal segment lengths matching `length` (> 0), and
 * the skip flag consistent with the rewards — a pair is skipped exactly when
 * its rewards are equal (within kRewardEqualTol), except that `no_extension`
 * marks a pair skipped before reward_minus could ever be filled.
 */
inline bool validate_pair(const SegmentPair& p) {
  if (p.length <= 0) return false;
  if (p.seg_plus.size() != static_cast<std::size_t>(p.length)) return false;
  if (p.seg_minus.size() != static_cast<std::size_t>(p.length)) return false;
  if (p.skip_reason == SkipReason::no_extension) return p.skipped;
  if (!p.rewards_filled) return !p.skipped;
  const bool equal = std::fabs(p.reward_plus - p.reward_minus) <= kRewardEqualTol;
  return p.skipped == equal;
}

// ===== Generation tree =====

/**
 * One segment record. Global positions [start, end) locate the segment on
 * its owning track; `harvested` is false for trailing segments (decoded
 * after the last harvest, cut by budget — never seen by the optimizer).
 */
struct TreeNode {
  std::int64_t node_id = 0;
  std::int64_t parent = -1;        // index of the surviving segment this extends
  std::int64_t subgroup = 0;
  std::int64_t track_id = 0;
  std::int64_t start = 0;
  std::int64_t end = 0;
  std::vector<TokenId> tokens;
  bool terminal = false;           // ends with EOS (a scored leaf candidate)
  bool expired = false;            // owner stopped without EOS
  bool harvested = true;
  std::int64_t pair_index = -1;    // harvest this segment belongs to (-1 trailing)
  int side = 0;                    // +1 seg_plus, -1 seg_minus, 0 trailing

  bool operator==(const TreeNode&) const = default;
};

/**
 * Ancestry record of one subgroup-set of segments. Edges run from a
 * surviving segment to every segment decoded under it; a node's conditional
 * input is the concatenation of its strict ancestors' tokens (plus the
 * question prompt, which lives outside the tree).
 */
struct GenerationTree {
  std::vector<TreeNode> nodes;               // node_id == index
  std::map<std::int64_t, double> leaf_rewards;  // terminal node id -> verifier reward

  void validate() const {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const TreeNode& n = nodes[i];
      if (n.node_id != static_cast<std::int64_t>(i))
        throw std::invalid_argument("GenerationTree node ids must equal their index");
      if (n.parent >= n.node_id)
        throw std::invalid_argument("GenerationTree parents must precede children (acyclic)");
      if (n.parent >= 0 && nodes[static_cast<std::size_t>(n.parent)].subgroup != n.subgroup)
        throw std::invalid_argument("GenerationTree edges may not cross subgroups");
      if (n.tokens.size() != static_cast<std::size_t>(n.end - n.start))
        throw std::invalid_argument("GenerationTree node span disagrees with its token count");
      if (n.parent >= 0 && nodes[static_cast<std::size_t>(n.parent)].end != n.start)
        throw std::invalid_argument("GenerationTree child must start where its parent ends");
    }
    for (const auto& [id, r] : leaf_rewards) {
      if (id < 0 || id >= static_cast<std::int64_t>(nodes.size()))
        throw std::invalid_argument("GenerationTree leaf_rewards references unknown node");
      if (!nodes[static_cast<std::size_t>(id)].terminal)
        throw std::invalid_argument("GenerationTree leaf_rewards entry on non-terminal node");
      if (!std::isfinite(r)) throw std::invalid_argument("GenerationTree leaf reward not finite");
    }
  }

  /** Children of `id`, in node order. */
  std::vector<std::int64_t> children(std::int64_t id) const {
    std::vector<std::int64_t> out;
    for (const TreeNode& n : nodes)
      if (n.parent == id) out.push_back(n.node_id);
    return out;
  }

  /** Concatenated tokens of the strict ancestor chain of `id` (the node's inherited prefix). */
  std::vector<TokenId> ancestor_tokens(std::int64_t id) const {
    std::vector<std::int64_t> chain;
    for (std::int64_t p = nodes.at(static_cast<std::size_t>(id)).parent; p >= 0;
         p = nodes[static_cast<std::size_t>(p)].parent)
      chain.push_back(p);
    std::vector<TokenId> out;
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
      const auto& t = nodes[static_cast<std::size_t>(*it)].tokens;
      out.insert(out.end(), t.begin(), t.end());
    }
    return out;
  }

  bool operator==(const GenerationTree&) const = default;
};

// ===== Independent trajectories =====

struct Trajectory {
  std::int64_t track_id = 0;
  std::vector<TokenId> tokens;
  bool terminated = false;  // ended with EOS (vs. cut at the length/budget cap)
  double reward = 0.0;
  bool scored = false;

  bool operator==(const Trajectory&) const = default;
};

// ===== Group rollouts =====

enum class RolloutFamily { independent, dual_track };

/**
 * Everything one question's rollout produced. Exactly one of
 * {trajectories, pairs} is populated, per the family.
 */
struct GroupRollout {
  std::int64_t question_id = 0;
  RolloutFamily family = RolloutFamily::independent;
  std::vector<Trajectory> trajectories;  // independent family
  std::vector<SegmentPair> pairs;        // dual-track family
  GenerationTree tree;                   // dual-track family
  std::vector<Track> tracks;             // dual-track family
  std::int64_t token_budget_used = 0;    // decoded tokens (inherited prefixes are copies, not decodes)
  std::int64_t trailing = 0;             // decoded tokens that belong to no harvested segment

  void validate() const {
    if (family == RolloutFamily::independent) {
      if (!pairs.empty() || !tree.nodes.empty() || !tracks.empty())
        throw std::invalid_argument("independent rollout must not carry pairs/tree/tracks");
    } else {
      if (!trajectories.empty())
        throw std::invalid_argument("dual-track rollout must not carry trajectories");
      tree.validate();
      for (const SegmentPair& p : pairs)
        if (!validate_pair(p)) throw std::invalid_argument("dual-track rollout carries an invalid pair");
    }
    if (token_budget_used < 0 || trailing < 0 || trailing > token_budget_used)
      throw std::invalid_argument("rollout token accounting out of range");
  }

  bool operator==(const GroupRollout&) const = default;
};

// ===== Sparse gradients =====

/**
 * Sparse gradient over policy coordinates, stored as dense vocabulary rows
 * keyed by Context (mirroring PolicyTable). Absent coordinates are zero.
 */
struct GradientVector {
  std::map<Context, std::vector<double>> rows;

  /** Row for `ctx`, materializing zeros if absent. Width fixed by first use. */
  std::vector<double>& materialize_row(const Context& ctx, std::size_t width) {
    auto it = rows.find(ctx);
    if (it == rows.end()) it = rows.emplace(ctx, std::vector<double>(width, 0.0)).first;
    return it->second;
  }

  double entry(const Context& ctx, TokenId tok) const {
    auto it = rows.find(ctx);
    if (it == rows.end()) return 0.0;
    return it->second.at(static_cast<std::size_t>(tok));
  }

  std::size_t entry_count() const {
    std::size_t n = 0;
    for (const auto& [ctx, row] : rows) n += row.size();
    return n;
  }

  /** this += a * g (row-wise; widths must agree on shared rows). */
  void axpy(double a, const GradientVector& g) {
    for (const auto& [ctx, row] : g.rows) {
      auto& dst = materialize_row(ctx, row.size());
      if (dst.size() != row.size())
        throw std::invalid_argument("GradientVector.axpy: row width mismatch");
      for (std::size_t v = 0; v < row.size(); ++v) dst[v] += a * row[v];
    }
  }

  void scale(double s) {
    for (auto& [ctx, row] : rows)
      for (double& x : row) x *= s;
  }

  /** Divide every entry by integer `d` (single rounding per coordinate). */
  void divide(double d) {
    for (auto& [ctx, row] : rows)
      for (double& x : row) x /= d;
  }

  double norm2() const {
    double s = 0.0;
    for (const auto& [ctx, row] : rows)
      for (double x : row) s += x * x;
    return std::sqrt(s);
  }

  /** L2 norm over just the given (context, token) coordinates. */
  double restricted_norm2(const std::vector<std::pair<Context, TokenId>>& coords) const {
    double s = 0.0;
    for (const auto& [ctx, tok] : coords) {
      const double x = entry(ctx, tok);
      s += x * x;
    }
    return std::sqrt(s);
  }

  bool is_finite() const {
    for (const auto& [ctx, row] : rows)
      for (double x : row)
        if (!std::isfinite(x)) return false;
    return true;
  }

  bool operator==(const GradientVector&) const = default;
};

// ===== Questions =====

/**
 * A question is the unit of conditioning: an id (part of every Context), an
 * optional prompt token sequence, and the target data the verifier reads.
 */
struct Question {
  std::int64_t question_id = 0;
  std::vector<TokenId> prompt_tokens;
  TokenId target_token = -1;               // answer-match verifier
  int parity_bit = 0;                      // parity verifier
  std::map<TokenId, double> reward_table;  // custom-table verifier

  bool operator==(const Question&) const = default;
};

// ===== Formatting =====

namespace detail {

/** Shortest-round-trip-ish decimal for deterministic CSV output. */
inline std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace detail

// ===== JSON =====
// Enums serialize as strings so files stay readable and schema-stable.

NLOHMANN_JSON_SERIALIZE_ENUM(TrackStatus, {
    {TrackStatus::active, "active"},
    {TrackStatus::terminated, "terminated"},
    {TrackStatus::expired, "expired"},
})

NLOHMANN_JSON_SERIALIZE_ENUM(SkipReason, {
    {SkipReason::none, "none"},
    {SkipReason::equal_reward, "equal_reward"},
    {SkipReason::no_extension, "no_extension"},
})

NLOHMANN_JSON_SERIALIZE_ENUM(RolloutFamily, {
    {RolloutFamily::independent, "independent"},
    {RolloutFamily::dual_track, "dual_track"},
})

inline void to_json(nlohmann::json& j, const Vocab& v) {
  j = {{"size", v.size}, {"eos_id", v.eos_id}};
}
inline void from_json(const nlohmann::json& j, Vocab& v) {
  j.at("size").get_to(v.size);
  j.at("eos_id").get_to(v.eos_id);
}

inline void to_json(nlohmann::json& j, const Context& c) {
  j = {{"question_id", c.question_id}, {"window", c.window}};
}
inline void from_json(const nlohmann::json& j, Context& c) {
  j.at("question_id").get_to(c.question_id);
  j.at("window").get_to(c.window);
}

inline void to_json(nlohmann::json& j, const PolicyTable& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [ctx, row] : p.logits) rows.push_back({{"context", ctx}, {"logits", row}});
  j = {{"order", p.order}, {"default_logits", p.default_logits}, {"rows", std::move(rows)}};
}
inline void from_json(const nlohmann::json& j, PolicyTable& p) {
  p = PolicyTable{};
  j.at("order").get_to(p.order);
  j.at("default_logits").get_to(p.default_logits);
  for (const auto& e : j.at("rows"))
    p.logits.emplace(e.at("context").get<Context>(), e.at("logits").get<std::vector<double>>());
}

inline void to_json(nlohmann::json& j, const Track& t) {
  j = {{"track_id", t.track_id},     {"subgroup", t.subgroup},
       {"lane", t.lane},             {"relaunch_count", t.relaunch_count},
       {"tokens", t.tokens},         {"inherited_prefix_len", t.inherited_prefix_len},
       {"status", t.status},         {"parent_pair_index", t.parent_pair_index}};
}
inline void from_json(const nlohmann::json& j, Track& t) {
  j.at("track_id").get_to(t.track_id);
  j.at("subgroup").get_to(t.subgroup);
  j.at("lane").get_to(t.lane);
  j.at("relaunch_count").get_to(t.relaunch_count);
  j.at("tokens").get_to(t.tokens);
  j.at("inherited_prefix_len").get_to(t.inherited_prefix_len);
  j.at("status").get_to(t.status);
  j.at("parent_pair_index").get_to(t.parent_pair_index);
}

inline void to_json(nlohmann::json& j, const SegmentPair& p) {
  j = {{"pair_index", p.pair_index},
       {"subgroup_index", p.subgroup_index},
       {"context_tokens", p.context_tokens},
       {"seg_plus", p.seg_plus},
       {"seg_minus", p.seg_minus},
       {"length", p.length},
       {"reward_plus", p.reward_plus},
       {"reward_minus", p.reward_minus},
       {"rewards_filled", p.rewards_filled},
       {"skipped", p.skipped},
       {"skip_reason", p.skip_reason},
       {"dual_termination", p.dual_termination},
       {"minus_direct_score", p.minus_direct_score},
       {"plus_node", p.plus_node},
       {"minus_node", p.minus_node}};
}
inline void from_json(const nlohmann::json& j, SegmentPair& p) {
  j.at("pair_index").get_to(p.pair_index);
  j.at("subgroup_index").get_to(p.subgroup_index);
  j.at("context_tokens").get_to(p.context_tokens);
  j.at("seg_plus").get_to(p.seg_plus);
  j.at("seg_minus").get_to(p.seg_minus);
  j.at("length").get_to(p.length);
  j.at("reward_plus").get_to(p.reward_plus);
  j.at("reward_minus").get_to(p.reward_minus);
  j.at("rewards_filled").get_to(p.rewards_filled);
  j.at("skipped").get_to(p.skipped);
  j.at("skip_reason").get_to(p.skip_reason);
  j.at("dual_termination").get_to(p.dual_termination);
  j.at("minus_direct_score").get_to(p.minus_direct_score);
  j.at("plus_node").get_to(p.plus_node);
  j.at("minus_node").get_to(p.minus_node);
}

inline void to_json(nlohmann::json& j, const TreeNode& n) {
  j = {{"node_id", n.node_id}, {"parent", n.parent},   {"subgroup", n.subgroup},
       {"track_id", n.track_id}, {"start", n.start},   {"end", n.end},
       {"tokens", n.tokens},   {"terminal", n.terminal}, {"expired", n.expired},
       {"harvested", n.harvested}, {"pair_index", n.pair_index}, {"side", n.side}};
}
inline void from_json(const nlohmann::json& j, TreeNode& n) {
  j.at("node_id").get_to(n.node_id);
  j.at("parent").get_to(n.parent);
  j.at("subgroup").get_to(n.subgroup);
  j.at("track_id").get_to(n.track_id);
  j.at("start").get_to(n.start);
  j.at("end").get_to(n.end);
  j.at("tokens").get_to(n.tokens);
  j.at("terminal").get_to(n.terminal);
  j.at("expired").get_to(n.expired);
  j.at("harvested").get_to(n.harvested);
  j.at("pair_index").get_to(n.pair_index);
  j.at("side").get_to(n.side);
}

inline void to_json(nlohmann::json& j, const GenerationTree& t) {
  nlohmann::json rewards = nlohmann::json::array();
  for (const auto& [id, r] : t.leaf_rewards) rewards.push_back({{"node", id}, {"reward", r}});
  j = {{"nodes", t.nodes}, {"leaf_rewards", std::move(rewards)}};
}
inline void from_json(const nlohmann::json& j, GenerationTree& t) {
  t = GenerationTree{};
  j.at("nodes").get_to(t.nodes);
  for (const auto& e : j.at("leaf_rewards"))
    t.leaf_rewards.emplace(e.at("node").get<std::int64_t>(), e.at("reward").get<double>());
}

inline void to_json(nlohmann::json& j, const Trajectory& t) {
  j = {{"track_id", t.track_id}, {"tokens", t.tokens}, {"terminated", t.terminated},
       {"reward", t.reward},     {"scored", t.scored}};
}
inline void from_json(const nlohmann::json& j, Trajectory& t) {
  j.at("track_id").get_to(t.track_id);
  j.at("tokens").get_to(t.tokens);
  j.at("terminated").get_to(t.terminated);
  j.at("reward").get_to(t.reward);
  j.at("scored").get_to(t.scored);
}

inline void to_json(nlohmann::json& j, const GroupRollout& g) {
  j = {{"question_id", g.question_id},
       {"family", g.family},
       {"trajectories", g.trajectories},
       {"pairs", g.pairs},
       {"tree", g.tree},
       {"tracks", g.tracks},
       {"token_budget_used", g.token_budget_used},
       {"trailing", g.trailing}};
}
inline void from_json(const nlohmann::json& j, GroupRollout& g) {
  j.at("question_id").get_to(g.question_id);
  j.at("family").get_to(g.family);
  j.at("trajectories").get_to(g.trajectories);
  j.at("pairs").get_to(g.pairs);
  j.at("tree").get_to(g.tree);
  j.at("tracks").get_to(g.tracks);
  j.at("token_budget_used").get_to(g.token_budget_used);
  j.at("trailing").get_to(g.trailing);
}

inline void to_json(nlohmann::json& j, const GradientVector& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [ctx, row] : g.rows) rows.push_back({{"context", ctx}, {"values", row}});
  j = {{"rows", std::move(rows)}};
}
inline void from_json(const nlohmann::json& j, GradientVector& g) {
  g = GradientVector{};
  for (const auto& e : j.at("rows"))
    g.rows.emplace(e.at("context").get<Context>(), e.at("values").get<std::vector<double>>());
}

inline void to_json(nlohmann::json& j, const Question& q) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [tok, r] : q.reward_table) table.push_back({{"token", tok}, {"reward", r}});
  j = {{"question_id", q.question_id}, {"prompt_tokens", q.prompt_tokens},
       {"target_token", q.target_token}, {"parity_bit", q.parity_bit},
       {"reward_table", std::move(table)}};
}
inline void from_json(const nlohmann::json& j, Question& q) {
  q = Question{};
  j.at("question_id").get_to(q.question_id);
  j.at("prompt_tokens").get_to(q.prompt_tokens);
  j.at("target_token").get_to(q.target_token);
  j.at("parity_bit").get_to(q.parity_bit);
  for (const auto& e : j.at("reward_table"))
    q.reward_table.emplace(e.at("token").get<TokenId>(), e.at("reward").get<double>());
}

}  // namespace eqlen
