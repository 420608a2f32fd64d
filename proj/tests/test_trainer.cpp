#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>
#include <vector>

#include <eqlen/lab.hpp>
#include <eqlen/trainer.hpp>

using namespace eqlen;

namespace {

trainer::TrainConfig small_config(trainer::Algorithm algorithm) {
  trainer::TrainConfig c;
  c.algorithm = algorithm;
  c.vocab = Vocab{8, 0};
  c.policy_order = 1;
  c.rollout.group_size = 4;
  c.rollout.max_len = 8;
  c.lr = 0.1;
  c.steps = 5;
  c.seed = 21;
  return c;
}

std::vector<Question> small_questions(int count) {
  return trainer::make_questions(count, Vocab{8, 0}, 5);
}

/** The exception message must name the offending field. */
template <typename Fn>
void check_throws_naming(Fn&& fn, const std::string& field) {
  try {
    fn();
    FAIL_CHECK("expected std::invalid_argument naming ", field);
  } catch (const std::invalid_argument& e) {
    INFO("message: ", e.what());
    CHECK(std::string(e.what()).find(field) != std::string::npos);
  }
}

}  // namespace

TEST_CASE("config validation names the offending field") {
  check_throws_naming(
      [] {
        trainer::TrainConfig c = small_config(trainer::Algorithm::eqlen_grpo);
        c.rollout.group_size = 7;
        c.validate();
      },
      "group_size");
  check_throws_naming(
      [] {
        trainer::TrainConfig c = small_config(trainer::Algorithm::grpo);
        c.schema_version = 2;
        c.validate();
      },
      "schema_version");
  check_throws_naming(
      [] {
        trainer::TrainConfig c = small_config(trainer::Algorithm::grpo);
        c.lr = 0.0;
        c.validate();
      },
      "lr");
  check_throws_naming(
      [] {
        trainer::TrainConfig c = small_config(trainer::Algorithm::grpo);
        c.epochs_per_rollout = 0;
        c.validate();
      },
      "epochs_per_rollout");
  check_throws_naming(
      [] {
        trainer::TrainConfig c = small_config(trainer::Algorithm::grpo);
        c.policy_order = 0;
        c.validate();
      },
      "policy_order");
  check_throws_naming(
      [] {
        trainer::TrainConfig c = small_config(trainer::Algorithm::grpo);
        c.steps = -1;
        c.validate();
      },
      "steps");

  // an odd group is fine for the non-pair algorithms
  trainer::TrainConfig c = small_config(trainer::Algorithm::grpo);
  c.rollout.group_size = 7;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config round-trips through json") {
  trainer::TrainConfig c = small_config(trainer::Algorithm::eqlen_rloo);
  c.prefix_in_gradient = true;
  c.aggregation = reward::RewardAggregation::mean;
  c.advantage.epsilon_clip = std::numeric_limits<double>::infinity();
  const nlohmann::json j = c;
  CHECK(j.at("schema_version").get<int>() == trainer::kSchemaVersion);
  CHECK(j.at("algorithm").get<std::string>() == "eqlen_rloo");
  const trainer::TrainConfig back = j.get<trainer::TrainConfig>();
  CHECK(back == c);

  nlohmann::json missing = j;
  missing.erase("lr");
  CHECK_THROWS(missing.get<trainer::TrainConfig>());
}

TEST_CASE("default question set is deterministic and well-formed") {
  const std::vector<Question> a = trainer::make_questions();
  const std::vector<Question> b = trainer::make_questions();
  REQUIRE(a.size() == 32);
  CHECK(a == b);
  const Vocab vocab{16, 0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].question_id == static_cast<std::int64_t>(i) + 1);
    REQUIRE(!a[i].prompt_tokens.empty());
    CHECK(a[i].prompt_tokens.size() <= 2);
    for (TokenId t : a[i].prompt_tokens) {
      CHECK(vocab.contains(t));
      CHECK(t != vocab.eos_id);
    }
    CHECK(vocab.contains(a[i].target_token));
    CHECK(a[i].target_token != vocab.eos_id);
  }
  CHECK_THROWS_AS(trainer::make_questions(0), std::invalid_argument);
}

TEST_CASE("zero steps returns the starting policy unchanged") {
  trainer::TrainConfig c = small_config(trainer::Algorithm::eqlen_grpo);
  c.steps = 0;
  const trainer::TrainResult result = trainer::train(c, small_questions(4), reward::Verifier{});
  CHECK(result.metrics.empty());
  CHECK(result.policy == trainer::uniform_policy(c.vocab, c.policy_order));
}

TEST_CASE("training is deterministic across reruns and worker counts") {
  const trainer::TrainConfig c = small_config(trainer::Algorithm::eqlen_grpo);
  const std::vector<Question> qs = small_questions(6);
  const trainer::TrainResult r1 = trainer::train(c, qs, reward::Verifier{});
  const trainer::TrainResult r2 = trainer::train(c, qs, reward::Verifier{});
  const trainer::TrainResult r4 = trainer::train(c, qs, reward::Verifier{}, /*threads=*/4);
  CHECK(r1.metrics == r2.metrics);
  CHECK(r1.policy == r2.policy);
  CHECK(r1.metrics == r4.metrics);
  CHECK(r1.policy == r4.policy);
  CHECK(trainer::metrics_csv(r1.metrics) == trainer::metrics_csv(r2.metrics));
  CHECK(trainer::metrics_jsonl(r1.metrics) == trainer::metrics_jsonl(r4.metrics));
}

TEST_CASE("one metrics row per step with monotone indices") {
  trainer::TrainConfig c = small_config(trainer::Algorithm::rloo);
  c.steps = 7;
  const trainer::TrainResult result = trainer::train(c, small_questions(3), reward::Verifier{});
  REQUIRE(result.metrics.size() == 7);
  for (std::size_t i = 0; i < result.metrics.size(); ++i)
    CHECK(result.metrics[i].step == static_cast<std::int64_t>(i));
}

TEST_CASE("metrics serialize to csv and jsonl") {
  trainer::TrainConfig c = small_config(trainer::Algorithm::grpo);
  c.steps = 3;
  const trainer::TrainResult result = trainer::train(c, small_questions(3), reward::Verifier{});
  const std::string csv = trainer::metrics_csv(result.metrics);
  CHECK(csv.rfind("step,mean_reward,loss,grad_norm,pairs_harvested,pairs_skipped,"
                  "trailing_tokens,effective_samples,tokens_decoded,entropy\n",
                  0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

  const std::string jsonl = trainer::metrics_jsonl(result.metrics);
  CHECK(std::count(jsonl.begin(), jsonl.end(), '\n') == 3);
  std::size_t start = 0;
  for (const trainer::MetricsRow& row : result.metrics) {
    const std::size_t stop = jsonl.find('\n', start);
    const trainer::MetricsRow parsed =
        nlohmann::json::parse(jsonl.substr(start, stop - start)).get<trainer::MetricsRow>();
    CHECK(parsed == row);
    start = stop + 1;
  }
}

TEST_CASE("uniform start reports log-vocab entropy on the first row") {
  trainer::TrainConfig c = small_config(trainer::Algorithm::grpo);
  c.steps = 1;
  const trainer::TrainResult result = trainer::train(c, small_questions(5), reward::Verifier{});
  REQUIRE(result.metrics.size() == 1);
  CHECK(result.metrics[0].entropy ==
        doctest::Approx(std::log(static_cast<double>(c.vocab.size))).epsilon(1e-12));
}

TEST_CASE("pair accounting ties effective samples to non-skipped pairs") {
  trainer::TrainConfig c = small_config(trainer::Algorithm::eqlen_grpo);
  c.steps = 4;
  const trainer::TrainResult result = trainer::train(c, small_questions(6), reward::Verifier{});
  std::int64_t harvested = 0;
  for (const trainer::MetricsRow& row : result.metrics) {
    CHECK(row.effective_samples == 2 * (row.pairs_harvested - row.pairs_skipped));
    CHECK(row.pairs_skipped <= row.pairs_harvested);
    CHECK(row.trailing_tokens >= 0);
    harvested += row.pairs_harvested;
  }
  CHECK(harvested > 0);
}

TEST_CASE("a trivially solvable question trains upward") {
  trainer::TrainConfig c;
  c.algorithm = trainer::Algorithm::eqlen_grpo;
  c.vocab = Vocab{6, 0};
  c.policy_order = 1;
  c.rollout.group_size = 4;
  c.rollout.max_len = 6;
  c.lr = 0.2;
  c.steps = 60;
  c.seed = 33;

  Question q;
  q.question_id = 1;
  q.prompt_tokens = {1};
  q.target_token = 2;

  // target already modal: one step of reinforcement should only help
  PolicyTable start = trainer::uniform_policy(c.vocab, c.policy_order);
  start.default_logits[2] = 1.0;

  const trainer::TrainResult result =
      trainer::train_from(c, {q}, reward::Verifier{}, start);
  REQUIRE(result.metrics.size() == 60);
  const double first = result.metrics.front().mean_reward;
  const double last = result.metrics.back().mean_reward;
  INFO("first=", first, " last=", last);
  CHECK(last >= first);
  CHECK(last > 0.5);  // the task saturates well above chance
}

TEST_CASE("non-finite rewards abort with a diagnostic dump") {
  trainer::TrainConfig c = small_config(trainer::Algorithm::grpo);
  c.vocab = Vocab{4, 0};
  c.rollout.group_size = 8;
  c.rollout.max_len = 16;
  c.steps = 3;
  c.seed = 12;

  std::vector<Question> qs;
  for (int i = 0; i < 8; ++i) {
    Question q;
    q.question_id = i + 1;
    q.prompt_tokens = {1};
    q.reward_table[1] = std::numeric_limits<double>::infinity();
    qs.push_back(q);
  }
  const reward::Verifier verifier{reward::VerifierKind::custom_table};

  try {
    trainer::train(c, qs, verifier);
    FAIL("expected TrainAbortError");
  } catch (const trainer::TrainAbortError& e) {
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
    CHECK(e.diagnostic().contains("rollout"));
    CHECK(e.diagnostic().at("step").get<std::int64_t>() == 0);
    CHECK(e.diagnostic().contains("question_id"));
  }
}

TEST_CASE("questions outside the vocabulary are rejected") {
  trainer::TrainConfig c = small_config(trainer::Algorithm::grpo);
  Question q;
  q.question_id = 1;
  q.prompt_tokens = {20};  // vocab is 8 wide
  q.target_token = 2;
  CHECK_THROWS_AS(trainer::train(c, {q}, reward::Verifier{}), std::invalid_argument);
}

TEST_CASE("skipped pairs contribute nothing to the training gradient") {
  trainer::TrainConfig c = small_config(trainer::Algorithm::eqlen_grpo);
  c.advantage.count_skipped_in_divisor = false;  // keep divisors comparable
  const std::vector<Question> qs = small_questions(6);
  const PolicyTable policy = trainer::uniform_policy(c.vocab, c.policy_order);
  const optim::AdvantageSpec spec = trainer::detail::spec_for(c);
  const std::uint64_t step_seed = rng::derive_seed(c.seed, 0);

  GradientVector with_skips, without;
  std::int64_t skipped_seen = 0;
  for (const Question& q : qs) {
    GroupRollout r = rollout::rollout_dualtrack(policy, c.vocab, q, c.rollout, step_seed);
    reward::propagate_rewards(r, reward::Verifier{}, c.vocab, q, c.aggregation);
    with_skips.axpy(1.0, optim::loss_eqlen_total(policy, policy, r, q, spec).grad);

    GroupRollout stripped = r;
    std::erase_if(stripped.pairs, [](const SegmentPair& p) { return p.skipped; });
    skipped_seen += static_cast<std::int64_t>(r.pairs.size() - stripped.pairs.size());
    without.axpy(1.0, optim::loss_eqlen_total(policy, policy, stripped, q, spec).grad);
  }
  INFO("skipped pairs stripped: ", skipped_seen);
  CHECK(skipped_seen > 0);  // the fixture must actually exercise the rule
  CHECK(with_skips == without);

  // and the trainer's first recorded gradient norm matches the recomputation
  const trainer::TrainResult result = trainer::train(c, qs, reward::Verifier{});
  with_skips.divide(static_cast<double>(qs.size()));
  CHECK(result.metrics.front().grad_norm == with_skips.norm2());
}

TEST_CASE("prefix ablation moves gradient mass onto inherited coordinates") {
  const lab::Prop1Instance inst = lab::Prop1Instance::canonical();
  const GroupRollout r = lab::prop1_eqlen_rollout(inst);
  const optim::AdvantageSpec spec;
  const auto coords = lab::b1_prefix_coords(inst);

  // On-policy the two sides carry the same prefix tokens with advantages
  // +-a, so their prefix contributions cancel exactly even when unmasked.
  const optim::LossResult on_policy = optim::loss_eqlen_total(inst.policy, inst.policy, r,
                                                              inst.question, spec, true);
  CHECK(on_policy.grad.restricted_norm2(coords) == 0.0);

  // Off-policy the clip rule zeroes the positive-advantage side once the
  // shared ratio leaves the window, so unmasked prefix mass survives.
  PolicyTable shifted = inst.policy;
  shifted.default_logits[4] = 1.0;  // ratio ~2.2 on b1's token-4 rows
  const optim::LossResult off = optim::loss_eqlen_total(shifted, inst.policy, r,
                                                        inst.question, spec, false);
  const optim::LossResult on = optim::loss_eqlen_total(shifted, inst.policy, r,
                                                       inst.question, spec, true);
  CHECK(off.grad.restricted_norm2(coords) == 0.0);
  CHECK(on.grad.restricted_norm2(coords) > 0.0);

  // unmasking widens the active window and hence the per-pair normalization
  const optim::LossResult masked = optim::loss_eqlen_total(inst.policy, inst.policy, r,
                                                           inst.question, spec, false);
  CHECK(on_policy.active_tokens > masked.active_tokens);
  CHECK(on_policy.grad != masked.grad);
}

TEST_CASE("identical configs compare as identical arms") {
  const trainer::TrainConfig c = small_config(trainer::Algorithm::eqlen_grpo);
  const std::vector<Question> qs = small_questions(4);
  const trainer::CompareReport report =
      trainer::compare_arms(c, c, qs, reward::Verifier{});
  CHECK(report.arm_a.steps_run == report.arm_b.steps_run);
  CHECK(report.arm_a.metrics == report.arm_b.metrics);
  CHECK(report.arm_a.tokens_decoded == report.arm_b.tokens_decoded);
  CHECK(report.token_mismatch_rel == 0.0);
}

TEST_CASE("compare_arms matches decoded tokens across different algorithms") {
  trainer::TrainConfig a = small_config(trainer::Algorithm::eqlen_grpo);
  a.rollout.group_size = 8;
  a.rollout.max_len = 16;
  a.steps = 40;
  trainer::TrainConfig b = a;
  b.algorithm = trainer::Algorithm::grpo;

  const std::vector<Question> qs = small_questions(8);
  const trainer::CompareReport report = trainer::compare_arms(a, b, qs, reward::Verifier{});
  REQUIRE(!report.arm_a.metrics.empty());
  REQUIRE(!report.arm_b.metrics.empty());
  INFO("tokens a=", report.arm_a.tokens_decoded, " b=", report.arm_b.tokens_decoded,
       " rel=", report.token_mismatch_rel);
  CHECK(report.token_mismatch_rel <= 0.01);
  INFO("final rewards: eqlen=", report.arm_a.final_mean_reward,
       " grpo=", report.arm_b.final_mean_reward);

  const nlohmann::json j = report;
  CHECK(j.at("arm_a").at("metrics").size() == report.arm_a.metrics.size());
  CHECK(j.at("token_mismatch_rel").get<double>() == report.token_mismatch_rel);
}

TEST_CASE("compare_arms enforces shared seed and budget") {
  const trainer::TrainConfig a = small_config(trainer::Algorithm::eqlen_grpo);
  trainer::TrainConfig b = a;
  b.seed = a.seed + 1;
  CHECK_THROWS_AS(trainer::compare_arms(a, b, small_questions(2), reward::Verifier{}),
                  std::invalid_argument);
  b = a;
  b.rollout.max_len = a.rollout.max_len * 2;
  CHECK_THROWS_AS(trainer::compare_arms(a, b, small_questions(2), reward::Verifier{}),
                  std::invalid_argument);
}

TEST_CASE("thread cap reads the environment defensively") {
  unsetenv("EQLEN_THREADS");
  CHECK(trainer::env_thread_cap() == 1);
  setenv("EQLEN_THREADS", "3", 1);
  CHECK(trainer::env_thread_cap() == 3);
  setenv("EQLEN_THREADS", "0", 1);
  CHECK(trainer::env_thread_cap() == 1);
  setenv("EQLEN_THREADS", "junk", 1);
  CHECK(trainer::env_thread_cap() == 1);
  setenv("EQLEN_THREADS", "100000", 1);
  CHECK(trainer::env_thread_cap() == 256);
  unsetenv("EQLEN_THREADS");
}
