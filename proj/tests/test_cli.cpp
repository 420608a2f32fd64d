#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <eqlen/manifest.hpp>
#include <eqlen/trainer.hpp>

// Drives the installed binary end to end. EQLEN_CLI_PATH is injected by the
// build so the tests exercise exactly what ships.

using namespace eqlen;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "eqlen_cli_tests";

fs::path workspace(const std::string& name) {
  const fs::path dir = kRoot / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/** Run the binary with `args`; stdout/stderr land in the workspace. */
int run_cli(const std::string& args, const fs::path& dir, const std::string& env = "") {
  const std::string cmd = (env.empty() ? "" : env + " ") + std::string(EQLEN_CLI_PATH) + " " +
                          args + " >" + (dir / "stdout.txt").string() + " 2>" +
                          (dir / "stderr.txt").string();
  const int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  REQUIRE(WIFEXITED(rc));
  return WEXITSTATUS(rc);
}

std::string captured(const fs::path& dir, const char* stream) {
  return manifest::read_text((dir / stream).string());
}

nlohmann::json base_train_doc() {
  trainer::TrainConfig c;
  c.algorithm = trainer::Algorithm::eqlen_grpo;
  c.vocab = Vocab{8, 0};
  c.policy_order = 1;
  c.rollout.group_size = 4;
  c.rollout.max_len = 8;
  c.lr = 0.1;
  c.steps = 4;
  c.seed = 21;
  nlohmann::json doc = c;
  doc["task"] = {{"num_questions", 5}, {"question_seed", 5}};
  return doc;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& doc,
                      const char* name = "config.json") {
  const fs::path path = dir / name;
  manifest::write_text(path.string(), doc.dump(2) + "\n");
  return path;
}

}  // namespace

TEST_CASE("bare invocation and help") {
  const fs::path dir = workspace("help");
  CHECK(run_cli("", dir) == 2);
  CHECK(run_cli("--help", dir) == 0);
  CHECK(run_cli("train --help", dir) == 0);
}

TEST_CASE("train writes four files that rerun byte-identically") {
  const fs::path dir = workspace("train");
  const fs::path cfg = write_config(dir, base_train_doc());
  REQUIRE(run_cli("train --config " + cfg.string() + " --out " + (dir / "a").string(), dir) == 0);
  for (const char* name : {"metrics.csv", "metrics.jsonl", "checkpoint.json", "manifest.json"})
    CHECK(fs::exists(dir / "a" / name));

  REQUIRE(run_cli("train --config " + cfg.string() + " --out " + (dir / "b").string(), dir) == 0);
  for (const char* name : {"metrics.csv", "metrics.jsonl", "checkpoint.json", "manifest.json"})
    CHECK(manifest::read_text((dir / "a" / name).string()) ==
          manifest::read_text((dir / "b" / name).string()));

  // the manifest's hashes match the bytes on disk
  const manifest::RunManifest m =
      nlohmann::json::parse(manifest::read_text((dir / "a" / "manifest.json").string()))
          .get<manifest::RunManifest>();
  CHECK(m.command == "train");
  CHECK(m.seed == 21);
  REQUIRE(m.outputs.size() == 3);
  for (const auto& [name, hash] : m.outputs)
    CHECK(manifest::hash_hex(manifest::read_text((dir / "a" / name).string())) == hash);

  // the checkpoint parses back into a policy
  const PolicyTable policy =
      nlohmann::json::parse(manifest::read_text((dir / "a" / "checkpoint.json").string()))
          .get<PolicyTable>();
  CHECK_NOTHROW(policy.validate());

  // worker count must not change the artifacts
  REQUIRE(run_cli("train --config " + cfg.string() + " --out " + (dir / "c").string(), dir,
                  "EQLEN_THREADS=4") == 0);
  CHECK(manifest::read_text((dir / "a" / "metrics.csv").string()) ==
        manifest::read_text((dir / "c" / "metrics.csv").string()));
}

TEST_CASE("seed override is recorded and changes the run") {
  const fs::path dir = workspace("seed");
  const fs::path cfg = write_config(dir, base_train_doc());
  REQUIRE(run_cli("train --config " + cfg.string() + " --out " + (dir / "a").string(), dir) == 0);
  REQUIRE(run_cli("train --config " + cfg.string() + " --out " + (dir / "b").string() +
                      " --seed-override 99",
                  dir) == 0);
  const manifest::RunManifest m =
      nlohmann::json::parse(manifest::read_text((dir / "b" / "manifest.json").string()))
          .get<manifest::RunManifest>();
  CHECK(m.seed == 99);
  CHECK(manifest::read_text((dir / "a" / "metrics.csv").string()) !=
        manifest::read_text((dir / "b" / "metrics.csv").string()));
}

TEST_CASE("invalid configs exit 2 with field-level messages") {
  const fs::path dir = workspace("invalid");

  nlohmann::json odd = base_train_doc();
  odd["rollout"]["group_size"] = 5;
  const fs::path odd_cfg = write_config(dir, odd, "odd.json");
  CHECK(run_cli("train --config " + odd_cfg.string() + " --out " + (dir / "x").string(), dir) ==
        2);
  CHECK(captured(dir, "stderr.txt").find("group_size") != std::string::npos);

  nlohmann::json missing = base_train_doc();
  missing.erase("lr");
  const fs::path missing_cfg = write_config(dir, missing, "missing.json");
  CHECK(run_cli("train --config " + missing_cfg.string() + " --out " + (dir / "x").string(),
                dir) == 2);
  CHECK(captured(dir, "stderr.txt").find("lr") != std::string::npos);

  manifest::write_text((dir / "broken.json").string(), "{not json");
  CHECK(run_cli("train --config " + (dir / "broken.json").string() + " --out " +
                    (dir / "x").string(),
                dir) == 2);

  CHECK(run_cli("train --config " + (dir / "absent.json").string() + " --out " +
                    (dir / "x").string(),
                dir) == 2);
}

TEST_CASE("non-finite rewards abort with exit 3 and a failure marker") {
  const fs::path dir = workspace("abort");
  nlohmann::json doc = base_train_doc();
  doc["algorithm"] = "grpo";
  doc["vocab"] = {{"size", 4}, {"eos_id", 0}};
  doc["rollout"]["group_size"] = 8;
  doc["rollout"]["max_len"] = 16;
  doc["seed"] = 12;
  doc["task"] = {{"verifier", {{"kind", "custom_table"}}},
                 {"num_questions", 8},
                 {"reward_table", {{"1", "inf"}}}};
  const fs::path cfg = write_config(dir, doc);
  CHECK(run_cli("train --config " + cfg.string() + " --out " + (dir / "out").string(), dir) == 3);
  REQUIRE(fs::exists(dir / "out" / "failure.json"));
  const nlohmann::json failure =
      nlohmann::json::parse(manifest::read_text((dir / "out" / "failure.json").string()));
  CHECK(failure.at("diagnostic").at("step").get<std::int64_t>() == 0);
  CHECK(failure.at("diagnostic").contains("rollout"));
  CHECK(fs::exists(dir / "out" / "metrics.csv"));  // partial outputs stay
}

TEST_CASE("unwritable output directories exit 4") {
  const fs::path dir = workspace("io");
  const fs::path cfg = write_config(dir, base_train_doc());
  manifest::write_text((dir / "blocker").string(), "");
  CHECK(run_cli("train --config " + cfg.string() + " --out " +
                    (dir / "blocker" / "sub").string(),
                dir) == 4);
}

TEST_CASE("lab prop1 reports the strict decrease") {
  const fs::path dir = workspace("prop1");
  REQUIRE(run_cli("lab --prop prop1 --out " + (dir / "out").string(), dir) == 0);
  const nlohmann::json j =
      nlohmann::json::parse(manifest::read_text((dir / "out" / "prop1.json").string()));
  CHECK(j.at("prefix_prob_after_grpo").get<double>() < j.at("prefix_prob_before").get<double>());
  CHECK(j.at("prefix_prob_grad_eqlen").get<double>() == 0.0);
}

TEST_CASE("lab prop2 flags the negative control") {
  const fs::path dir = workspace("prop2");
  REQUIRE(run_cli("lab --prop prop2 --steps 2000 --trials 40 --out " + (dir / "bal").string(),
                  dir) == 0);
  const nlohmann::json balanced =
      nlohmann::json::parse(manifest::read_text((dir / "bal" / "prop2.json").string()));
  CHECK(balanced.at("negative_control").get<bool>() == false);
  CHECK(balanced.at("bias_detected").get<bool>() == false);
  CHECK(fs::exists(dir / "bal" / "prop2_drift.csv"));

  REQUIRE(run_cli("lab --prop prop2 --p-shift 0.1 --steps 2000 --trials 40 --out " +
                      (dir / "ctrl").string(),
                  dir) == 0);
  const nlohmann::json control =
      nlohmann::json::parse(manifest::read_text((dir / "ctrl" / "prop2.json").string()));
  CHECK(control.at("negative_control").get<bool>() == true);
  CHECK(control.at("bias_detected").get<bool>() == true);

  // a shift that leaves (0, 1) is a validation failure
  CHECK(run_cli("lab --prop prop2 --p-shift 0.7 --out " + (dir / "bad").string(), dir) == 2);
}

TEST_CASE("lab efficiency reports a positive ratio and the reference counts") {
  const fs::path dir = workspace("efficiency");
  REQUIRE(run_cli("lab --prop efficiency --questions 40 --out " + (dir / "out").string(), dir) ==
          0);
  const nlohmann::json j =
      nlohmann::json::parse(manifest::read_text((dir / "out" / "efficiency.json").string()));
  CHECK(j.at("reference").at("baseline_per_unit").get<std::int64_t>() == 178);
  CHECK(j.at("simulated").at("samples_per_token_ratio").get<double>() > 0.0);
  CHECK(j.at("simulated").at("pairs_per_subgroup").get<double>() >= 1.0);
}

TEST_CASE("gradcheck passes clean and fails the mutation hook") {
  const fs::path dir = workspace("gradcheck");
  const fs::path fast = write_config(dir, {{"instances", 8}}, "fast.json");
  CHECK(run_cli("gradcheck --config " + fast.string() + " --out " + (dir / "out").string(),
                dir) == 0);
  CHECK(fs::exists(dir / "out" / "gradcheck.txt"));
  CHECK(fs::exists(dir / "out" / "gradcheck.json"));
  const std::string table = captured(dir, "stdout.txt");
  CHECK(table.find("eqlen_total") != std::string::npos);
  CHECK(table.find("FAIL") == std::string::npos);

  const fs::path corrupt = write_config(dir, {{"instances", 4}, {"corrupt", true}}, "bad.json");
  CHECK(run_cli("gradcheck --config " + corrupt.string(), dir) == 3);
  CHECK(captured(dir, "stderr.txt").find("tolerance exceeded") != std::string::npos);
}

TEST_CASE("rollout-dump emits a parseable rollout") {
  const fs::path dir = workspace("dump");
  const fs::path cfg = write_config(dir, base_train_doc());
  REQUIRE(run_cli("rollout-dump --config " + cfg.string() + " --out " + (dir / "out").string(),
                  dir) == 0);
  const GroupRollout rollout =
      nlohmann::json::parse(manifest::read_text((dir / "out" / "rollout.json").string()))
          .get<GroupRollout>();
  CHECK(rollout.family == RolloutFamily::dual_track);
  CHECK_NOTHROW(rollout.validate());
  const manifest::RunManifest m =
      nlohmann::json::parse(manifest::read_text((dir / "out" / "manifest.json").string()))
          .get<manifest::RunManifest>();
  CHECK(m.command == "rollout-dump");
}

TEST_CASE("hashes are stable fnv-1a reference values") {
  CHECK(manifest::fnv1a64("") == 14695981039346656037ull);
  CHECK(manifest::fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(manifest::hash_hex("a") == "af63dc4c8601ec8c");
  CHECK(manifest::hash_hex("") == "cbf29ce484222325");
}
