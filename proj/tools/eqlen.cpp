/**
 * Command-line front end. Four subcommands bind JSON configs to runs and
 * write machine-readable artifacts:
 *
 *   train         config -> metrics.csv, metrics.jsonl, checkpoint.json, manifest.json
 *   lab           prop1 / prop2 / efficiency reports (JSON, plus CSV series)
 *   gradcheck     analytic-vs-finite-difference suite across every loss family
 *   rollout-dump  one rollout under the config, dumped as JSON
 *
 * Exit codes: 0 success, 2 validation failure, 3 numerical failure,
 * 4 I/O failure. Every command is idempotent with respect to the output
 * directory given identical inputs; reductions are deterministic regardless
 * of EQLEN_THREADS, and --deterministic-reduction is accepted (and recorded)
 * for compatibility with wrappers that pass it explicitly.
 */

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <eqlen/gradcheck.hpp>
#include <eqlen/lab.hpp>
#include <eqlen/manifest.hpp>
#include <eqlen/trainer.hpp>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::int64_t seed_override = -1;  // < 0: keep the config's seed
  bool deterministic_reduction = false;
};

/** The task half of a train config: what the questions and verifier are. */
struct TaskSpec {
  eqlen::reward::Verifier verifier;
  std::int64_t num_questions = 32;
  std::uint64_t question_seed = 11;
  std::map<eqlen::TokenId, double> reward_table;  // custom_table verifier
};

TaskSpec task_from(const nlohmann::json& doc) {
  TaskSpec task;
  if (!doc.contains("task")) return task;
  const nlohmann::json& j = doc.at("task");
  if (j.contains("verifier")) j.at("verifier").get_to(task.verifier);
  if (j.contains("num_questions")) j.at("num_questions").get_to(task.num_questions);
  if (j.contains("question_seed")) j.at("question_seed").get_to(task.question_seed);
  if (j.contains("reward_table")) {
    for (const auto& [key, value] : j.at("reward_table").items()) {
      double v = 0.0;
      if (value.is_string()) {
        if (value.get<std::string>() != "inf")
          throw std::invalid_argument("task.reward_table values must be numbers or \"inf\"");
        v = std::numeric_limits<double>::infinity();
      } else {
        value.get_to(v);
      }
      task.reward_table[static_cast<eqlen::TokenId>(std::stol(key))] = v;
    }
  }
  if (task.num_questions < 1)
    throw std::invalid_argument("task.num_questions must be >= 1");
  return task;
}

nlohmann::json task_json(const TaskSpec& task) {
  nlohmann::json table = nlohmann::json::object();
  for (const auto& [token, value] : task.reward_table)
    table[std::to_string(token)] =
        std::isinf(value) ? nlohmann::json("inf") : nlohmann::json(value);
  return {{"verifier", task.verifier},
          {"num_questions", task.num_questions},
          {"question_seed", task.question_seed},
          {"reward_table", std::move(table)}};
}

/** The config's question set with the task's reward table applied. */
std::vector<eqlen::Question> task_questions(const eqlen::trainer::TrainConfig& config,
                                            const TaskSpec& task) {
  std::vector<eqlen::Question> questions =
      eqlen::trainer::make_questions(task.num_questions, config.vocab, task.question_seed);
  for (eqlen::Question& q : questions) q.reward_table = task.reward_table;
  return questions;
}

std::string pretty(const nlohmann::json& j) { return j.dump(2) + "\n"; }

void write_outputs(const std::filesystem::path& dir, eqlen::manifest::RunManifest& m,
                   const std::vector<std::pair<std::string, std::string>>& files) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, content] : files) {
    eqlen::manifest::write_text((dir / name).string(), content);
    m.record(name, content);
  }
  eqlen::manifest::write_text((dir / "manifest.json").string(), pretty(nlohmann::json(m)));
}

int cmd_train(const CommonFlags& flags) {
  const nlohmann::json doc = nlohmann::json::parse(eqlen::manifest::read_text(flags.config_path));
  eqlen::trainer::TrainConfig config = doc.get<eqlen::trainer::TrainConfig>();
  if (flags.seed_override >= 0) config.seed = static_cast<std::uint64_t>(flags.seed_override);
  const TaskSpec task = task_from(doc);
  config.validate();

  const std::vector<eqlen::Question> questions = task_questions(config, task);
  const std::filesystem::path out(flags.out_dir);

  eqlen::manifest::RunManifest m;
  m.command = "train";
  m.config = nlohmann::json(config);
  m.config["task"] = task_json(task);
  m.config["deterministic_reduction"] = flags.deterministic_reduction;
  m.seed = config.seed;

  eqlen::trainer::TrainResult result;
  try {
    result = eqlen::trainer::train(config, questions, task.verifier,
                                   eqlen::trainer::env_thread_cap());
  } catch (const eqlen::trainer::TrainAbortError& e) {
    std::filesystem::create_directories(out);
    eqlen::manifest::write_text((out / "metrics.csv").string(),
                                eqlen::trainer::metrics_csv(e.partial_metrics()));
    eqlen::manifest::write_text((out / "metrics.jsonl").string(),
                                eqlen::trainer::metrics_jsonl(e.partial_metrics()));
    eqlen::manifest::write_text(
        (out / "failure.json").string(),
        pretty(nlohmann::json{{"error", e.what()}, {"diagnostic", e.diagnostic()}}));
    std::cerr << "eqlen train: " << e.what() << " (failure.json written)\n";
    return kExitNumerical;
  } catch (const std::runtime_error& e) {
    std::filesystem::create_directories(out);
    eqlen::manifest::write_text((out / "failure.json").string(),
                                pretty(nlohmann::json{{"error", e.what()}}));
    std::cerr << "eqlen train: " << e.what() << " (failure.json written)\n";
    return kExitNumerical;
  }

  write_outputs(out, m,
                {{"metrics.csv", eqlen::trainer::metrics_csv(result.metrics)},
                 {"metrics.jsonl", eqlen::trainer::metrics_jsonl(result.metrics)},
                 {"checkpoint.json", pretty(nlohmann::json(result.policy))}});
  return kExitOk;
}

int cmd_lab(const std::string& prop, const CommonFlags& flags, double lr, double p_shift,
            std::int64_t steps, std::int64_t trials, std::int64_t questions) {
  const std::filesystem::path out(flags.out_dir);
  eqlen::manifest::RunManifest m;
  m.command = "lab";
  m.config = {{"prop", prop}, {"deterministic_reduction", flags.deterministic_reduction}};

  if (prop == "prop1") {
    const eqlen::lab::Prop1Instance inst = eqlen::lab::Prop1Instance::canonical();
    const eqlen::lab::Prop1Report report = eqlen::lab::run_prop1(inst, lr);
    m.config["lr"] = lr;
    nlohmann::json j = report;
    j["lr"] = lr;
    write_outputs(out, m, {{"prop1.json", pretty(j)}});
    return kExitOk;
  }

  if (prop == "prop2") {
    eqlen::lab::Prop2Instance inst = eqlen::lab::Prop2Instance::canonical();
    const double p_nominal = inst.p;
    inst.p += p_shift;
    if (flags.seed_override >= 0) inst.seed = static_cast<std::uint64_t>(flags.seed_override);
    inst.validate();
    const eqlen::lab::Prop2Report report = eqlen::lab::run_prop2(inst, steps, trials);
    const double bound = eqlen::lab::clt_bound(inst, steps, trials);
    m.config["p_shift"] = p_shift;
    m.config["steps"] = steps;
    m.config["trials"] = trials;
    m.seed = inst.seed;
    nlohmann::json j = report;
    j["p"] = inst.p;
    j["p_nominal"] = p_nominal;
    j["negative_control"] = p_shift != 0.0;
    j["clt_bound"] = bound;
    j["closed_form_variance"] = eqlen::lab::closed_form_variance(inst);
    j["bias_detected"] = report.grad_mean_norm > bound;
    write_outputs(out, m,
                  {{"prop2.json", pretty(j)}, {"prop2_drift.csv", eqlen::lab::drift_csv(report)}});
    return kExitOk;
  }

  // efficiency: uniform policy over vocab 10 gives a ~0.1 EOS hazard per step
  eqlen::PolicyTable policy;
  policy.order = 1;
  policy.default_logits.assign(10, 0.0);
  const eqlen::Vocab vocab{10, 0};
  const std::uint64_t seed =
      flags.seed_override >= 0 ? static_cast<std::uint64_t>(flags.seed_override) : 2026;
  const std::vector<eqlen::Question> qs = eqlen::trainer::make_questions(questions, vocab, 11);
  eqlen::rollout::RolloutConfig config;
  config.group_size = 8;
  config.max_len = 64;
  config.max_pairs_per_subgroup = 8;
  const eqlen::lab::EfficiencyReport report = eqlen::lab::run_efficiency(
      policy, vocab, qs, config, config.group_size, eqlen::reward::Verifier{}, seed);
  m.config["questions"] = questions;
  m.seed = seed;
  const nlohmann::json j = {{"reference", eqlen::lab::reference_accounting()},
                            {"simulated", report}};
  write_outputs(out, m, {{"efficiency.json", pretty(j)}});
  return kExitOk;
}

int cmd_gradcheck(const CommonFlags& flags) {
  std::int64_t instances = 50;
  std::uint64_t seed = 2024;
  bool corrupt = false;
  if (!flags.config_path.empty()) {
    const nlohmann::json doc =
        nlohmann::json::parse(eqlen::manifest::read_text(flags.config_path));
    if (doc.contains("instances")) doc.at("instances").get_to(instances);
    if (doc.contains("seed")) doc.at("seed").get_to(seed);
    if (doc.contains("corrupt")) doc.at("corrupt").get_to(corrupt);
  }
  if (flags.seed_override >= 0) seed = static_cast<std::uint64_t>(flags.seed_override);
  if (instances < 1) throw std::invalid_argument("gradcheck.instances must be >= 1");

  using eqlen::gradcheck::LossKind;
  std::vector<eqlen::gradcheck::CheckReport> reports;
  std::string table =
      "kind epsilon instances worst_rel mean_rel tolerance status\n";
  bool all_pass = true;
  std::string worst_line;
  double worst_rel = -1.0;
  for (LossKind kind : {LossKind::grpo, LossKind::dr_grpo, LossKind::rloo, LossKind::eqlen_pair,
                        LossKind::eqlen_total, LossKind::eqlen_rloo}) {
    for (double eps : {0.2, std::numeric_limits<double>::infinity()}) {
      eqlen::gradcheck::CheckConfig cfg;
      cfg.kind = kind;
      cfg.instances = instances;
      cfg.seed = seed;
      cfg.epsilon_clip = eps;
      // the clip-free objective is smooth, so the tolerance tightens
      cfg.tolerance = std::isinf(eps) ? 1e-7 : 1e-6;
      cfg.corrupt = corrupt;
      const eqlen::gradcheck::CheckReport report = eqlen::gradcheck::run_check(cfg);
      reports.push_back(report);
      const std::string kind_name = nlohmann::json(kind).get<std::string>();
      std::size_t worst_instance = 0;
      for (std::size_t i = 0; i < report.rel_errs.size(); ++i)
        if (report.rel_errs[i] > report.rel_errs[worst_instance]) worst_instance = i;
      table += kind_name + " " + (std::isinf(eps) ? "inf" : eqlen::detail::fmt_double(eps)) +
               " " + std::to_string(report.instances) + " " +
               eqlen::detail::fmt_double(report.worst_rel_err) + " " +
               eqlen::detail::fmt_double(report.mean_rel_err) + " " +
               eqlen::detail::fmt_double(report.tolerance) + (report.pass ? " pass" : " FAIL") +
               "\n";
      all_pass = all_pass && report.pass;
      if (report.worst_rel_err > worst_rel) {
        worst_rel = report.worst_rel_err;
        worst_line = kind_name + " (epsilon " + (std::isinf(eps) ? "inf" : "0.2") +
                     ", instance " + std::to_string(worst_instance) +
                     ", rel err " + eqlen::detail::fmt_double(report.worst_rel_err) + ")";
      }
    }
  }
  std::cout << table;
  if (!flags.out_dir.empty()) {
    eqlen::manifest::RunManifest m;
    m.command = "gradcheck";
    m.config = {{"instances", instances},
                {"corrupt", corrupt},
                {"deterministic_reduction", flags.deterministic_reduction}};
    m.seed = seed;
    write_outputs(std::filesystem::path(flags.out_dir), m,
                  {{"gradcheck.txt", table}, {"gradcheck.json", pretty(nlohmann::json(reports))}});
  }
  if (!all_pass) {
    std::cerr << "eqlen gradcheck: tolerance exceeded at " << worst_line << "\n";
    return kExitNumerical;
  }
  return kExitOk;
}

int cmd_rollout_dump(const CommonFlags& flags) {
  const nlohmann::json doc = nlohmann::json::parse(eqlen::manifest::read_text(flags.config_path));
  eqlen::trainer::TrainConfig config = doc.get<eqlen::trainer::TrainConfig>();
  if (flags.seed_override >= 0) config.seed = static_cast<std::uint64_t>(flags.seed_override);
  const TaskSpec task = task_from(doc);
  config.validate();

  const std::vector<eqlen::Question> questions = task_questions(config, task);
  const eqlen::PolicyTable policy =
      eqlen::trainer::uniform_policy(config.vocab, config.policy_order);
  const std::uint64_t step_seed = eqlen::rng::derive_seed(config.seed, 0);
  const eqlen::Question& q = questions.front();

  eqlen::GroupRollout rollout;
  if (eqlen::trainer::uses_pairs(config.algorithm)) {
    rollout = eqlen::rollout::rollout_dualtrack(policy, config.vocab, q, config.rollout, step_seed);
    eqlen::reward::propagate_rewards(rollout, task.verifier, config.vocab, q, config.aggregation);
  } else {
    rollout = eqlen::rollout::rollout_independent(policy, config.vocab, q, config.rollout,
                                                  step_seed);
    eqlen::reward::score_group(rollout, task.verifier, config.vocab, q);
  }

  eqlen::manifest::RunManifest m;
  m.command = "rollout-dump";
  m.config = nlohmann::json(config);
  m.config["task"] = task_json(task);
  m.config["deterministic_reduction"] = flags.deterministic_reduction;
  m.seed = config.seed;
  write_outputs(std::filesystem::path(flags.out_dir), m,
                {{"rollout.json", pretty(nlohmann::json(rollout))}});
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"equal-length trajectory-pair RL laboratory"};
  app.require_subcommand(1);

  CommonFlags train_flags, lab_flags, grad_flags, dump_flags;

  CLI::App* train_cmd = app.add_subcommand("train", "run a training config end to end");
  train_cmd->add_option("--config", train_flags.config_path, "JSON training config")
      ->required()
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_flags.out_dir, "output directory")->required();
  train_cmd->add_option("--seed-override", train_flags.seed_override, "replace the config seed");
  train_cmd->add_flag("--deterministic-reduction", train_flags.deterministic_reduction,
                      "recorded; reductions are always deterministic");

  CLI::App* lab_cmd = app.add_subcommand("lab", "run a laboratory reproduction");
  std::string prop;
  double lr = 1e-2, p_shift = 0.0;
  std::int64_t steps = 10000, trials = 100, questions = 200;
  lab_cmd->add_option("--prop", prop, "which reproduction to run")
      ->required()
      ->check(CLI::IsMember({"prop1", "prop2", "efficiency"}));
  lab_cmd->add_option("--out", lab_flags.out_dir, "output directory")->required();
  lab_cmd->add_option("--lr", lr, "prop1 step size");
  lab_cmd->add_option("--p-shift", p_shift, "prop2 pairing-probability offset");
  lab_cmd->add_option("--steps", steps, "prop2 events per trial");
  lab_cmd->add_option("--trials", trials, "prop2 trial count");
  lab_cmd->add_option("--questions", questions, "efficiency question count");
  lab_cmd->add_option("--seed-override", lab_flags.seed_override, "replace the default seed");
  lab_cmd->add_flag("--deterministic-reduction", lab_flags.deterministic_reduction,
                    "recorded; reductions are always deterministic");

  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "finite-difference oracle suite");
  grad_cmd->add_option("--config", grad_flags.config_path, "optional JSON overrides")
      ->check(CLI::ExistingFile);
  grad_cmd->add_option("--out", grad_flags.out_dir, "optional output directory");
  grad_cmd->add_option("--seed-override", grad_flags.seed_override, "replace the default seed");
  grad_cmd->add_flag("--deterministic-reduction", grad_flags.deterministic_reduction,
                     "recorded; reductions are always deterministic");

  CLI::App* dump_cmd = app.add_subcommand("rollout-dump", "dump one seeded rollout as JSON");
  dump_cmd->add_option("--config", dump_flags.config_path, "JSON training config")
      ->required()
      ->check(CLI::ExistingFile);
  dump_cmd->add_option("--out", dump_flags.out_dir, "output directory")->required();
  dump_cmd->add_option("--seed-override", dump_flags.seed_override, "replace the config seed");
  dump_cmd->add_flag("--deterministic-reduction", dump_flags.deterministic_reduction,
                     "recorded; reductions are always deterministic");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_flags);
    if (lab_cmd->parsed()) return cmd_lab(prop, lab_flags, lr, p_shift, steps, trials, questions);
    if (grad_cmd->parsed()) return cmd_gradcheck(grad_flags);
    return cmd_rollout_dump(dump_flags);
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "eqlen: i/o failure: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::ios_base::failure& e) {
    std::cerr << "eqlen: i/o failure: " << e.what() << "\n";
    return kExitIo;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "eqlen: invalid config: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "eqlen: invalid config: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::logic_error& e) {
    std::cerr << "eqlen: invalid config: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "eqlen: failure: " << e.what() << "\n";
    return kExitNumerical;
  }
}
