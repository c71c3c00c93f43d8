// rwmn: train, evaluate and inspect read-write memory networks.
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure,
// 3 failed check (gradcheck).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "rwmn/checkpoint.hpp"
#include "rwmn/error.hpp"
#include "rwmn/gradcheck_suite.hpp"
#include "rwmn/harness.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;
constexpr int kCheckFailed = 3;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> precision;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "Experiment config (INI)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Experiment seed");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--precision", o.precision, "Arithmetic precision in bits")->check(CLI::IsMember({32, 64}));
}

rwmn::ExperimentConfig load(const CommonOptions& o) {
  rwmn::ExperimentConfig c = o.config.empty() ? rwmn::ExperimentConfig{} : rwmn::load_experiment_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.precision) c.model.precision = *o.precision == 32 ? rwmn::Precision::kFloat32 : rwmn::Precision::kFloat64;
  return c;
}

// Config for a command that reads a finished training run: --config wins,
// otherwise <out>/config.ini.
rwmn::ExperimentConfig load_run(CommonOptions o) {
  if (o.config.empty()) {
    if (o.out.empty()) throw rwmn::ConfigError("need --config or --out pointing at a training run");
    const auto saved = std::filesystem::path(o.out) / "config.ini";
    if (!std::filesystem::exists(saved)) throw rwmn::ConfigError("no config.ini in " + o.out);
    o.config = saved.string();
  }
  return load(o);
}

const rwmn::Dataset& split_of(const rwmn::Corpus& corpus, const std::string& name) {
  if (name == "train") return corpus.train;
  if (name == "val") return corpus.val;
  if (name == "test") return corpus.test;
  throw rwmn::ConfigError("unknown split '" + name + "'");
}

void print_summary(const rwmn::Report& report) {
  for (const auto& s : report.splits) {
    std::cout << s.name << ": " << s.correct << "/" << s.count << " = " << s.accuracy << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Read-write memory network experiments"};
  app.require_subcommand(1);

  CommonOptions train_opts, eval_opts, sweep_opts, gen_opts, attn_opts, grad_opts;

  auto* train = app.add_subcommand("train", "Train, evaluate every split and write a report");
  add_common(train, train_opts);

  auto* eval = app.add_subcommand("eval", "Evaluate the checkpoints of a training run");
  add_common(eval, eval_opts);

  auto* sweep = app.add_subcommand("sweep", "Run a variant x structure sweep");
  add_common(sweep, sweep_opts);
  std::string sweep_variants, sweep_structures;
  std::optional<std::size_t> sweep_seeds;
  sweep->add_option("--variants", sweep_variants, "Comma-separated variants (overrides [sweep] variants)");
  sweep->add_option("--structures", sweep_structures,
                    "Semicolon-separated write/read structures, e.g. 40:30:3/3:1:3");
  sweep->add_option("--seeds", sweep_seeds, "Seeds per cell");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every op and variant");
  add_common(gradcheck, grad_opts);
  rwmn::GradCheckSuiteConfig grad_config;
  gradcheck->add_option("--seeds", grad_config.seeds, "Random seeds per check")->check(CLI::PositiveNumber);
  gradcheck->add_option("--tolerance", grad_config.tolerance, "Max relative error");
  gradcheck->add_option("--step", grad_config.step, "Central-difference step");

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic corpus of a config to disk");
  add_common(gen, gen_opts);

  auto* attn = app.add_subcommand("export-attention", "Write attention records of a trained model");
  add_common(attn, attn_opts);
  std::string attn_split = "val";
  std::size_t attn_limit = 100;
  std::string attn_file;
  attn->add_option("--split", attn_split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  attn->add_option("--limit", attn_limit, "Number of items");
  attn->add_option("--file", attn_file, "Output file (default <out>/attention-<split>.jsonl)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  try {
    if (train->parsed()) {
      const auto result = rwmn::run_experiment(load(train_opts));
      print_summary(result.report);
    } else if (eval->parsed()) {
      print_summary(rwmn::run_evaluation(load_run(eval_opts)));
    } else if (sweep->parsed()) {
      rwmn::ExperimentConfig c = load(sweep_opts);
      rwmn::SweepSpec spec = c.sweep;
      if (!sweep_variants.empty()) {
        spec.variants.clear();
        std::stringstream in(sweep_variants);
        for (std::string v; std::getline(in, v, ',');) spec.variants.push_back(rwmn::parse_variant(v));
      }
      if (!sweep_structures.empty()) {
        spec.structures.clear();
        std::stringstream in(sweep_structures);
        for (std::string s; std::getline(in, s, ';');) spec.structures.push_back(rwmn::parse_structure(s));
      }
      if (sweep_seeds) spec.seeds = *sweep_seeds;
      c.resolved().validate();
      const auto table = rwmn::ablation_sweep(c, spec);
      const std::string text = rwmn::sweep_text(table);
      std::cout << text;
      if (!c.output_dir.empty()) {
        std::filesystem::create_directories(c.output_dir);
        std::ofstream(c.output_dir / "sweep.json") << rwmn::sweep_json(table);
        std::ofstream(c.output_dir / "sweep.txt") << text;
      }
    } else if (gradcheck->parsed()) {
      const auto cases = rwmn::default_gradcheck_cases();
      if (grad_opts.seed) grad_config.base_seed = *grad_opts.seed;
      const auto report = rwmn::run_gradcheck_suite(cases, grad_config);
      rwmn::print_gradcheck_report(std::cout, report, grad_config.tolerance);
      return report.passed() ? kOk : kCheckFailed;
    } else if (gen->parsed()) {
      const rwmn::ExperimentConfig c = load(gen_opts).resolved();
      c.validate();
      if (!c.data.synthetic) throw rwmn::ConfigError("gen-data needs a synthetic [data] section");
      if (c.output_dir.empty()) throw rwmn::ConfigError("gen-data needs --out");
      const rwmn::Corpus corpus = rwmn::build_corpus(c.data);
      rwmn::write_corpus(corpus, c.output_dir);
      std::cout << "wrote " << corpus.train.size() << " train, " << corpus.val.size() << " val, "
                << corpus.test.size() << " test items to " << c.output_dir.string() << '\n';
    } else if (attn->parsed()) {
      const rwmn::ExperimentConfig c = load_run(attn_opts).resolved();
      c.validate();
      if (c.output_dir.empty()) throw rwmn::ConfigError("export-attention needs --out pointing at a training run");
      const rwmn::Corpus corpus = rwmn::build_corpus(c.data);
      rwmn::RwmnModel model = rwmn::RwmnModel::create(c.model, corpus.vocab);
      rwmn::load_checkpoint(c.output_dir / "member-0.rwmp", model);
      const std::filesystem::path file =
          attn_file.empty() ? c.output_dir / ("attention-" + attn_split + ".jsonl") : std::filesystem::path(attn_file);
      rwmn::export_attention(model, split_of(corpus, attn_split), file, attn_limit);
      std::cout << "wrote " << file.string() << '\n';
    }
  } catch (const rwmn::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kValidation;
  } catch (const rwmn::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
