// Acceptance suite: one PASS/FAIL line per criterion, exit 3 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "rwmn/error.hpp"
#include "rwmn/fusion.hpp"
#include "rwmn/gradcheck_suite.hpp"
#include "rwmn/harness.hpp"
#include "rwmn/tensor.hpp"

using namespace rwmn;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  std::function<Outcome()> run;
};

// Trained model shared by the needle and attention criteria.
struct NeedleRun {
  bool done = false;
  ExperimentConfig config;
  ExperimentResult result;
  Corpus corpus;
  double seconds = 0.0;
};

// d = 32, D_cbp = 128, write (8,4,3), read (3,1,3) on stories of 8 to 16
// steps with 64-wide pseudo-visual features.
ExperimentConfig training_config(SyntheticTask task, std::uint64_t seed) {
  ExperimentConfig c;
  c.seed = seed;
  SyntheticTaskConfig& s = *c.data.synthetic;
  s.task = task;
  s.min_steps = 8;
  s.max_steps = 16;
  s.feature_dim = 64;
  s.train_count = 1000;
  s.val_count = 200;
  s.test_count = 200;
  c.model.d = 32;
  c.model.fusion.cbp_dim = 128;
  c.model.fusion.visual.channels = 64;
  c.model.fusion.embedding_scale = 0.4;
  c.model.write_layers = {{8, 4, 3}};
  c.model.read_layers = {{3, 1, 3}};
  c.train.learning_rate = 0.01;
  c.train.batch_size = 32;
  c.train.max_epochs = 60;
  c.train.early_stop_patience = 10;
  c.train.restarts = 1;
  c.save_checkpoints = false;
  return c;
}

// --- 1

Outcome gradient_suite() {
  GradCheckSuiteConfig config;  // 20 seeds, 1e-4, step 1e-5
  const auto cases = default_gradcheck_cases();
  const GradCheckReport report = run_gradcheck_suite(cases, config);
  double worst = 0.0;
  std::string worst_name, failed;
  for (const auto& e : report.entries) {
    if (e.max_rel_error >= worst) {
      worst = e.max_rel_error;
      worst_name = e.name;
    }
    if (!e.passed) failed += (failed.empty() ? "" : ", ") + e.name;
  }
  const bool fast = report.seconds <= 60.0;
  return {report.passed() && fast && config.seeds >= 20,
          fmt("%zu checks x %zu seeds, worst %.2e (%s), %.1f s%s%s", report.entries.size(), config.seeds, worst,
              worst_name.c_str(), report.seconds, failed.empty() ? "" : "; failed: ", failed.c_str())};
}

// --- 2

Outcome shape_law() {
  std::size_t checked = 0, bad = 0;
  std::string first_bad;
  const auto miss = [&](std::size_t in, std::size_t s, const char* what) {
    if (bad++ == 0) first_bad = fmt("in=%zu s=%zu (%s)", in, s, what);
  };
  Tape tape(Precision::kFloat64, false);
  for (std::size_t in = 1; in <= 2000; ++in) {
    for (std::size_t s = 1; s <= 50; ++s) {
      ++checked;
      const std::size_t ceil_div = (in + s - 1) / s;
      const std::size_t paper = (in - 1) / s + 1;
      if (same_output_extent(in, s) != ceil_div || ceil_div != paper) miss(in, s, "formula");
      // The conv op itself, with a filter height that varies with (in, s).
      const std::size_t f = 1 + (in * 7 + s * 3) % 45;
      const Tensor x = Tensor::filled({in, 1, 1}, 1.0);
      const Tensor w = Tensor::filled({f, 1, 1, 1}, 1.0);
      const Tensor y = conv2d_same(tape, x, w, Tensor(Shape{1}), {s, 1});
      if (y.extent(0) != ceil_div) miss(in, s, "conv2d_same");
      // Write layer then a read layer of stride s2: c = ceil(ceil(n / s) / s2).
      const std::size_t s2 = 1 + (in + s) % 4;
      const std::vector<ConvLayerSpec> stack = {{f, s, 3}, {3, s2, 3}};
      if (memory_extent(in, stack) != (ceil_div + s2 - 1) / s2) miss(in, s, "write+read");
    }
  }
  return {bad == 0, fmt("%zu (in, s) pairs, %zu mismatches%s%s", checked, bad, bad ? ", first " : "",
                        first_bad.c_str())};
}

// --- 3

double inner(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Outcome cbp_unbiasedness() {
  const std::size_t p = 32, dim = 512;
  Rng rng(2024);
  std::normal_distribution<double> normal;
  // Correlated pairs keep the targets away from zero.
  std::vector<double> x1(p), y1(p), x2(p), y2(p);
  for (std::size_t i = 0; i < p; ++i) {
    x1[i] = normal(rng);
    y1[i] = normal(rng);
    x2[i] = x1[i] + 0.5 * normal(rng);
    y2[i] = y1[i] + 0.5 * normal(rng);
  }
  const double target_cbp = inner(x1, x2) * inner(y1, y2);
  const double target_cs = inner(x1, x2);

  double sum_cbp = 0.0;
  for (std::uint64_t seed = 1; seed <= 1000; ++seed) {
    const CountSketch sx(p, dim, 2 * seed), sy(p, dim, 2 * seed + 1);
    sum_cbp += inner(cbp(x1, y1, sx, sy), cbp(x2, y2, sx, sy));
  }
  double sum_cs = 0.0;
  for (std::uint64_t seed = 1; seed <= 500; ++seed) {
    const CountSketch s(p, dim, seed);
    sum_cs += inner(s.apply(x1), s.apply(x2));
  }
  const double err_cbp = std::abs(sum_cbp / 1000.0 - target_cbp) / std::abs(target_cbp);
  const double err_cs = std::abs(sum_cs / 500.0 - target_cs) / std::abs(target_cs);
  return {err_cbp <= 0.10 && err_cs <= 0.05,
          fmt("cbp: mean %.3f vs %.3f, rel err %.2f%% (<= 10%%); count sketch: mean %.3f vs %.3f, rel err %.2f%% "
              "(<= 5%%)",
              sum_cbp / 1000.0, target_cbp, 100 * err_cbp, sum_cs / 500.0, target_cs, 100 * err_cs)};
}

// --- 4

Outcome overfit() {
  const auto start = Clock::now();
  ExperimentConfig c = training_config(SyntheticTask::kNeedle, 1).resolved();
  c.data.synthetic->train_count = 32;
  c.data.synthetic->val_count = 32;
  c.data.synthetic->test_count = 1;
  c.model.fusion.embedding_scale = 1.0;
  // Learning rate, accumulator and batch size at their defaults.
  c.train = TrainConfig{};
  c.train.max_epochs = 200;
  c.train.early_stop_patience = 200;
  c.train.restarts = 1;
  c.train.rng_seed = c.seed + 2;
  c.validate();
  const Corpus corpus = build_corpus(c.data);
  RwmnModel model = RwmnModel::create(c.model, corpus.vocab);
  initialize_params(model, c.train.rng_seed);
  TrainObserver obs;
  obs.stop_on_perfect_fit = true;
  const TrainResult r = train(model, corpus.train, corpus.val, c.train, obs);
  const double acc = evaluate(r.model, corpus.train).accuracy;
  const double secs = seconds_since(start);
  return {acc == 1.0 && secs <= 300.0,
          fmt("train accuracy %.3f after %zu epochs (lr %.3g, batch %zu), %.1f s", acc, r.history.epochs.size(),
              c.train.learning_rate, c.train.batch_size, secs)};
}

// --- 5

NeedleRun& needle_run() {
  static NeedleRun run;
  if (!run.done) {
    const auto start = Clock::now();
    run.config = training_config(SyntheticTask::kNeedle, 1);
    run.config.train.max_epochs = 150;
    run.result = run_experiment(run.config);
    run.corpus = build_corpus(run.config.resolved().data);
    run.seconds = seconds_since(start);
    run.done = true;
  }
  return run;
}

Outcome needle() {
  NeedleRun& run = needle_run();
  const SplitReport& val = run.result.report.split("val");
  const auto& h = run.result.report.members.at(0).history;
  return {val.accuracy >= 0.90 && run.seconds <= 600.0,
          fmt("val accuracy %.3f (%zu/%zu), best epoch %zu of %zu, %.1f s", val.accuracy, val.correct, val.count,
              h.best_epoch, h.epochs.size(), run.seconds)};
}

// --- 6, 7

Outcome ablation(SyntheticTask task, Variant variant, std::size_t max_epochs, std::size_t train_items) {
  std::vector<double> full, ablated;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    for (Variant v : {Variant::kFull, variant}) {
      ExperimentConfig c = training_config(task, seed);
      c.model.variant = v;
      c.train.max_epochs = max_epochs;
      c.train.early_stop_patience = max_epochs;
      c.data.synthetic->train_count = train_items;
      const double acc = run_experiment(c).report.split("test").accuracy;
      (v == Variant::kFull ? full : ablated).push_back(acc);
      std::cerr << "  " << to_string(task) << " seed " << seed << " " << to_string(v) << " test " << acc << '\n';
    }
  }
  const auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double gap = 100.0 * (mean(full) - mean(ablated));
  return {gap >= 5.0, fmt("test accuracy full %.3f vs %s %.3f over 5 seeds, gap %.1f points (>= 5)", mean(full),
                          std::string(to_string(variant)).c_str(), mean(ablated), gap)};
}

// --- 8

Outcome attention_localization() {
  NeedleRun& run = needle_run();
  const RwmnModel& model = run.result.models.at(0);
  std::size_t correct = 0, overlapping = 0;
  for (const auto& item : run.corpus.val.items()) {
    const AttentionRecord r = attention_record(model, run.corpus.val.story_for(item), item);
    if (r.predicted != r.correct) continue;
    ++correct;
    overlapping += r.slot_steps.at(r.argmax_slot).overlaps(*item.gt_span);
  }
  const double frac = correct ? double(overlapping) / double(correct) : 0.0;
  return {correct > 0 && frac >= 0.80,
          fmt("argmax slot overlaps gt_span on %zu of %zu correct val items (%.1f%%, >= 80%%)", overlapping, correct,
              100 * frac)};
}

// --- 9

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// report.json with the volatile fields removed, as written to disk.
std::string stable_report(const fs::path& p) {
  auto j = nlohmann::ordered_json::parse(read_file(p));
  j.erase("timestamp");
  j.erase("wall_clock_seconds");
  return j.dump(1);
}

int run_cli(const std::string& cli, const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + cli + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  return std::system(cmd.c_str());
}

// `train` then `eval` into the same directory, twice. Without a CLI path
// the library entry points are called directly.
Outcome determinism(const fs::path& work, const std::string& cli) {
  ExperimentConfig c = training_config(SyntheticTask::kNeedle, 7);
  c.data.synthetic->train_count = 100;
  c.data.synthetic->val_count = 50;
  c.data.synthetic->test_count = 50;
  c.train.max_epochs = 5;
  c.train.early_stop_patience = 5;
  c.save_checkpoints = true;
  c.output_dir = work / "determinism";
  const fs::path ini = work / "determinism.ini";
  std::ofstream(ini) << format_experiment_config(c);

  std::vector<std::string> train_reports, eval_reports, checkpoints;
  for (int run = 0; run < 2; ++run) {
    fs::remove_all(c.output_dir);
    if (cli.empty()) {
      run_experiment(c);
      run_evaluation(c);
    } else {
      const fs::path log = work / "determinism.log";
      if (run_cli(cli, "train --config \"" + ini.string() + "\"", log) != 0 ||
          run_cli(cli, "eval --out \"" + c.output_dir.string() + "\"", log) != 0) {
        return {false, "CLI run failed, see " + log.string()};
      }
    }
    train_reports.push_back(stable_report(c.output_dir / "report.json"));
    eval_reports.push_back(stable_report(c.output_dir / "eval_report.json"));
    checkpoints.push_back(read_file(c.output_dir / "member-0.rwmp"));
  }
  const bool same = train_reports[0] == train_reports[1] && eval_reports[0] == eval_reports[1] &&
                    checkpoints[0] == checkpoints[1];
  return {same, fmt("%s: report.json %s, eval_report.json %s, checkpoint %s (%zu report bytes)",
                    cli.empty() ? "library" : "rwmn train + eval",
                    train_reports[0] == train_reports[1] ? "identical" : "DIFFERENT",
                    eval_reports[0] == eval_reports[1] ? "identical" : "DIFFERENT",
                    checkpoints[0] == checkpoints[1] ? "identical" : "DIFFERENT", train_reports[0].size())};
}

// --- 10

Outcome untrained_sanity() {
  ExperimentConfig c = training_config(SyntheticTask::kNeedle, 11).resolved();
  c.data.synthetic->train_count = 1;
  c.data.synthetic->val_count = 1;
  c.data.synthetic->test_count = 1000;
  const Corpus corpus = build_corpus(c.data);
  // Every parameter zero: all candidates score alike.
  const RwmnModel model = RwmnModel::create(c.model, corpus.vocab);
  const std::vector<RwmnModel> models = {model};
  const SplitReport s = evaluate_split(models, corpus.test, "test");
  return {std::abs(s.accuracy - 0.20) <= 0.03 && s.count == 1000,
          fmt("accuracy %.3f on %zu items (20%% +- 3%%)", s.accuracy, s.count)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work = (fs::temp_directory_path() / "rwmn-acceptance").string();
  std::string cli;
  std::vector<int> only;
  app.add_option("--work-dir", work, "Scratch directory for run outputs");
  app.add_option("--cli", cli, "rwmn executable used for the determinism check");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::vector<Criterion> criteria = {
      {1, "gradient suite", gradient_suite},
      {2, "shape law", shape_law},
      {3, "cbp unbiasedness", cbp_unbiasedness},
      {4, "overfit contract", overfit},
      {5, "needle task", needle},
      {6, "chunk ablation full vs noRW", [] { return ablation(SyntheticTask::kChunk, Variant::kNoRW, 60, 1000); }},
      {7, "query ablation full vs noQ", [] { return ablation(SyntheticTask::kQuerySensitive, Variant::kNoQ, 40, 4000); }},
      {8, "attention localization", attention_localization},
      {9, "determinism", [&] { return determinism(work, cli); }},
      {10, "untrained sanity", untrained_sanity},
  };

  const std::set<int> selected(only.begin(), only.end());
  std::size_t failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.contains(c.id)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.id << ". " << c.name << ": " << o.detail
              << fmt("  [%.1f s]", seconds_since(start)) << std::endl;
  }
  return failed ? 3 : 0;
}
