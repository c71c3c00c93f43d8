#pragma once

// Experiment runner: config files, train/evaluate runs with reports,
// structure/variant sweeps, question-type breakdowns and attention exports.
//
// Seed policy: one experiment seed s drives every stream. The synthetic
// data uses s, the sketches s + 1, initialization and shuffling s + 2
// (restart r and ensemble member k add r + k * restarts on top).

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rwmn/data.hpp"
#include "rwmn/memnet.hpp"
#include "rwmn/synthetic.hpp"
#include "rwmn/training.hpp"

namespace rwmn {

// Exactly one of a synthetic task or a corpus directory (see write_corpus).
struct DatasetSpec {
  std::optional<SyntheticTaskConfig> synthetic = SyntheticTaskConfig{};
  std::filesystem::path corpus_dir;

  void validate() const;
};

struct EnsembleSpec {
  EnsembleMode mode = EnsembleMode::kNone;
  std::size_t members = 1;
};

struct ReportFormats {
  bool json = true;
  bool text = true;
};

struct StructureSpec {
  std::vector<ConvLayerSpec> write;
  std::vector<ConvLayerSpec> read;
};

// "40:30:3/3:1:3" is write / read; either side may be "none".
StructureSpec parse_structure(std::string_view text);
std::string format_structure(const StructureSpec& structure);

struct SweepSpec {
  std::vector<Variant> variants;
  std::vector<StructureSpec> structures;
  // Cell seeds are experiment seed + 0 .. seeds - 1, shared by every cell.
  std::size_t seeds = 1;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DatasetSpec data;
  RwmnConfig model;
  TrainConfig train;
  EnsembleSpec ensemble;
  // Empty: nothing is written.
  std::filesystem::path output_dir;
  ReportFormats formats;
  bool save_checkpoints = true;
  SweepSpec sweep;

  void validate() const;
  // Copy with the seed policy applied to data, sketch and train seeds.
  ExperimentConfig resolved() const;
};

// INI file with sections [experiment], [data], [model], [train], [ensemble]
// and [sweep]. Unknown sections or keys are a ConfigError. Missing keys keep
// their defaults.
ExperimentConfig parse_experiment_config(std::istream& in);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
// Round-trips through parse_experiment_config.
std::string format_experiment_config(const ExperimentConfig& config);

Corpus build_corpus(const DatasetSpec& spec);

struct ItemRecord {
  std::string id;  // "<story id>#<item index within the split>"
  std::string type;
  std::size_t y = 0;
  std::size_t correct_index = 0;
  bool correct = false;
  std::vector<double> z;
  // Argmax of the attention grid and its receptive field in story steps.
  std::size_t attention_slot = 0;
  std::size_t attention_channel = 0;
  StepSpan attention_window;
};

struct TypeAccuracy {
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;

  bool operator==(const TypeAccuracy&) const = default;
};

struct SplitReport {
  std::string name;
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
  double loss = 0.0;  // mean -log z[correct]
  std::map<std::string, TypeAccuracy> types;
  std::vector<ItemRecord> items;
};

struct MemberSummary {
  std::uint64_t seed = 0;
  TrainHistory history;
};

struct Report {
  std::uint64_t seed = 0;
  std::string config;  // format_experiment_config of the resolved config
  std::vector<MemberSummary> members;  // empty for eval-only reports
  std::vector<SplitReport> splits;
  // Volatile fields, left out of comparisons.
  std::string timestamp;
  double wall_clock_seconds = 0.0;

  const SplitReport& split(std::string_view name) const;
};

// Types absent from the split are absent from the map.
std::map<std::string, TypeAccuracy> question_type_breakdown(const SplitReport& split);

// Reports as JSON. Without volatile fields the text is a pure function of
// the config and seed.
std::string report_json(const Report& report, bool include_volatile = true);
// Aligned plain-text tables: split accuracies, then per-type accuracy.
std::string report_text(const Report& report);

// Evaluates one split with a single model or an averaged ensemble. The
// attention fields of ensemble records come from the first member.
SplitReport evaluate_split(std::span<const RwmnModel> models, const Dataset& data, std::string name);

struct ExperimentResult {
  Report report;
  std::vector<RwmnModel> models;
};

// Builds the data, trains (restarts and ensemble per config), evaluates
// train/val/test and, with an output directory, writes config.ini,
// metrics.jsonl, report.json / report.txt and member-<k>.rwmp checkpoints.
ExperimentResult run_experiment(const ExperimentConfig& config);

// Loads the checkpoints written by run_experiment from the output
// directory, evaluates every split and writes eval_report.json / .txt.
Report run_evaluation(const ExperimentConfig& config);

// --- sweeps

struct SweepRow {
  Variant variant = Variant::kFull;
  StructureSpec structure;
  std::vector<double> val_accuracy;  // one per seed
  std::vector<double> test_accuracy;
  double val_mean = 0.0;
  double val_sd = 0.0;
  double test_mean = 0.0;
  double test_sd = 0.0;
  std::string error;  // set when the cell failed
};

struct SweepTable {
  std::vector<SweepRow> rows;
};

// One cell: every seed of one (variant, structure) pair, nothing written.
SweepRow run_sweep_cell(const ExperimentConfig& base, Variant variant, const StructureSpec& structure,
                        std::size_t seeds);
// Rows in (structure, variant) order. A failing cell is recorded and the
// sweep continues.
SweepTable ablation_sweep(const ExperimentConfig& base, const SweepSpec& spec);
std::string sweep_json(const SweepTable& table);
std::string sweep_text(const SweepTable& table);

// --- attention

// Receptive field of every output slot of a conv stack, in input steps.
// With padding_correction the SAME padding offset is applied, otherwise
// slot i starts at i * stride. Intervals are clipped to [0, steps).
std::vector<StepSpan> receptive_fields(std::size_t steps, std::span<const ConvLayerSpec> layers,
                                       bool padding_correction = true);
// Through the active write and read layers of a model config.
std::vector<StepSpan> attention_receptive_fields(const RwmnConfig& config, std::size_t steps);

struct AttentionRecord {
  std::string story_id;
  std::vector<std::string> question;
  std::array<std::vector<std::string>, kAnswerCount> answers;
  std::vector<double> attention;  // c x C_r, row-major
  std::size_t slots = 0;
  std::size_t channels = 0;
  std::vector<StepSpan> slot_steps;
  std::optional<StepSpan> gt_span;
  std::size_t predicted = 0;
  std::size_t correct = 0;
  std::size_t argmax_slot = 0;
};

AttentionRecord attention_record(const RwmnModel& model, const StorySource& story, const QAItem& item);
std::string attention_json(const AttentionRecord& record);
// One JSON object.
void export_attention(const RwmnModel& model, const StorySource& story, const QAItem& item,
                      const std::filesystem::path& path);
// One JSON object per line for the first `limit` items of a dataset.
void export_attention(const RwmnModel& model, const Dataset& data, const std::filesystem::path& path,
                      std::size_t limit);

}  // namespace rwmn
