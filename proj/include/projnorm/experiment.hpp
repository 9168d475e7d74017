#pragma once

// Config-driven experiment runners behind the command-line tool.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "projnorm/data.hpp"
#include "projnorm/eval.hpp"
#include "projnorm/metrics.hpp"
#include "projnorm/models.hpp"
#include "projnorm/theory.hpp"

namespace projnorm {

inline constexpr int kReportSchemaVersion = 1;

enum class TaskKind { kToyLinear, kMlpShift, kProp1Sweep, kStressTest };

std::string to_string(TaskKind t);
TaskKind parse_task_kind(const std::string& name);

struct ShiftConfig {
  std::string family;
  std::vector<double> severities;
  bool operator==(const ShiftConfig&) const = default;
};

struct ArchConfig {
  std::string kind = "mlp";
  std::vector<Index> hidden = {32};
  std::string activation = "relu";
  bool operator==(const ArchConfig&) const = default;
};

struct TrainSettings {
  int steps = 1000;
  double learning_rate = 0.05;
  int batch_size = 64;
  double momentum = 0.9;
  std::string schedule = "cosine";
  std::string loss = "cross-entropy";
  bool operator==(const TrainSettings&) const = default;

  TrainConfig resolve(std::uint64_t seed) const;
};

struct MixtureSettings {
  Index dim = 16;
  int num_classes = 4;
  int modes_per_class = 2;
  double separation = 1.5;
  double noise = 1.0;
  double offset = 0.0;
  Index n_train = 4000;
  Index n_val = 1000;
  Index m_test = 2000;
  bool operator==(const MixtureSettings&) const = default;
};

struct ToySettings {
  Index d1 = 1000;
  Index d2 = 500;
  Index n = 500;
  Index m = 500;
  Index label_coord_a = 1;
  Index label_coord_b = 0;
  bool operator==(const ToySettings&) const = default;
};

struct ProjNormSettings {
  TrainSettings train;
  std::string ref_mode = "retrain";
  std::optional<Index> ref_subsample;
  bool operator==(const ProjNormSettings&) const = default;
};

struct LinearizedSettings {
  Index rows = 400;                 // rows of train / test used for the linear fit
  std::optional<Index> subsample;   // parameter coordinates; all when unset
  bool operator==(const LinearizedSettings&) const = default;
};

struct Theta0Settings {
  std::string mode = "random";  // random | pretrained
  int pretrain_steps = 300;
  bool operator==(const Theta0Settings&) const = default;
};

struct Prop1Settings {
  int instances = 100;
  Index k = 5;
  Index n = 40;
  Index m = 50;
  Index d = 128;
  std::vector<TailProfile> profiles = {TailProfile{1.5, false}, TailProfile{1.0, true}};
  bool operator==(const Prop1Settings&) const = default;
};

struct StressSettings {
  std::vector<double> epsilons = {0.25, 0.5, 1, 2, 4, 8};
  double epsilon_unit = 0.15;   // grid values are multiplied by this
  int steps = 20;
  std::optional<double> step_size;
  bool operator==(const StressSettings&) const = default;
};

struct ExperimentConfig {
  TaskKind task = TaskKind::kMlpShift;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  ArchConfig architecture;
  TrainSettings train;
  Theta0Settings theta0;
  MixtureSettings mixture;
  ToySettings toy;
  std::vector<ShiftConfig> shifts;
  std::vector<std::string> metrics;
  ProjNormSettings projnorm;
  LinearizedSettings linearized;
  std::vector<std::vector<std::string>> ensembles;
  Prop1Settings prop1;
  StressSettings stress;

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

bool is_known_metric(const std::string& name);

// Dataset id used in records and file names, e.g. "noise@0.5".
std::string dataset_id(const std::string& family, double severity);

struct RunResult {
  std::vector<PredictionRecord> records;
  nlohmann::json report;
};

struct StressRow {
  double epsilon = 0.0;  // in grid units
  double true_error = 0.0;
  std::map<std::string, double> raw;
  std::map<std::string, double> calibrated;
};

struct StressResult {
  std::vector<PredictionRecord> records;  // corruption + adversarial
  std::vector<StressRow> table;
  nlohmann::json report;
};

// Library entry points; the cmd_* wrappers add file emission.
RunResult run_experiment(const ExperimentConfig& cfg);
StressResult run_stress(const ExperimentConfig& cfg);
std::vector<std::filesystem::path> generate_datasets(const ExperimentConfig& cfg,
                                                     const std::filesystem::path& out_dir);

// Method x family R^2 / rho table and residual-correlation table.
std::string render_report(const std::vector<PredictionRecord>& records);

void cmd_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);
void cmd_run(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);
void cmd_stress(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);
std::string cmd_report(const std::filesystem::path& records_path, const std::filesystem::path& out_dir);

nlohmann::json to_json(const BoundReport& r);
nlohmann::json to_json(const EvalReport& r);

}  // namespace projnorm
