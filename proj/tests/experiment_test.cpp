#include <gtest/gtest.h>

#include <filesystem>

#include "projnorm/error.hpp"
#include "projnorm/experiment.hpp"

using namespace projnorm;
using nlohmann::json;

namespace {

ExperimentConfig small_mixture(TaskKind task = TaskKind::kMlpShift) {
  ExperimentConfig c;
  c.task = task;
  c.seed = 3;
  c.architecture.hidden = {16};
  c.train.steps = 150;
  c.projnorm.train.steps = 100;
  c.mixture.dim = 8;
  c.mixture.n_train = 300;
  c.mixture.n_val = 100;
  c.mixture.m_test = 150;
  c.shifts = {{"noise", {0.5, 1.5}}, {"dropout", {0.2, 0.6}}};
  c.metrics = {"ProjNorm", "ConfScore", "ATC"};
  c.ensembles = {{"ProjNorm", "ConfScore"}};
  return c;
}

ExperimentConfig small_toy() {
  ExperimentConfig c;
  c.task = TaskKind::kToyLinear;
  c.seed = 1;
  c.toy = {40, 20, 30, 30, 1, 50};
  c.shifts = {{"gaussian-sigma", {0.5, 1.0, 2.0}}};
  c.metrics = {"ProjNormLinear", "ConfScore"};
  return c;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = small_mixture();
  c.projnorm.ref_subsample = 120;
  c.linearized.subsample = 50;
  c.mixture.offset = 0.25;
  c.stress.step_size = 0.01;
  const ExperimentConfig back = config_from_json(config_to_json(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(config_from_json(config_to_json(small_toy())), small_toy());
}

TEST(Config, DefaultsFillMissingKeys) {
  const auto c = config_from_json(json::parse(R"({"task": "prop1-sweep"})"));
  EXPECT_EQ(c.task, TaskKind::kProp1Sweep);
  EXPECT_EQ(c.prop1.instances, 100);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, ValidationErrors) {
  EXPECT_THROW(config_from_json(json::parse(R"({"task": "nope"})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"seed": 1})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse(R"({"task": "mlp-shift", "seed": "x"})")), ConfigError);
  EXPECT_THROW(config_from_json(json::parse("[1]")), ConfigError);

  auto c = small_mixture();
  c.metrics.push_back("Bogus");
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_mixture();
  c.ensembles = {{"ProjNorm", "Entropy"}};
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_mixture();
  c.shifts = {{"gaussian-sigma", {1.0}}};
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_mixture();
  c.theta0.mode = "sometimes";
  EXPECT_THROW(c.validate(), ConfigError);
  auto t = small_toy();
  t.metrics = {"ATC"};
  EXPECT_THROW(t.validate(), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, ShippedConfigsLoad) {
  for (const char* name : {"toy_linear.json", "mlp_shift.json", "prop1.json", "stress.json"}) {
    EXPECT_NO_THROW(load_config(std::filesystem::path(PROJNORM_CONFIG_DIR) / name)) << name;
  }
}

TEST(DatasetId, Format) {
  EXPECT_EQ(dataset_id("noise", 0.5), "noise@0.5");
  EXPECT_EQ(dataset_id("dropout", 1.0), "dropout@1");
}

TEST(RunExperiment, ToyIsDeterministic) {
  const auto a = run_experiment(small_toy());
  const auto b = run_experiment(small_toy());
  ASSERT_EQ(a.records.size(), 6u);
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].prediction, b.records[i].prediction);
    EXPECT_EQ(a.records[i].true_error, b.records[i].true_error);
  }
  EXPECT_EQ(a.report["schema_version"], kReportSchemaVersion);
  EXPECT_EQ(a.report["task"], "toy-linear");
}

TEST(RunExperiment, MixtureReport) {
  const auto cfg = small_mixture();
  const auto r = run_experiment(cfg);
  EXPECT_EQ(r.records.size(), 4u * cfg.metrics.size());
  for (const auto& rec : r.records) EXPECT_NO_THROW(rec.validate());
  ASSERT_EQ(r.report["methods"].size(), cfg.metrics.size());
  EXPECT_EQ(r.report["ensembles"].size(), 1u);
  EXPECT_EQ(r.report["ensembles"][0]["method"], "ProjNorm+ConfScore");
  const auto again = run_experiment(cfg);
  EXPECT_EQ(again.report.dump(), r.report.dump());
}

TEST(RunExperiment, Prop1Sweep) {
  ExperimentConfig c;
  c.task = TaskKind::kProp1Sweep;
  c.prop1.instances = 6;
  const auto r = run_experiment(c);
  EXPECT_TRUE(r.records.empty());
  EXPECT_EQ(r.report["bounds"].size(), 6u);
  EXPECT_EQ(r.report["holds_count"], 6);
}

TEST(RunStress, TableShape) {
  auto cfg = small_mixture(TaskKind::kStressTest);
  cfg.ensembles.clear();
  cfg.stress.epsilons = {1.0, 4.0};
  cfg.stress.steps = 5;
  const auto s = run_stress(cfg);
  ASSERT_EQ(s.table.size(), 2u);
  for (const auto& row : s.table) {
    EXPECT_EQ(row.calibrated.size(), cfg.metrics.size());
    EXPECT_GE(row.true_error, 0.0);
  }
  EXPECT_LE(s.table[0].true_error, s.table[1].true_error);
  EXPECT_EQ(s.report["calibration"].size(), cfg.metrics.size());
  EXPECT_THROW(run_stress(small_toy()), ConfigError);
}

TEST(GenerateDatasets, WritesFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "projnorm_gen_test";
  std::filesystem::remove_all(dir);
  const auto files = generate_datasets(small_toy(), dir);
  EXPECT_EQ(files.size(), 4u);
  for (const auto& f : files) EXPECT_TRUE(std::filesystem::exists(f));
  std::filesystem::remove_all(dir);
}

TEST(RenderReport, TablesAndDegenerateCells) {
  const auto r = run_experiment(small_mixture());
  const std::string text = render_report(r.records);
  EXPECT_NE(text.find("ProjNorm"), std::string::npos);
  EXPECT_NE(text.find("noise"), std::string::npos);
  EXPECT_NE(text.find("Residual correlation"), std::string::npos);
  EXPECT_THROW(render_report({}), Error);

  std::vector<PredictionRecord> flat;
  for (int i = 0; i < 3; ++i) flat.push_back({"d" + std::to_string(i), "f", 1.0, "C", 0.5, 0.1 * i});
  EXPECT_NE(render_report(flat).find("n/a"), std::string::npos);
}
