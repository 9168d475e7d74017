#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "projnorm/numerics.hpp"

namespace projnorm {

// One (shift dataset, method) prediction with the dataset's true error.
struct PredictionRecord {
  std::string dataset_id;
  std::string family;
  double severity = 0.0;
  std::string method;
  double prediction = 0.0;
  double true_error = 0.0;

  void validate() const;
  bool operator==(const PredictionRecord&) const = default;
};

// Simple OLS of true_error on prediction for one method.
struct EvalReport {
  std::string method;
  double r_squared = 0.0;
  double spearman_rho = 0.0;
  double slope = 0.0;
  double intercept = 0.0;
  std::vector<double> residuals;
  std::vector<std::string> dataset_ids;
};

EvalReport fit_eval(std::span<const PredictionRecord> records);

// Pearson correlation of residual vectors; reports must cover identical
// dataset ids in identical order.
Matrix residual_correlation(std::span<const EvalReport> reports);

// Mean of the two inputs' z-scores (population standard deviation).
std::vector<double> ensemble_zscore(std::span<const double> a, std::span<const double> b);
std::vector<double> ensemble_zscore(const std::vector<std::vector<double>>& inputs);
std::vector<double> zscore(std::span<const double> v);

struct Calibration {
  double slope = 0.0;
  double intercept = 0.0;
  std::vector<double> predicted;
  double mse = 0.0;
};

// Fits the linear map on fit_records and applies it to apply_records.
Calibration calibrate_and_predict(std::span<const PredictionRecord> fit_records,
                                  std::span<const PredictionRecord> apply_records);

double pearson(std::span<const double> a, std::span<const double> b);
double spearman(std::span<const double> a, std::span<const double> b);
// 1-based ranks; ties share their average rank.
std::vector<double> midranks(std::span<const double> v);

// Records grouped by method, in first-appearance order.
std::vector<std::pair<std::string, std::vector<PredictionRecord>>> group_by_method(
    std::span<const PredictionRecord> records);

void save_records(std::span<const PredictionRecord> records, const std::filesystem::path& path);
std::vector<PredictionRecord> load_records(const std::filesystem::path& path);
std::string records_to_csv(std::span<const PredictionRecord> records);

}  // namespace projnorm
