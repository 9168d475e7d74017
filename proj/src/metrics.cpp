#include "projnorm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "projnorm/error.hpp"
#include "projnorm/rng.hpp"

namespace projnorm {

LabeledDataset pseudo_label(const ParamVector& theta_hat, const Matrix& test_features) {
  LabeledDataset out;
  out.features = test_features;
  out.labels = predict_class(theta_hat, test_features);
  out.num_classes = theta_hat.arch.num_classes;
  return out;
}

RefMode parse_ref_mode(const std::string& name) {
  if (name == "retrain") return RefMode::kRetrain;
  if (name == "reuse-model") return RefMode::kReuseModel;
  throw ConfigError("unknown ref_mode '" + name + "'");
}

std::string to_string(RefMode mode) {
  return mode == RefMode::kReuseModel ? "reuse-model" : "retrain";
}

void ProjNormConfig::validate() const {
  train_cfg.validate();
  if (ref_subsample && *ref_subsample < 1) throw ConfigError("projnorm: ref_subsample must be >= 1");
}

std::vector<Index> reference_subsample(Index n, Index m_ref, std::uint64_t seed) {
  if (m_ref < 1 || m_ref > n) {
    throw DimensionError("reference subsample of " + std::to_string(m_ref) + " from " +
                         std::to_string(n) + " training rows");
  }
  std::vector<Index> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), Index{0});
  Rng rng = make_rng(seed, "projnorm/ref-subsample");
  for (Index i = 0; i < m_ref; ++i) {
    std::uniform_int_distribution<Index> pick(i, n - 1);
    std::swap(rows[static_cast<std::size_t>(i)], rows[static_cast<std::size_t>(pick(rng))]);
  }
  rows.resize(static_cast<std::size_t>(m_ref));
  return rows;
}

ParamVector train_reference(const ParamVector& theta0, const LabeledDataset& train, Index m_ref,
                            const ProjNormConfig& cfg) {
  const auto rows = reference_subsample(train.size(), m_ref, cfg.seed);
  return train_sgd(theta0, train.subset(rows), cfg.train_cfg);
}

ProjNormRun finish_proj_norm(const ParamVector& theta0, const ParamVector& theta_hat,
                             const ParamVector& theta_ref, const Matrix& test_features,
                             const TrainConfig& train_cfg) {
  if (!(theta0.arch == theta_hat.arch) || !(theta0.arch == theta_ref.arch)) {
    throw DimensionError("proj_norm: models differ in architecture");
  }
  if (test_features.rows() == 0) throw DimensionError("proj_norm: empty test set");

  // Step 1: pseudo-label; Step 2: fine-tune theta0 on the pseudo-labels.
  const LabeledDataset pseudo = pseudo_label(theta_hat, test_features);
  ProjNormRun run;
  run.theta_tilde = train_sgd(theta0, pseudo, train_cfg);
  run.theta_ref = theta_ref;

  // Step 3.
  run.value = param_distance(run.theta_ref, run.theta_tilde);
  const auto reproduced = predict_class(run.theta_tilde, test_features);
  Index same = 0;
  for (std::size_t i = 0; i < reproduced.size(); ++i) same += reproduced[i] == pseudo.labels[i];
  run.pseudo_label_agreement = static_cast<double>(same) / static_cast<double>(reproduced.size());
  return run;
}

ProjNormRun proj_norm(const ParamVector& theta0, const ParamVector& theta_hat,
                      const LabeledDataset& train, const Matrix& test_features,
                      const ProjNormConfig& cfg) {
  cfg.validate();
  if (cfg.ref_mode == RefMode::kReuseModel) {
    return finish_proj_norm(theta0, theta_hat, theta_hat, test_features, cfg.train_cfg);
  }
  const Index m_ref = cfg.ref_subsample.value_or(test_features.rows());
  return finish_proj_norm(theta0, theta_hat, train_reference(theta0, train, m_ref, cfg), test_features,
                          cfg.train_cfg);
}

double proj_norm_linear(const Matrix& x, const Vector& y, const Matrix& x_test) {
  if (x.cols() != x_test.cols()) throw DimensionError("proj_norm_linear: train/test dimension mismatch");
  if (x_test.rows() > x_test.cols()) throw DimensionError("proj_norm_linear: expected m <= d");
  const Vector theta_hat = min_norm_solve(x, y);
  const RowSpaceProjector p_test = row_space_projector(x_test);
  return (theta_hat - project(p_test, theta_hat)).norm();
}

Matrix softmax(const Matrix& logits) {
  Matrix p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp().matrix();
  p = p.array().colwise() / p.rowwise().sum().array();
  return p;
}

Vector negative_entropy(const Matrix& logits) {
  // log p_k = z_k - max - log sum exp(z - max); avoids log(0) on saturated rows.
  const Matrix shifted = logits.colwise() - logits.rowwise().maxCoeff();
  const Vector log_norm = shifted.array().exp().rowwise().sum().log().matrix();
  const Matrix log_p = shifted.colwise() - log_norm;
  const Matrix p = log_p.array().exp().matrix();
  Vector s(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) {
    double acc = 0.0;
    for (Index k = 0; k < logits.cols(); ++k) {
      if (p(i, k) > 0.0) acc += p(i, k) * log_p(i, k);
    }
    s(i) = acc;
  }
  return s;
}

namespace {

void require_rows(const Matrix& logits, const char* what) {
  if (logits.rows() == 0) throw DimensionError(std::string(what) + ": no rows");
  if (logits.cols() < 2) throw DimensionError(std::string(what) + ": need K >= 2");
}

}  // namespace

double conf_score(const Matrix& logits) {
  require_rows(logits, "conf_score");
  return softmax(logits).rowwise().maxCoeff().mean();
}

double entropy_score(const Matrix& logits) {
  require_rows(logits, "entropy_score");
  return -negative_entropy(logits).mean();
}

double agree_score(const Matrix& logits_a, const Matrix& logits_b) {
  if (logits_a.rows() != logits_b.rows() || logits_a.cols() != logits_b.cols()) {
    throw DimensionError("agree_score: logits shapes differ");
  }
  if (logits_a.rows() == 0) throw DimensionError("agree_score: no rows");
  const auto a = argmax_rows(logits_a);
  const auto b = argmax_rows(logits_b);
  Index differ = 0;
  for (std::size_t i = 0; i < a.size(); ++i) differ += a[i] != b[i];
  return static_cast<double>(differ) / static_cast<double>(a.size());
}

ATCState atc_fit(const Matrix& val_logits, const std::vector<int>& val_labels) {
  if (val_logits.rows() == 0) throw DimensionError("atc_fit: empty validation set");
  if (static_cast<Index>(val_labels.size()) != val_logits.rows()) {
    throw DimensionError("atc_fit: label count does not match logits");
  }
  const auto pred = argmax_rows(val_logits);
  std::size_t errors = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) errors += pred[i] != val_labels[i];

  const Vector s = negative_entropy(val_logits);
  std::vector<double> sorted(s.data(), s.data() + s.size());
  std::sort(sorted.begin(), sorted.end());

  // Need exactly `errors` scores strictly below t.
  if (errors == 0) return {sorted.front() - 1.0};
  if (errors == sorted.size()) return {sorted.back() + 1.0};
  const double lo = sorted[errors - 1];
  const double hi = sorted[errors];
  if (lo == hi) return {lo};  // tie straddles the cut; no exact solution exists
  double t = lo + 0.5 * (hi - lo);
  if (!(t > lo)) t = hi;
  return {t};
}

double atc_score(const Matrix& test_logits, const ATCState& state) {
  if (test_logits.rows() == 0) throw DimensionError("atc_score: no rows");
  const Vector s = negative_entropy(test_logits);
  Index below = 0;
  for (Index i = 0; i < s.size(); ++i) below += s(i) < state.threshold;
  return static_cast<double>(below) / static_cast<double>(s.size());
}

}  // namespace projnorm
