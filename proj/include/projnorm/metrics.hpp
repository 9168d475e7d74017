#pragma once

// Out-of-distribution error predictors. ProjNorm and its linear counterpart
// look at parameters; the rest look only at model outputs.

#include <cstdint>
#include <optional>
#include <vector>

#include "projnorm/data.hpp"
#include "projnorm/models.hpp"
#include "projnorm/numerics.hpp"

namespace projnorm {

LabeledDataset pseudo_label(const ParamVector& theta_hat, const Matrix& test_features);

enum class RefMode {
  kRetrain,     // fine-tune theta0 on m_ref training rows
  kReuseModel,  // reference is theta_hat itself
};

RefMode parse_ref_mode(const std::string& name);
std::string to_string(RefMode mode);

struct ProjNormConfig {
  TrainConfig train_cfg;
  RefMode ref_mode = RefMode::kRetrain;
  std::optional<Index> ref_subsample;  // defaults to the test-set size
  std::uint64_t seed = 0;

  void validate() const;
};

struct ProjNormRun {
  double value = 0.0;
  ParamVector theta_tilde;
  ParamVector theta_ref;
  // Fraction of pseudo-labels that theta_tilde reproduces on the test set.
  double pseudo_label_agreement = 0.0;
};

// Training rows used for the reference model, in the order they are fed to
// the trainer. Uniform without replacement.
std::vector<Index> reference_subsample(Index n, Index m_ref, std::uint64_t seed);

ProjNormRun proj_norm(const ParamVector& theta0, const ParamVector& theta_hat,
                      const LabeledDataset& train, const Matrix& test_features,
                      const ProjNormConfig& cfg);

// Step 2+ on its own: theta0 fine-tuned on m_ref seeded training rows.
ParamVector train_reference(const ParamVector& theta0, const LabeledDataset& train, Index m_ref,
                            const ProjNormConfig& cfg);

// Steps 1, 2 and 3 against an already trained reference model.
ProjNormRun finish_proj_norm(const ParamVector& theta0, const ParamVector& theta_hat,
                             const ParamVector& theta_ref, const Matrix& test_features,
                             const TrainConfig& train_cfg);

// ||theta_hat - P_test theta_hat|| with theta_hat the min-norm fit of (X, y).
double proj_norm_linear(const Matrix& x, const Vector& y, const Matrix& x_test);

Matrix softmax(const Matrix& logits);

// s(p) = sum_k p_k log p_k per row, with 0 log 0 = 0.
Vector negative_entropy(const Matrix& logits);

double conf_score(const Matrix& logits);
double entropy_score(const Matrix& logits);
// Fraction of rows on which the two classifiers' argmaxes differ.
double agree_score(const Matrix& logits_a, const Matrix& logits_b);

struct ATCState {
  double threshold = 0.0;
};

ATCState atc_fit(const Matrix& val_logits, const std::vector<int>& val_labels);
double atc_score(const Matrix& test_logits, const ATCState& state);

}  // namespace projnorm
