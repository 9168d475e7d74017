#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "projnorm/numerics.hpp"

namespace projnorm {

// Feature matrix plus integer class labels in [0, num_classes).
struct LabeledDataset {
  Matrix features;
  std::vector<int> labels;
  int num_classes = 0;

  Index size() const { return features.rows(); }
  Index dim() const { return features.cols(); }

  // Throws DimensionError if any invariant is violated.
  void validate() const;

  // Rows selected in the given order.
  LabeledDataset subset(const std::vector<Index>& rows) const;

  bool operator==(const LabeledDataset& other) const;
};

// Two-block Gaussian covariate shift. Training covariates live in the first
// d1 coordinates; test covariates additionally have variance sigma^2 in the
// last d2. Labels are sign(x[a] + x[b]) with 1-based coordinate indices.
struct GaussianShiftSpec {
  Index d1 = 1000;
  Index d2 = 500;
  Index n = 500;
  Index m = 500;
  double sigma = 1.0;
  Index label_coord_a = 1;
  Index label_coord_b = 0;  // 0 means d1 + d2
  std::uint64_t seed = 0;

  void validate() const;
  Index coord_b() const { return label_coord_b == 0 ? d1 + d2 : label_coord_b; }
};

// The test draw is paired across sigma: for a fixed seed only the columns past
// d1 change with sigma, and they change by exact scaling.
std::pair<LabeledDataset, LabeledDataset> gen_gaussian_shift(const GaussianShiftSpec& spec);

// Binary label rule used by gen_gaussian_shift: sum >= 0 maps to class 1.
int sign_label(double sum);

// K-class Gaussian mixture used as the base task for the nonlinear experiments.
// Each class owns `modes_per_class` isotropic blobs whose centers are drawn
// from N(offset * 1, separation^2 I). A nonzero offset makes the features
// uncentered, as raw intensities are.
struct MixtureSpec {
  Index dim = 16;
  int num_classes = 4;
  int modes_per_class = 2;
  double separation = 1.5;
  double noise = 1.0;
  double offset = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// `count` samples from the mixture; `stream` selects an independent draw of
// the same distribution (train / validation / test use different streams).
LabeledDataset gen_mixture(const MixtureSpec& spec, Index count, std::string_view stream);

enum class CorruptionKind { kNoise, kScale, kDropout };

CorruptionKind parse_corruption_kind(const std::string& name);
std::string to_string(CorruptionKind kind);

LabeledDataset gen_feature_corruption(const LabeledDataset& base, CorruptionKind kind,
                                      double severity, std::uint64_t seed);

// Keeps rows whose label is in keep_classes. Labels are not re-indexed.
LabeledDataset gen_label_shift(const LabeledDataset& base, const std::set<int>& keep_classes);

// Family of shifted datasets indexed by increasing severity.
struct ShiftFamily {
  std::string name;  // gaussian-sigma | noise | scale | dropout | label-shift | adversarial
  std::vector<double> severities;
  std::uint64_t seed = 0;

  void validate() const;
};

bool is_known_family(const std::string& name);

struct AttackSpec {
  double epsilon = 0.0;
  int steps = 20;
  std::optional<double> step_size;  // defaults to epsilon / 4
  // Not consumed: the attack starts at the clean point.
  std::uint64_t seed = 0;

  void validate() const;
  double resolved_step_size() const { return step_size.value_or(epsilon / 4.0); }
};

// Maps (features, labels) to per-example loss gradients w.r.t. the features.
using GradOracle = std::function<Matrix(const Matrix&, const std::vector<int>&)>;

// Untargeted l_inf PGD: x <- clip_{eps-ball(x0)}(x + step * sign(grad)).
LabeledDataset pgd_attack(const GradOracle& grad_oracle, const LabeledDataset& base,
                          const AttackSpec& spec);

// Largest value in [center - eps, center + eps] closest to v, such that
// |result - center| <= eps holds exactly in floating point.
double clamp_to_ball(double v, double center, double eps);

// CSV: header f0,...,f{d-1},label then one row per example.
void save_csv(const LabeledDataset& data, const std::filesystem::path& path);
// num_classes defaults to max label + 1 when not given.
LabeledDataset load_csv(const std::filesystem::path& path,
                        std::optional<int> num_classes = std::nullopt);

}  // namespace projnorm
