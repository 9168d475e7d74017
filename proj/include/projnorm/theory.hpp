#pragma once

// Spectral analysis of the overparameterized linear model: noiseless tasks,
// assumption checks, and the eigenvalue sandwich relating the test loss to
// the squared linear projection norm.

#include <cstdint>
#include <vector>

#include "projnorm/numerics.hpp"

namespace projnorm {

// Noiseless linear task: y = X theta_star, y_tilde = X_tilde theta_star.
struct SyntheticLinearTask {
  Matrix x;
  Matrix x_tilde;
  Vector theta_star;

  void validate() const;
  Vector y() const { return x * theta_star; }
  Vector y_tilde() const { return x_tilde * theta_star; }
};

// (1/m) ||X_tilde theta_hat - y_tilde||^2, with theta_hat the min-norm fit.
// Cross-checked against the orthogonal-component form before returning.
double test_loss(const SyntheticLinearTask& task);
// (1/m) ||X_tilde (I - P) theta_star||^2.
double test_loss_orthogonal_form(const SyntheticLinearTask& task);

// H(i, j) = |<v_i, u_j>| for test eigenvector v_i and train eigenvector u_j.
struct AlignmentMatrix {
  Matrix entries;
  Index size() const { return entries.rows(); }
};

AlignmentMatrix alignment_matrix(const SpectralDecomposition& train_eig,
                                 const SpectralDecomposition& test_eig, Index k);

// (||P_test theta*|| - ||P theta*||) / ||P theta*||.
double check_norm_assumption(const SyntheticLinearTask& task);

struct SpectralCheck {
  // Largest principal angle (radians) between the two top-k eigenspaces.
  double shared_gap = 0.0;
  // Largest singular value of the inner products between the two tails.
  double cross_overlap = 0.0;
};

SpectralCheck check_spectral_assumption(const SpectralDecomposition& train_eig,
                                        const SpectralDecomposition& test_eig, Index k);

// Largest principal angle between the column spans of two orthonormal bases.
double largest_principal_angle(const Matrix& a, const Matrix& b);

struct BoundReport {
  Index k = 0;
  // Eigenvalues of X_tilde^T X_tilde (unnormalized), 1-based index k+1 and m.
  double lambda_k_plus_1 = 0.0;
  double lambda_m = 0.0;
  double test_loss = 0.0;
  double proj_norm_linear = 0.0;
  double ratio = 0.0;  // test_loss / proj_norm_linear^2
  double lower = 0.0;  // lambda_m / m
  double upper = 0.0;  // lambda_{k+1} / m
  // False when ProjNormLinear is zero to rounding (relative to ||P theta*||).
  bool ratio_defined = true;
  bool holds = false;
  SpectralCheck spectral;
  double norm_discrepancy = 0.0;
};

inline constexpr double kBoundTolerance = 1e-8;
inline constexpr double kAssumptionTolerance = 1e-7;

BoundReport verify_prop1(const SyntheticLinearTask& task, Index k);

// Eigenvalue profile of the constructed covariances. Covariance eigenvalue i
// (1-based) is i^-exponent; a flat tail pins every eigenvalue past k at
// (k+1)^-exponent. exponent = 0 gives an isotropic spectrum of ones.
struct TailProfile {
  double exponent = 1.5;
  bool flat_tail = false;
  bool operator==(const TailProfile&) const = default;
};

struct InstanceSpec {
  Index k = 3;
  Index n = 20;
  Index m = 20;
  Index d = 64;
  std::uint64_t seed = 0;
  TailProfile tail;

  void validate() const;
};

// Task whose train/test covariances share their top-k eigenspace exactly,
// have mutually orthogonal tails, and whose theta_star has equal projected
// norms onto the two row spaces.
SyntheticLinearTask construct_instance(const InstanceSpec& spec);

// Covariance eigenvalues of X^T X / n in descending order.
std::vector<double> eigen_spectrum(const Matrix& x, Index top_k);

}  // namespace projnorm
