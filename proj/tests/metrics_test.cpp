#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "projnorm/data.hpp"
#include "projnorm/error.hpp"
#include "projnorm/eval.hpp"
#include "projnorm/metrics.hpp"
#include "projnorm/models.hpp"
#include "test_util.hpp"

using namespace projnorm;
using testutil::randn;

namespace {

Matrix shift_rows(const Matrix& logits, std::uint64_t seed) {
  const Vector c = 50.0 * randn(logits.rows(), seed);
  return logits.colwise() + c;
}

// Every distinct count of scores strictly below some threshold, by scanning
// candidates below, between and above the sorted scores.
bool brute_force_count_reachable(const Vector& s, Index target, double* witness) {
  std::vector<double> v(s.data(), s.data() + s.size());
  std::sort(v.begin(), v.end());
  std::vector<double> candidates{v.front() - 1.0, v.back() + 1.0};
  for (std::size_t i = 0; i + 1 < v.size(); ++i) candidates.push_back(0.5 * (v[i] + v[i + 1]));
  for (double x : v) candidates.push_back(x);
  for (double t : candidates) {
    Index below = 0;
    for (Index i = 0; i < s.size(); ++i) below += s(i) < t;
    if (below == target) {
      *witness = t;
      return true;
    }
  }
  return false;
}

TrainConfig quick_cfg(int steps) {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.learning_rate = 0.05;
  cfg.batch_size = 32;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST(PseudoLabel, Basics) {
  const auto arch = Architecture::mlp(3, 4, {5});
  const ParamVector zero{arch, Vector::Zero(arch.param_count())};
  const Matrix x = randn(7, 3, 1);
  for (int y : pseudo_label(zero, x).labels) EXPECT_EQ(y, 0);
  const auto theta = init_model(arch, 2);
  const auto a = pseudo_label(theta, x);
  EXPECT_TRUE(a == pseudo_label(theta, x));
  EXPECT_TRUE(a.features == x);
  EXPECT_EQ(a.labels, predict_class(theta, x));
}

TEST(PseudoLabel, PerfectModelReproducesLabels) {
  MixtureSpec spec;
  spec.separation = 4.0;
  spec.noise = 0.3;
  spec.seed = 3;
  const auto train = gen_mixture(spec, 200, "train");
  const auto arch = Architecture::mlp(16, 4, {32});
  const auto theta = train_sgd(init_model(arch, 1), train, quick_cfg(600));
  ASSERT_EQ(test_error(theta, train), 0.0);
  EXPECT_EQ(pseudo_label(theta, train.features).labels, train.labels);
}

TEST(ProjNorm, FixedPointIsExactlyZero) {
  MixtureSpec spec;
  spec.separation = 4.0;
  spec.noise = 0.3;
  spec.seed = 4;
  const auto train = gen_mixture(spec, 300, "train");
  const auto arch = Architecture::mlp(16, 4, {32});
  const auto theta0 = init_model(arch, 7);
  const auto theta_hat = train_sgd(theta0, train, quick_cfg(800));
  ASSERT_EQ(test_error(theta_hat, train), 0.0);

  ProjNormConfig cfg;
  cfg.train_cfg = quick_cfg(200);
  cfg.ref_subsample = 100;
  cfg.seed = 11;
  const auto rows = reference_subsample(train.size(), 100, cfg.seed);
  const Matrix test = train.subset(rows).features;
  const auto run = proj_norm(theta0, theta_hat, train, test, cfg);
  EXPECT_EQ(run.value, 0.0);
  EXPECT_TRUE(run.theta_tilde.values == run.theta_ref.values);
}

TEST(ProjNorm, DeterministicAndNonnegative) {
  MixtureSpec spec;
  spec.seed = 5;
  const auto train = gen_mixture(spec, 200, "train");
  const auto test = gen_mixture(spec, 80, "test");
  const auto arch = Architecture::mlp(16, 4, {16});
  const auto theta0 = init_model(arch, 1);
  const auto theta_hat = train_sgd(theta0, train, quick_cfg(300));
  ProjNormConfig cfg;
  cfg.train_cfg = quick_cfg(100);
  const auto a = proj_norm(theta0, theta_hat, train, test.features, cfg);
  const auto b = proj_norm(theta0, theta_hat, train, test.features, cfg);
  EXPECT_EQ(a.value, b.value);
  EXPECT_GT(a.value, 0.0);
  EXPECT_GE(a.pseudo_label_agreement, 0.0);
  EXPECT_LE(a.pseudo_label_agreement, 1.0);

  cfg.ref_mode = RefMode::kReuseModel;
  const auto c = proj_norm(theta0, theta_hat, train, test.features, cfg);
  EXPECT_TRUE(c.theta_ref.values == theta_hat.values);
  EXPECT_DOUBLE_EQ(c.value, param_distance(theta_hat, c.theta_tilde));
}

TEST(ProjNorm, ReferenceSubsample) {
  const auto rows = reference_subsample(50, 20, 3);
  EXPECT_EQ(rows.size(), 20u);
  auto sorted = rows;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(std::adjacent_find(sorted.begin(), sorted.end()), sorted.end());
  EXPECT_EQ(rows, reference_subsample(50, 20, 3));
  EXPECT_THROW(reference_subsample(10, 11, 0), DimensionError);
  EXPECT_THROW(reference_subsample(10, 0, 0), DimensionError);
}

TEST(ProjNorm, ArchitectureMismatch) {
  MixtureSpec spec;
  const auto train = gen_mixture(spec, 50, "train");
  const auto a = init_model(Architecture::mlp(16, 4, {8}), 1);
  const auto b = init_model(Architecture::mlp(16, 4, {9}), 1);
  ProjNormConfig cfg;
  cfg.train_cfg = quick_cfg(5);
  EXPECT_THROW(proj_norm(a, b, train, train.features, cfg), DimensionError);
}

TEST(ProjNorm, TracksGaussianShift) {
  GaussianShiftSpec gs;
  gs.d1 = 20;
  gs.d2 = 10;
  gs.n = 400;
  gs.m = 400;
  gs.label_coord_b = 30;
  gs.seed = 2;
  const std::vector<double> sigmas{0.5, 1, 2, 3, 4};
  gs.sigma = sigmas.front();
  const auto train = gen_gaussian_shift(gs).first;
  const auto arch = Architecture::mlp(30, 2, {32});
  const auto theta0 = init_model(arch, 3);
  const auto theta_hat = train_sgd(theta0, train, quick_cfg(1000));
  ProjNormConfig cfg;
  cfg.train_cfg = quick_cfg(500);
  const auto ref = train_reference(theta0, train, gs.m, cfg);
  std::vector<double> values;
  for (double s : sigmas) {
    gs.sigma = s;
    const auto test = gen_gaussian_shift(gs).second;
    values.push_back(finish_proj_norm(theta0, theta_hat, ref, test.features, cfg.train_cfg).value);
  }
  EXPECT_GE(spearman(values, sigmas), 0.8);
}

TEST(ProjNormLinear, SharedRowSpaceIsZero) {
  const Matrix x = randn(5, 20, 1);
  const Vector y = randn(5, 2);
  EXPECT_LT(proj_norm_linear(x, y, x), 1e-12);
  // Row space of X inside that of a larger X_tilde.
  Matrix xt(8, 20);
  xt << x, randn(3, 20, 3);
  EXPECT_LT(proj_norm_linear(x, y, xt), 1e-10);
}

TEST(ProjNormLinear, OrthogonalSpans) {
  Matrix x(1, 3), xt(1, 3);
  x << 1, 0, 0;
  xt << 0, 1, 0;
  Vector y(1);
  y << 1;
  EXPECT_DOUBLE_EQ(proj_norm_linear(x, y, xt), 1.0);
}

TEST(ProjNormLinear, DenseOracle) {
  const Matrix x = randn(20, 100, 4);
  const Matrix xt = randn(20, 100, 5);
  const Vector y = randn(20, 6);
  const Vector theta = x.transpose() * (x * x.transpose()).inverse() * y;
  const Matrix p = testutil::dense_projection(xt);
  const double oracle = ((Matrix::Identity(100, 100) - p) * theta).norm();
  EXPECT_NEAR(proj_norm_linear(x, y, xt), oracle, 1e-8);
}

TEST(ProjNormLinear, DimensionErrors) {
  EXPECT_THROW(proj_norm_linear(randn(2, 5, 1), randn(2, 1), randn(2, 6, 2)), DimensionError);
  EXPECT_THROW(proj_norm_linear(randn(2, 5, 1), randn(2, 1), randn(6, 5, 2)), DimensionError);
}

TEST(ConfScore, Examples) {
  Matrix hot = Matrix::Zero(3, 4);
  hot(0, 1) = hot(1, 3) = hot(2, 0) = 1000.0;
  EXPECT_NEAR(conf_score(hot), 1.0, 1e-12);
  for (int k : {2, 3, 7}) EXPECT_NEAR(conf_score(Matrix::Zero(5, k)), 1.0 / k, 1e-12);
  Matrix z(2, 2);
  z << std::log(0.7), std::log(0.3), std::log(0.1), std::log(0.9);
  EXPECT_NEAR(conf_score(z), 0.8, 1e-12);
}

TEST(EntropyScore, Examples) {
  for (int k : {2, 3, 10}) EXPECT_NEAR(entropy_score(Matrix::Zero(4, k)), std::log(k), 1e-12);
  Matrix hot = Matrix::Zero(2, 3);
  hot(0, 2) = hot(1, 0) = 1000.0;
  EXPECT_NEAR(entropy_score(hot), 0.0, 1e-9);
  Matrix z(2, 2);
  z << std::log(0.7), std::log(0.3), std::log(0.1), std::log(0.9);
  const double h1 = -(0.7 * std::log(0.7) + 0.3 * std::log(0.3));
  const double h2 = -(0.1 * std::log(0.1) + 0.9 * std::log(0.9));
  EXPECT_NEAR(entropy_score(z), 0.5 * (h1 + h2), 1e-12);
}

TEST(AgreeScore, Examples) {
  const Matrix a = randn(8, 3, 7);
  EXPECT_EQ(agree_score(a, a), 0.0);
  EXPECT_EQ(agree_score(a, -a), 1.0);
  Matrix b = a;
  for (Index r : {2, 5}) {
    const int c = argmax_rows(a.row(r))[0];
    b(r, c) = -100.0;
  }
  EXPECT_DOUBLE_EQ(agree_score(a, b), 0.25);
  EXPECT_THROW(agree_score(a, randn(8, 4, 1)), DimensionError);
}

TEST(AgreeScore, ValuesAreMultiplesOfOneOverN) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Index n = 3 + static_cast<Index>(seed);
    const double v = agree_score(randn(n, 4, seed), randn(n, 4, seed + 100));
    const double scaled = v * static_cast<double>(n);
    EXPECT_EQ(scaled, std::round(scaled));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(LogitMetrics, ShiftInvariance) {
  const Matrix z = randn(30, 5, 9);
  const Matrix shifted = shift_rows(z, 10);
  EXPECT_NEAR(conf_score(z), conf_score(shifted), 1e-12);
  EXPECT_NEAR(entropy_score(z), entropy_score(shifted), 1e-12);
  EXPECT_LT((softmax(z) - softmax(shifted)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(agree_score(z, randn(30, 5, 11)), agree_score(shifted, randn(30, 5, 11)));
  const auto labels = testutil::rand_labels(30, 5, 12);
  const ATCState st = atc_fit(z, labels);
  EXPECT_EQ(atc_score(z, st), atc_score(shifted, st));
}

TEST(NegativeEntropy, SaturatedRowsAreFinite) {
  Matrix z(1, 3);
  z << 0, 2000, -2000;
  const Vector s = negative_entropy(z);
  EXPECT_TRUE(std::isfinite(s(0)));
  EXPECT_NEAR(s(0), 0.0, 1e-12);
}

TEST(Atc, ExtremesAndTenRows) {
  const Matrix z = randn(10, 3, 21);
  const auto pred = argmax_rows(z);
  const Vector s = negative_entropy(z);

  const ATCState perfect = atc_fit(z, pred);
  EXPECT_DOUBLE_EQ(perfect.threshold, s.minCoeff() - 1.0);
  EXPECT_EQ(atc_score(z, perfect), 0.0);

  std::vector<int> wrong(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) wrong[i] = (pred[i] + 1) % 3;
  const ATCState all_wrong = atc_fit(z, wrong);
  EXPECT_GT(all_wrong.threshold, s.maxCoeff());
  EXPECT_EQ(atc_score(z, all_wrong), 1.0);

  std::vector<int> three = pred;
  for (std::size_t i : {1u, 4u, 8u}) three[i] = wrong[i];
  const ATCState st = atc_fit(z, three);
  Index below = 0;
  for (Index i = 0; i < 10; ++i) below += s(i) < st.threshold;
  EXPECT_EQ(below, 3);
  double witness = 0.0;
  EXPECT_TRUE(brute_force_count_reachable(s, 3, &witness));
}

TEST(Atc, SelfConsistencyOnRandomFixtures) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Index n = 20 + static_cast<Index>(seed) * 7;
    const Matrix z = 2.0 * randn(n, 4, 500 + seed);
    const auto labels = testutil::rand_labels(n, 4, 900 + seed);
    const auto pred = argmax_rows(z);
    Index errors = 0;
    for (Index i = 0; i < n; ++i) errors += pred[static_cast<std::size_t>(i)] != labels[static_cast<std::size_t>(i)];
    const ATCState st = atc_fit(z, labels);
    EXPECT_DOUBLE_EQ(atc_score(z, st) * static_cast<double>(n), static_cast<double>(errors));
    double witness = 0.0;
    EXPECT_TRUE(brute_force_count_reachable(negative_entropy(z), errors, &witness));
  }
}

TEST(Atc, HeldOutEstimate) {
  MixtureSpec spec;
  spec.separation = 1.0;
  spec.seed = 31;
  const auto train = gen_mixture(spec, 2000, "train");
  const auto val = gen_mixture(spec, 5000, "val");
  const auto test = gen_mixture(spec, 5000, "test");
  const auto theta = train_sgd(init_model(Architecture::linear_softmax(16, 4), 1), train, quick_cfg(1500));
  const ATCState st = atc_fit(predict_logits(theta, val.features), val.labels);
  EXPECT_LE(std::abs(atc_score(predict_logits(theta, test.features), st) - test_error(theta, test)), 0.05);
}

TEST(Atc, EmptyInputs) {
  EXPECT_THROW(atc_fit(Matrix(0, 3), {}), DimensionError);
  EXPECT_THROW(atc_fit(randn(3, 3, 1), {0, 1}), DimensionError);
  EXPECT_THROW(atc_score(Matrix(0, 3), ATCState{}), DimensionError);
}

TEST(RefMode, Parse) {
  EXPECT_EQ(parse_ref_mode("reuse-model"), RefMode::kReuseModel);
  EXPECT_EQ(to_string(RefMode::kRetrain), "retrain");
  EXPECT_THROW(parse_ref_mode("other"), ConfigError);
}
