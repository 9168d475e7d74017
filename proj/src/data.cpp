#include "projnorm/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "projnorm/error.hpp"
#include "projnorm/rng.hpp"

namespace projnorm {

void LabeledDataset::validate() const {
  if (static_cast<Index>(labels.size()) != features.rows()) {
    throw DimensionError("dataset has " + std::to_string(features.rows()) + " rows but " +
                         std::to_string(labels.size()) + " labels");
  }
  if (num_classes < 1) throw DimensionError("dataset needs num_classes >= 1");
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw DimensionError("label " + std::to_string(y) + " outside [0, " +
                           std::to_string(num_classes) + ")");
    }
  }
  require_finite(features, "dataset features");
}

LabeledDataset LabeledDataset::subset(const std::vector<Index>& rows) const {
  LabeledDataset out;
  out.num_classes = num_classes;
  out.features.resize(static_cast<Index>(rows.size()), features.cols());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.features.row(static_cast<Index>(i)) = features.row(rows[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

bool LabeledDataset::operator==(const LabeledDataset& other) const {
  return num_classes == other.num_classes && labels == other.labels &&
         features.rows() == other.features.rows() && features.cols() == other.features.cols() &&
         features == other.features;
}

// ---------------------------------------------------------------------------
// Gaussian covariate shift

void GaussianShiftSpec::validate() const {
  if (d1 < 1 || d2 < 1 || n < 1 || m < 1) {
    throw ConfigError("gaussian shift: d1, d2, n, m must all be >= 1");
  }
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) {
    throw ConfigError("gaussian shift: sigma must be finite and >= 0");
  }
  const Index d = d1 + d2;
  if (label_coord_a < 1 || label_coord_a > d || coord_b() < 1 || coord_b() > d) {
    throw ConfigError("gaussian shift: label coordinates must lie in [1, d1 + d2]");
  }
}

int sign_label(double sum) { return sum >= 0.0 ? 1 : 0; }

namespace {

Matrix standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix out(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) out(i, j) = normal(rng);
  }
  return out;
}

std::vector<int> sign_labels(const Matrix& x, Index a, Index b) {
  std::vector<int> labels(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) {
    labels[static_cast<std::size_t>(i)] = sign_label(x(i, a - 1) + x(i, b - 1));
  }
  return labels;
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> gen_gaussian_shift(const GaussianShiftSpec& spec) {
  spec.validate();
  const Index d = spec.d1 + spec.d2;

  LabeledDataset train;
  train.num_classes = 2;
  train.features = Matrix::Zero(spec.n, d);
  {
    Rng rng = make_rng(spec.seed, "gaussian-shift/train/block1");
    train.features.leftCols(spec.d1) = standard_normal(spec.n, spec.d1, rng);
  }
  train.labels = sign_labels(train.features, spec.label_coord_a, spec.coord_b());

  LabeledDataset test;
  test.num_classes = 2;
  test.features.resize(spec.m, d);
  {
    Rng rng = make_rng(spec.seed, "gaussian-shift/test/block1");
    test.features.leftCols(spec.d1) = standard_normal(spec.m, spec.d1, rng);
  }
  {
    Rng rng = make_rng(spec.seed, "gaussian-shift/test/block2");
    test.features.rightCols(spec.d2) = spec.sigma * standard_normal(spec.m, spec.d2, rng);
  }
  test.labels = sign_labels(test.features, spec.label_coord_a, spec.coord_b());
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Mixture base task

void MixtureSpec::validate() const {
  if (dim < 1 || num_classes < 2 || modes_per_class < 1) {
    throw ConfigError("mixture: need dim >= 1, num_classes >= 2, modes_per_class >= 1");
  }
  if (!std::isfinite(offset)) throw ConfigError("mixture: offset must be finite");
  if (!(separation > 0.0) || !(noise > 0.0)) {
    throw ConfigError("mixture: separation and noise must be positive");
  }
}

LabeledDataset gen_mixture(const MixtureSpec& spec, Index count, std::string_view stream) {
  spec.validate();
  const int modes = spec.num_classes * spec.modes_per_class;
  Matrix centers;
  {
    Rng rng = make_rng(spec.seed, "mixture/centers");
    centers = spec.separation * standard_normal(modes, spec.dim, rng);
    centers.array() += spec.offset;
  }
  Rng rng(derive_seed(derive_seed(spec.seed, "mixture/samples"), stream));
  std::uniform_int_distribution<int> pick(0, modes - 1);
  std::normal_distribution<double> normal(0.0, spec.noise);

  LabeledDataset out;
  out.num_classes = spec.num_classes;
  out.features.resize(count, spec.dim);
  out.labels.resize(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    const int mode = pick(rng);
    out.labels[static_cast<std::size_t>(i)] = mode % spec.num_classes;
    for (Index j = 0; j < spec.dim; ++j) out.features(i, j) = centers(mode, j) + normal(rng);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corruptions and label shift

CorruptionKind parse_corruption_kind(const std::string& name) {
  if (name == "noise") return CorruptionKind::kNoise;
  if (name == "scale") return CorruptionKind::kScale;
  if (name == "dropout") return CorruptionKind::kDropout;
  throw ConfigError("unknown corruption kind '" + name + "'");
}

std::string to_string(CorruptionKind kind) {
  switch (kind) {
    case CorruptionKind::kNoise:
      return "noise";
    case CorruptionKind::kScale:
      return "scale";
    case CorruptionKind::kDropout:
      return "dropout";
  }
  return "unknown";
}

LabeledDataset gen_feature_corruption(const LabeledDataset& base, CorruptionKind kind,
                                      double severity, std::uint64_t seed) {
  if (!(severity >= 0.0) || !std::isfinite(severity)) {
    throw ConfigError("corruption severity must be finite and >= 0");
  }
  LabeledDataset out = base;
  if (severity == 0.0) return out;

  Rng rng = make_rng(seed, "corruption/" + to_string(kind));
  Matrix& x = out.features;
  switch (kind) {
    case CorruptionKind::kNoise: {
      std::normal_distribution<double> normal(0.0, severity);
      for (Index i = 0; i < x.rows(); ++i) {
        for (Index j = 0; j < x.cols(); ++j) x(i, j) += normal(rng);
      }
      break;
    }
    case CorruptionKind::kScale: {
      std::vector<Index> coords(static_cast<std::size_t>(x.cols()));
      std::iota(coords.begin(), coords.end(), Index{0});
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(coords.size() / 2);
      for (Index j : coords) x.col(j) *= 1.0 + severity;
      break;
    }
    case CorruptionKind::kDropout: {
      const double p = std::min(severity, 1.0);
      std::uniform_real_distribution<double> unif(0.0, 1.0);
      for (Index i = 0; i < x.rows(); ++i) {
        for (Index j = 0; j < x.cols(); ++j) {
          if (unif(rng) < p) x(i, j) = 0.0;
        }
      }
      break;
    }
  }
  return out;
}

LabeledDataset gen_label_shift(const LabeledDataset& base, const std::set<int>& keep_classes) {
  if (keep_classes.empty()) throw ConfigError("label shift: keep_classes is empty");
  for (int c : keep_classes) {
    if (c < 0 || c >= base.num_classes) {
      throw ConfigError("label shift: class " + std::to_string(c) + " outside [0, " +
                        std::to_string(base.num_classes) + ")");
    }
  }
  std::vector<Index> rows;
  for (std::size_t i = 0; i < base.labels.size(); ++i) {
    if (keep_classes.count(base.labels[i]) != 0) rows.push_back(static_cast<Index>(i));
  }
  if (rows.empty()) throw Error("label shift: no rows left after filtering");
  return base.subset(rows);
}

// ---------------------------------------------------------------------------
// Shift families

bool is_known_family(const std::string& name) {
  static const std::set<std::string> kFamilies = {"gaussian-sigma", "noise",       "scale",
                                                  "dropout",        "label-shift", "adversarial"};
  return kFamilies.count(name) != 0;
}

void ShiftFamily::validate() const {
  if (!is_known_family(name)) throw ConfigError("unknown shift family '" + name + "'");
  if (severities.empty()) throw ConfigError("shift family '" + name + "' has no severities");
  for (std::size_t i = 1; i < severities.size(); ++i) {
    if (!(severities[i] > severities[i - 1])) {
      throw ConfigError("shift family '" + name + "': severities must be strictly increasing");
    }
  }
}

// ---------------------------------------------------------------------------
// PGD

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack: epsilon must be >= 0");
  if (steps < 1) throw ConfigError("attack: steps must be >= 1");
  if (step_size && !(*step_size > 0.0)) throw ConfigError("attack: step_size must be > 0");
}

double clamp_to_ball(double v, double center, double eps) {
  double out = std::clamp(v, center - eps, center + eps);
  // center +- eps can round outward; walk back toward the center.
  while (out - center > eps) out = std::nextafter(out, center);
  while (center - out > eps) out = std::nextafter(out, center);
  return out;
}

LabeledDataset pgd_attack(const GradOracle& grad_oracle, const LabeledDataset& base,
                          const AttackSpec& spec) {
  spec.validate();
  LabeledDataset out = base;
  if (spec.epsilon == 0.0) return out;

  const double step = spec.resolved_step_size();
  const Matrix& x0 = base.features;
  Matrix& x = out.features;
  for (int t = 0; t < spec.steps; ++t) {
    const Matrix grad = grad_oracle(x, base.labels);
    if (grad.rows() != x.rows() || grad.cols() != x.cols()) {
      throw DimensionError("pgd_attack: gradient oracle returned a mismatched shape");
    }
    for (Index i = 0; i < x.rows(); ++i) {
      for (Index j = 0; j < x.cols(); ++j) {
        const double g = grad(i, j);
        const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
        x(i, j) = clamp_to_ball(x(i, j) + step * s, x0(i, j), spec.epsilon);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV

void save_csv(const LabeledDataset& data, const std::filesystem::path& path) {
  data.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  for (Index j = 0; j < data.dim(); ++j) out << 'f' << j << ',';
  out << "label\n";
  char buf[32];
  for (Index i = 0; i < data.size(); ++i) {
    for (Index j = 0; j < data.dim(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", data.features(i, j));
      out << buf << ',';
    }
    out << data.labels[static_cast<std::size_t>(i)] << '\n';
  }
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

namespace {

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

}  // namespace

LabeledDataset load_csv(const std::filesystem::path& path, std::optional<int> num_classes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");

  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_commas(line);
  if (header.size() < 2 || header.back() != "label") {
    throw ParseError("header must be f0,...,f{d-1},label", 1);
  }
  const std::size_t d = header.size() - 1;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "f" + std::to_string(j)) {
      throw ParseError("header column " + std::to_string(j) + " should be f" + std::to_string(j), 1);
    }
  }

  std::vector<double> values;
  std::vector<int> labels;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != d + 1) {
      throw ParseError("expected " + std::to_string(d + 1) + " columns, found " +
                           std::to_string(cells.size()),
                       line_no);
    }
    for (std::size_t j = 0; j < d; ++j) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cells[j].data(), cells[j].data() + cells[j].size(), v);
      if (ec != std::errc() || ptr != cells[j].data() + cells[j].size() || !std::isfinite(v)) {
        throw ParseError("malformed feature '" + std::string(cells[j]) + "'", line_no);
      }
      values.push_back(v);
    }
    int y = 0;
    const auto cell = cells[d];
    const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), y);
    if (ec != std::errc() || ptr != cell.data() + cell.size() || y < 0) {
      throw ParseError("label '" + std::string(cell) + "' is not a nonnegative integer", line_no);
    }
    labels.push_back(y);
  }
  if (labels.empty()) throw ParseError("dataset has no rows", line_no);

  LabeledDataset out;
  out.features = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), static_cast<Index>(labels.size()), static_cast<Index>(d));
  out.labels = std::move(labels);
  out.num_classes = num_classes.value_or(*std::max_element(out.labels.begin(), out.labels.end()) + 1);
  out.validate();
  return out;
}

}  // namespace projnorm
