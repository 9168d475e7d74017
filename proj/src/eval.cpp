#include "projnorm/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "projnorm/error.hpp"

namespace projnorm {

void PredictionRecord::validate() const {
  if (!std::isfinite(severity) || !std::isfinite(prediction) || !std::isfinite(true_error)) {
    throw Error("record '" + dataset_id + "/" + method + "' has non-finite values");
  }
  if (true_error < 0.0 || true_error > 1.0) {
    throw Error("record '" + dataset_id + "/" + method + "' has true_error outside [0, 1]");
  }
  for (const std::string* s : {&dataset_id, &family, &method}) {
    if (s->empty() || s->find_first_of(",\n\r\"") != std::string::npos) {
      throw Error("record text fields must be nonempty and free of commas, quotes and newlines");
    }
  }
}

namespace {

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("pearson: need equal sizes >= 2");
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw NumericalError("pearson: constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::vector<double> midranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  const auto ra = midranks(a);
  const auto rb = midranks(b);
  return pearson(ra, rb);
}

EvalReport fit_eval(std::span<const PredictionRecord> records) {
  if (records.size() < 3) throw Error("fit_eval: need at least 3 records");
  EvalReport out;
  out.method = records.front().method;
  std::vector<double> x, y;
  for (const auto& r : records) {
    r.validate();
    x.push_back(r.prediction);
    y.push_back(r.true_error);
    out.dataset_ids.push_back(r.dataset_id);
  }
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw NumericalError("fit_eval: constant predictions for method '" + out.method + "'");
  if (syy == 0.0) throw NumericalError("fit_eval: constant true errors for method '" + out.method + "'");
  out.slope = sxy / sxx;
  out.intercept = my - out.slope * mx;
  double ss_res = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = y[i] - (out.slope * x[i] + out.intercept);
    out.residuals.push_back(r);
    ss_res += r * r;
  }
  out.r_squared = 1.0 - ss_res / syy;
  out.spearman_rho = spearman(x, y);
  return out;
}

Matrix residual_correlation(std::span<const EvalReport> reports) {
  const Index k = static_cast<Index>(reports.size());
  Matrix c = Matrix::Identity(k, k);
  for (Index i = 0; i < k; ++i) {
    if (reports[static_cast<std::size_t>(i)].dataset_ids != reports[0].dataset_ids) {
      throw DimensionError("residual_correlation: method '" + reports[static_cast<std::size_t>(i)].method +
                           "' covers a different record set");
    }
  }
  for (Index i = 0; i < k; ++i) {
    for (Index j = i + 1; j < k; ++j) {
      const double r = pearson(reports[static_cast<std::size_t>(i)].residuals,
                               reports[static_cast<std::size_t>(j)].residuals);
      c(i, j) = r;
      c(j, i) = r;
    }
  }
  return c;
}

std::vector<double> zscore(std::span<const double> v) {
  if (v.size() < 2) throw DimensionError("zscore: need at least 2 values");
  const double mu = mean_of(v);
  double var = 0.0;
  for (double x : v) var += (x - mu) * (x - mu);
  var /= static_cast<double>(v.size());
  if (var == 0.0) throw NumericalError("zscore: zero variance input");
  const double sd = std::sqrt(var);
  std::vector<double> out;
  out.reserve(v.size());
  for (double x : v) out.push_back((x - mu) / sd);
  return out;
}

std::vector<double> ensemble_zscore(const std::vector<std::vector<double>>& inputs) {
  if (inputs.empty()) throw DimensionError("ensemble_zscore: no inputs");
  const std::size_t n = inputs.front().size();
  std::vector<double> out(n, 0.0);
  for (const auto& v : inputs) {
    if (v.size() != n) throw DimensionError("ensemble_zscore: input lengths differ");
    const auto z = zscore(v);
    for (std::size_t i = 0; i < n; ++i) out[i] += z[i];
  }
  for (double& x : out) x /= static_cast<double>(inputs.size());
  return out;
}

std::vector<double> ensemble_zscore(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("ensemble_zscore: input lengths differ");
  const auto za = zscore(a);
  const auto zb = zscore(b);
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = 0.5 * (za[i] + zb[i]);
  return out;
}

Calibration calibrate_and_predict(std::span<const PredictionRecord> fit_records,
                                  std::span<const PredictionRecord> apply_records) {
  const EvalReport fit = fit_eval(fit_records);
  Calibration out;
  out.slope = fit.slope;
  out.intercept = fit.intercept;
  double sse = 0.0;
  for (const auto& r : apply_records) {
    r.validate();
    const double p = fit.slope * r.prediction + fit.intercept;
    out.predicted.push_back(p);
    sse += (p - r.true_error) * (p - r.true_error);
  }
  out.mse = apply_records.empty() ? 0.0 : sse / static_cast<double>(apply_records.size());
  return out;
}

std::vector<std::pair<std::string, std::vector<PredictionRecord>>> group_by_method(
    std::span<const PredictionRecord> records) {
  std::vector<std::pair<std::string, std::vector<PredictionRecord>>> groups;
  for (const auto& r : records) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == r.method; });
    if (it == groups.end()) {
      groups.emplace_back(r.method, std::vector<PredictionRecord>{});
      it = std::prev(groups.end());
    }
    it->second.push_back(r);
  }
  return groups;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

constexpr const char* kRecordsHeader = "dataset_id,family,severity,method,prediction,true_error";

std::string fmt9(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

double parse_double(std::string_view cell, long line_no, const char* column) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
  if (ec != std::errc() || ptr != cell.data() + cell.size()) {
    throw ParseError(std::string("malformed ") + column + " '" + std::string(cell) + "'", line_no);
  }
  return v;
}

}  // namespace

std::string records_to_csv(std::span<const PredictionRecord> records) {
  std::string out = std::string(kRecordsHeader) + "\n";
  for (const auto& r : records) {
    r.validate();
    out += r.dataset_id + ',' + r.family + ',' + fmt9(r.severity) + ',' + r.method + ',' +
           fmt9(r.prediction) + ',' + fmt9(r.true_error) + '\n';
  }
  return out;
}

void save_records(std::span<const PredictionRecord> records, const std::filesystem::path& path) {
  const std::string text = records_to_csv(records);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
}

std::vector<PredictionRecord> load_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError("records file is empty", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kRecordsHeader) throw ParseError(std::string("header must be '") + kRecordsHeader + "'", 1);

  std::vector<PredictionRecord> out;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 6) {
      throw ParseError("expected 6 columns, found " + std::to_string(cells.size()), line_no);
    }
    PredictionRecord r;
    r.dataset_id = cells[0];
    r.family = cells[1];
    r.severity = parse_double(cells[2], line_no, "severity");
    r.method = cells[3];
    r.prediction = parse_double(cells[4], line_no, "prediction");
    r.true_error = parse_double(cells[5], line_no, "true_error");
    try {
      r.validate();
    } catch (const Error& e) {
      throw ParseError(e.what(), line_no);
    }
    out.push_back(std::move(r));
  }
  if (out.empty()) throw ParseError("records file has no rows", line_no);
  return out;
}

}  // namespace projnorm
