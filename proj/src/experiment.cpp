#include "projnorm/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

#include "projnorm/error.hpp"
#include "projnorm/rng.hpp"

namespace projnorm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Names

std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::kToyLinear:
      return "toy-linear";
    case TaskKind::kMlpShift:
      return "mlp-shift";
    case TaskKind::kProp1Sweep:
      return "prop1-sweep";
    case TaskKind::kStressTest:
      return "stress-test";
  }
  return "unknown";
}

TaskKind parse_task_kind(const std::string& name) {
  if (name == "toy-linear") return TaskKind::kToyLinear;
  if (name == "mlp-shift") return TaskKind::kMlpShift;
  if (name == "prop1-sweep") return TaskKind::kProp1Sweep;
  if (name == "stress-test") return TaskKind::kStressTest;
  throw ConfigError("unknown task '" + name + "'");
}

namespace {

const std::set<std::string>& known_metrics() {
  static const std::set<std::string> kMetrics = {"ProjNorm",   "ProjNormLinear", "ConfScore",
                                                 "Entropy",    "AgreeScore",     "ATC"};
  return kMetrics;
}

bool is_logit_metric(const std::string& name) {
  return name == "ConfScore" || name == "Entropy" || name == "AgreeScore" || name == "ATC";
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

}  // namespace

bool is_known_metric(const std::string& name) { return known_metrics().count(name) != 0; }

std::string dataset_id(const std::string& family, double severity) {
  return family + "@" + fmt_g(severity);
}

TrainConfig TrainSettings::resolve(std::uint64_t seed) const {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.learning_rate = learning_rate;
  cfg.batch_size = batch_size;
  cfg.momentum = momentum;
  cfg.schedule = parse_schedule(schedule);
  cfg.loss = parse_loss(loss);
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Config JSON

namespace {

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

template <typename T>
void read_optional(const json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(j, key, v);
  out = v;
}

template <typename T>
json optional_to_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

const json& section(const json& j, const char* key) {
  static const json kEmpty = json::object();
  if (!j.contains(key)) return kEmpty;
  if (!j.at(key).is_object()) throw ConfigError(std::string("config key '") + key + "' must be a table");
  return j.at(key);
}

TrainSettings train_from_json(const json& j) {
  TrainSettings t;
  read(j, "steps", t.steps);
  read(j, "learning_rate", t.learning_rate);
  read(j, "batch_size", t.batch_size);
  read(j, "momentum", t.momentum);
  read(j, "schedule", t.schedule);
  read(j, "loss", t.loss);
  return t;
}

json train_to_json(const TrainSettings& t) {
  return {{"steps", t.steps},
          {"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"momentum", t.momentum},
          {"schedule", t.schedule},
          {"loss", t.loss}};
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig c;
  std::string task;
  read(j, "task", task);
  if (task.empty()) throw ConfigError("config needs a 'task'");
  c.task = parse_task_kind(task);
  read(j, "seed", c.seed);
  read(j, "output_dir", c.output_dir);

  const json& arch = section(j, "architecture");
  read(arch, "kind", c.architecture.kind);
  read(arch, "hidden", c.architecture.hidden);
  read(arch, "activation", c.architecture.activation);

  c.train = train_from_json(section(j, "train"));

  const json& t0 = section(j, "theta0");
  read(t0, "mode", c.theta0.mode);
  read(t0, "pretrain_steps", c.theta0.pretrain_steps);

  const json& mix = section(j, "mixture");
  read(mix, "dim", c.mixture.dim);
  read(mix, "num_classes", c.mixture.num_classes);
  read(mix, "modes_per_class", c.mixture.modes_per_class);
  read(mix, "separation", c.mixture.separation);
  read(mix, "noise", c.mixture.noise);
  read(mix, "offset", c.mixture.offset);
  read(mix, "n_train", c.mixture.n_train);
  read(mix, "n_val", c.mixture.n_val);
  read(mix, "m_test", c.mixture.m_test);

  const json& toy = section(j, "toy");
  read(toy, "d1", c.toy.d1);
  read(toy, "d2", c.toy.d2);
  read(toy, "n", c.toy.n);
  read(toy, "m", c.toy.m);
  read(toy, "label_coord_a", c.toy.label_coord_a);
  read(toy, "label_coord_b", c.toy.label_coord_b);

  if (j.contains("shifts")) {
    if (!j.at("shifts").is_array()) throw ConfigError("'shifts' must be an array");
    for (const json& s : j.at("shifts")) {
      ShiftConfig sc;
      read(s, "family", sc.family);
      read(s, "severities", sc.severities);
      c.shifts.push_back(std::move(sc));
    }
  }
  read(j, "metrics", c.metrics);

  const json& pn = section(j, "projnorm");
  c.projnorm.train = train_from_json(section(pn, "train"));
  read(pn, "ref_mode", c.projnorm.ref_mode);
  read_optional(pn, "ref_subsample", c.projnorm.ref_subsample);

  const json& lin = section(j, "linearized");
  read(lin, "rows", c.linearized.rows);
  read_optional(lin, "subsample", c.linearized.subsample);

  read(j, "ensembles", c.ensembles);

  const json& p1 = section(j, "prop1");
  read(p1, "instances", c.prop1.instances);
  read(p1, "k", c.prop1.k);
  read(p1, "n", c.prop1.n);
  read(p1, "m", c.prop1.m);
  read(p1, "d", c.prop1.d);
  if (p1.contains("profiles")) {
    c.prop1.profiles.clear();
    for (const json& p : p1.at("profiles")) {
      TailProfile tp;
      read(p, "exponent", tp.exponent);
      read(p, "flat_tail", tp.flat_tail);
      c.prop1.profiles.push_back(tp);
    }
  }

  const json& st = section(j, "stress");
  read(st, "epsilons", c.stress.epsilons);
  read(st, "epsilon_unit", c.stress.epsilon_unit);
  read(st, "steps", c.stress.steps);
  read_optional(st, "step_size", c.stress.step_size);

  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json shifts = json::array();
  for (const auto& s : c.shifts) shifts.push_back({{"family", s.family}, {"severities", s.severities}});
  json profiles = json::array();
  for (const auto& p : c.prop1.profiles) profiles.push_back({{"exponent", p.exponent}, {"flat_tail", p.flat_tail}});
  return {
      {"task", to_string(c.task)},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"architecture",
       {{"kind", c.architecture.kind}, {"hidden", c.architecture.hidden}, {"activation", c.architecture.activation}}},
      {"train", train_to_json(c.train)},
      {"theta0", {{"mode", c.theta0.mode}, {"pretrain_steps", c.theta0.pretrain_steps}}},
      {"mixture",
       {{"dim", c.mixture.dim},
        {"num_classes", c.mixture.num_classes},
        {"modes_per_class", c.mixture.modes_per_class},
        {"separation", c.mixture.separation},
        {"noise", c.mixture.noise},
        {"offset", c.mixture.offset},
        {"n_train", c.mixture.n_train},
        {"n_val", c.mixture.n_val},
        {"m_test", c.mixture.m_test}}},
      {"toy",
       {{"d1", c.toy.d1},
        {"d2", c.toy.d2},
        {"n", c.toy.n},
        {"m", c.toy.m},
        {"label_coord_a", c.toy.label_coord_a},
        {"label_coord_b", c.toy.label_coord_b}}},
      {"shifts", shifts},
      {"metrics", c.metrics},
      {"projnorm",
       {{"train", train_to_json(c.projnorm.train)},
        {"ref_mode", c.projnorm.ref_mode},
        {"ref_subsample", optional_to_json(c.projnorm.ref_subsample)}}},
      {"linearized", {{"rows", c.linearized.rows}, {"subsample", optional_to_json(c.linearized.subsample)}}},
      {"ensembles", c.ensembles},
      {"prop1",
       {{"instances", c.prop1.instances},
        {"k", c.prop1.k},
        {"n", c.prop1.n},
        {"m", c.prop1.m},
        {"d", c.prop1.d},
        {"profiles", profiles}}},
      {"stress",
       {{"epsilons", c.stress.epsilons},
        {"epsilon_unit", c.stress.epsilon_unit},
        {"steps", c.stress.steps},
        {"step_size", optional_to_json(c.stress.step_size)}}},
  };
}

void ExperimentConfig::validate() const {
  parse_arch_kind(architecture.kind);
  parse_activation(architecture.activation);
  train.resolve(0);
  projnorm.train.resolve(0);
  parse_ref_mode(projnorm.ref_mode);
  if (theta0.mode != "random" && theta0.mode != "pretrained") {
    throw ConfigError("theta0.mode must be 'random' or 'pretrained'");
  }
  for (const auto& m : metrics) {
    if (!is_known_metric(m)) throw ConfigError("unknown metric '" + m + "'");
  }
  for (const auto& e : ensembles) {
    if (e.size() < 2) throw ConfigError("each ensemble needs at least two methods");
    for (const auto& m : e) {
      if (std::find(metrics.begin(), metrics.end(), m) == metrics.end()) {
        throw ConfigError("ensemble member '" + m + "' is not in the metric list");
      }
    }
  }
  for (const auto& s : shifts) ShiftFamily{s.family, s.severities, 0}.validate();

  switch (task) {
    case TaskKind::kToyLinear:
      if (shifts.size() != 1 || shifts[0].family != "gaussian-sigma") {
        throw ConfigError("toy-linear needs exactly one 'gaussian-sigma' shift family");
      }
      for (const auto& m : metrics) {
        if (m != "ProjNormLinear" && m != "ConfScore" && m != "Entropy") {
          throw ConfigError("toy-linear supports ProjNormLinear, ConfScore and Entropy, not '" + m + "'");
        }
      }
      GaussianShiftSpec{toy.d1, toy.d2, toy.n, toy.m, 0.0, toy.label_coord_a, toy.label_coord_b, 0}.validate();
      break;
    case TaskKind::kMlpShift:
    case TaskKind::kStressTest:
      if (shifts.empty()) throw ConfigError(to_string(task) + " needs at least one shift family");
      for (const auto& s : shifts) {
        if (s.family == "gaussian-sigma") throw ConfigError("gaussian-sigma only applies to toy-linear");
        if (task == TaskKind::kStressTest && s.family == "adversarial") {
          throw ConfigError("stress-test builds the adversarial family from the 'stress' table");
        }
      }
      if (metrics.empty()) throw ConfigError("metric list is empty");
      MixtureSpec{mixture.dim,   mixture.num_classes, mixture.modes_per_class, mixture.separation,
                  mixture.noise, mixture.offset,      0}
          .validate();
      if (mixture.n_train < 1 || mixture.n_val < 1 || mixture.m_test < 1) {
        throw ConfigError("mixture sample counts must be >= 1");
      }
      if (task == TaskKind::kStressTest) {
        ShiftFamily{"adversarial", stress.epsilons, 0}.validate();
        AttackSpec{stress.epsilons.front() * stress.epsilon_unit, stress.steps, stress.step_size, 0}.validate();
        if (!(stress.epsilon_unit > 0.0)) throw ConfigError("stress.epsilon_unit must be > 0");
      }
      break;
    case TaskKind::kProp1Sweep:
      if (prop1.instances < 1) throw ConfigError("prop1.instances must be >= 1");
      if (prop1.profiles.empty()) throw ConfigError("prop1.profiles is empty");
      InstanceSpec{prop1.k, prop1.n, prop1.m, prop1.d, 0, prop1.profiles[0]}.validate();
      break;
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
  try {
    return config_from_json(j);
  } catch (const DimensionError& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------
// JSON views of results

json to_json(const BoundReport& r) {
  return {{"k", r.k},
          {"lambda_k_plus_1", r.lambda_k_plus_1},
          {"lambda_m", r.lambda_m},
          {"test_loss", r.test_loss},
          {"proj_norm_linear", r.proj_norm_linear},
          {"ratio", r.ratio_defined ? json(r.ratio) : json(nullptr)},
          {"lower", r.lower},
          {"upper", r.upper},
          {"ratio_defined", r.ratio_defined},
          {"holds", r.holds},
          {"shared_gap", r.spectral.shared_gap},
          {"cross_overlap", r.spectral.cross_overlap},
          {"norm_discrepancy", r.norm_discrepancy}};
}

json to_json(const EvalReport& r) {
  return {{"method", r.method},       {"r_squared", r.r_squared}, {"spearman_rho", r.spearman_rho},
          {"slope", r.slope},         {"intercept", r.intercept}, {"degenerate", false}};
}

namespace {

// Runs fn, prefixing any failure with the stage name. Config errors keep
// their type so the CLI can map them to the config exit code.
template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw Error("stage '" + name + "': " + e.what());
  }
}

// Per-method evaluation, residual correlations and ensembles.
json summarize(const std::vector<PredictionRecord>& records,
               const std::vector<std::vector<std::string>>& ensembles) {
  json methods = json::array();
  std::vector<EvalReport> fitted;
  const auto groups = group_by_method(records);
  for (const auto& [method, rows] : groups) {
    try {
      fitted.push_back(fit_eval(rows));
      methods.push_back(to_json(fitted.back()));
    } catch (const NumericalError& e) {
      methods.push_back({{"method", method}, {"degenerate", true}, {"reason", e.what()}});
    }
  }
  json out;
  out["methods"] = methods;

  json corr = json::object();
  if (fitted.size() >= 2) {
    try {
      const Matrix c = residual_correlation(fitted);
      json names = json::array();
      for (const auto& r : fitted) names.push_back(r.method);
      json rows = json::array();
      for (Index i = 0; i < c.rows(); ++i) {
        json row = json::array();
        for (Index j = 0; j < c.cols(); ++j) row.push_back(c(i, j));
        rows.push_back(row);
      }
      corr = {{"methods", names}, {"matrix", rows}};
    } catch (const std::exception& e) {
      corr = {{"error", e.what()}};
    }
  }
  out["residual_correlation"] = corr;

  json ens = json::array();
  for (const auto& members : ensembles) {
    std::vector<std::vector<double>> inputs;
    std::vector<PredictionRecord> base;
    for (const auto& name : members) {
      const auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == name; });
      if (it == groups.end()) continue;
      std::vector<double> v;
      for (const auto& r : it->second) v.push_back(r.prediction);
      inputs.push_back(std::move(v));
      base = it->second;
    }
    std::string label;
    for (const auto& name : members) label += (label.empty() ? "" : "+") + name;
    try {
      const auto combined = ensemble_zscore(inputs);
      for (std::size_t i = 0; i < base.size(); ++i) {
        base[i].method = label;
        base[i].prediction = combined[i];
      }
      json entry = to_json(fit_eval(base));
      ens.push_back(entry);
    } catch (const std::exception& e) {
      ens.push_back({{"method", label}, {"degenerate", true}, {"reason", e.what()}});
    }
  }
  out["ensembles"] = ens;
  return out;
}

// ---------------------------------------------------------------------------
// Toy linear task

Matrix two_class_logits(const Vector& r) {
  Matrix logits(r.size(), 2);
  logits.col(0) = -r;
  logits.col(1) = r;
  return logits;
}

Vector plus_minus_targets(const std::vector<int>& labels) {
  Vector y(static_cast<Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) y(static_cast<Index>(i)) = labels[i] == 1 ? 1.0 : -1.0;
  return y;
}

GaussianShiftSpec toy_spec(const ExperimentConfig& cfg, double sigma) {
  return {cfg.toy.d1, cfg.toy.d2, cfg.toy.n, cfg.toy.m, sigma, cfg.toy.label_coord_a, cfg.toy.label_coord_b,
          derive_seed(cfg.seed, "toy")};
}

RunResult run_toy_linear(const ExperimentConfig& cfg) {
  RunResult out;
  const auto& sigmas = cfg.shifts[0].severities;
  const auto [train, unused] = gen_gaussian_shift(toy_spec(cfg, 0.0));
  const Vector theta_hat = stage("fit", [&] { return min_norm_solve(train.features, plus_minus_targets(train.labels)); });
  const Vector y = plus_minus_targets(train.labels);

  json per_sigma = json::array();
  for (double sigma : sigmas) {
    const LabeledDataset test = gen_gaussian_shift(toy_spec(cfg, sigma)).second;
    const Vector r = test.features * theta_hat;
    const Matrix logits = two_class_logits(r);
    const auto pred = argmax_rows(logits);
    Index wrong = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != test.labels[i];
    const double err = static_cast<double>(wrong) / static_cast<double>(pred.size());
    json row = {{"sigma", sigma}, {"test_error", err}};
    for (const auto& metric : cfg.metrics) {
      double value = 0.0;
      if (metric == "ProjNormLinear") {
        value = stage("ProjNormLinear", [&] { return proj_norm_linear(train.features, y, test.features); });
      } else if (metric == "ConfScore") {
        value = conf_score(logits);
      } else {
        value = entropy_score(logits);
      }
      row[metric] = value;
      out.records.push_back({dataset_id("gaussian-sigma", sigma), "gaussian-sigma", sigma, metric, value, err});
    }
    per_sigma.push_back(row);
  }
  out.report["toy"] = per_sigma;
  return out;
}

// ---------------------------------------------------------------------------
// Mixture tasks

struct MixtureContext {
  MixtureSpec spec;
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
  ParamVector theta0;
  ParamVector theta_hat;
  std::optional<ParamVector> theta_second;  // AgreeScore partner
  std::optional<ATCState> atc;
  // Linearized fit for ProjNormLinear.
  std::optional<Vector> linear_delta;
  std::optional<Index> linear_subsample;
  std::uint64_t linear_seed = 0;
  Index linear_rows = 0;
  ProjNormConfig projnorm;
  std::map<Index, ParamVector> reference_cache;
};

MixtureSpec mixture_spec(const ExperimentConfig& cfg, std::uint64_t seed) {
  return {cfg.mixture.dim,   cfg.mixture.num_classes, cfg.mixture.modes_per_class, cfg.mixture.separation,
          cfg.mixture.noise, cfg.mixture.offset,      seed};
}

Architecture architecture_of(const ExperimentConfig& cfg) {
  const Index d = cfg.mixture.dim;
  const int k = cfg.mixture.num_classes;
  if (parse_arch_kind(cfg.architecture.kind) == ArchKind::kLinearSoftmax) return Architecture::linear_softmax(d, k);
  return Architecture::mlp(d, k, cfg.architecture.hidden, parse_activation(cfg.architecture.activation));
}

ParamVector make_theta0(const ExperimentConfig& cfg, const Architecture& arch) {
  ParamVector theta0 = init_model(arch, derive_seed(cfg.seed, "theta0"));
  if (cfg.theta0.mode == "pretrained") {
    // Checkpoint from a related task: same family of mixtures, different centers.
    const MixtureSpec related = mixture_spec(cfg, derive_seed(cfg.seed, "pretrain-task"));
    const LabeledDataset data = gen_mixture(related, cfg.mixture.n_train, "train");
    TrainSettings t = cfg.train;
    t.steps = cfg.theta0.pretrain_steps;
    theta0 = train_sgd(theta0, data, t.resolve(derive_seed(cfg.seed, "pretrain")));
  }
  return theta0;
}

MixtureContext build_context(const ExperimentConfig& cfg) {
  MixtureContext ctx;
  ctx.spec = mixture_spec(cfg, derive_seed(cfg.seed, "mixture"));
  ctx.train = gen_mixture(ctx.spec, cfg.mixture.n_train, "train");
  ctx.val = gen_mixture(ctx.spec, cfg.mixture.n_val, "val");
  ctx.test = gen_mixture(ctx.spec, cfg.mixture.m_test, "test");
  const Architecture arch = architecture_of(cfg);
  ctx.theta0 = stage("init", [&] { return make_theta0(cfg, arch); });
  ctx.theta_hat = stage("train", [&] {
    return train_sgd(ctx.theta0, ctx.train, cfg.train.resolve(derive_seed(cfg.seed, "train")));
  });

  const auto wants = [&](const char* m) {
    return std::find(cfg.metrics.begin(), cfg.metrics.end(), m) != cfg.metrics.end();
  };
  if (wants("AgreeScore")) {
    ctx.theta_second = stage("train-second", [&] {
      const ParamVector start = init_model(arch, derive_seed(cfg.seed, "theta0-second"));
      return train_sgd(start, ctx.train, cfg.train.resolve(derive_seed(cfg.seed, "train-second")));
    });
  }
  if (wants("ATC")) {
    ctx.atc = atc_fit(predict_logits(ctx.theta_hat, ctx.val.features), ctx.val.labels);
  }
  if (wants("ProjNormLinear")) {
    ctx.linear_subsample = cfg.linearized.subsample;
    ctx.linear_seed = derive_seed(cfg.seed, "linearized");
    ctx.linear_rows = cfg.linearized.rows;
    ctx.linear_delta = stage("linearize", [&] {
      const Index rows = std::min(ctx.linear_rows, ctx.train.size());
      const Matrix x = ctx.train.features.topRows(rows);
      const Matrix phi = linearized_features(ctx.theta0, x, ctx.linear_subsample, ctx.linear_seed).features;
      const Vector target = scalar_head(ctx.theta_hat, x) - scalar_head(ctx.theta0, x);
      return min_norm_solve(phi, target);
    });
  }
  ctx.projnorm.train_cfg = cfg.projnorm.train.resolve(derive_seed(cfg.seed, "projnorm-train"));
  ctx.projnorm.ref_mode = parse_ref_mode(cfg.projnorm.ref_mode);
  ctx.projnorm.ref_subsample = cfg.projnorm.ref_subsample;
  ctx.projnorm.seed = derive_seed(cfg.seed, "projnorm");
  return ctx;
}

LabeledDataset build_shift(const ExperimentConfig& cfg, const MixtureContext& ctx, const std::string& family,
                           double severity) {
  const std::uint64_t seed = derive_seed(cfg.seed, "shift/" + family);
  if (family == "noise" || family == "scale" || family == "dropout") {
    return gen_feature_corruption(ctx.test, parse_corruption_kind(family), severity, seed);
  }
  if (family == "label-shift") {
    // Severity s drops the last floor(s) classes.
    const int drop = static_cast<int>(std::floor(severity));
    const int keep = ctx.test.num_classes - drop;
    if (drop < 0 || keep < 1) throw ConfigError("label-shift severity must lie in [0, K-1]");
    std::set<int> classes;
    for (int c = 0; c < keep; ++c) classes.insert(c);
    return gen_label_shift(ctx.test, classes);
  }
  if (family == "adversarial") {
    AttackSpec spec{severity * cfg.stress.epsilon_unit, cfg.stress.steps, cfg.stress.step_size, seed};
    const ParamVector& theta = ctx.theta_hat;
    return pgd_attack([&](const Matrix& x, const std::vector<int>& y) { return input_gradients(theta, x, y); },
                      ctx.test, spec);
  }
  throw ConfigError("family '" + family + "' is not available for this task");
}

double evaluate_metric(const std::string& metric, MixtureContext& ctx, const LabeledDataset& data) {
  if (metric == "ProjNorm") {
    // The reference model depends only on m_ref, so it is shared across datasets.
    const ProjNormConfig& cfg = ctx.projnorm;
    if (cfg.ref_mode == RefMode::kReuseModel) {
      return finish_proj_norm(ctx.theta0, ctx.theta_hat, ctx.theta_hat, data.features, cfg.train_cfg).value;
    }
    const Index m_ref = cfg.ref_subsample.value_or(data.size());
    auto it = ctx.reference_cache.find(m_ref);
    if (it == ctx.reference_cache.end()) {
      it = ctx.reference_cache.emplace(m_ref, train_reference(ctx.theta0, ctx.train, m_ref, cfg)).first;
    }
    return finish_proj_norm(ctx.theta0, ctx.theta_hat, it->second, data.features, cfg.train_cfg).value;
  }
  if (metric == "ProjNormLinear") {
    const Index use = std::min(ctx.linear_rows, data.size());
    const Matrix phi =
        linearized_features(ctx.theta0, data.features.topRows(use), ctx.linear_subsample, ctx.linear_seed).features;
    const RowSpaceProjector p = row_space_projector(phi);
    return (*ctx.linear_delta - project(p, *ctx.linear_delta)).norm();
  }
  const Matrix logits = predict_logits(ctx.theta_hat, data.features);
  if (metric == "ConfScore") return conf_score(logits);
  if (metric == "Entropy") return entropy_score(logits);
  if (metric == "AgreeScore") return agree_score(logits, predict_logits(*ctx.theta_second, data.features));
  if (metric == "ATC") return atc_score(logits, *ctx.atc);
  throw ConfigError("unknown metric '" + metric + "'");
}

void evaluate_family(const ExperimentConfig& cfg, MixtureContext& ctx, const std::string& family,
                     const std::vector<double>& severities, std::vector<PredictionRecord>& records,
                     std::vector<std::pair<double, double>>* errors = nullptr) {
  for (double severity : severities) {
    const std::string id = dataset_id(family, severity);
    const LabeledDataset data = stage("shift " + id, [&] { return build_shift(cfg, ctx, family, severity); });
    const double err = test_error(ctx.theta_hat, data);
    if (errors) errors->emplace_back(severity, err);
    for (const auto& metric : cfg.metrics) {
      const double value = stage(metric + " on " + id, [&] { return evaluate_metric(metric, ctx, data); });
      records.push_back({id, family, severity, metric, value, err});
    }
  }
}

json context_summary(const MixtureContext& ctx) {
  return {{"clean_test_error", test_error(ctx.theta_hat, ctx.test)},
          {"train_error", test_error(ctx.theta_hat, ctx.train)},
          {"param_count", ctx.theta_hat.arch.param_count()}};
}

RunResult run_mlp_shift(const ExperimentConfig& cfg) {
  RunResult out;
  MixtureContext ctx = build_context(cfg);
  for (const auto& s : cfg.shifts) evaluate_family(cfg, ctx, s.family, s.severities, out.records);
  out.report["base_model"] = context_summary(ctx);
  return out;
}

RunResult run_prop1(const ExperimentConfig& cfg) {
  RunResult out;
  json bounds = json::array();
  int holds = 0;
  for (int i = 0; i < cfg.prop1.instances; ++i) {
    InstanceSpec spec{cfg.prop1.k, cfg.prop1.n, cfg.prop1.m, cfg.prop1.d,
                      derive_seed(cfg.seed, static_cast<std::uint64_t>(i)),
                      cfg.prop1.profiles[static_cast<std::size_t>(i) % cfg.prop1.profiles.size()]};
    const BoundReport r = stage("prop1 instance " + std::to_string(i), [&] {
      return verify_prop1(construct_instance(spec), spec.k);
    });
    holds += r.holds;
    json entry = to_json(r);
    entry["instance"] = i;
    entry["exponent"] = spec.tail.exponent;
    entry["flat_tail"] = spec.tail.flat_tail;
    bounds.push_back(entry);
  }
  out.report["bounds"] = bounds;
  out.report["holds_count"] = holds;
  return out;
}

json base_report(const ExperimentConfig& cfg) {
  return {{"schema_version", kReportSchemaVersion}, {"task", to_string(cfg.task)}, {"seed", cfg.seed}};
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw Error("cannot create output directory '" + dir.string() + "'");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  RunResult out;
  switch (cfg.task) {
    case TaskKind::kToyLinear:
      out = run_toy_linear(cfg);
      break;
    case TaskKind::kMlpShift:
      out = run_mlp_shift(cfg);
      break;
    case TaskKind::kProp1Sweep:
      out = run_prop1(cfg);
      break;
    case TaskKind::kStressTest: {
      StressResult s = run_stress(cfg);
      out.records = std::move(s.records);
      out.report = std::move(s.report);
      return out;
    }
  }
  json report = base_report(cfg);
  report.update(out.report);
  if (!out.records.empty()) report.update(summarize(out.records, cfg.ensembles));
  out.report = std::move(report);
  return out;
}

StressResult run_stress(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.task != TaskKind::kStressTest && cfg.task != TaskKind::kMlpShift) {
    throw ConfigError("stress needs a mixture task (stress-test or mlp-shift)");
  }
  StressResult out;
  MixtureContext ctx = build_context(cfg);

  std::vector<PredictionRecord> corruption;
  for (const auto& s : cfg.shifts) {
    if (s.family == "adversarial") continue;
    evaluate_family(cfg, ctx, s.family, s.severities, corruption);
  }
  std::vector<PredictionRecord> adversarial;
  std::vector<std::pair<double, double>> truth;
  evaluate_family(cfg, ctx, "adversarial", cfg.stress.epsilons, adversarial, &truth);

  for (const auto& [eps, err] : truth) {
    StressRow row;
    row.epsilon = eps;
    row.true_error = err;
    out.table.push_back(row);
  }
  json calibrations = json::array();
  for (const auto& metric : cfg.metrics) {
    std::vector<PredictionRecord> fit, apply;
    for (const auto& r : corruption) {
      if (r.method == metric) fit.push_back(r);
    }
    for (const auto& r : adversarial) {
      if (r.method == metric) apply.push_back(r);
    }
    const Calibration cal = stage("calibrate " + metric, [&] { return calibrate_and_predict(fit, apply); });
    for (std::size_t i = 0; i < apply.size(); ++i) {
      out.table[i].raw[metric] = apply[i].prediction;
      out.table[i].calibrated[metric] = cal.predicted[i];
    }
    calibrations.push_back({{"method", metric},
                            {"slope", cal.slope},
                            {"intercept", cal.intercept},
                            {"mse", cal.mse},
                            {"logit_based", is_logit_metric(metric)}});
  }

  out.records = corruption;
  out.records.insert(out.records.end(), adversarial.begin(), adversarial.end());

  json table = json::array();
  for (const auto& row : out.table) {
    table.push_back({{"epsilon", row.epsilon},
                     {"epsilon_features", row.epsilon * cfg.stress.epsilon_unit},
                     {"true_error", row.true_error},
                     {"raw", row.raw},
                     {"calibrated", row.calibrated}});
  }
  out.report = base_report(cfg);
  out.report["base_model"] = context_summary(ctx);
  out.report["calibration"] = calibrations;
  out.report["stress_table"] = table;
  out.report["corruption_fit"] = summarize(corruption, {});
  return out;
}

std::vector<std::filesystem::path> generate_datasets(const ExperimentConfig& cfg,
                                                     const std::filesystem::path& out_dir) {
  cfg.validate();
  ensure_dir(out_dir);
  std::vector<std::filesystem::path> written;
  auto emit = [&](const LabeledDataset& data, const std::string& name) {
    const auto path = out_dir / name;
    save_csv(data, path);
    written.push_back(path);
  };
  switch (cfg.task) {
    case TaskKind::kToyLinear: {
      const auto& sigmas = cfg.shifts[0].severities;
      emit(gen_gaussian_shift(toy_spec(cfg, sigmas.front())).first, "train.csv");
      for (double sigma : sigmas) {
        emit(gen_gaussian_shift(toy_spec(cfg, sigma)).second, "test_" + dataset_id("gaussian-sigma", sigma) + ".csv");
      }
      break;
    }
    case TaskKind::kMlpShift:
    case TaskKind::kStressTest: {
      MixtureContext ctx;
      ctx.spec = mixture_spec(cfg, derive_seed(cfg.seed, "mixture"));
      ctx.train = gen_mixture(ctx.spec, cfg.mixture.n_train, "train");
      ctx.val = gen_mixture(ctx.spec, cfg.mixture.n_val, "val");
      ctx.test = gen_mixture(ctx.spec, cfg.mixture.m_test, "test");
      emit(ctx.train, "train.csv");
      emit(ctx.val, "val.csv");
      emit(ctx.test, "test_clean.csv");
      for (const auto& s : cfg.shifts) {
        // Adversarial sets depend on a trained model; `stress` writes them.
        if (s.family == "adversarial") continue;
        for (double severity : s.severities) {
          emit(build_shift(cfg, ctx, s.family, severity), "test_" + dataset_id(s.family, severity) + ".csv");
        }
      }
      break;
    }
    case TaskKind::kProp1Sweep:
      break;
  }
  return written;
}

// ---------------------------------------------------------------------------
// Report rendering

std::string render_report(const std::vector<PredictionRecord>& records) {
  if (records.empty()) throw Error("report: no records");
  for (const auto& r : records) r.validate();

  std::vector<std::string> families;
  for (const auto& r : records) {
    if (std::find(families.begin(), families.end(), r.family) == families.end()) families.push_back(r.family);
  }
  const auto groups = group_by_method(records);

  auto cell = [](const std::vector<PredictionRecord>& rows) -> std::string {
    try {
      const EvalReport e = fit_eval(rows);
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.3f / %.3f", e.r_squared, e.spearman_rho);
      return buf;
    } catch (const std::exception&) {
      return "n/a";
    }
  };

  std::ostringstream out;
  out << "R^2 / Spearman rho by method and shift family\n";
  out << std::left << std::setw(16) << "method";
  for (const auto& f : families) out << std::setw(18) << f;
  out << std::setw(18) << "all" << '\n';
  std::vector<EvalReport> fitted;
  for (const auto& [method, rows] : groups) {
    out << std::setw(16) << method;
    for (const auto& f : families) {
      std::vector<PredictionRecord> sub;
      for (const auto& r : rows) {
        if (r.family == f) sub.push_back(r);
      }
      out << std::setw(18) << cell(sub);
    }
    out << std::setw(18) << cell(rows) << '\n';
    try {
      fitted.push_back(fit_eval(rows));
    } catch (const std::exception&) {
    }
  }

  out << "\nResidual correlation\n";
  if (fitted.size() < 2) {
    out << "(needs at least two non-degenerate methods)\n";
    return out.str();
  }
  const Matrix c = residual_correlation(fitted);
  out << std::setw(16) << "";
  for (const auto& r : fitted) out << std::setw(14) << r.method;
  out << '\n';
  for (Index i = 0; i < c.rows(); ++i) {
    out << std::setw(16) << fitted[static_cast<std::size_t>(i)].method;
    for (Index j = 0; j < c.cols(); ++j) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.2f", c(i, j));
      out << std::setw(14) << buf;
    }
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  generate_datasets(cfg, out_dir);
}

void cmd_run(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  ensure_dir(out_dir);
  const RunResult result = run_experiment(cfg);
  if (!result.records.empty()) save_records(result.records, out_dir / "records.csv");
  write_text(out_dir / "report.json", result.report.dump(2) + "\n");
}

void cmd_stress(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  ensure_dir(out_dir);
  const StressResult result = run_stress(cfg);
  save_records(result.records, out_dir / "records.csv");
  write_text(out_dir / "report.json", result.report.dump(2) + "\n");

  std::ostringstream table;
  table << "epsilon,true_error";
  for (const auto& m : cfg.metrics) table << ',' << m;
  table << '\n';
  for (const auto& row : result.table) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", row.epsilon);
    table << buf;
    std::snprintf(buf, sizeof(buf), ",%.9g", row.true_error);
    table << buf;
    for (const auto& m : cfg.metrics) {
      std::snprintf(buf, sizeof(buf), ",%.9g", row.calibrated.at(m));
      table << buf;
    }
    table << '\n';
  }
  write_text(out_dir / "stress_table.csv", table.str());
}

std::string cmd_report(const std::filesystem::path& records_path, const std::filesystem::path& out_dir) {
  const auto records = load_records(records_path);
  const std::string text = render_report(records);
  if (!out_dir.empty()) {
    ensure_dir(out_dir);
    write_text(out_dir / "report.txt", text);
  }
  return text;
}

}  // namespace projnorm
