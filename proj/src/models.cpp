#include "projnorm/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "projnorm/error.hpp"
#include "projnorm/rng.hpp"

namespace projnorm {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWeightMap = Eigen::Map<const RowMajorMatrix>;
using WeightMap = Eigen::Map<RowMajorMatrix>;

// ---------------------------------------------------------------------------
// Architecture

Architecture Architecture::linear_softmax(Index input_dim, int num_classes) {
  Architecture a;
  a.kind = ArchKind::kLinearSoftmax;
  a.input_dim = input_dim;
  a.num_classes = num_classes;
  return a;
}

Architecture Architecture::mlp(Index input_dim, int num_classes, std::vector<Index> hidden,
                               Activation activation) {
  Architecture a;
  a.kind = ArchKind::kMlp;
  a.input_dim = input_dim;
  a.num_classes = num_classes;
  a.hidden = std::move(hidden);
  a.activation = activation;
  return a;
}

void Architecture::validate() const {
  if (input_dim < 1 || num_classes < 1) throw ConfigError("architecture: d and K must be >= 1");
  if (kind == ArchKind::kMlp) {
    if (hidden.empty()) throw ConfigError("architecture: mlp needs at least one hidden layer");
    for (Index h : hidden) {
      if (h < 1) throw ConfigError("architecture: hidden sizes must be >= 1");
    }
  } else if (!hidden.empty()) {
    throw ConfigError("architecture: linear-softmax takes no hidden layers");
  }
}

std::vector<Index> Architecture::layer_sizes() const {
  std::vector<Index> sizes{input_dim};
  if (kind == ArchKind::kMlp) sizes.insert(sizes.end(), hidden.begin(), hidden.end());
  sizes.push_back(num_classes);
  return sizes;
}

Index Architecture::param_count() const {
  const auto sizes = layer_sizes();
  Index count = 0;
  for (std::size_t l = 1; l < sizes.size(); ++l) count += sizes[l] * sizes[l - 1] + sizes[l];
  return count;
}

std::string to_string(ArchKind kind) {
  return kind == ArchKind::kMlp ? "mlp" : "linear-softmax";
}

std::string to_string(Activation act) { return act == Activation::kTanh ? "tanh" : "relu"; }

ArchKind parse_arch_kind(const std::string& name) {
  if (name == "linear-softmax") return ArchKind::kLinearSoftmax;
  if (name == "mlp") return ArchKind::kMlp;
  throw ConfigError("unknown architecture kind '" + name + "'");
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  throw ConfigError("unknown activation '" + name + "'");
}

void ParamVector::validate() const {
  arch.validate();
  if (values.size() != arch.param_count()) {
    throw DimensionError("parameter vector has " + std::to_string(values.size()) +
                         " entries, architecture needs " + std::to_string(arch.param_count()));
  }
  require_finite(values, "parameter vector");
}

// ---------------------------------------------------------------------------
// Training config

std::string to_string(Schedule s) { return s == Schedule::kCosine ? "cosine" : "constant"; }
std::string to_string(Loss l) { return l == Loss::kSquared ? "squared" : "cross-entropy"; }

Schedule parse_schedule(const std::string& name) {
  if (name == "constant") return Schedule::kConstant;
  if (name == "cosine") return Schedule::kCosine;
  throw ConfigError("unknown schedule '" + name + "'");
}

Loss parse_loss(const std::string& name) {
  if (name == "cross-entropy") return Loss::kCrossEntropy;
  if (name == "squared") return Loss::kSquared;
  throw ConfigError("unknown loss '" + name + "'");
}

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train: steps must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must be in [0, 1)");
}

double TrainConfig::rate_at(int t) const {
  if (schedule == Schedule::kConstant) return learning_rate;
  return learning_rate * 0.5 * (1.0 + std::cos(M_PI * t / static_cast<double>(steps)));
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct Layer {
  Index in = 0;
  Index out = 0;
  Index weight_offset = 0;
  Index bias_offset = 0;
};

std::vector<Layer> layers_of(const Architecture& arch) {
  const auto sizes = arch.layer_sizes();
  std::vector<Layer> layers;
  Index offset = 0;
  for (std::size_t l = 1; l < sizes.size(); ++l) {
    Layer layer;
    layer.in = sizes[l - 1];
    layer.out = sizes[l];
    layer.weight_offset = offset;
    layer.bias_offset = offset + layer.in * layer.out;
    offset = layer.bias_offset + layer.out;
    layers.push_back(layer);
  }
  return layers;
}

ConstWeightMap weights(const Vector& values, const Layer& layer) {
  return ConstWeightMap(values.data() + layer.weight_offset, layer.out, layer.in);
}

Eigen::Map<const Vector> biases(const Vector& values, const Layer& layer) {
  return Eigen::Map<const Vector>(values.data() + layer.bias_offset, layer.out);
}

void activate(Matrix& z, Activation act) {
  if (act == Activation::kRelu) {
    z = z.cwiseMax(0.0);
  } else {
    z = z.array().tanh().matrix();
  }
}

// Derivative of the activation given the activated output a = act(z).
Matrix activation_slope(const Matrix& pre, const Matrix& post, Activation act) {
  if (act == Activation::kRelu) {
    return (pre.array() > 0.0).cast<double>().matrix();
  }
  return (1.0 - post.array().square()).matrix();
}

// Keeps pre-activations and activations of every layer; acts[0] is the input.
struct ForwardPass {
  std::vector<Matrix> pre;
  std::vector<Matrix> acts;
  const Matrix& logits() const { return pre.back(); }
};

void check_input(const ParamVector& theta, const Matrix& x) {
  if (x.cols() != theta.arch.input_dim) {
    throw DimensionError("input has " + std::to_string(x.cols()) + " features, model expects " +
                         std::to_string(theta.arch.input_dim));
  }
  if (theta.values.size() != theta.arch.param_count()) {
    throw DimensionError("parameter vector does not match its architecture");
  }
}

ForwardPass forward(const ParamVector& theta, const Matrix& x) {
  check_input(theta, x);
  const auto layers = layers_of(theta.arch);
  ForwardPass fp;
  fp.acts.push_back(x);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Matrix z = fp.acts.back() * weights(theta.values, layers[l]).transpose();
    z.rowwise() += biases(theta.values, layers[l]).transpose();
    fp.pre.push_back(z);
    if (l + 1 < layers.size()) {
      activate(z, theta.arch.activation);
      fp.acts.push_back(std::move(z));
    }
  }
  return fp;
}

// Backpropagates dL/dlogits. Returns per-layer dL/dz (index-aligned with
// layers) and, optionally, dL/dinput.
struct Backward {
  std::vector<Matrix> delta;
  Matrix input_grad;
};

Backward backward(const ParamVector& theta, const ForwardPass& fp, Matrix dlogits,
                  bool want_input_grad) {
  const auto layers = layers_of(theta.arch);
  Backward out;
  out.delta.resize(layers.size());
  out.delta.back() = std::move(dlogits);
  for (std::size_t l = layers.size(); l-- > 0;) {
    if (l == 0 && !want_input_grad) break;
    Matrix upstream = out.delta[l] * weights(theta.values, layers[l]);
    if (l == 0) {
      out.input_grad = std::move(upstream);
    } else {
      out.delta[l - 1] =
          upstream.cwiseProduct(activation_slope(fp.pre[l - 1], fp.acts[l], theta.arch.activation));
    }
  }
  return out;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits.colwise() - logits.rowwise().maxCoeff();
  p = p.array().exp().matrix();
  p = p.array().colwise() / p.rowwise().sum().array();
  return p;
}

void check_labels(const std::vector<int>& labels, Index rows, int num_classes) {
  if (static_cast<Index>(labels.size()) != rows) {
    throw DimensionError("label count does not match row count");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw DimensionError("label outside model's class range");
  }
}

// Per-row loss and dL/dlogits for the unaveraged loss.
double loss_and_dlogits(const Matrix& logits, const std::vector<int>& labels, Loss loss,
                        Matrix& dlogits) {
  const Index n = logits.rows();
  double total = 0.0;
  if (loss == Loss::kCrossEntropy) {
    const Vector row_max = logits.rowwise().maxCoeff();
    const Matrix shifted = logits.colwise() - row_max;
    const Vector log_norm = shifted.array().exp().rowwise().sum().log().matrix();
    dlogits = softmax_rows(logits);
    for (Index i = 0; i < n; ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      total += log_norm(i) - shifted(i, y);
      dlogits(i, y) -= 1.0;
    }
  } else {
    dlogits = logits;
    for (Index i = 0; i < n; ++i) dlogits(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    total = 0.5 * dlogits.squaredNorm();
  }
  return total;
}

Vector parameter_gradient(const ParamVector& theta, const ForwardPass& fp, const Backward& bw) {
  const auto layers = layers_of(theta.arch);
  Vector grad(theta.values.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const Layer& layer = layers[l];
    WeightMap gw(grad.data() + layer.weight_offset, layer.out, layer.in);
    gw.noalias() = bw.delta[l].transpose() * fp.acts[l];
    grad.segment(layer.bias_offset, layer.out) = bw.delta[l].colwise().sum().transpose();
  }
  return grad;
}

}  // namespace

ParamVector init_model(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  ParamVector theta{arch, Vector::Zero(arch.param_count())};
  Rng rng = make_rng(seed, "init");
  for (const Layer& layer : layers_of(arch)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.in));
    std::uniform_real_distribution<double> unif(-bound, bound);
    for (Index i = 0; i < layer.in * layer.out; ++i) theta.values(layer.weight_offset + i) = unif(rng);
  }
  return theta;
}

Matrix predict_logits(const ParamVector& theta, const Matrix& x) { return forward(theta, x).logits(); }

std::vector<int> argmax_rows(const Matrix& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < logits.cols(); ++k) {
      if (logits(i, k) > logits(i, best)) best = k;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> predict_class(const ParamVector& theta, const Matrix& x) {
  return argmax_rows(predict_logits(theta, x));
}

double test_error(const ParamVector& theta, const LabeledDataset& data) {
  if (data.size() == 0) throw DimensionError("test_error: empty dataset");
  const auto pred = predict_class(theta, data.features);
  Index wrong = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != data.labels[i];
  return static_cast<double>(wrong) / static_cast<double>(pred.size());
}

LossAndGradient loss_and_gradient(const ParamVector& theta, const Matrix& x,
                                  const std::vector<int>& labels, Loss loss) {
  check_labels(labels, x.rows(), theta.arch.num_classes);
  if (x.rows() == 0) throw DimensionError("loss_and_gradient: empty batch");
  const ForwardPass fp = forward(theta, x);
  Matrix dlogits;
  const double total = loss_and_dlogits(fp.logits(), labels, loss, dlogits);
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  dlogits *= inv_n;
  const Backward bw = backward(theta, fp, std::move(dlogits), false);
  return {total * inv_n, parameter_gradient(theta, fp, bw)};
}

double mean_loss(const ParamVector& theta, const LabeledDataset& data, Loss loss) {
  check_labels(data.labels, data.size(), theta.arch.num_classes);
  Matrix dlogits;
  return loss_and_dlogits(predict_logits(theta, data.features), data.labels, loss, dlogits) /
         static_cast<double>(data.size());
}

ParamVector train_sgd(const ParamVector& start, const LabeledDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  start.validate();
  if (data.size() == 0) throw DimensionError("train_sgd: empty dataset");
  if (data.dim() != start.arch.input_dim) throw DimensionError("train_sgd: feature dimension mismatch");
  check_labels(data.labels, data.size(), start.arch.num_classes);

  ParamVector theta = start;
  Vector velocity = Vector::Zero(theta.values.size());
  Rng rng = make_rng(cfg.seed, "train/shuffle");

  const Index n = data.size();
  const Index batch = std::min<Index>(cfg.batch_size, n);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Index cursor = n;

  Matrix xb;
  std::vector<int> yb;
  for (int t = 0; t < cfg.steps; ++t) {
    if (cursor >= n) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const Index size = std::min(batch, n - cursor);
    xb.resize(size, data.dim());
    yb.resize(static_cast<std::size_t>(size));
    for (Index i = 0; i < size; ++i) {
      const Index row = order[static_cast<std::size_t>(cursor + i)];
      xb.row(i) = data.features.row(row);
      yb[static_cast<std::size_t>(i)] = data.labels[static_cast<std::size_t>(row)];
    }
    cursor += size;

    const auto lg = loss_and_gradient(theta, xb, yb, cfg.loss);
    if (!std::isfinite(lg.loss) || !lg.gradient.allFinite()) throw DivergenceError(t);
    velocity = cfg.momentum * velocity + lg.gradient;
    theta.values -= cfg.rate_at(t) * velocity;
  }
  if (!theta.values.allFinite()) throw DivergenceError(cfg.steps);
  return theta;
}

double param_distance(const ParamVector& a, const ParamVector& b) {
  if (!(a.arch == b.arch)) throw DimensionError("param_distance: architecture mismatch");
  if (a.values.size() != b.values.size()) throw DimensionError("param_distance: length mismatch");
  return (a.values - b.values).norm();
}

Vector scalar_head(const ParamVector& theta, const Matrix& x) {
  return predict_logits(theta, x).rowwise().mean();
}

std::vector<Index> sample_coordinates(Index param_count, std::optional<Index> subsample,
                                      std::uint64_t seed) {
  std::vector<Index> coords(static_cast<std::size_t>(param_count));
  std::iota(coords.begin(), coords.end(), Index{0});
  if (!subsample || *subsample >= param_count) return coords;
  if (*subsample < 1) throw DimensionError("linearized_features: subsample must be >= 1");
  Rng rng = make_rng(seed, "linearized/coords");
  // Partial Fisher-Yates.
  for (Index i = 0; i < *subsample; ++i) {
    std::uniform_int_distribution<Index> pick(i, param_count - 1);
    std::swap(coords[static_cast<std::size_t>(i)], coords[static_cast<std::size_t>(pick(rng))]);
  }
  coords.resize(static_cast<std::size_t>(*subsample));
  std::sort(coords.begin(), coords.end());
  return coords;
}

LinearizedFeatures linearized_features(const ParamVector& theta0, const Matrix& x,
                                       std::optional<Index> subsample, std::uint64_t seed) {
  theta0.validate();
  if (subsample && *subsample > theta0.arch.param_count()) {
    throw DimensionError("linearized_features: subsample exceeds parameter count");
  }
  LinearizedFeatures out;
  out.coords = sample_coordinates(theta0.arch.param_count(), subsample, seed);

  const ForwardPass fp = forward(theta0, x);
  const int k = theta0.arch.num_classes;
  const Backward bw = backward(theta0, fp, Matrix::Constant(x.rows(), k, 1.0 / k), false);
  const auto layers = layers_of(theta0.arch);

  out.features.resize(x.rows(), static_cast<Index>(out.coords.size()));
  std::size_t l = 0;
  for (std::size_t c = 0; c < out.coords.size(); ++c) {
    const Index coord = out.coords[c];
    while (coord >= layers[l].bias_offset + layers[l].out) ++l;
    const Layer& layer = layers[l];
    if (coord >= layer.bias_offset) {
      out.features.col(static_cast<Index>(c)) = bw.delta[l].col(coord - layer.bias_offset);
    } else {
      const Index local = coord - layer.weight_offset;
      const Index o = local / layer.in;
      const Index i = local % layer.in;
      out.features.col(static_cast<Index>(c)) = bw.delta[l].col(o).cwiseProduct(fp.acts[l].col(i));
    }
  }
  return out;
}

Matrix input_gradients(const ParamVector& theta, const Matrix& x, const std::vector<int>& labels,
                       Loss loss) {
  check_labels(labels, x.rows(), theta.arch.num_classes);
  const ForwardPass fp = forward(theta, x);
  Matrix dlogits;
  loss_and_dlogits(fp.logits(), labels, loss, dlogits);
  return backward(theta, fp, std::move(dlogits), true).input_grad;
}

Matrix input_gradients(const ParamVector& theta, const LabeledDataset& data, Loss loss) {
  return input_gradients(theta, data.features, data.labels, loss);
}

// ---------------------------------------------------------------------------
// Serialization

std::string serialize_params(const ParamVector& theta) {
  theta.validate();
  std::ostringstream out;
  out << "projnorm-params 1\n";
  out << "kind " << to_string(theta.arch.kind) << '\n';
  out << "input_dim " << theta.arch.input_dim << '\n';
  out << "num_classes " << theta.arch.num_classes << '\n';
  out << "hidden";
  for (Index h : theta.arch.hidden) out << ' ' << h;
  out << '\n';
  out << "activation " << to_string(theta.arch.activation) << '\n';
  out << "count " << theta.values.size() << '\n';
  char buf[32];
  for (Index i = 0; i < theta.values.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", theta.values(i));
    out << buf << '\n';
  }
  return out.str();
}

ParamVector parse_params(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  long line_no = 0;
  auto next_line = [&](const std::string& key) {
    if (!std::getline(in, line)) throw ParseError("missing '" + key + "'", line_no + 1);
    ++line_no;
    std::istringstream ls(line);
    std::string got;
    ls >> got;
    if (got != key) throw ParseError("expected '" + key + "', found '" + got + "'", line_no);
    std::string rest;
    std::getline(ls, rest);
    return rest;
  };

  if (std::stol(next_line("projnorm-params")) != 1) throw ParseError("unsupported version", 1);
  Architecture arch;
  std::istringstream(next_line("kind")) >> std::ws >> line;
  arch.kind = parse_arch_kind(line);
  arch.input_dim = std::stol(next_line("input_dim"));
  arch.num_classes = std::stoi(next_line("num_classes"));
  {
    std::istringstream hs(next_line("hidden"));
    Index h = 0;
    while (hs >> h) arch.hidden.push_back(h);
  }
  std::istringstream(next_line("activation")) >> std::ws >> line;
  arch.activation = parse_activation(line);
  const long count = std::stol(next_line("count"));
  arch.validate();
  if (count != arch.param_count()) throw ParseError("count does not match architecture", line_no);

  ParamVector theta{arch, Vector(count)};
  for (long i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw ParseError("truncated parameter list", line_no + 1);
    ++line_no;
    std::size_t used = 0;
    theta.values(i) = std::stod(line, &used);
  }
  theta.validate();
  return theta;
}

void save_params(const ParamVector& theta, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << serialize_params(theta);
}

ParamVector load_params(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_params(buf.str());
}

}  // namespace projnorm
