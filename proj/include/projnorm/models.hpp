#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "projnorm/data.hpp"
#include "projnorm/numerics.hpp"

namespace projnorm {

enum class ArchKind { kLinearSoftmax, kMlp };
enum class Activation { kRelu, kTanh };

struct Architecture {
  ArchKind kind = ArchKind::kLinearSoftmax;
  Index input_dim = 1;
  int num_classes = 2;
  std::vector<Index> hidden;  // mlp only
  Activation activation = Activation::kRelu;

  static Architecture linear_softmax(Index input_dim, int num_classes);
  static Architecture mlp(Index input_dim, int num_classes, std::vector<Index> hidden,
                          Activation activation = Activation::kRelu);

  void validate() const;
  // Layer widths from input to logits.
  std::vector<Index> layer_sizes() const;
  Index param_count() const;

  bool operator==(const Architecture& other) const = default;
};

std::string to_string(ArchKind kind);
std::string to_string(Activation act);
ArchKind parse_arch_kind(const std::string& name);
Activation parse_activation(const std::string& name);

// Flat parameters. Canonical order, layer by layer from the input: the weight
// matrix (out x in, row-major) followed by the bias vector (out).
struct ParamVector {
  Architecture arch;
  Vector values;

  void validate() const;
};

enum class Schedule { kConstant, kCosine };
enum class Loss { kCrossEntropy, kSquared };

std::string to_string(Schedule s);
std::string to_string(Loss l);
Schedule parse_schedule(const std::string& name);
Loss parse_loss(const std::string& name);

struct TrainConfig {
  int steps = 1000;
  double learning_rate = 1e-2;
  int batch_size = 64;
  double momentum = 0.9;
  Schedule schedule = Schedule::kCosine;
  Loss loss = Loss::kCrossEntropy;
  std::uint64_t seed = 0;

  void validate() const;
  // Learning rate used at zero-based step t.
  double rate_at(int t) const;
};

// Fan-in uniform init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases 0.
ParamVector init_model(const Architecture& arch, std::uint64_t seed);

// Exactly cfg.steps minibatch momentum-SGD steps. Each epoch is a fresh shuffle
// from the config seed; the last short batch is kept.
ParamVector train_sgd(const ParamVector& start, const LabeledDataset& data, const TrainConfig& cfg);

Matrix predict_logits(const ParamVector& theta, const Matrix& x);
std::vector<int> predict_class(const ParamVector& theta, const Matrix& x);
// Row-wise argmax with ties going to the smallest index.
std::vector<int> argmax_rows(const Matrix& logits);

double test_error(const ParamVector& theta, const LabeledDataset& data);

// Mean loss over the rows and its gradient w.r.t. the flat parameters.
struct LossAndGradient {
  double loss = 0.0;
  Vector gradient;
};
LossAndGradient loss_and_gradient(const ParamVector& theta, const Matrix& x,
                                  const std::vector<int>& labels, Loss loss);
double mean_loss(const ParamVector& theta, const LabeledDataset& data, Loss loss);

double param_distance(const ParamVector& a, const ParamVector& b);

// Scalar head used for linearization: the mean of the K logits.
Vector scalar_head(const ParamVector& theta, const Matrix& x);

// Rows are gradients of the scalar head at theta0, restricted to a seeded
// coordinate subset (sorted ascending).
struct LinearizedFeatures {
  Matrix features;
  std::vector<Index> coords;
};
LinearizedFeatures linearized_features(const ParamVector& theta0, const Matrix& x,
                                       std::optional<Index> subsample, std::uint64_t seed);
std::vector<Index> sample_coordinates(Index param_count, std::optional<Index> subsample,
                                      std::uint64_t seed);

// Per-example gradient of the (unaveraged) training loss w.r.t. the inputs.
Matrix input_gradients(const ParamVector& theta, const LabeledDataset& data,
                       Loss loss = Loss::kCrossEntropy);
Matrix input_gradients(const ParamVector& theta, const Matrix& x, const std::vector<int>& labels,
                       Loss loss = Loss::kCrossEntropy);

// Text format: architecture header then one value per line at 17 digits.
void save_params(const ParamVector& theta, const std::filesystem::path& path);
ParamVector load_params(const std::filesystem::path& path);
std::string serialize_params(const ParamVector& theta);
ParamVector parse_params(const std::string& text);

}  // namespace projnorm
