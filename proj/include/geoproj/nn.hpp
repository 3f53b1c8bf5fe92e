#pragma once

// Residual architectures (Regular, Proj/Exp/Flow x IAA/FAA, ProbAnchor),
// AdamW, gradient clipping, the plateau scheduler and checkpoints.

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geoproj/geometry.hpp"
#include "geoproj/tape.hpp"

namespace geoproj::nn {

using Json = nlohmann::json;
using Mat = Tensor<double>;

enum class Variant { Regular, ProjIAA, ExpIAA, FlowIAA, ProjFAA, ExpFAA, FlowFAA, ProbAnchor };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);
bool is_iaa(Variant v);
bool is_faa(Variant v);
bool uses_exp(Variant v);
bool uses_flow(Variant v);

struct ModelSpec {
  Variant variant = Variant::Regular;
  std::string kernel = "sphere:3";
  int depth = 4;
  double dt_init = -1.0;     // <= 0 means 1 / depth
  bool learn_dt = true;
  double dropout = 0.0;
  int anchors = 64;          // ProbAnchor only
  std::string projector;     // Flow variants: projector checkpoint stem

  ManifoldKernel manifold() const { return ManifoldKernel::parse(kernel); }
  int dim() const { return manifold().ambient_dim(); }
  double resolved_dt() const { return dt_init > 0.0 ? dt_init : 1.0 / depth; }

  Json to_json() const;
  static ModelSpec from_json(const Json& j);
};

/// A projection applied inside the tape for the Flow variants.
class DifferentiableProjector {
 public:
  virtual ~DifferentiableProjector() = default;
  virtual int dim() const = 0;
  /// Records the projection of every row of x on x's tape.
  virtual Var<double> apply(Var<double> x) const = 0;
};

/// Nearest anchor, ties broken by the lowest index.
int prob_anchor_label(const Eigen::VectorXd& y, const Mat& anchors);
std::vector<int> prob_anchor_labels(const Mat& y, const Mat& anchors);

/// p = softmax(logits) (1 x N), loss = ||p - e_label||^2, y_hat = p Y.
struct AnchorPrediction {
  Eigen::VectorXd p;
  double loss = 0.0;
  Eigen::VectorXd y_hat;
};
AnchorPrediction prob_anchor_loss_and_predict(const Eigen::VectorXd& logits, int label, const Mat& anchors);

/// `count` distinct rows of `targets` chosen by a seeded shuffle.
Mat select_anchors(const Mat& targets, int count, std::uint64_t seed);

class Model {
 public:
  Model(ModelSpec spec, std::shared_ptr<const DifferentiableProjector> flow = nullptr);

  const ModelSpec& spec() const noexcept { return spec_; }
  const ManifoldKernel& kernel() const noexcept { return kernel_; }
  int dim() const noexcept { return dim_; }

  ParameterStore<double>& params() noexcept { return params_; }
  const ParameterStore<double>& params() const noexcept { return params_; }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, all step
  /// sizes set to the spec's initial value.
  void init(std::uint64_t seed);
  /// Sets every weight and bias to zero (step sizes kept).
  void zero_weights();

  const Mat& anchors() const noexcept { return anchors_; }
  void set_anchors(Mat anchors);

  struct Forward {
    Var<double> output;               // prediction, n x d
    std::vector<Var<double>> states;  // x_0 .. x_L (IAA: all feasible)
    std::optional<Var<double>> probs; // ProbAnchor
  };

  /// Records the forward pass. `rng` is required when training with dropout.
  Forward forward(Tape<double>& tape, Var<double> x, bool training = false, DropoutRng* rng = nullptr) const;

  /// Training loss: MSE over coordinates, or the simplex loss for ProbAnchor.
  Var<double> loss(Tape<double>& tape, const Forward& fwd, const Mat& target) const;

  /// Inference without gradients.
  Mat predict(const Mat& x) const;
  /// Inference returning every layer state.
  std::vector<Mat> trace(const Mat& x) const;

 private:
  Var<double> block(Tape<double>& tape, int i, Var<double> x, bool training, DropoutRng* rng) const;
  Var<double> geometric_update(Tape<double>& tape, Var<double> base, Var<double> features, Var<double> step) const;
  Var<double> project(Var<double> x) const;
  void check_input(const Mat& x) const;

  ModelSpec spec_;
  ManifoldKernel kernel_;
  int dim_;
  std::shared_ptr<const DifferentiableProjector> flow_;
  ParameterStore<double> params_;
  Mat anchors_;
};

/// Mean over rows of ||a_i - b_i||^2 (sum over coordinates).
double test_mse(const Mat& pred, const Mat& target);

Mat to_tensor(const Eigen::MatrixXd& m);
Eigen::MatrixXd from_tensor(const Mat& t);

// ---------------------------------------------------------------------------
// Optimization

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename S>
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParameterStore<S>& store, AdamWConfig cfg);

  void step(ParameterStore<S>& store, const std::vector<Tensor<S>>& grads, double lr);

  const AdamWConfig& config() const noexcept { return cfg_; }
  long steps() const noexcept { return t_; }
  std::vector<Tensor<S>>& m() noexcept { return m_; }
  std::vector<Tensor<S>>& v() noexcept { return v_; }
  void set_steps(long t) noexcept { t_ = t; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor<S>> m_;
  std::vector<Tensor<S>> v_;
  long t_ = 0;
};

/// Scales grads in place so the global norm is <= max_norm; returns the
/// norm before clipping.
template <typename S>
double clip_grad_norm(std::vector<Tensor<S>>& grads, double max_norm);

/// ReduceLROnPlateau in "min" mode with a relative threshold.
class PlateauScheduler {
 public:
  PlateauScheduler() = default;
  PlateauScheduler(double lr, double factor, int patience, double threshold = 1e-4, double min_lr = 0.0);

  /// Feeds one validation loss and returns the learning rate to use next.
  double step(double val_loss);

  double lr() const noexcept { return lr_; }
  double best() const noexcept { return best_; }
  int bad_epochs() const noexcept { return bad_; }

  Json to_json() const;
  static PlateauScheduler from_json(const Json& j);

 private:
  double lr_ = 1e-3;
  double factor_ = 0.5;
  int patience_ = 100;
  double threshold_ = 1e-4;
  double min_lr_ = 0.0;
  double best_ = 0.0;
  bool has_best_ = false;
  int bad_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: <stem>.json manifest + <stem>.bin little-endian float64 blob.

struct TensorGroup {
  std::string name;
  std::vector<std::string> names;
  std::vector<Mat> tensors;
};

TensorGroup group_from_store(const std::string& group, const ParameterStore<double>& store);
void load_group_into(const TensorGroup& g, ParameterStore<double>& store);

/// Writes the blob and returns the manifest with an added "index" entry.
void save_checkpoint(const std::string& stem, Json manifest, const std::vector<TensorGroup>& groups);
/// Reads the manifest and every group named in its index.
Json load_checkpoint(const std::string& stem, std::vector<TensorGroup>& groups);

void save_model(const std::string& stem, const Model& model, const Json& extra = Json::object());
Model load_model(const std::string& stem, std::shared_ptr<const DifferentiableProjector> flow = nullptr);

}  // namespace geoproj::nn
