#pragma once

// Learned projection onto a point cloud: a velocity field fitted by flow
// matching on noised samples, integrated backwards in time.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "geoproj/nn.hpp"

namespace geoproj::flow {

using nn::Json;
using nn::Mat;

struct VelocityNetSpec {
  int dim = 2;  // data dimension d; the input is [y, t]
  int width = 256;
  int blocks = 8;
  double dropout = 0.1;

  Json to_json() const;
  static VelocityNetSpec from_json(const Json& j);
};

/// LayerNorm gammas 1, betas 0, linear layers uniform(+-1/sqrt(fan_in)).
nn::ParameterStore<double> init_velocity(const VelocityNetSpec& spec, std::uint64_t seed);

/// v(y, t) for every row of `input` = [y, t]. Parameters enter the tape as
/// gradient-carrying leaves when `trainable`, as constants otherwise.
template <typename S>
nn::Var<S> velocity_forward(nn::Tape<S>& tape, const nn::ParameterStore<S>& params, const VelocityNetSpec& spec,
                            nn::Var<S> input, bool training = false, nn::DropoutRng* rng = nullptr,
                            bool trainable = true);

/// Batched inference in double precision.
Mat velocity_eval(const nn::ParameterStore<double>& params, const VelocityNetSpec& spec, const Mat& y, double t);

struct FlowPairs {
  Mat input;   // rows [y, t]
  Mat target;  // rows v
  double horizon = 0.0;
  int size() const { return static_cast<int>(input.rows()); }
};

/// How the per-point velocities are drawn.
struct NoiseModel {
  bool normalized = true;  // v = 0.5 u / (|u| + 1e-8), u ~ N(0, I)
  Eigen::VectorXd mean;    // otherwise v ~ mean + stddev * N(0, I)
  double stddev = 1.0;
};

inline constexpr int kTimeGrid = 30;

/// T = 2 alpha median |x| when horizon <= 0.
double auto_horizon(const Mat& x, double alpha);

/// kTimeGrid pairs per point on the uniform grid t_k = T k / (kTimeGrid - 1).
FlowPairs gen_flow_pairs(const Mat& x, double alpha, double horizon, std::uint64_t seed,
                         const NoiseModel& noise = {});

/// (1/n) sum_i ||v_pred_i - v_target_i||^2.
double flowmatch_loss(const Mat& v_pred, const Mat& v_target);

struct FlowTrainConfig {
  VelocityNetSpec net;
  double alpha = 0.5;
  double horizon = -1.0;  // <= 0: auto rule
  int epochs = 500;
  int batch = 256;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double clip = 1.0;
  double plateau_factor = 0.5;
  int plateau_patience = 100;
  int early_stop_patience = 1000;
  std::uint64_t seed = 0;
  NoiseModel noise;
  std::function<void(int epoch, double train, double val, double lr)> on_epoch;

  Json to_json() const;
};

struct FlowHistoryEntry {
  int epoch;
  double train_loss;
  double val_loss;
  double lr;
};

struct FlowTrainResult {
  nn::ParameterStore<double> best;
  double horizon = 0.0;
  double initial_val = 0.0;
  double best_val = 0.0;
  int best_epoch = 0;
  int epochs_run = 0;
  std::vector<FlowHistoryEntry> history;
};

/// Trains on fresh pairs from `train_points` every epoch and selects the
/// parameters with the lowest loss on fixed pairs from `val_points`.
FlowTrainResult train_velocity(const Mat& train_points, const Mat& val_points, const FlowTrainConfig& cfg);

enum class Integrator { Euler, Adaptive };

struct IntegrationStats {
  long steps = 0;
  long rejected = 0;
  long evaluations = 0;
};

class LearnedProjector final : public nn::DifferentiableProjector {
 public:
  LearnedProjector(VelocityNetSpec spec, nn::ParameterStore<double> params, double horizon);

  /// dx/ds = -v(x, T - s), s from 0 to T, for every row of x0.
  Mat project(const Mat& x0, IntegrationStats* stats = nullptr) const;
  Eigen::VectorXd project_point(const Eigen::VectorXd& x0) const;

  /// Differentiable fixed-step Euler reverse flow with the velocity frozen.
  nn::Var<double> apply(nn::Var<double> x) const override;
  int dim() const override { return spec_.dim; }

  Integrator method = Integrator::Adaptive;
  int euler_steps = 20;  // fixed-step Euler, also used by apply()
  double rtol = 1e-6;
  double atol = 1e-8;
  long max_steps = 100000;

  double horizon() const noexcept { return horizon_; }
  const VelocityNetSpec& spec() const noexcept { return spec_; }
  const nn::ParameterStore<double>& params() const noexcept { return params_; }

  Mat velocity(const Mat& x, double t) const { return velocity_eval(params_, spec_, x, t); }

 private:
  VelocityNetSpec spec_;
  nn::ParameterStore<double> params_;
  double horizon_;
};

void save_projector(const std::string& stem, const LearnedProjector& p, const Json& extra = Json::object());
LearnedProjector load_projector(const std::string& stem);

/// Analytic projection rows for the unit circle.
Mat circle_project(const Mat& x);

}  // namespace geoproj::flow
