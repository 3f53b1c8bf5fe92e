#include "geoproj/flowmatch.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "geoproj/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif
#if defined(__SSE__)
#include <pmmintrin.h>
#include <xmmintrin.h>
#endif

namespace geoproj::flow {

using nn::DropoutRng;
using nn::ParameterStore;
using nn::Tape;
using nn::Tensor;
using nn::Var;

namespace {

std::string lin(int i, const char* what) { return "fc" + std::to_string(i) + "." + what; }
std::string ln(int i, const char* what) { return "ln" + std::to_string(i) + "." + what; }

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace

Json VelocityNetSpec::to_json() const {
  return Json{{"dim", dim}, {"width", width}, {"blocks", blocks}, {"dropout", dropout}};
}

VelocityNetSpec VelocityNetSpec::from_json(const Json& j) {
  VelocityNetSpec s;
  s.dim = j.at("dim").get<int>();
  s.width = j.value("width", s.width);
  s.blocks = j.value("blocks", s.blocks);
  s.dropout = j.value("dropout", s.dropout);
  return s;
}

ParameterStore<double> init_velocity(const VelocityNetSpec& spec, std::uint64_t seed) {
  if (spec.dim < 1 || spec.width < 1 || spec.blocks < 1) throw Error(ErrorCode::Config, "invalid velocity net spec");
  std::mt19937_64 rng(mix_seed(seed ^ 0x5e1f10ULL));
  ParameterStore<double> p;
  auto uniform = [&](Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Mat m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = bound * (2.0 * unit_uniform(rng) - 1.0);
    return m;
  };
  Eigen::Index in = spec.dim + 1;
  for (int i = 0; i < spec.blocks; ++i) {
    p.add(lin(i, "w"), uniform(in, spec.width, in));
    p.add(lin(i, "b"), uniform(1, spec.width, in));
    p.add(ln(i, "g"), Mat::Ones(1, spec.width));
    p.add(ln(i, "b"), Mat::Zero(1, spec.width));
    in = spec.width;
  }
  p.add("out.w", uniform(spec.width, spec.dim, spec.width));
  p.add("out.b", uniform(1, spec.dim, spec.width));
  return p;
}

template <typename S>
Var<S> velocity_forward(Tape<S>& tape, const ParameterStore<S>& params, const VelocityNetSpec& spec, Var<S> input,
                        bool training, DropoutRng* rng, bool trainable) {
  if (input.cols() != spec.dim + 1) throw Error(ErrorCode::ShapeMismatch, "velocity input must be [y, t]");
  auto leaf = [&](const std::string& name) {
    return trainable ? tape.parameter(params, name) : tape.constant(params.at(name));
  };
  Var<S> h = input;
  for (int i = 0; i < spec.blocks; ++i) {
    h = nn::linear(h, leaf(lin(i, "w")), leaf(lin(i, "b")));
    h = nn::layer_norm(h, leaf(ln(i, "g")), leaf(ln(i, "b")));
    h = nn::gelu(h);
    h = nn::dropout(h, static_cast<S>(spec.dropout), training, rng);
  }
  return nn::linear(h, leaf("out.w"), leaf("out.b"));
}

template Var<float> velocity_forward(Tape<float>&, const ParameterStore<float>&, const VelocityNetSpec&, Var<float>,
                                     bool, DropoutRng*, bool);
template Var<double> velocity_forward(Tape<double>&, const ParameterStore<double>&, const VelocityNetSpec&,
                                      Var<double>, bool, DropoutRng*, bool);

Mat velocity_eval(const ParameterStore<double>& params, const VelocityNetSpec& spec, const Mat& y, double t) {
  if (y.cols() != spec.dim) throw Error(ErrorCode::ShapeMismatch, "velocity_eval: dimension");
  Mat in(y.rows(), spec.dim + 1);
  in.leftCols(spec.dim) = y;
  in.col(spec.dim).setConstant(t);
  Tape<double> tape;
  tape.set_grad_enabled(false);
  return velocity_forward(tape, params, spec, tape.constant(std::move(in))).value();
}

// ---------------------------------------------------------------------------
// Pairs

double auto_horizon(const Mat& x, double alpha) {
  if (x.rows() == 0) throw Error(ErrorCode::Config, "auto_horizon: no points");
  std::vector<double> norms(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) norms[static_cast<std::size_t>(i)] = x.row(i).norm();
  std::sort(norms.begin(), norms.end());
  const std::size_t n = norms.size();
  const double median = n % 2 == 1 ? norms[n / 2] : 0.5 * (norms[n / 2 - 1] + norms[n / 2]);
  return 2.0 * alpha * median;
}

FlowPairs gen_flow_pairs(const Mat& x, double alpha, double horizon, std::uint64_t seed, const NoiseModel& noise) {
  if (x.rows() == 0) throw Error(ErrorCode::Config, "gen_flow_pairs: no points");
  const Eigen::Index n = x.rows(), d = x.cols();
  if (!noise.normalized && noise.mean.size() != 0 && noise.mean.size() != d) {
    throw Error(ErrorCode::ShapeMismatch, "noise mean dimension");
  }
  FlowPairs out;
  out.horizon = horizon > 0.0 ? horizon : auto_horizon(x, alpha);
  out.input.resize(n * kTimeGrid, d + 1);
  out.target.resize(n * kTimeGrid, d);
  std::mt19937_64 rng(mix_seed(seed));
  std::normal_distribution<double> gauss;
  Eigen::VectorXd u(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < d; ++k) u(k) = gauss(rng);
    Eigen::VectorXd v;
    if (noise.normalized) {
      v = 0.5 * u / (u.norm() + 1e-8);
    } else {
      v = noise.stddev * u;
      if (noise.mean.size() == d) v += noise.mean;
    }
    for (int k = 0; k < kTimeGrid; ++k) {
      const double t = out.horizon * static_cast<double>(k) / (kTimeGrid - 1);
      const Eigen::Index r = i * kTimeGrid + k;
      out.input.row(r).head(d) = x.row(i) + t * v.transpose();
      out.input(r, d) = t;
      out.target.row(r) = v.transpose();
    }
  }
  return out;
}

double flowmatch_loss(const Mat& v_pred, const Mat& v_target) { return nn::test_mse(v_pred, v_target); }

// ---------------------------------------------------------------------------
// Training

Json FlowTrainConfig::to_json() const {
  return Json{{"net", net.to_json()},
              {"alpha", alpha},
              {"horizon", horizon},
              {"epochs", epochs},
              {"batch", batch},
              {"lr", lr},
              {"weight_decay", weight_decay},
              {"clip", clip},
              {"plateau_factor", plateau_factor},
              {"plateau_patience", plateau_patience},
              {"early_stop_patience", early_stop_patience},
              {"seed", seed}};
}

namespace {

// Flushes float denormals (GELU tails) to zero for the lifetime of the guard.
class DenormalGuard {
 public:
  DenormalGuard() {
#if defined(__SSE__)
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040);
#endif
  }
  ~DenormalGuard() {
#if defined(__SSE__)
    _mm_setcsr(saved_);
#endif
  }
  DenormalGuard(const DenormalGuard&) = delete;
  DenormalGuard& operator=(const DenormalGuard&) = delete;

 private:
  unsigned saved_ = 0;
};

// Keeps freed tape buffers in the heap instead of returning them to the
// kernel after every batch.
void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

double eval_loss(const ParameterStore<float>& params, const VelocityNetSpec& spec, const Tensor<float>& input,
                 const Tensor<float>& target) {
  double total = 0.0;
  const Eigen::Index chunk = 1024;
  for (Eigen::Index r = 0; r < input.rows(); r += chunk) {
    const Eigen::Index m = std::min(chunk, input.rows() - r);
    Tape<float> tape;
    tape.set_grad_enabled(false);
    const auto out = velocity_forward(tape, params, spec, tape.constant(input.middleRows(r, m)));
    total += (out.value() - target.middleRows(r, m)).template cast<double>().squaredNorm();
  }
  return total / static_cast<double>(input.rows());
}

}  // namespace

FlowTrainResult train_velocity(const Mat& train_points, const Mat& val_points, const FlowTrainConfig& cfg) {
  if (train_points.rows() == 0 || val_points.rows() == 0) {
    throw Error(ErrorCode::Config, "train_velocity needs training and validation points");
  }
  if (train_points.cols() != cfg.net.dim || val_points.cols() != cfg.net.dim) {
    throw Error(ErrorCode::ShapeMismatch, "point dimension does not match the velocity net");
  }
  if (cfg.batch < 1 || cfg.epochs < 0) throw Error(ErrorCode::Config, "invalid batch size or epoch count");

  tune_allocator();
  const DenormalGuard ftz;

  FlowTrainResult res;
  res.horizon = cfg.horizon > 0.0 ? cfg.horizon : auto_horizon(train_points, cfg.alpha);
  ParameterStore<double> init = init_velocity(cfg.net, cfg.seed);
  ParameterStore<float> params = init.cast<float>();
  res.best = init;

  const FlowPairs val = gen_flow_pairs(val_points, cfg.alpha, res.horizon, mix_seed(cfg.seed) ^ 0x7a1ULL, cfg.noise);
  const Tensor<float> val_in = val.input.cast<float>();
  const Tensor<float> val_tg = val.target.cast<float>();
  res.initial_val = eval_loss(params, cfg.net, val_in, val_tg);
  res.best_val = res.initial_val;

  nn::AdamW<float> opt(params, nn::AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  nn::PlateauScheduler sched(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
  double lr = cfg.lr;
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::uint64_t eseed = mix_seed(cfg.seed ^ mix_seed(static_cast<std::uint64_t>(epoch)));
    const FlowPairs pairs = gen_flow_pairs(train_points, cfg.alpha, res.horizon, eseed, cfg.noise);
    const Tensor<float> in = pairs.input.cast<float>();
    const Tensor<float> tg = pairs.target.cast<float>();
    std::vector<int> order(static_cast<std::size_t>(pairs.size()));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuf(eseed ^ 0x5bd1e995ULL);
    for (std::size_t i = order.size() - 1; i > 0; --i) {
      std::swap(order[i], order[static_cast<std::size_t>(shuf() % (i + 1))]);
    }

    double train_sum = 0.0;
    const int n = pairs.size();
    for (int start = 0, b = 0; start < n; start += cfg.batch, ++b) {
      const int m = std::min(cfg.batch, n - start);
      Tensor<float> bin(m, in.cols()), btg(m, tg.cols());
      for (int r = 0; r < m; ++r) {
        const int src = order[static_cast<std::size_t>(start + r)];
        bin.row(r) = in.row(src);
        btg.row(r) = tg.row(src);
      }
      DropoutRng drng(mix_seed(eseed ^ mix_seed(static_cast<std::uint64_t>(b) + 1)));
      Tape<float> tape;
      const auto pred = velocity_forward(tape, params, cfg.net, tape.constant(std::move(bin)), true, &drng);
      const auto loss = nn::sse_mean_rows(pred, tape.constant(std::move(btg)));
      const double lv = static_cast<double>(loss.value()(0, 0));
      if (!std::isfinite(lv)) throw Error(ErrorCode::DivergedLoss, "non-finite flow-matching loss at epoch " + std::to_string(epoch));
      train_sum += lv * m;
      tape.backward(loss);
      auto grads = tape.parameter_grads(params);
      nn::clip_grad_norm(grads, cfg.clip);
      opt.step(params, grads, lr);
    }

    const double train_loss = train_sum / n;
    const double val_loss = eval_loss(params, cfg.net, val_in, val_tg);
    if (!std::isfinite(val_loss)) throw Error(ErrorCode::DivergedLoss, "non-finite validation loss");
    res.history.push_back({epoch, train_loss, val_loss, lr});
    res.epochs_run = epoch;
    if (cfg.on_epoch) cfg.on_epoch(epoch, train_loss, val_loss, lr);
    if (val_loss < res.best_val) {
      res.best_val = val_loss;
      res.best_epoch = epoch;
      res.best = params.cast<double>();
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      break;
    }
    lr = sched.step(val_loss);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Projector

LearnedProjector::LearnedProjector(VelocityNetSpec spec, ParameterStore<double> params, double horizon)
    : spec_(std::move(spec)), params_(std::move(params)), horizon_(horizon) {
  if (!(horizon_ > 0.0)) throw Error(ErrorCode::Config, "projector horizon must be positive");
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
constexpr double a21 = 1.0 / 5;
constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                 a65 = -5103.0 / 18656;
constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                 e6 = 22.0 / 525, e7 = -1.0 / 40;

}  // namespace

Mat LearnedProjector::project(const Mat& x0, IntegrationStats* stats) const {
  if (x0.cols() != spec_.dim) throw Error(ErrorCode::ShapeMismatch, "project: dimension");
  if (!x0.allFinite()) throw Error(ErrorCode::Config, "project: non-finite input");
  IntegrationStats local;
  IntegrationStats& st = stats ? *stats : local;
  const double T = horizon_;
  // ds/dx = -v(x, T - s)
  auto rhs = [&](const Mat& x, double s) {
    ++st.evaluations;
    return Mat(-velocity(x, T - s));
  };
  Mat x = x0;
  if (x.rows() == 0) return x;

  if (method == Integrator::Euler) {
    if (euler_steps < 1) throw Error(ErrorCode::Config, "euler_steps must be >= 1");
    const double h = T / euler_steps;
    for (int k = 0; k < euler_steps; ++k) {
      x += h * rhs(x, k * h);
      ++st.steps;
    }
    return x;
  }

  auto error_norm = [&](const Mat& err, const Mat& y0, const Mat& y1) {
    double worst = 0.0;
    for (Eigen::Index r = 0; r < err.rows(); ++r) {
      double sq = 0.0;
      for (Eigen::Index c = 0; c < err.cols(); ++c) {
        const double sc = atol + rtol * std::max(std::abs(y0(r, c)), std::abs(y1(r, c)));
        sq += (err(r, c) / sc) * (err(r, c) / sc);
      }
      worst = std::max(worst, std::sqrt(sq / static_cast<double>(err.cols())));
    }
    return worst;
  };

  constexpr double safety = 0.9, fac_min = 0.2, fac_max = 10.0;
  constexpr double alpha = 0.7 / 5.0, beta = 0.4 / 5.0;
  double s = 0.0;
  double h = 0.01 * T;
  double err_prev = 1e-4;
  Mat k1 = rhs(x, s);
  while (s < T) {
    if (st.steps + st.rejected >= max_steps) {
      throw Error(ErrorCode::IntegratorStepLimit, "adaptive integrator exceeded " + std::to_string(max_steps) + " steps");
    }
    bool last = false;
    if (s + h >= T) {
      h = T - s;
      last = true;
    }
    const Mat k2 = rhs(x + h * (a21 * k1), s + c2 * h);
    const Mat k3 = rhs(x + h * (a31 * k1 + a32 * k2), s + c3 * h);
    const Mat k4 = rhs(x + h * (a41 * k1 + a42 * k2 + a43 * k3), s + c4 * h);
    const Mat k5 = rhs(x + h * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4), s + c5 * h);
    const Mat k6 = rhs(x + h * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5), s + h);
    const Mat xn = x + h * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    const Mat k7 = rhs(xn, s + h);
    const Mat err = h * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);
    const double en = error_norm(err, x, xn);
    if (!std::isfinite(en)) throw Error(ErrorCode::DivergedLoss, "non-finite state in the adaptive integrator");
    if (en <= 1.0) {
      s = last ? T : s + h;
      x = xn;
      k1 = k7;
      ++st.steps;
      const double fac = en == 0.0 ? fac_max
                                   : std::clamp(safety * std::pow(en, -alpha) * std::pow(err_prev, beta), fac_min, fac_max);
      err_prev = std::max(en, 1e-4);
      h *= fac;
    } else {
      ++st.rejected;
      h *= std::max(fac_min, safety * std::pow(en, -1.0 / 5.0));
    }
  }
  return x;
}

Eigen::VectorXd LearnedProjector::project_point(const Eigen::VectorXd& x0) const {
  Mat row = x0.transpose();
  return project(row).row(0).transpose();
}

Var<double> LearnedProjector::apply(Var<double> x) const {
  if (x.cols() != spec_.dim) throw Error(ErrorCode::ShapeMismatch, "projector dimension");
  Tape<double>& tape = *x.tape;
  const double h = horizon_ / euler_steps;
  for (int k = 0; k < euler_steps; ++k) {
    const double t = horizon_ - k * h;
    const auto tcol = tape.constant(Mat::Constant(x.rows(), 1, t));
    const auto v = velocity_forward(tape, params_, spec_, nn::concat_cols<double>({x, tcol}), false, nullptr, false);
    x = nn::sub(x, nn::scale(v, h));
  }
  return x;
}

void save_projector(const std::string& stem, const LearnedProjector& p, const Json& extra) {
  Json manifest = extra;
  manifest["kind"] = "projector";
  manifest["net"] = p.spec().to_json();
  manifest["horizon"] = p.horizon();
  manifest["method"] = p.method == Integrator::Adaptive ? "adaptive-rk45" : "euler";
  manifest["euler_steps"] = p.euler_steps;
  manifest["rtol"] = p.rtol;
  manifest["atol"] = p.atol;
  nn::save_checkpoint(stem, std::move(manifest), {nn::group_from_store("params", p.params())});
}

LearnedProjector load_projector(const std::string& stem) {
  std::vector<nn::TensorGroup> groups;
  const Json m = nn::load_checkpoint(stem, groups);
  if (m.value("kind", "") != "projector") throw Error(ErrorCode::Io, stem + " is not a projector checkpoint");
  const VelocityNetSpec spec = VelocityNetSpec::from_json(m.at("net"));
  ParameterStore<double> params = init_velocity(spec, 0);
  if (groups.empty()) throw Error(ErrorCode::Io, stem + ": no parameters");
  nn::load_group_into(groups.front(), params);
  LearnedProjector p(spec, std::move(params), m.at("horizon").get<double>());
  p.method = m.value("method", "adaptive-rk45") == "euler" ? Integrator::Euler : Integrator::Adaptive;
  p.euler_steps = m.value("euler_steps", p.euler_steps);
  p.rtol = m.value("rtol", p.rtol);
  p.atol = m.value("atol", p.atol);
  return p;
}

Mat circle_project(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    if (n == 0.0) throw Error(ErrorCode::ZeroInput, "circle_project: zero row");
    out.row(r) = x.row(r) / n;
  }
  return out;
}

}  // namespace geoproj::flow
