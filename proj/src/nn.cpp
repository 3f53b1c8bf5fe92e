#include "geoproj/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "geoproj/error.hpp"

namespace geoproj::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace {

constexpr double kInputTol = 1e-6;

double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

struct VariantName {
  Variant v;
  const char* name;
};

constexpr VariantName kVariantNames[] = {
    {Variant::Regular, "Regular"}, {Variant::ProjIAA, "ProjIAA"}, {Variant::ExpIAA, "ExpIAA"},
    {Variant::FlowIAA, "FlowIAA"}, {Variant::ProjFAA, "ProjFAA"}, {Variant::ExpFAA, "ExpFAA"},
    {Variant::FlowFAA, "FlowFAA"}, {Variant::ProbAnchor, "ProbAnchor"},
};

std::string block_name(int i, const char* what) { return "block" + std::to_string(i) + "." + what; }

}  // namespace

std::string to_string(Variant v) {
  for (const auto& e : kVariantNames)
    if (e.v == v) return e.name;
  return "?";
}

Variant parse_variant(const std::string& s) {
  std::string lower = s;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (const auto& e : kVariantNames) {
    std::string n = e.name;
    std::transform(n.begin(), n.end(), n.begin(), [](unsigned char c) { return std::tolower(c); });
    if (n == lower) return e.v;
  }
  throw Error(ErrorCode::Config, "unknown model variant '" + s + "'");
}

bool is_iaa(Variant v) { return v == Variant::ProjIAA || v == Variant::ExpIAA || v == Variant::FlowIAA; }
bool is_faa(Variant v) { return v == Variant::ProjFAA || v == Variant::ExpFAA || v == Variant::FlowFAA; }
bool uses_exp(Variant v) { return v == Variant::ExpIAA || v == Variant::ExpFAA; }
bool uses_flow(Variant v) { return v == Variant::FlowIAA || v == Variant::FlowFAA; }

Json ModelSpec::to_json() const {
  return Json{{"variant", to_string(variant)}, {"kernel", kernel},   {"depth", depth},
              {"dt_init", dt_init},            {"learn_dt", learn_dt}, {"dropout", dropout},
              {"anchors", anchors},            {"projector", projector}};
}

ModelSpec ModelSpec::from_json(const Json& j) {
  ModelSpec s;
  s.variant = parse_variant(j.at("variant").get<std::string>());
  s.kernel = j.value("kernel", s.kernel);
  s.depth = j.value("depth", s.depth);
  s.dt_init = j.value("dt_init", s.dt_init);
  s.learn_dt = j.value("learn_dt", s.learn_dt);
  s.dropout = j.value("dropout", s.dropout);
  s.anchors = j.value("anchors", s.anchors);
  s.projector = j.value("projector", s.projector);
  return s;
}

// ---------------------------------------------------------------------------
// Anchors

int prob_anchor_label(const Eigen::VectorXd& y, const Mat& anchors) {
  if (anchors.rows() == 0) throw Error(ErrorCode::Config, "prob_anchor_label: no anchors");
  if (anchors.cols() != y.size()) throw Error(ErrorCode::ShapeMismatch, "prob_anchor_label: dimension");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index n = 0; n < anchors.rows(); ++n) {
    const double d = (anchors.row(n).transpose() - y).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(n);
    }
  }
  return best;
}

std::vector<int> prob_anchor_labels(const Mat& y, const Mat& anchors) {
  std::vector<int> out(static_cast<std::size_t>(y.rows()));
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    out[static_cast<std::size_t>(i)] = prob_anchor_label(y.row(i).transpose(), anchors);
  }
  return out;
}

AnchorPrediction prob_anchor_loss_and_predict(const Eigen::VectorXd& logits, int label, const Mat& anchors) {
  if (logits.size() != anchors.rows()) throw Error(ErrorCode::ShapeMismatch, "logits size != anchor count");
  if (label < 0 || label >= logits.size()) throw Error(ErrorCode::Config, "label out of range");
  AnchorPrediction r;
  r.p = (logits.array() - logits.maxCoeff()).exp();
  r.p /= r.p.sum();
  Eigen::VectorXd e = Eigen::VectorXd::Zero(logits.size());
  e(label) = 1.0;
  r.loss = (r.p - e).squaredNorm();
  r.y_hat = anchors.transpose() * r.p;
  return r;
}

Mat select_anchors(const Mat& targets, int count, std::uint64_t seed) {
  const int n = static_cast<int>(targets.rows());
  if (count <= 0 || n == 0) throw Error(ErrorCode::Config, "select_anchors: need a positive count and targets");
  count = std::min(count, n);
  std::vector<int> idx(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(mix_seed(seed ^ 0xa11c0de5ULL));
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  Mat out(count, targets.cols());
  for (int i = 0; i < count; ++i) out.row(i) = targets.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(ModelSpec spec, std::shared_ptr<const DifferentiableProjector> flow)
    : spec_(std::move(spec)), kernel_(spec_.manifold()), dim_(kernel_.ambient_dim()), flow_(std::move(flow)) {
  if (spec_.depth < 1) throw Error(ErrorCode::Config, "depth must be >= 1");
  if (spec_.dropout < 0.0 || spec_.dropout >= 1.0) throw Error(ErrorCode::Config, "dropout must lie in [0, 1)");
  if (uses_exp(spec_.variant) && !kernel_.has_exp()) {
    throw Error(ErrorCode::UnsupportedManifold, to_string(spec_.variant) + " needs an exponential map on " + kernel_.name());
  }
  if (uses_flow(spec_.variant)) {
    if (!flow_) throw Error(ErrorCode::Config, to_string(spec_.variant) + " needs a learned projector");
    if (flow_->dim() != dim_) throw Error(ErrorCode::ShapeMismatch, "projector dimension does not match the kernel");
  }
  const Eigen::Index d = dim_;
  for (int i = 0; i < spec_.depth; ++i) {
    params_.add(block_name(i, "w1"), Mat::Zero(d, d));
    params_.add(block_name(i, "b1"), Mat::Zero(1, d));
    params_.add(block_name(i, "w2"), Mat::Zero(d, d));
    params_.add(block_name(i, "b2"), Mat::Zero(1, d));
  }
  if (spec_.learn_dt) params_.add("dt", Mat::Constant(1, spec_.depth, spec_.resolved_dt()));
  if (uses_exp(spec_.variant)) {
    const Eigen::Index m = kernel_.exp_coord_dim();
    params_.add("head.w", Mat::Zero(d, m));
    params_.add("head.b", Mat::Zero(1, m));
  }
  if (spec_.variant == Variant::ProbAnchor) {
    if (spec_.anchors < 1) throw Error(ErrorCode::Config, "ProbAnchor needs at least one anchor");
    params_.add("anchor.w", Mat::Zero(d, spec_.anchors));
    params_.add("anchor.b", Mat::Zero(1, spec_.anchors));
  }
}

void Model::init(std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed));
  for (int i = 0; i < params_.size(); ++i) {
    if (params_.name(i) == "dt") {
      params_.at(i).setConstant(spec_.resolved_dt());
      continue;
    }
    Mat& p = params_.at(i);
    // Biases share the fan-in of their weight, which precedes them.
    const bool bias = params_.name(i).find(".b") != std::string::npos;
    const Eigen::Index fan_in = bias ? params_.at(i - 1).rows() : p.rows();
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index k = 0; k < p.size(); ++k) p.data()[k] = bound * (2.0 * unit_uniform(rng) - 1.0);
  }
}

void Model::zero_weights() {
  for (int i = 0; i < params_.size(); ++i)
    if (params_.name(i) != "dt") params_.at(i).setZero();
}

void Model::set_anchors(Mat anchors) {
  if (spec_.variant != Variant::ProbAnchor) throw Error(ErrorCode::Config, "anchors only apply to ProbAnchor");
  if (anchors.rows() != spec_.anchors || anchors.cols() != dim_) {
    throw Error(ErrorCode::ShapeMismatch, "anchor matrix must be anchors x dim");
  }
  anchors_ = std::move(anchors);
}

void Model::check_input(const Mat& x) const {
  if (x.cols() != dim_) {
    throw Error(ErrorCode::ShapeMismatch,
                "input width " + std::to_string(x.cols()) + " != model dimension " + std::to_string(dim_));
  }
  const Variant v = spec_.variant;
  if (!(is_iaa(v) || v == Variant::ExpFAA)) return;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const AmbientVector row = x.row(r).transpose();
    if (!row.allFinite() || residual_total(kernel_, row) > kInputTol) {
      throw Error(ErrorCode::OffManifoldInput, "input row " + std::to_string(r) + " is off " + kernel_.name());
    }
  }
}

Var<double> Model::block(Tape<double>& tape, int i, Var<double> x, bool training, DropoutRng* rng) const {
  auto h = linear(x, tape.parameter(params_, block_name(i, "w1")), tape.parameter(params_, block_name(i, "b1")));
  h = relu(h);
  h = dropout(h, spec_.dropout, training, rng);
  return linear(h, tape.parameter(params_, block_name(i, "w2")), tape.parameter(params_, block_name(i, "b2")));
}

Var<double> Model::project(Var<double> x) const {
  if (uses_flow(spec_.variant)) return flow_->apply(x);
  return project_rows(x, kernel_);
}

Var<double> Model::geometric_update(Tape<double>& tape, Var<double> base, Var<double> features,
                                    Var<double> step) const {
  auto coords = linear(features, tape.parameter(params_, "head.w"), tape.parameter(params_, "head.b"));
  if (step.tape != nullptr) coords = mul_scalar(coords, step);

  std::vector<ManifoldKernel> factors;
  std::vector<int> offsets;
  if (kernel_.kind() == KernelKind::Product) {
    factors = kernel_.factors();
    offsets = kernel_.factor_offsets();
  } else {
    factors = {kernel_};
    offsets = {0};
  }
  std::vector<Var<double>> parts;
  int coord_off = 0;
  for (std::size_t k = 0; k < factors.size(); ++k) {
    const auto& f = factors[k];
    const int m = f.exp_coord_dim();
    auto c = slice_cols(coords, coord_off, m);
    auto b = slice_cols(base, offsets[k], f.ambient_dim());
    if (f.kind() == KernelKind::Sphere) {
      parts.push_back(sphere_exp_rows(b, sphere_tangent_rows(b, c)));
    } else {
      parts.push_back(lie_exp_rows(c, b));
    }
    coord_off += m;
  }
  return parts.size() == 1 ? parts.front() : concat_cols(parts);
}

Model::Forward Model::forward(Tape<double>& tape, Var<double> x, bool training, DropoutRng* rng) const {
  check_input(x.value());
  Forward out;
  out.states.push_back(x);
  const Variant v = spec_.variant;
  Var<double> dt_all{};
  if (spec_.learn_dt) dt_all = tape.parameter(params_, "dt");

  for (int i = 0; i < spec_.depth; ++i) {
    Var<double> step = spec_.learn_dt ? slice_cols(dt_all, i, 1)
                                      : tape.constant(Mat::Constant(1, 1, spec_.resolved_dt()));
    auto f = block(tape, i, x, training, rng);
    if (v == Variant::ExpIAA) {
      x = geometric_update(tape, x, f, step);
    } else {
      x = add(x, mul_scalar(f, step));
      if (v == Variant::ProjIAA || v == Variant::FlowIAA) x = project(x);
    }
    out.states.push_back(x);
  }

  switch (v) {
    case Variant::ProjFAA:
    case Variant::FlowFAA:
      out.output = project(x);
      break;
    case Variant::ExpFAA:
      out.output = geometric_update(tape, out.states.front(), x, Var<double>{});
      break;
    case Variant::ProbAnchor: {
      if (anchors_.rows() != spec_.anchors) throw Error(ErrorCode::Config, "ProbAnchor model has no anchors set");
      auto logits = linear(x, tape.parameter(params_, "anchor.w"), tape.parameter(params_, "anchor.b"));
      auto p = softmax_rows(logits);
      out.probs = p;
      out.output = matmul(p, tape.constant(anchors_));
      break;
    }
    default:
      out.output = x;
  }
  return out;
}

Var<double> Model::loss(Tape<double>& tape, const Forward& fwd, const Mat& target) const {
  if (target.rows() != fwd.output.rows() || target.cols() != dim_) {
    throw Error(ErrorCode::ShapeMismatch, "target shape does not match the prediction");
  }
  if (spec_.variant == Variant::ProbAnchor) {
    const auto labels = prob_anchor_labels(target, anchors_);
    Mat onehot = Mat::Zero(target.rows(), spec_.anchors);
    for (Eigen::Index i = 0; i < target.rows(); ++i) onehot(i, labels[static_cast<std::size_t>(i)]) = 1.0;
    return sse_mean_rows(*fwd.probs, tape.constant(std::move(onehot)));
  }
  return mse(fwd.output, tape.constant(target));
}

Mat Model::predict(const Mat& x) const {
  Tape<double> tape;
  tape.set_grad_enabled(false);
  return forward(tape, tape.constant(x)).output.value();
}

std::vector<Mat> Model::trace(const Mat& x) const {
  Tape<double> tape;
  tape.set_grad_enabled(false);
  const auto fwd = forward(tape, tape.constant(x));
  std::vector<Mat> out;
  for (const auto& s : fwd.states) out.push_back(s.value());
  out.push_back(fwd.output.value());
  return out;
}

double test_mse(const Mat& pred, const Mat& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw Error(ErrorCode::ShapeMismatch, "test_mse: shapes differ");
  }
  if (pred.rows() == 0) return 0.0;
  return (pred - target).squaredNorm() / static_cast<double>(pred.rows());
}

Mat to_tensor(const Eigen::MatrixXd& m) { return m; }
Eigen::MatrixXd from_tensor(const Mat& t) { return t; }

// ---------------------------------------------------------------------------
// Optimization

template <typename S>
AdamW<S>::AdamW(const ParameterStore<S>& store, AdamWConfig cfg) : cfg_(cfg) {
  for (int i = 0; i < store.size(); ++i) {
    m_.push_back(Tensor<S>::Zero(store.at(i).rows(), store.at(i).cols()));
    v_.push_back(Tensor<S>::Zero(store.at(i).rows(), store.at(i).cols()));
  }
}

template <typename S>
void AdamW<S>::step(ParameterStore<S>& store, const std::vector<Tensor<S>>& grads, double lr) {
  if (static_cast<int>(grads.size()) != store.size() || static_cast<int>(m_.size()) != store.size()) {
    throw Error(ErrorCode::ShapeMismatch, "AdamW: gradient count does not match parameters");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const S step_size = static_cast<S>(lr / bc1);
  const S inv_sqrt_bc2 = static_cast<S>(1.0 / std::sqrt(bc2));
  const S decay = static_cast<S>(1.0 - lr * cfg_.weight_decay);
  const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2), eps = static_cast<S>(cfg_.eps);
  for (int i = 0; i < store.size(); ++i) {
    auto& p = store.at(i);
    const auto& g = grads[static_cast<std::size_t>(i)];
    auto& m = m_[static_cast<std::size_t>(i)];
    auto& v = v_[static_cast<std::size_t>(i)];
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw Error(ErrorCode::ShapeMismatch, "AdamW: gradient shape");
    if (cfg_.weight_decay != 0.0) p *= decay;
    m = b1 * m + (S(1) - b1) * g;
    v.array() = b2 * v.array() + (S(1) - b2) * g.array().square();
    p.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_bc2 + eps);
  }
}

template <typename S>
double clip_grad_norm(std::vector<Tensor<S>>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) sq += static_cast<double>(g.squaredNorm());
  const double total = std::sqrt(sq);
  const double coef = max_norm / (total + 1e-6);
  if (coef < 1.0) {
    for (auto& g : grads) g *= static_cast<S>(coef);
  }
  return total;
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_grad_norm(std::vector<Tensor<float>>&, double);
template double clip_grad_norm(std::vector<Tensor<double>>&, double);

PlateauScheduler::PlateauScheduler(double lr, double factor, int patience, double threshold, double min_lr)
    : lr_(lr), factor_(factor), patience_(patience), threshold_(threshold), min_lr_(min_lr) {}

double PlateauScheduler::step(double val_loss) {
  if (!std::isfinite(val_loss)) throw Error(ErrorCode::DivergedLoss, "scheduler received a non-finite loss");
  if (!has_best_ || val_loss < best_ * (1.0 - threshold_)) {
    best_ = val_loss;
    has_best_ = true;
    bad_ = 0;
  } else {
    ++bad_;
  }
  if (bad_ > patience_) {
    lr_ = std::max(lr_ * factor_, min_lr_);
    bad_ = 0;
  }
  return lr_;
}

Json PlateauScheduler::to_json() const {
  return Json{{"lr", lr_},         {"factor", factor_}, {"patience", patience_}, {"threshold", threshold_},
              {"min_lr", min_lr_}, {"best", best_},     {"has_best", has_best_}, {"bad", bad_}};
}

PlateauScheduler PlateauScheduler::from_json(const Json& j) {
  PlateauScheduler s(j.at("lr").get<double>(), j.at("factor").get<double>(), j.at("patience").get<int>(),
                     j.at("threshold").get<double>(), j.at("min_lr").get<double>());
  s.best_ = j.at("best").get<double>();
  s.has_best_ = j.at("has_best").get<bool>();
  s.bad_ = j.at("bad").get<int>();
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints

TensorGroup group_from_store(const std::string& group, const ParameterStore<double>& store) {
  TensorGroup g;
  g.name = group;
  for (int i = 0; i < store.size(); ++i) {
    g.names.push_back(store.name(i));
    g.tensors.push_back(store.at(i));
  }
  return g;
}

void load_group_into(const TensorGroup& g, ParameterStore<double>& store) {
  for (std::size_t k = 0; k < g.names.size(); ++k) {
    const int i = store.index(g.names[k]);
    if (i < 0) throw Error(ErrorCode::Io, "checkpoint has unknown parameter " + g.names[k]);
    if (store.at(i).rows() != g.tensors[k].rows() || store.at(i).cols() != g.tensors[k].cols()) {
      throw Error(ErrorCode::ShapeMismatch, "checkpoint shape mismatch for " + g.names[k]);
    }
    store.at(i) = g.tensors[k];
  }
  if (static_cast<int>(g.names.size()) != store.size()) {
    throw Error(ErrorCode::Io, "checkpoint parameter count does not match the model");
  }
}

void save_checkpoint(const std::string& stem, Json manifest, const std::vector<TensorGroup>& groups) {
  Json index = Json::array();
  std::ofstream blob(stem + ".bin", std::ios::binary);
  if (!blob) throw Error(ErrorCode::Io, "cannot write " + stem + ".bin");
  std::size_t offset = 0;
  for (const auto& g : groups) {
    for (std::size_t k = 0; k < g.tensors.size(); ++k) {
      const Mat& t = g.tensors[k];
      index.push_back({{"group", g.name}, {"name", g.names[k]}, {"shape", {t.rows(), t.cols()}}, {"offset", offset}});
      blob.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
      offset += static_cast<std::size_t>(t.size());
    }
  }
  if (!blob) throw Error(ErrorCode::Io, "failed writing " + stem + ".bin");
  manifest["index"] = std::move(index);
  manifest["blob"] = {{"file", std::filesystem::path(stem + ".bin").filename().string()}, {"dtype", "float64-le"}, {"count", offset}};
  std::ofstream js(stem + ".json");
  if (!js) throw Error(ErrorCode::Io, "cannot write " + stem + ".json");
  js << manifest.dump(2) << "\n";
}

Json load_checkpoint(const std::string& stem, std::vector<TensorGroup>& groups) {
  std::ifstream js(stem + ".json");
  if (!js) throw Error(ErrorCode::Io, "cannot read " + stem + ".json");
  Json manifest;
  try {
    js >> manifest;
  } catch (const Json::exception& e) {
    throw Error(ErrorCode::Io, stem + ".json: " + e.what());
  }
  std::ifstream blob(stem + ".bin", std::ios::binary);
  if (!blob) throw Error(ErrorCode::Io, "cannot read " + stem + ".bin");
  blob.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(blob.tellg());
  std::vector<double> data(bytes / sizeof(double));
  blob.seekg(0);
  blob.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));

  groups.clear();
  for (const auto& e : manifest.at("index")) {
    const std::string gname = e.at("group").get<std::string>();
    auto it = std::find_if(groups.begin(), groups.end(), [&](const TensorGroup& g) { return g.name == gname; });
    if (it == groups.end()) {
      groups.push_back(TensorGroup{gname, {}, {}});
      it = groups.end() - 1;
    }
    const auto rows = e.at("shape").at(0).get<Eigen::Index>();
    const auto cols = e.at("shape").at(1).get<Eigen::Index>();
    const auto off = e.at("offset").get<std::size_t>();
    if (off + static_cast<std::size_t>(rows * cols) > data.size()) {
      throw Error(ErrorCode::Io, stem + ".bin is truncated");
    }
    it->names.push_back(e.at("name").get<std::string>());
    it->tensors.push_back(Eigen::Map<const Mat>(data.data() + off, rows, cols));
  }
  return manifest;
}

namespace {

const TensorGroup* find_group(const std::vector<TensorGroup>& groups, const std::string& name) {
  for (const auto& g : groups)
    if (g.name == name) return &g;
  return nullptr;
}

}  // namespace

void save_model(const std::string& stem, const Model& model, const Json& extra) {
  Json manifest = extra;
  manifest["kind"] = "model";
  manifest["spec"] = model.spec().to_json();
  std::vector<TensorGroup> groups{group_from_store("params", model.params())};
  if (model.spec().variant == Variant::ProbAnchor) groups.push_back(TensorGroup{"anchors", {"Y"}, {model.anchors()}});
  save_checkpoint(stem, std::move(manifest), groups);
}

Model load_model(const std::string& stem, std::shared_ptr<const DifferentiableProjector> flow) {
  std::vector<TensorGroup> groups;
  const Json manifest = load_checkpoint(stem, groups);
  Model model(ModelSpec::from_json(manifest.at("spec")), std::move(flow));
  const TensorGroup* params = find_group(groups, "params");
  if (params == nullptr) throw Error(ErrorCode::Io, stem + ": no params group");
  load_group_into(*params, model.params());
  if (const TensorGroup* a = find_group(groups, "anchors")) model.set_anchors(a->tensors.at(0));
  return model;
}

}  // namespace geoproj::nn
