#include "geoproj/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "geoproj/error.hpp"
#include "geoproj/oracles.hpp"

namespace geoproj::harness {

namespace fs = std::filesystem;
using nn::Model;
using nn::ModelSpec;
using nn::ParameterStore;
using nn::Tape;
using nn::TensorGroup;
using nn::Variant;

namespace {

Error config_error(const std::string& what) { return Error(ErrorCode::Config, what); }

std::string env_root() {
  const char* r = std::getenv("GEOPROJ_OUT_ROOT");
  return r != nullptr ? std::string(r) : std::string();
}

// Inputs are looked up as given first, then under the output root.
std::string resolve_in(const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute() || fs::exists(path)) return path;
  const std::string root = env_root();
  if (!root.empty() && fs::exists(fs::path(root) / path)) return (fs::path(root) / path).string();
  return path;
}

void ensure_parent(const std::string& path) {
  const fs::path p = fs::path(path).parent_path();
  if (!p.empty()) fs::create_directories(p);
}

void write_json(const std::string& path, const Json& j) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  out << j.dump(2) << '\n';
}

Json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  return Json::parse(in);
}

template <typename T>
T get_or(const Json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw config_error(std::string("bad value for '") + key + "'");
  }
}

Mat rows_of(const Eigen::MatrixXd& m, const std::vector<int>& idx) {
  Mat out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(idx[i]);
  return out;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string wd_tag(double wd) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", wd);
  return buf;
}

class AnalyticProjector final : public nn::DifferentiableProjector {
 public:
  explicit AnalyticProjector(ManifoldKernel m) : m_(std::move(m)) {}
  int dim() const override { return m_.ambient_dim(); }
  nn::Var<double> apply(nn::Var<double> x) const override { return nn::project_rows(x, m_); }

 private:
  ManifoldKernel m_;
};

double residual_of_rows(const ManifoldKernel& m, const Mat& y, double* max_out) {
  double sum = 0.0, mx = 0.0;
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    const double r = residual_total(m, y.row(i).transpose());
    sum += r;
    mx = std::max(mx, r);
  }
  if (max_out != nullptr) *max_out = mx;
  return y.rows() > 0 ? sum / static_cast<double>(y.rows()) : 0.0;
}

}  // namespace

std::string resolve_out(const std::string& path) {
  const std::string root = env_root();
  if (root.empty() || path.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(root) / path).string();
}

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::from_json(const Json& j) {
  RunConfig c;
  c.data = get_or<std::string>(j, "data", "");
  c.out = get_or<std::string>(j, "out", c.out);
  if (c.data.empty()) throw config_error("missing required flag --data (dataset CSV)");
  if (!j.contains("variant")) throw config_error("missing required flag --variant");
  try {
    c.model.variant = nn::parse_variant(j.at("variant").get<std::string>());
  } catch (const Error& e) {
    throw config_error(e.what());
  }
  c.model.kernel = get_or<std::string>(j, "kernel", "");
  c.model.depth = get_or<int>(j, "depth", 4);
  c.model.dt_init = get_or<double>(j, "dt_init", -1.0);
  c.model.learn_dt = get_or<bool>(j, "learn_dt", true);
  c.model.dropout = get_or<double>(j, "dropout", 0.0);
  c.model.anchors = get_or<int>(j, "anchors", 64);
  c.projector = get_or<std::string>(j, "projector", c.projector);
  c.lr = get_or<double>(j, "lr", c.lr);
  c.weight_decay = get_or<double>(j, "weight_decay", c.weight_decay);
  c.epochs = get_or<int>(j, "epochs", c.epochs);
  c.batch = get_or<int>(j, "batch", c.batch);
  if (j.contains("seed") && !j.at("seed").is_null()) c.seed = get_or<std::uint64_t>(j, "seed", 0);
  c.plateau_factor = get_or<double>(j, "plateau_factor", c.plateau_factor);
  c.plateau_patience = get_or<int>(j, "plateau_patience", c.plateau_patience);
  c.early_stop_patience = get_or<int>(j, "early_stop_patience", c.early_stop_patience);
  c.clip = get_or<double>(j, "clip", c.clip);
  c.checkpoint_every = get_or<int>(j, "checkpoint_every", c.checkpoint_every);
  c.stop_after = get_or<int>(j, "stop_after", c.stop_after);
  c.resume = get_or<bool>(j, "resume", c.resume);
  if (get_or<bool>(j, "paper_budget", false)) {
    c.epochs = 10000;
    c.plateau_patience = 1000;
    c.early_stop_patience = 1000;
  }
  if (j.contains("sweep")) {
    const Json& s = j.at("sweep");
    if (s.is_boolean()) {
      if (s.get<bool>()) {
        c.sweep_depths = {4, 6, 8};
        c.sweep_weight_decays = {0.0, 1e-4};
      }
    } else {
      c.sweep_depths = get_or<std::vector<int>>(s, "depths", {4, 6, 8});
      c.sweep_weight_decays = get_or<std::vector<double>>(s, "weight_decays", {0.0, 1e-4});
    }
  }
  c.jobs = get_or<int>(j, "jobs", c.jobs);
  return c;
}

Json RunConfig::to_json() const {
  Json j{{"data", data},
         {"out", out},
         {"variant", nn::to_string(model.variant)},
         {"kernel", model.kernel},
         {"depth", model.depth},
         {"dt_init", model.dt_init},
         {"learn_dt", model.learn_dt},
         {"dropout", model.dropout},
         {"anchors", model.anchors},
         {"projector", projector},
         {"lr", lr},
         {"weight_decay", weight_decay},
         {"epochs", epochs},
         {"batch", batch},
         {"seed", seed ? Json(*seed) : Json(nullptr)},
         {"plateau_factor", plateau_factor},
         {"plateau_patience", plateau_patience},
         {"early_stop_patience", early_stop_patience},
         {"clip", clip},
         {"jobs", jobs}};
  if (!sweep_depths.empty()) j["sweep"] = {{"depths", sweep_depths}, {"weight_decays", sweep_weight_decays}};
  return j;
}

void RunConfig::validate() const {
  if (data.empty()) throw config_error("missing required flag --data (dataset CSV)");
  if (!seed) throw config_error("missing required flag --seed");
  if (model.depth < 1) throw config_error("depth must be >= 1");
  if (epochs < 0) throw config_error("epochs must be >= 0");
  if (batch < 1) throw config_error("batch must be >= 1");
  if (!(lr > 0.0)) throw config_error("lr must be positive");
  if (weight_decay < 0.0) throw config_error("weight_decay must be >= 0");
  if (model.dropout < 0.0 || model.dropout >= 1.0) throw config_error("dropout must be in [0, 1)");
  if (jobs < 1) throw config_error("jobs must be >= 1");
  for (int d : sweep_depths)
    if (d < 1) throw config_error("sweep depths must be >= 1");
}

std::shared_ptr<const nn::DifferentiableProjector> make_projector(const std::string& source,
                                                                  const ManifoldKernel& m) {
  if (source.empty() || source == "analytic") return std::make_shared<AnalyticProjector>(m);
  auto p = std::make_shared<flow::LearnedProjector>(flow::load_projector(resolve_in(source)));
  if (p->dim() != m.ambient_dim()) {
    throw Error(ErrorCode::ShapeMismatch, "projector dimension " + std::to_string(p->dim()) +
                                              " does not match kernel " + m.name());
  }
  p->method = flow::Integrator::Euler;
  return p;
}

// ---------------------------------------------------------------------------
// History

Json history_to_json(const std::vector<HistoryEntry>& h) {
  Json a = Json::array();
  for (const auto& e : h) a.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"lr", e.lr}});
  return a;
}

std::vector<HistoryEntry> history_from_json(const Json& j) {
  std::vector<HistoryEntry> h;
  for (const auto& e : j) {
    h.push_back({e.at("epoch").get<int>(), e.at("train_loss").get<double>(), e.at("val_loss").get<double>(),
                 e.at("lr").get<double>()});
  }
  return h;
}

void write_history_csv(const std::string& path, const std::vector<HistoryEntry>& h) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  out << "epoch,train_loss,val_loss,lr\n";
  for (const auto& e : h) {
    out << e.epoch << ',' << fmt_double(e.train_loss) << ',' << fmt_double(e.val_loss) << ',' << fmt_double(e.lr)
        << '\n';
  }
}

Json TrainResult::to_json() const {
  return Json{{"dir", dir},
              {"initial_val", initial_val},
              {"best_val", best_val},
              {"best_epoch", best_epoch},
              {"epochs_run", epochs_run},
              {"finished", finished},
              {"history", history_to_json(history)}};
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

struct LoopState {
  int epoch = 0;
  double lr = 0.0;
  double initial_val = 0.0;
  double best_val = 0.0;
  int best_epoch = 0;
  int since_best = 0;
  bool finished = false;
  std::vector<HistoryEntry> history;
  ParameterStore<double> best;
  nn::PlateauScheduler sched;
};

double eval_loss(const Model& model, const Mat& x, const Mat& y) {
  Tape<double> tape;
  tape.set_grad_enabled(false);
  const auto fwd = model.forward(tape, tape.constant(x));
  return model.loss(tape, fwd, y).value()(0, 0);
}

TensorGroup moments_group(const std::string& name, const ParameterStore<double>& like,
                          const std::vector<Mat>& values) {
  TensorGroup g{name, {}, {}};
  for (int i = 0; i < like.size(); ++i) {
    g.names.push_back(like.name(i));
    g.tensors.push_back(values.empty() ? Mat::Zero(like.at(i).rows(), like.at(i).cols())
                                       : values[static_cast<std::size_t>(i)]);
  }
  return g;
}

const TensorGroup& need_group(const std::vector<TensorGroup>& groups, const std::string& name,
                              const std::string& stem) {
  for (const auto& g : groups)
    if (g.name == name) return g;
  throw Error(ErrorCode::Io, stem + ": missing group " + name);
}

void save_state(const std::string& stem, const RunConfig& cfg, const Model& model, const nn::AdamW<double>& opt,
                const LoopState& st) {
  Json m{{"kind", "train_state"},
         {"config", cfg.to_json()},
         {"spec", model.spec().to_json()},
         {"epoch", st.epoch},
         {"lr", st.lr},
         {"initial_val", st.initial_val},
         {"best_val", st.best_val},
         {"best_epoch", st.best_epoch},
         {"since_best", st.since_best},
         {"finished", st.finished},
         {"adam_steps", opt.steps()},
         {"scheduler", st.sched.to_json()},
         {"history", history_to_json(st.history)}};
  auto& o = const_cast<nn::AdamW<double>&>(opt);
  std::vector<TensorGroup> groups{nn::group_from_store("params", model.params()),
                                  nn::group_from_store("best", st.best),
                                  moments_group("adam_m", model.params(), o.m()),
                                  moments_group("adam_v", model.params(), o.v())};
  if (model.spec().variant == Variant::ProbAnchor) groups.push_back(TensorGroup{"anchors", {"Y"}, {model.anchors()}});
  nn::save_checkpoint(stem, std::move(m), groups);
}

void load_state(const std::string& stem, Model& model, nn::AdamW<double>& opt, LoopState& st) {
  std::vector<TensorGroup> groups;
  const Json m = nn::load_checkpoint(stem, groups);
  if (m.value("kind", "") != "train_state") throw Error(ErrorCode::Io, stem + ": not a training state");
  if (ModelSpec::from_json(m.at("spec")).to_json() != model.spec().to_json()) {
    throw config_error(stem + ": saved model spec differs from the requested one");
  }
  nn::load_group_into(need_group(groups, "params", stem), model.params());
  st.best = model.params();
  nn::load_group_into(need_group(groups, "best", stem), st.best);
  const auto& gm = need_group(groups, "adam_m", stem);
  const auto& gv = need_group(groups, "adam_v", stem);
  opt.m() = gm.tensors;
  opt.v() = gv.tensors;
  opt.set_steps(m.at("adam_steps").get<long>());
  for (const auto& g : groups)
    if (g.name == "anchors") model.set_anchors(g.tensors.at(0));
  st.epoch = m.at("epoch").get<int>();
  st.lr = m.at("lr").get<double>();
  st.initial_val = m.at("initial_val").get<double>();
  st.best_val = m.at("best_val").get<double>();
  st.best_epoch = m.at("best_epoch").get<int>();
  st.since_best = m.at("since_best").get<int>();
  st.finished = m.at("finished").get<bool>();
  st.sched = nn::PlateauScheduler::from_json(m.at("scheduler"));
  st.history = history_from_json(m.at("history"));
}

}  // namespace

TrainResult train_loop(const RunConfig& cfg_in) {
  cfg_in.validate();
  RunConfig cfg = cfg_in;
  const dyn::TrajectoryDataset ds = dyn::load_dataset(resolve_in(cfg.data));
  if (cfg.model.kernel.empty()) cfg.model.kernel = ds.kernel().name();
  if (cfg.model.manifold().ambient_dim() != ds.dim()) {
    throw Error(ErrorCode::ShapeMismatch, "model kernel " + cfg.model.kernel + " expects dimension " +
                                              std::to_string(cfg.model.dim()) + ", dataset has " +
                                              std::to_string(ds.dim()));
  }
  ModelSpec spec = cfg.model;
  std::shared_ptr<const nn::DifferentiableProjector> proj;
  if (nn::uses_flow(spec.variant)) {
    spec.projector = cfg.projector;
    proj = make_projector(cfg.projector, spec.manifold());
  }

  const auto tr = ds.indices(dyn::Split::Train);
  const auto va = ds.indices(dyn::Split::Val);
  if (tr.empty() || va.empty()) throw config_error("dataset needs non-empty train and val splits");
  const Mat xtr = rows_of(ds.x0, tr), ytr = rows_of(ds.xT, tr);
  const Mat xva = rows_of(ds.x0, va), yva = rows_of(ds.xT, va);

  const std::uint64_t seed = *cfg.seed;
  Model model(spec, proj);
  model.init(seed);
  if (spec.variant == Variant::ProbAnchor) model.set_anchors(nn::select_anchors(ytr, spec.anchors, seed));

  const std::string dir = resolve_out(cfg.out);
  fs::create_directories(dir);
  const std::string state_stem = (fs::path(dir) / "state").string();
  const std::string best_stem = (fs::path(dir) / "best").string();

  nn::AdamW<double> opt(model.params(), nn::AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  LoopState st;
  if (cfg.resume && fs::exists(state_stem + ".json")) {
    load_state(state_stem, model, opt, st);
  } else {
    st.lr = cfg.lr;
    st.initial_val = eval_loss(model, xva, yva);
    if (!std::isfinite(st.initial_val)) throw Error(ErrorCode::DivergedLoss, "non-finite initial validation loss");
    st.best_val = st.initial_val;
    st.best = model.params();
    st.sched = nn::PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience);
  }

  const int n = static_cast<int>(tr.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  int ran_here = 0;
  while (!st.finished && st.epoch < cfg.epochs) {
    if (cfg.stop_after > 0 && ran_here >= cfg.stop_after) break;
    const int epoch = st.epoch + 1;
    const std::uint64_t eseed = mix_seed(seed ^ mix_seed(static_cast<std::uint64_t>(epoch)));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuf(eseed);
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[static_cast<std::size_t>(shuf() % (i + 1))]);

    double train_sum = 0.0;
    for (int start = 0, b = 0; start < n; start += cfg.batch, ++b) {
      const int m = std::min(cfg.batch, n - start);
      Mat xb(m, xtr.cols()), yb(m, ytr.cols());
      for (int r = 0; r < m; ++r) {
        const int src = order[static_cast<std::size_t>(start + r)];
        xb.row(r) = xtr.row(src);
        yb.row(r) = ytr.row(src);
      }
      nn::DropoutRng drng(mix_seed(eseed ^ mix_seed(static_cast<std::uint64_t>(b) + 1)));
      Tape<double> tape;
      const auto fwd = model.forward(tape, tape.constant(std::move(xb)), true, &drng);
      const auto loss = model.loss(tape, fwd, yb);
      const double lv = loss.value()(0, 0);
      if (!std::isfinite(lv)) {
        throw Error(ErrorCode::DivergedLoss, "non-finite training loss at epoch " + std::to_string(epoch));
      }
      train_sum += lv * m;
      tape.backward(loss);
      auto grads = tape.parameter_grads(model.params());
      if (cfg.clip > 0.0) nn::clip_grad_norm(grads, cfg.clip);
      opt.step(model.params(), grads, st.lr);
    }

    const double val = eval_loss(model, xva, yva);
    if (!std::isfinite(val)) throw Error(ErrorCode::DivergedLoss, "non-finite validation loss at epoch " + std::to_string(epoch));
    st.history.push_back({epoch, train_sum / n, val, st.lr});
    st.epoch = epoch;
    ++ran_here;
    if (val < st.best_val) {
      st.best_val = val;
      st.best_epoch = epoch;
      st.best = model.params();
      st.since_best = 0;
    } else if (++st.since_best >= cfg.early_stop_patience) {
      st.finished = true;
    }
    st.lr = st.sched.step(val);
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) save_state(state_stem, cfg, model, opt, st);
  }
  if (st.epoch >= cfg.epochs) st.finished = true;

  save_state(state_stem, cfg, model, opt, st);
  Model best(spec, proj);
  best.params() = st.best;
  if (spec.variant == Variant::ProbAnchor) best.set_anchors(model.anchors());
  nn::save_model(best_stem, best,
                 Json{{"best_val", st.best_val},
                      {"best_epoch", st.best_epoch},
                      {"initial_val", st.initial_val},
                      {"config", cfg.to_json()},
                      {"history", history_to_json(st.history)}});
  write_history_csv((fs::path(dir) / "history.csv").string(), st.history);

  TrainResult res;
  res.dir = dir;
  res.initial_val = st.initial_val;
  res.best_val = st.best_val;
  res.best_epoch = st.best_epoch;
  res.epochs_run = st.epoch;
  res.finished = st.finished;
  res.history = std::move(st.history);
  return res;
}

// ---------------------------------------------------------------------------
// Selection and metrics

std::size_t select_run(const std::vector<SweepRun>& runs) {
  if (runs.empty()) throw config_error("no completed sweep runs to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < runs.size(); ++i) {
    const auto& a = runs[i];
    const auto& b = runs[best];
    if (a.best_val < b.best_val ||
        (a.best_val == b.best_val && std::tie(a.depth, a.weight_decay) < std::tie(b.depth, b.weight_decay))) {
      best = i;
    }
  }
  return best;
}

const std::vector<std::string>& metrics_fields() {
  static const std::vector<std::string> f{"variant",       "kernel",       "checkpoint", "n_test",
                                          "test_mse",      "mean_residual", "max_residual", "history"};
  return f;
}

Json MetricsReport::to_json() const {
  return Json{{"variant", variant},
              {"kernel", kernel},
              {"checkpoint", checkpoint},
              {"n_test", n_test},
              {"test_mse", test_mse},
              {"mean_residual", mean_residual},
              {"max_residual", max_residual},
              {"history", history_to_json(history)}};
}

namespace {

Model load_for_eval(const std::string& stem, Json* manifest) {
  std::vector<TensorGroup> groups;
  Json m = nn::load_checkpoint(stem, groups);
  if (m.value("kind", "") != "model") throw config_error(stem + " is not a model checkpoint");
  const ModelSpec spec = ModelSpec::from_json(m.at("spec"));
  std::shared_ptr<const nn::DifferentiableProjector> proj;
  if (nn::uses_flow(spec.variant)) proj = make_projector(spec.projector, spec.manifold());
  if (manifest != nullptr) *manifest = std::move(m);
  return nn::load_model(stem, proj);
}

}  // namespace

MetricsReport evaluate_model(const std::string& checkpoint, const dyn::TrajectoryDataset& ds) {
  Json manifest;
  const Model model = load_for_eval(checkpoint, &manifest);
  if (model.dim() != ds.dim()) throw Error(ErrorCode::ShapeMismatch, "checkpoint and dataset dimensions differ");
  const auto te = ds.indices(dyn::Split::Test);
  if (te.empty()) throw config_error("dataset has no test rows");
  const Mat x = rows_of(ds.x0, te), y = rows_of(ds.xT, te);
  const Mat pred = model.predict(x);

  MetricsReport r;
  r.variant = nn::to_string(model.spec().variant);
  r.kernel = model.kernel().name();
  r.checkpoint = checkpoint;
  r.n_test = static_cast<int>(te.size());
  r.test_mse = nn::test_mse(pred, y);
  r.mean_residual = residual_of_rows(model.kernel(), pred, &r.max_residual);
  if (manifest.contains("history")) r.history = history_from_json(manifest.at("history"));
  return r;
}

Json run_sweep(const RunConfig& cfg) {
  cfg.validate();
  std::vector<int> depths = cfg.sweep_depths.empty() ? std::vector<int>{cfg.model.depth} : cfg.sweep_depths;
  std::vector<double> wds =
      cfg.sweep_weight_decays.empty() ? std::vector<double>{cfg.weight_decay} : cfg.sweep_weight_decays;

  std::vector<RunConfig> jobs;
  for (int d : depths) {
    for (double wd : wds) {
      RunConfig c = cfg;
      c.sweep_depths.clear();
      c.sweep_weight_decays.clear();
      c.model.depth = d;
      c.weight_decay = wd;
      c.out = (fs::path(cfg.out) / ("d" + std::to_string(d) + "_wd" + wd_tag(wd))).string();
      jobs.push_back(std::move(c));
    }
  }

  std::vector<TrainResult> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        results[i] = train_loop(jobs[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int threads = std::min<int>(cfg.jobs, static_cast<int>(jobs.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<SweepRun> runs;
  Json runs_json = Json::array();
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    Json rj{{"depth", jobs[i].model.depth}, {"weight_decay", jobs[i].weight_decay}};
    if (errors[i]) {
      try {
        std::rethrow_exception(errors[i]);
      } catch (const std::exception& e) {
        rj["error"] = e.what();
      }
    } else {
      runs.push_back({jobs[i].model.depth, jobs[i].weight_decay, results[i].dir, results[i].best_val});
      rj["dir"] = results[i].dir;
      rj["best_val"] = results[i].best_val;
      rj["best_epoch"] = results[i].best_epoch;
      rj["epochs_run"] = results[i].epochs_run;
    }
    runs_json.push_back(std::move(rj));
  }
  if (runs.empty()) {
    std::rethrow_exception(errors.front());
  }
  const SweepRun& sel = runs[select_run(runs)];
  const dyn::TrajectoryDataset ds = dyn::load_dataset(resolve_in(cfg.data));
  const MetricsReport metrics = evaluate_model((fs::path(sel.dir) / "best").string(), ds);

  const std::string dir = resolve_out(cfg.out);
  Json report{{"runs", runs_json},
              {"selected", {{"depth", sel.depth}, {"weight_decay", sel.weight_decay}, {"dir", sel.dir}, {"best_val", sel.best_val}}},
              {"metrics", metrics.to_json()}};
  write_json((fs::path(dir) / "sweep.json").string(), report);
  write_json((fs::path(dir) / "metrics.json").string(), metrics.to_json());
  return report;
}

// ---------------------------------------------------------------------------
// Projector training

namespace {

Mat unique_points(const dyn::TrajectoryDataset& ds, const std::vector<int>& idx) {
  std::set<std::vector<double>> seen;
  std::vector<std::vector<double>> rows;
  for (int i : idx) {
    for (const Eigen::MatrixXd* src : {&ds.x0, &ds.xT}) {
      std::vector<double> r(static_cast<std::size_t>(ds.dim()));
      for (int j = 0; j < ds.dim(); ++j) r[static_cast<std::size_t>(j)] = (*src)(i, j);
      if (seen.insert(r).second) rows.push_back(std::move(r));
    }
  }
  Mat out(static_cast<Eigen::Index>(rows.size()), ds.dim());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < ds.dim(); ++j) out(static_cast<Eigen::Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
  return out;
}

}  // namespace

Json train_projector(const Json& cfg) {
  const std::string data = get_or<std::string>(cfg, "data", "");
  if (data.empty()) throw config_error("missing required flag --data (dataset CSV)");
  if (!cfg.contains("seed") || cfg.at("seed").is_null()) throw config_error("missing required flag --seed");
  const dyn::TrajectoryDataset ds = dyn::load_dataset(resolve_in(data));
  const Mat train_pts = unique_points(ds, ds.indices(dyn::Split::Train));
  const Mat val_pts = unique_points(ds, ds.indices(dyn::Split::Val));
  if (train_pts.rows() == 0 || val_pts.rows() == 0) throw config_error("dataset needs non-empty train and val splits");

  flow::FlowTrainConfig base;
  base.net.dim = ds.dim();
  base.net.width = get_or<int>(cfg, "width", base.net.width);
  base.net.blocks = get_or<int>(cfg, "blocks", base.net.blocks);
  base.net.dropout = get_or<double>(cfg, "dropout", base.net.dropout);
  base.alpha = get_or<double>(cfg, "alpha", base.alpha);
  base.horizon = get_or<double>(cfg, "horizon", base.horizon);
  base.epochs = get_or<int>(cfg, "epochs", base.epochs);
  base.batch = get_or<int>(cfg, "batch", base.batch);
  base.lr = get_or<double>(cfg, "lr", base.lr);
  base.weight_decay = get_or<double>(cfg, "weight_decay", base.weight_decay);
  base.clip = get_or<double>(cfg, "clip", base.clip);
  base.plateau_factor = get_or<double>(cfg, "plateau_factor", base.plateau_factor);
  base.plateau_patience = get_or<int>(cfg, "plateau_patience", base.plateau_patience);
  base.early_stop_patience = get_or<int>(cfg, "early_stop_patience", base.early_stop_patience);
  base.seed = get_or<std::uint64_t>(cfg, "seed", 0);
  if (base.epochs < 0 || base.batch < 1 || !(base.lr > 0.0) || !(base.alpha > 0.0)) {
    throw config_error("projector training needs epochs >= 0, batch >= 1, lr > 0 and alpha > 0");
  }

  std::vector<double> lrs{base.lr}, wds{base.weight_decay}, alphas{base.alpha};
  if (cfg.contains("sweep") && cfg.at("sweep").is_object()) {
    const Json& s = cfg.at("sweep");
    lrs = get_or<std::vector<double>>(s, "lrs", lrs);
    wds = get_or<std::vector<double>>(s, "weight_decays", wds);
    alphas = get_or<std::vector<double>>(s, "alphas", alphas);
  }

  const std::string dir = resolve_out(get_or<std::string>(cfg, "out", "runs/projector"));
  fs::create_directories(dir);
  Json runs = Json::array();
  std::optional<flow::FlowTrainResult> best;
  flow::FlowTrainConfig best_cfg;
  for (double a : alphas) {
    for (double lr : lrs) {
      for (double wd : wds) {
        flow::FlowTrainConfig c = base;
        c.alpha = a;
        c.lr = lr;
        c.weight_decay = wd;
        flow::FlowTrainResult r = flow::train_velocity(train_pts, val_pts, c);
        runs.push_back({{"alpha", a}, {"lr", lr}, {"weight_decay", wd}, {"best_val", r.best_val},
                        {"best_epoch", r.best_epoch}, {"epochs_run", r.epochs_run}});
        if (!best || r.best_val < best->best_val) {
          best = std::move(r);
          best_cfg = c;
        }
      }
    }
  }

  std::vector<HistoryEntry> hist;
  for (const auto& e : best->history) hist.push_back({e.epoch, e.train_loss, e.val_loss, e.lr});
  write_history_csv((fs::path(dir) / "history.csv").string(), hist);
  const flow::LearnedProjector proj(best_cfg.net, best->best, best->horizon);
  const std::string stem = (fs::path(dir) / "projector").string();
  flow::save_projector(stem, proj,
                       Json{{"alpha", best_cfg.alpha},
                            {"train", best_cfg.to_json()},
                            {"best_val", best->best_val},
                            {"best_epoch", best->best_epoch},
                            {"initial_val", best->initial_val},
                            {"history", history_to_json(hist)}});
  return Json{{"projector", stem},
              {"horizon", best->horizon},
              {"initial_val", best->initial_val},
              {"best_val", best->best_val},
              {"best_epoch", best->best_epoch},
              {"epochs_run", best->epochs_run},
              {"n_train_points", train_pts.rows()},
              {"n_val_points", val_pts.rows()},
              {"runs", runs}};
}

// ---------------------------------------------------------------------------
// Point CSV

Mat read_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      const char c = line.find_first_not_of(" \t") == std::string::npos ? '\0' : line[line.find_first_not_of(" \t")];
      if (!(std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '+' || c == '.')) continue;
    }
    std::vector<double> r;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) throw Error(ErrorCode::Io, path + ": non-numeric cell '" + cell + "'");
      r.push_back(v);
    }
    if (!rows.empty() && r.size() != rows.front().size()) throw Error(ErrorCode::Io, path + ": ragged rows");
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw Error(ErrorCode::Io, path + ": no rows");
  Mat x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return x;
}

void write_points_csv(const std::string& path, const Mat& x) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  for (Eigen::Index j = 0; j < x.cols(); ++j) out << (j ? ",x" : "x") << j;
  out << '\n';
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) out << (j ? "," : "") << fmt_double(x(i, j));
    out << '\n';
  }
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path);
}

// ---------------------------------------------------------------------------
// Entry points

Json gen_data(const Json& args) {
  dyn::GeneratorSpec g;
  g.name = get_or<std::string>(args, "dataset", "");
  if (g.name.empty()) throw config_error("missing required flag --dataset");
  static const std::set<std::string> known{"sphere", "so3", "disk", "cs", "protein", "circle"};
  if (!known.count(g.name)) throw config_error("unknown dataset '" + g.name + "'");
  if (!args.contains("seed") || args.at("seed").is_null()) throw config_error("missing required flag --seed");
  const int n = get_or<int>(args, "n", 1000);
  if (n < 1) throw config_error("n must be >= 1");
  g.horizon = get_or<double>(args, "horizon", g.horizon);
  g.dt = get_or<double>(args, "dt", g.dt);
  g.alpha = get_or<double>(args, "alpha", g.alpha);
  g.kappa = get_or<double>(args, "kappa", g.kappa);
  g.agents = get_or<int>(args, "agents", g.agents);
  g.chain_length = get_or<int>(args, "chain_length", g.chain_length);
  g.field_seed = get_or<std::uint64_t>(args, "field_seed", g.field_seed);
  const std::uint64_t seed = get_or<std::uint64_t>(args, "seed", 0);

  const std::string csv = resolve_out(get_or<std::string>(args, "out", "data/" + g.name + ".csv"));
  ensure_parent(csv);
  const dyn::TrajectoryDataset ds = dyn::make_pairs(g, n, seed);
  const std::string manifest = dyn::manifest_path_for(csv);
  dyn::save_dataset(ds, csv, manifest);
  return Json{{"csv", csv},
              {"manifest", manifest},
              {"rows", ds.size()},
              {"dim", ds.dim()},
              {"kernel", ds.kernel().name()},
              {"splits",
               {{"train", ds.indices(dyn::Split::Train).size()},
                {"val", ds.indices(dyn::Split::Val).size()},
                {"test", ds.indices(dyn::Split::Test).size()}}}};
}

Json train(const Json& args) {
  if (get_or<std::string>(args, "target", "model") == "projector") return train_projector(args);
  const RunConfig cfg = RunConfig::from_json(args);
  if (!cfg.sweep_depths.empty()) return run_sweep(cfg);
  return train_loop(cfg).to_json();
}

namespace {

std::vector<double> sigma_list(const Json& args) {
  if (!args.contains("noise_sigma")) return {};
  const Json& s = args.at("noise_sigma");
  if (s.is_number()) return {s.get<double>()};
  auto v = get_or<std::vector<double>>(args, "noise_sigma", {});
  for (double x : v)
    if (x < 0.0) throw config_error("noise sigma must be >= 0");
  return v;
}

Mat add_noise(const Mat& x, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Mat y = x;
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    for (Eigen::Index j = 0; j < y.cols(); ++j) y(i, j) += sigma * nd(rng);
  return y;
}

flow::Integrator parse_method(const std::string& s) {
  if (s == "adaptive") return flow::Integrator::Adaptive;
  if (s == "euler") return flow::Integrator::Euler;
  throw config_error("unknown integration method '" + s + "' (euler | adaptive)");
}

void write_curve_csv(const std::string& path, const Json& curve) {
  ensure_parent(path);
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  out << "sigma,mse,mean_residual,max_residual\n";
  for (const auto& c : curve) {
    out << fmt_double(c.at("sigma").get<double>()) << ',' << fmt_double(c.at("mse").get<double>()) << ','
        << fmt_double(c.at("mean_residual").get<double>()) << ',' << fmt_double(c.at("max_residual").get<double>())
        << '\n';
  }
}

}  // namespace

Json evaluate(const Json& args) {
  const std::string ckpt = resolve_in(get_or<std::string>(args, "checkpoint", ""));
  if (ckpt.empty()) throw config_error("missing required flag --checkpoint");
  const std::string data = get_or<std::string>(args, "data", "");
  if (data.empty()) throw config_error("missing required flag --data (dataset CSV)");
  const dyn::TrajectoryDataset ds = dyn::load_dataset(resolve_in(data));
  const auto sigmas = sigma_list(args);
  const std::uint64_t seed = get_or<std::uint64_t>(args, "seed", 0);
  const std::string out = get_or<std::string>(args, "out", "");
  const std::string curve_out = get_or<std::string>(args, "noise_out", "");

  const Json manifest = read_json(ckpt + ".json");
  const std::string kind = manifest.value("kind", "");
  const auto te = ds.indices(dyn::Split::Test);
  if (te.empty()) throw config_error("dataset has no test rows");
  const ManifoldKernel kernel = ds.kernel();

  Json report;
  Json curve = Json::array();
  if (kind == "projector") {
    if (sigmas.empty()) throw config_error("projector evaluation needs --noise-sigma");
    flow::LearnedProjector p = flow::load_projector(ckpt);
    if (p.dim() != ds.dim()) throw Error(ErrorCode::ShapeMismatch, "projector and dataset dimensions differ");
    p.method = parse_method(get_or<std::string>(args, "method", "adaptive"));
    p.euler_steps = get_or<int>(args, "steps", p.euler_steps);
    const Mat x = rows_of(ds.x0, te);
    for (std::size_t k = 0; k < sigmas.size(); ++k) {
      const Mat noisy = add_noise(x, sigmas[k], mix_seed(seed ^ mix_seed(k + 1)));
      const Mat learned = p.project(noisy);
      Mat exact(noisy.rows(), noisy.cols());
      for (Eigen::Index i = 0; i < noisy.rows(); ++i) exact.row(i) = metric_project(kernel, noisy.row(i).transpose()).transpose();
      double mx = 0.0;
      const double mean_res = residual_of_rows(kernel, learned, &mx);
      curve.push_back({{"sigma", sigmas[k]}, {"mse", nn::test_mse(learned, exact)}, {"mean_residual", mean_res}, {"max_residual", mx}});
    }
    report = Json{{"kind", "projector"}, {"checkpoint", ckpt}, {"kernel", kernel.name()}, {"n_test", te.size()}, {"noise_curve", curve}};
  } else if (kind == "model") {
    report = evaluate_model(ckpt, ds).to_json();
    if (!sigmas.empty()) {
      const Model model = load_for_eval(ckpt, nullptr);
      if (nn::is_iaa(model.spec().variant) || model.spec().variant == Variant::ExpFAA) {
        throw config_error(nn::to_string(model.spec().variant) + " requires on-manifold inputs; noise sweep unavailable");
      }
      const Mat x = rows_of(ds.x0, te), y = rows_of(ds.xT, te);
      for (std::size_t k = 0; k < sigmas.size(); ++k) {
        const Mat pred = model.predict(add_noise(x, sigmas[k], mix_seed(seed ^ mix_seed(k + 1))));
        double mx = 0.0;
        const double mean_res = residual_of_rows(model.kernel(), pred, &mx);
        curve.push_back({{"sigma", sigmas[k]}, {"mse", nn::test_mse(pred, y)}, {"mean_residual", mean_res}, {"max_residual", mx}});
      }
      report["noise_curve"] = curve;
    }
  } else {
    throw config_error(ckpt + ": unknown checkpoint kind '" + kind + "'");
  }

  if (!curve.empty()) {
    const std::string cpath =
        resolve_out(curve_out.empty() ? (fs::path(ckpt).parent_path() / "noise_curve.csv").string() : curve_out);
    write_curve_csv(cpath, curve);
    report["noise_csv"] = cpath;
  }
  const std::string rpath = resolve_out(out.empty() ? (fs::path(ckpt).parent_path() / "metrics.json").string() : out);
  write_json(rpath, report);
  return report;
}

Json project(const Json& args) {
  const std::string input = resolve_in(get_or<std::string>(args, "input", ""));
  if (input.empty()) throw config_error("missing required flag --input");
  const std::string source = get_or<std::string>(args, "projector", "");
  if (source.empty()) throw config_error("missing required flag --projector");
  const Mat x = read_points_csv(input);
  Mat y(x.rows(), x.cols());
  std::string used;
  if (source.rfind("analytic:", 0) == 0) {
    ManifoldKernel m = ManifoldKernel::parse(source.substr(9));
    if (m.ambient_dim() != x.cols()) throw Error(ErrorCode::ShapeMismatch, "points do not match kernel " + m.name());
    for (Eigen::Index i = 0; i < x.rows(); ++i) y.row(i) = metric_project(m, x.row(i).transpose()).transpose();
    used = "analytic:" + m.name();
  } else {
    flow::LearnedProjector p = flow::load_projector(resolve_in(source));
    if (p.dim() != x.cols()) throw Error(ErrorCode::ShapeMismatch, "points do not match projector dimension");
    p.method = parse_method(get_or<std::string>(args, "method", "adaptive"));
    p.euler_steps = get_or<int>(args, "steps", p.euler_steps);
    flow::IntegrationStats stats;
    y = p.project(x, &stats);
    used = source;
  }
  const std::string out = resolve_out(get_or<std::string>(args, "output", ""));
  if (out.empty()) throw config_error("missing required flag --output");
  write_points_csv(out, y);
  return Json{{"projector", used}, {"rows", x.rows()}, {"output", out}};
}

Json verify(const Json& args) {
  const std::string check = get_or<std::string>(args, "check", "");
  if (check.empty()) throw config_error("missing required flag --check");
  const std::uint64_t seed = get_or<std::uint64_t>(args, "seed", 0);
  Json results = Json::array();
  bool pass = true;

  if (check == "varadhan") {
    const auto m = oracle::parse_heat_manifold(get_or<std::string>(args, "manifold", "circle"));
    const int d = m == oracle::HeatManifold::Circle ? 2 : 3;
    Eigen::VectorXd x = Eigen::VectorXd::Zero(d);
    x(0) = 1.3;
    if (args.contains("point")) {
      const auto p = get_or<std::vector<double>>(args, "point", {});
      if (static_cast<int>(p.size()) != d) throw config_error("point needs " + std::to_string(d) + " coordinates");
      x = Eigen::Map<const Eigen::VectorXd>(p.data(), d);
    }
    const auto grid = oracle::log_grid(get_or<double>(args, "t_min", 1e-5), get_or<double>(args, "t_max", 1e-2),
                                       get_or<int>(args, "t_count", 12));
    auto fit = oracle::verify_varadhan_rate(m, x, grid, get_or<int>(args, "nodes", 8192));
    Json r = fit.to_json();
    r["manifold"] = oracle::to_string(m);
    r["point"] = std::vector<double>(x.data(), x.data() + x.size());
    results.push_back(r);
    pass = fit.pass;
  } else if (check == "gronwall") {
    oracle::GronwallOptions opt;
    opt.field_alpha = get_or<double>(args, "alpha", opt.field_alpha);
    opt.dt = get_or<double>(args, "dt", opt.dt);
    opt.samples = get_or<int>(args, "samples", opt.samples);
    opt.seed = seed;
    const auto deltas = args.contains("delta") && args.at("delta").is_number()
                            ? std::vector<double>{args.at("delta").get<double>()}
                            : get_or<std::vector<double>>(args, "delta", {1e-4, 1e-3, 1e-2});
    const auto horizons = args.contains("horizon") && args.at("horizon").is_number()
                              ? std::vector<double>{args.at("horizon").get<double>()}
                              : get_or<std::vector<double>>(args, "horizon", {0.5, 1.0});
    for (double h : horizons) {
      for (double dl : deltas) {
        const auto b = oracle::verify_gronwall_bound(dl, h, opt);
        results.push_back(b.to_json());
        pass = pass && b.pass;
      }
    }
  } else if (check == "faa") {
    std::string mname = get_or<std::string>(args, "manifold", "sphere");
    if (mname == "sphere") mname = "sphere:3";
    const ManifoldKernel m = ManifoldKernel::parse(mname);
    const auto eps = args.contains("eps") && args.at("eps").is_number()
                         ? std::vector<double>{args.at("eps").get<double>()}
                         : get_or<std::vector<double>>(args, "eps", {0.01, 0.1});
    const auto mode = oracle::parse_perturb_mode(get_or<std::string>(args, "mode", "random"));
    for (double e : eps) {
      const auto c = oracle::verify_faa_2eps(m, e, mode, get_or<int>(args, "samples", 1000), seed);
      results.push_back(c.to_json());
      pass = pass && c.pass;
    }
  } else if (check == "exp") {
    const auto c = oracle::verify_exp_representation(Eigen::Vector3d::UnitZ(), oracle::smooth_sphere_map(),
                                                     get_or<int>(args, "grid", 50));
    results.push_back(c.to_json());
    pass = c.pass;
  } else {
    throw config_error("unknown check '" + check + "' (varadhan | gronwall | faa | exp)");
  }
  return Json{{"check", check}, {"results", results}, {"status", pass ? "PASS" : "FAIL"}};
}

}  // namespace geoproj::harness
