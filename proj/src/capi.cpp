#include "geoproj/geoproj.h"

#include <cstdlib>
#include <cstring>
#include <exception>
#include <memory>
#include <string>

#include "geoproj/dynamics.hpp"
#include "geoproj/error.hpp"
#include "geoproj/flowmatch.hpp"
#include "geoproj/geometry.hpp"
#include "geoproj/harness.hpp"
#include "geoproj/nn.hpp"

using geoproj::Error;
using geoproj::ErrorCode;
using geoproj::ManifoldKernel;

struct gp_kernel {
  ManifoldKernel k;
};

struct gp_dataset {
  geoproj::dyn::TrajectoryDataset ds;
};

struct gp_model {
  std::unique_ptr<geoproj::nn::Model> m;
};

struct gp_projector {
  std::unique_ptr<geoproj::flow::LearnedProjector> p;
};

namespace {

thread_local std::string g_last_error;

gp_status status_of(ErrorCode c) {
  switch (c) {
    case ErrorCode::Config: return GP_ERR_CONFIG;
    case ErrorCode::Io: return GP_ERR_IO;
    case ErrorCode::DivergedLoss: return GP_ERR_DIVERGED;
    case ErrorCode::ShapeMismatch:
    case ErrorCode::DimensionMismatch: return GP_ERR_SHAPE;
    case ErrorCode::IntegratorStepLimit: return GP_ERR_RUNTIME;
    default: return GP_ERR_GEOMETRY;
  }
}

gp_status fail(gp_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <typename F>
gp_status guarded(F&& f) {
  try {
    f();
    g_last_error.clear();
    return GP_OK;
  } catch (const Error& e) {
    return fail(status_of(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(GP_ERR_CONFIG, std::string("bad JSON: ") + e.what());
  } catch (const std::bad_alloc&) {
    return fail(GP_ERR_RUNTIME, "out of memory");
  } catch (const std::exception& e) {
    return fail(GP_ERR_RUNTIME, e.what());
  } catch (...) {
    return fail(GP_ERR_RUNTIME, "unknown error");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

using RowMat = geoproj::nn::Mat;

RowMat view_rows(const double* x, size_t rows, int dim) {
  return Eigen::Map<const RowMat>(x, static_cast<Eigen::Index>(rows), dim);
}

void store_rows(const RowMat& y, double* out) { Eigen::Map<RowMat>(out, y.rows(), y.cols()) = y; }

template <typename Fn>
gp_status json_entry(const char* request, char** report, Fn fn) {
  if (request == nullptr || report == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null request or report pointer");
  *report = nullptr;
  return guarded([&] {
    const auto req = nlohmann::json::parse(request);
    if (!req.is_object()) throw Error(ErrorCode::Config, "request must be a JSON object");
    *report = dup_string(fn(req).dump(2));
  });
}

}  // namespace

extern "C" {

const char* gp_version(void) { return "0.1.0"; }

const char* gp_last_error(void) { return g_last_error.c_str(); }

const char* gp_status_name(gp_status status) {
  switch (status) {
    case GP_OK: return "ok";
    case GP_ERR_INVALID_ARGUMENT: return "invalid argument";
    case GP_ERR_CONFIG: return "configuration error";
    case GP_ERR_RUNTIME: return "runtime error";
    case GP_ERR_IO: return "i/o error";
    case GP_ERR_GEOMETRY: return "geometry error";
    case GP_ERR_DIVERGED: return "diverged";
    case GP_ERR_SHAPE: return "shape mismatch";
  }
  return "unknown";
}

void gp_string_free(char* s) { std::free(s); }

// Kernels

gp_status gp_kernel_create(const char* name, gp_kernel** out) {
  if (name == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] { *out = new gp_kernel{ManifoldKernel::parse(name)}; });
}

void gp_kernel_free(gp_kernel* k) { delete k; }

int gp_kernel_ambient_dim(const gp_kernel* k) { return k != nullptr ? k->k.ambient_dim() : -1; }

gp_status gp_kernel_name(const gp_kernel* k, char** out) {
  if (k == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { *out = dup_string(k->k.name()); });
}

gp_status gp_kernel_project(const gp_kernel* k, const double* y, size_t rows, double* out) {
  if (k == nullptr || y == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    const int d = k->k.ambient_dim();
    const RowMat in = view_rows(y, rows, d);
    RowMat res(in.rows(), d);
    for (Eigen::Index i = 0; i < in.rows(); ++i) res.row(i) = geoproj::metric_project(k->k, in.row(i).transpose()).transpose();
    store_rows(res, out);
  });
}

gp_status gp_kernel_residual(const gp_kernel* k, const double* y, size_t rows, double* out) {
  if (k == nullptr || y == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    const int d = k->k.ambient_dim();
    const RowMat in = view_rows(y, rows, d);
    for (Eigen::Index i = 0; i < in.rows(); ++i) out[i] = geoproj::residual_total(k->k, in.row(i).transpose());
  });
}

gp_status gp_kernel_tangent_project(const gp_kernel* k, const double* x, const double* v, double* out) {
  if (k == nullptr || x == nullptr || v == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    const int d = k->k.ambient_dim();
    const Eigen::VectorXd r = geoproj::tangent_project(k->k, Eigen::Map<const Eigen::VectorXd>(x, d),
                                                       Eigen::Map<const Eigen::VectorXd>(v, d));
    Eigen::Map<Eigen::VectorXd>(out, d) = r;
  });
}

gp_status gp_kernel_exp(const gp_kernel* k, const double* x, const double* v, double* out) {
  if (k == nullptr || x == nullptr || v == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    const int d = k->k.ambient_dim();
    const Eigen::VectorXd r = geoproj::exp_map(k->k, Eigen::Map<const Eigen::VectorXd>(x, d),
                                               Eigen::Map<const Eigen::VectorXd>(v, d));
    Eigen::Map<Eigen::VectorXd>(out, d) = r;
  });
}

// Datasets

gp_status gp_dataset_generate(const char* generator, int n, uint64_t seed, gp_dataset** out) {
  if (generator == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  if (n < 1) return fail(GP_ERR_INVALID_ARGUMENT, "n must be >= 1");
  *out = nullptr;
  return guarded([&] {
    geoproj::dyn::GeneratorSpec g;
    g.name = generator;
    *out = new gp_dataset{geoproj::dyn::make_pairs(g, n, seed)};
  });
}

gp_status gp_dataset_load(const char* csv_path, gp_dataset** out) {
  if (csv_path == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] { *out = new gp_dataset{geoproj::dyn::load_dataset(csv_path)}; });
}

gp_status gp_dataset_save(const gp_dataset* ds, const char* csv_path) {
  if (ds == nullptr || csv_path == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { geoproj::dyn::save_dataset(ds->ds, csv_path, geoproj::dyn::manifest_path_for(csv_path)); });
}

void gp_dataset_free(gp_dataset* ds) { delete ds; }

int gp_dataset_rows(const gp_dataset* ds) { return ds != nullptr ? ds->ds.size() : -1; }

int gp_dataset_dim(const gp_dataset* ds) { return ds != nullptr ? ds->ds.dim() : -1; }

gp_status gp_dataset_row(const gp_dataset* ds, int i, double* x0, double* xT, gp_split* split) {
  if (ds == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null dataset");
  if (i < 0 || i >= ds->ds.size()) return fail(GP_ERR_INVALID_ARGUMENT, "row index out of range");
  const int d = ds->ds.dim();
  if (x0 != nullptr) Eigen::Map<Eigen::RowVectorXd>(x0, d) = ds->ds.x0.row(i);
  if (xT != nullptr) Eigen::Map<Eigen::RowVectorXd>(xT, d) = ds->ds.xT.row(i);
  if (split != nullptr) *split = static_cast<gp_split>(ds->ds.splits[static_cast<std::size_t>(i)]);
  g_last_error.clear();
  return GP_OK;
}

// Models

gp_status gp_model_create(const char* spec_json, uint64_t seed, gp_model** out) {
  if (spec_json == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    const auto spec = geoproj::nn::ModelSpec::from_json(nlohmann::json::parse(spec_json));
    std::shared_ptr<const geoproj::nn::DifferentiableProjector> proj;
    if (geoproj::nn::uses_flow(spec.variant)) proj = geoproj::harness::make_projector(spec.projector, spec.manifold());
    auto m = std::make_unique<geoproj::nn::Model>(spec, proj);
    m->init(seed);
    *out = new gp_model{std::move(m)};
  });
}

gp_status gp_model_load(const char* stem, gp_model** out) {
  if (stem == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    std::vector<geoproj::nn::TensorGroup> groups;
    const auto manifest = geoproj::nn::load_checkpoint(stem, groups);
    const auto spec = geoproj::nn::ModelSpec::from_json(manifest.at("spec"));
    std::shared_ptr<const geoproj::nn::DifferentiableProjector> proj;
    if (geoproj::nn::uses_flow(spec.variant)) proj = geoproj::harness::make_projector(spec.projector, spec.manifold());
    *out = new gp_model{std::make_unique<geoproj::nn::Model>(geoproj::nn::load_model(stem, proj))};
  });
}

gp_status gp_model_save(const gp_model* m, const char* stem) {
  if (m == nullptr || stem == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { geoproj::nn::save_model(stem, *m->m); });
}

void gp_model_free(gp_model* m) { delete m; }

int gp_model_dim(const gp_model* m) { return m != nullptr ? m->m->dim() : -1; }

gp_status gp_model_predict(const gp_model* m, const double* x, size_t rows, double* out) {
  if (m == nullptr || x == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { store_rows(m->m->predict(view_rows(x, rows, m->m->dim())), out); });
}

// Projectors

gp_status gp_projector_load(const char* stem, gp_projector** out) {
  if (stem == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    *out = new gp_projector{std::make_unique<geoproj::flow::LearnedProjector>(geoproj::flow::load_projector(stem))};
  });
}

void gp_projector_free(gp_projector* p) { delete p; }

int gp_projector_dim(const gp_projector* p) { return p != nullptr ? p->p->dim() : -1; }

double gp_projector_horizon(const gp_projector* p) { return p != nullptr ? p->p->horizon() : 0.0; }

gp_status gp_projector_set_method(gp_projector* p, gp_integrator method, int euler_steps) {
  if (p == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null projector");
  if (method != GP_INTEGRATOR_EULER && method != GP_INTEGRATOR_ADAPTIVE) return fail(GP_ERR_INVALID_ARGUMENT, "unknown integrator");
  if (euler_steps < 1) return fail(GP_ERR_INVALID_ARGUMENT, "euler_steps must be >= 1");
  p->p->method = method == GP_INTEGRATOR_EULER ? geoproj::flow::Integrator::Euler : geoproj::flow::Integrator::Adaptive;
  p->p->euler_steps = euler_steps;
  g_last_error.clear();
  return GP_OK;
}

gp_status gp_projector_project(const gp_projector* p, const double* x, size_t rows, double* out) {
  if (p == nullptr || x == nullptr || out == nullptr) return fail(GP_ERR_INVALID_ARGUMENT, "null argument");
  return guarded([&] { store_rows(p->p->project(view_rows(x, rows, p->p->dim())), out); });
}

// JSON entry points

gp_status gp_gen_data(const char* request_json, char** report_json) {
  return json_entry(request_json, report_json, geoproj::harness::gen_data);
}

gp_status gp_train(const char* request_json, char** report_json) {
  return json_entry(request_json, report_json, geoproj::harness::train);
}

gp_status gp_evaluate(const char* request_json, char** report_json) {
  return json_entry(request_json, report_json, geoproj::harness::evaluate);
}

gp_status gp_project(const char* request_json, char** report_json) {
  return json_entry(request_json, report_json, geoproj::harness::project);
}

gp_status gp_verify(const char* request_json, char** report_json) {
  return json_entry(request_json, report_json, geoproj::harness::verify);
}

}  // extern "C"
