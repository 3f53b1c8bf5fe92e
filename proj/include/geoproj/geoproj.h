#ifndef GEOPROJ_GEOPROJ_H
#define GEOPROJ_GEOPROJ_H

/*
 * C interface to the geoproj library. Every function returns a gp_status;
 * on failure gp_last_error() describes the problem for the calling thread.
 * Handles are opaque and freed by the matching *_free function. Strings
 * returned through char** are released with gp_string_free.
 *
 * Points are passed as row-major double arrays of rows x ambient_dim.
 */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define GP_API __declspec(dllexport)
#else
#define GP_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum gp_status {
  GP_OK = 0,
  GP_ERR_INVALID_ARGUMENT = 1,
  GP_ERR_CONFIG = 2,
  GP_ERR_RUNTIME = 3,
  GP_ERR_IO = 4,
  GP_ERR_GEOMETRY = 5,
  GP_ERR_DIVERGED = 6,
  GP_ERR_SHAPE = 7
} gp_status;

typedef enum gp_split { GP_SPLIT_TRAIN = 0, GP_SPLIT_VAL = 1, GP_SPLIT_TEST = 2 } gp_split;

typedef enum gp_integrator { GP_INTEGRATOR_EULER = 0, GP_INTEGRATOR_ADAPTIVE = 1 } gp_integrator;

typedef struct gp_kernel gp_kernel;
typedef struct gp_dataset gp_dataset;
typedef struct gp_model gp_model;
typedef struct gp_projector gp_projector;

GP_API const char* gp_version(void);
GP_API const char* gp_last_error(void);
GP_API const char* gp_status_name(gp_status status);
GP_API void gp_string_free(char* s);

/* Constraint sets: "sphere:3", "so3", "se3", "disk", "product(sphere:3,so3)", "power(so3,10)". */
GP_API gp_status gp_kernel_create(const char* name, gp_kernel** out);
GP_API void gp_kernel_free(gp_kernel* k);
GP_API int gp_kernel_ambient_dim(const gp_kernel* k);
GP_API gp_status gp_kernel_name(const gp_kernel* k, char** out);
GP_API gp_status gp_kernel_project(const gp_kernel* k, const double* y, size_t rows, double* out);
GP_API gp_status gp_kernel_residual(const gp_kernel* k, const double* y, size_t rows, double* out);
GP_API gp_status gp_kernel_tangent_project(const gp_kernel* k, const double* x, const double* v, double* out);
GP_API gp_status gp_kernel_exp(const gp_kernel* k, const double* x, const double* v, double* out);

/* Trajectory datasets. */
GP_API gp_status gp_dataset_generate(const char* generator, int n, uint64_t seed, gp_dataset** out);
GP_API gp_status gp_dataset_load(const char* csv_path, gp_dataset** out);
GP_API gp_status gp_dataset_save(const gp_dataset* ds, const char* csv_path);
GP_API void gp_dataset_free(gp_dataset* ds);
GP_API int gp_dataset_rows(const gp_dataset* ds);
GP_API int gp_dataset_dim(const gp_dataset* ds);
GP_API gp_status gp_dataset_row(const gp_dataset* ds, int i, double* x0, double* xT, gp_split* split);

/* Models. spec_json: {"variant": ..., "kernel": ..., "depth": ..., "projector": ...}. */
GP_API gp_status gp_model_create(const char* spec_json, uint64_t seed, gp_model** out);
GP_API gp_status gp_model_load(const char* stem, gp_model** out);
GP_API gp_status gp_model_save(const gp_model* m, const char* stem);
GP_API void gp_model_free(gp_model* m);
GP_API int gp_model_dim(const gp_model* m);
GP_API gp_status gp_model_predict(const gp_model* m, const double* x, size_t rows, double* out);

/* Learned projectors. */
GP_API gp_status gp_projector_load(const char* stem, gp_projector** out);
GP_API void gp_projector_free(gp_projector* p);
GP_API int gp_projector_dim(const gp_projector* p);
GP_API double gp_projector_horizon(const gp_projector* p);
GP_API gp_status gp_projector_set_method(gp_projector* p, gp_integrator method, int euler_steps);
GP_API gp_status gp_projector_project(const gp_projector* p, const double* x, size_t rows, double* out);

/* JSON request / JSON report entry points used by the command-line tool. */
GP_API gp_status gp_gen_data(const char* request_json, char** report_json);
GP_API gp_status gp_train(const char* request_json, char** report_json);
GP_API gp_status gp_evaluate(const char* request_json, char** report_json);
GP_API gp_status gp_project(const char* request_json, char** report_json);
GP_API gp_status gp_verify(const char* request_json, char** report_json);

#ifdef __cplusplus
}
#endif

#endif
