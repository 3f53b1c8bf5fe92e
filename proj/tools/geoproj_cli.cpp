// geoproj command-line tool: gen-data, train, eval, project, verify.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "geoproj/geoproj.h"

using Json = nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Request {
  Json body = Json::object();
  std::vector<std::function<void()>> fills;

  void collect() {
    for (auto& f : fills) f();
  }
};

template <typename T>
CLI::Option* add(CLI::App* app, Request& r, const std::string& flag, const std::string& key, const std::string& help) {
  auto value = std::make_shared<T>();
  CLI::Option* opt = app->add_option(flag, *value, help);
  r.fills.push_back([&r, value, opt, key] {
    if (opt->count() > 0) r.body[key] = *value;
  });
  return opt;
}

template <typename T>
CLI::Option* add_list(CLI::App* app, Request& r, const std::string& flag, const std::string& key,
                      const std::string& help) {
  return add<std::vector<T>>(app, r, flag, key, help)->delimiter(',');
}

void add_switch(CLI::App* app, Request& r, const std::string& flag, const std::string& key, bool value,
                const std::string& help) {
  CLI::Option* opt = app->add_flag(flag, help);
  r.fills.push_back([&r, opt, key, value] {
    if (opt->count() > 0) r.body[key] = value;
  });
}

int exit_code_for(gp_status s) {
  if (s == GP_OK) return kExitOk;
  if (s == GP_ERR_CONFIG || s == GP_ERR_INVALID_ARGUMENT) return kExitConfig;
  return kExitRuntime;
}

using Entry = gp_status (*)(const char*, char**);

int run(Entry entry, const Json& body) {
  char* report = nullptr;
  const gp_status s = entry(body.dump().c_str(), &report);
  if (s != GP_OK) {
    std::cerr << "error: " << gp_last_error() << '\n';
    return exit_code_for(s);
  }
  std::cout << report << '\n';
  gp_string_free(report);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geometry-preserving residual networks: data, training, evaluation and checks", "geoproj"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(gp_version()));

  // gen-data
  Request gen;
  CLI::App* c_gen = app.add_subcommand("gen-data", "generate a trajectory dataset (CSV + manifest)");
  add<std::string>(c_gen, gen, "--dataset", "dataset", "sphere | so3 | disk | cs | protein | circle")->required();
  add<int>(c_gen, gen, "--n", "n", "number of trajectories (default 1000)");
  add<unsigned long long>(c_gen, gen, "--seed", "seed", "random seed")->required();
  add<std::string>(c_gen, gen, "--out", "out", "CSV path (default data/<dataset>.csv)");
  add<double>(c_gen, gen, "--horizon", "horizon", "flow horizon T");
  add<double>(c_gen, gen, "--dt", "dt", "integrator step");
  add<double>(c_gen, gen, "--alpha", "alpha", "disk expansion rate");
  add<double>(c_gen, gen, "--kappa", "kappa", "Cucker-Smale coupling");
  add<int>(c_gen, gen, "--agents", "agents", "Cucker-Smale agent count");
  add<int>(c_gen, gen, "--chain-length", "chain_length", "protein residues per chain");
  add<unsigned long long>(c_gen, gen, "--field-seed", "field_seed", "sphere vector-field seed");

  // train
  Request tr;
  std::string train_config;
  CLI::App* c_train = app.add_subcommand("train", "train a model, a depth/weight-decay sweep, or a projector");
  c_train->add_option("--config", train_config, "JSON file with defaults; flags override");
  add<std::string>(c_train, tr, "--target", "target", "model | projector")->check(CLI::IsMember({"model", "projector"}));
  add<std::string>(c_train, tr, "--data", "data", "dataset CSV");
  add<std::string>(c_train, tr, "--out", "out", "run directory");
  add<std::string>(c_train, tr, "--variant", "variant", "Regular | ProjIAA | ExpIAA | FlowIAA | ProjFAA | ExpFAA | FlowFAA | ProbAnchor");
  add<std::string>(c_train, tr, "--kernel", "kernel", "constraint set (default: from the dataset)");
  add<int>(c_train, tr, "--depth", "depth", "residual blocks");
  add<double>(c_train, tr, "--dt-init", "dt_init", "initial step size (default 1/depth)");
  add_switch(c_train, tr, "--fixed-dt", "learn_dt", false, "keep step sizes fixed");
  add<double>(c_train, tr, "--dropout", "dropout", "dropout probability");
  add<int>(c_train, tr, "--anchors", "anchors", "ProbAnchor anchor count");
  add<std::string>(c_train, tr, "--projector", "projector", "Flow variants: analytic | projector checkpoint stem");
  add<double>(c_train, tr, "--lr", "lr", "initial learning rate");
  add<double>(c_train, tr, "--weight-decay", "weight_decay", "AdamW weight decay");
  add<int>(c_train, tr, "--epochs", "epochs", "epoch budget");
  add<int>(c_train, tr, "--batch", "batch", "batch size");
  add<unsigned long long>(c_train, tr, "--seed", "seed", "random seed");
  add<double>(c_train, tr, "--plateau-factor", "plateau_factor", "scheduler factor");
  add<int>(c_train, tr, "--plateau-patience", "plateau_patience", "scheduler patience");
  add<int>(c_train, tr, "--early-stop", "early_stop_patience", "early-stopping patience");
  add<double>(c_train, tr, "--clip", "clip", "gradient-norm clip (0 disables)");
  add<int>(c_train, tr, "--checkpoint-every", "checkpoint_every", "write training state every k epochs");
  add<int>(c_train, tr, "--stop-after", "stop_after", "leave after k epochs; continue later with --resume");
  add_switch(c_train, tr, "--resume", "resume", true, "continue from <out>/state");
  add_switch(c_train, tr, "--sweep", "sweep", true, "sweep depth {4,6,8} x weight decay {0,1e-4}");
  add_list<int>(c_train, tr, "--depths", "sweep_depths", "sweep depths");
  add_list<double>(c_train, tr, "--weight-decays", "sweep_weight_decays", "sweep weight decays");
  add<int>(c_train, tr, "--jobs", "jobs", "concurrent sweep jobs");
  add_switch(c_train, tr, "--paper-budget", "paper_budget", true, "10000 epochs, patience 1000");
  add<double>(c_train, tr, "--alpha", "alpha", "projector: horizon multiplier");
  add<double>(c_train, tr, "--horizon", "horizon", "projector: fixed horizon T");
  add<int>(c_train, tr, "--width", "width", "projector: hidden width");
  add<int>(c_train, tr, "--blocks", "blocks", "projector: hidden blocks");
  add_list<double>(c_train, tr, "--lrs", "sweep_lrs", "projector sweep learning rates");
  add_list<double>(c_train, tr, "--alphas", "sweep_alphas", "projector sweep alphas");

  // eval
  Request ev;
  CLI::App* c_eval = app.add_subcommand("eval", "test-split metrics of a checkpoint, optional noise sweep");
  add<std::string>(c_eval, ev, "--checkpoint", "checkpoint", "checkpoint stem (without .json/.bin)");
  add<std::string>(c_eval, ev, "--data", "data", "dataset CSV");
  add_list<double>(c_eval, ev, "--noise-sigma", "noise_sigma", "input noise levels, comma separated");
  add<std::string>(c_eval, ev, "--noise-out", "noise_out", "noise curve CSV path");
  add<std::string>(c_eval, ev, "--out", "out", "report JSON path");
  add<unsigned long long>(c_eval, ev, "--seed", "seed", "noise seed");
  add<std::string>(c_eval, ev, "--method", "method", "projector integrator: euler | adaptive");
  add<int>(c_eval, ev, "--steps", "steps", "Euler steps");

  // project
  Request pr;
  CLI::App* c_proj = app.add_subcommand("project", "map a CSV of points through a projector");
  add<std::string>(c_proj, pr, "--input", "input", "input CSV");
  add<std::string>(c_proj, pr, "--output", "output", "output CSV");
  add<std::string>(c_proj, pr, "--projector", "projector", "analytic:<kernel> | projector checkpoint stem");
  add<std::string>(c_proj, pr, "--method", "method", "euler | adaptive");
  add<int>(c_proj, pr, "--steps", "steps", "Euler steps");

  // verify
  Request vf;
  CLI::App* c_ver = app.add_subcommand("verify", "numerical checks of the approximation results");
  add<std::string>(c_ver, vf, "--check", "check", "varadhan | gronwall | faa | exp");
  add<std::string>(c_ver, vf, "--manifold", "manifold", "circle | sphere | disk");
  add_list<double>(c_ver, vf, "--point", "point", "query point, comma separated");
  add<double>(c_ver, vf, "--t-min", "t_min", "smallest t");
  add<double>(c_ver, vf, "--t-max", "t_max", "largest t");
  add<int>(c_ver, vf, "--t-count", "t_count", "number of t values");
  add<int>(c_ver, vf, "--nodes", "nodes", "quadrature nodes");
  add_list<double>(c_ver, vf, "--delta", "delta", "perturbation sizes");
  add_list<double>(c_ver, vf, "--horizon", "horizon", "time horizons");
  add<double>(c_ver, vf, "--alpha", "alpha", "disk field expansion rate");
  add<double>(c_ver, vf, "--dt", "dt", "integrator step");
  add<int>(c_ver, vf, "--samples", "samples", "sample count");
  add_list<double>(c_ver, vf, "--eps", "eps", "perturbation sizes");
  add<std::string>(c_ver, vf, "--mode", "mode", "random | radial | tangential");
  add<int>(c_ver, vf, "--grid", "grid", "grid size per axis");
  add<unsigned long long>(c_ver, vf, "--seed", "seed", "random seed");

  if (argc > 1 && argv[1][0] != '-') {
    const std::string sub = argv[1];
    bool known = false;
    for (const CLI::App* c : app.get_subcommands({})) known = known || c->get_name() == sub;
    if (!known) {
      std::cerr << "error: unknown subcommand '" << sub << "'\n\n" << app.help();
      return kExitConfig;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  if (c_gen->parsed()) {
    gen.collect();
    return run(gp_gen_data, gen.body);
  }
  if (c_train->parsed()) {
    tr.collect();
    Json body = Json::object();
    if (!train_config.empty()) {
      std::ifstream in(train_config);
      if (!in) {
        std::cerr << "error: cannot open --config " << train_config << '\n';
        return kExitConfig;
      }
      try {
        body = Json::parse(in);
      } catch (const Json::exception& e) {
        std::cerr << "error: --config: " << e.what() << '\n';
        return kExitConfig;
      }
    }
    for (auto& [k, v] : tr.body.items()) body[k] = v;
    if (body.contains("sweep_depths") || body.contains("sweep_weight_decays") || body.contains("sweep_lrs") ||
        body.contains("sweep_alphas")) {
      Json sweep = body.contains("sweep") && body["sweep"].is_object() ? body["sweep"] : Json::object();
      if (body.contains("sweep_depths")) sweep["depths"] = body["sweep_depths"];
      if (body.contains("sweep_weight_decays")) sweep["weight_decays"] = body["sweep_weight_decays"];
      if (body.contains("sweep_lrs")) sweep["lrs"] = body["sweep_lrs"];
      if (body.contains("sweep_alphas")) sweep["alphas"] = body["sweep_alphas"];
      body["sweep"] = sweep;
    }
    return run(gp_train, body);
  }
  if (c_eval->parsed()) {
    ev.collect();
    return run(gp_evaluate, ev.body);
  }
  if (c_proj->parsed()) {
    pr.collect();
    return run(gp_project, pr.body);
  }
  if (c_ver->parsed()) {
    vf.collect();
    return run(gp_verify, vf.body);
  }
  std::cerr << app.help();
  return kExitConfig;
}
