#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "geoproj/error.hpp"
#include "geoproj/harness.hpp"
#include "support.hpp"

using namespace geoproj;
using namespace geoproj::harness;
using namespace testsupport;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes a generated dataset and returns the CSV path.
std::string make_data(const std::string& dir, const std::string& name, int n, std::uint64_t seed) {
  const std::string csv = (fs::path(dir) / (name + ".csv")).string();
  gen_data(Json{{"dataset", name}, {"n", n}, {"seed", seed}, {"out", csv}});
  return csv;
}

RunConfig disk_config(const std::string& data, const std::string& out, int epochs) {
  RunConfig c;
  c.data = data;
  c.out = out;
  c.model.variant = nn::Variant::ProjFAA;
  c.model.kernel = "disk";
  c.model.depth = 4;
  c.epochs = epochs;
  c.batch = 100;
  c.seed = 0;
  return c;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::Io;
}

}  // namespace

TEST_CASE("select_run") {
  CHECK(select_run({{4, 0.0, "a", 0.3}}) == 0);
  CHECK(select_run({{4, 0.0, "a", 0.2}, {6, 0.0, "b", 0.1}}) == 1);
  // Ties go to the lower (depth, weight decay).
  CHECK(select_run({{8, 0.0, "a", 0.1}, {4, 1e-4, "b", 0.1}, {4, 0.0, "c", 0.1}, {6, 0.0, "d", 0.1}}) == 2);
  CHECK(select_run({{6, 1e-4, "a", 0.1}, {6, 0.0, "b", 0.1}}) == 1);
  CHECK_THROWS_AS(select_run({}), Error);
}

TEST_CASE("config validation names the missing flag") {
  try {
    RunConfig::from_json(Json{{"variant", "ProjFAA"}, {"seed", 0}});
    FAIL("expected Config");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Config);
    CHECK(std::string(e.what()).find("--data") != std::string::npos);
  }
  RunConfig c = RunConfig::from_json(Json{{"data", "x.csv"}, {"variant", "projfaa"}});
  try {
    c.validate();
    FAIL("expected Config");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("--seed") != std::string::npos);
  }
  c.seed = 1;
  c.validate();
  c.epochs = -1;
  CHECK(code_of([&] { c.validate(); }) == ErrorCode::Config);
  CHECK(code_of([] { RunConfig::from_json(Json{{"data", "x.csv"}, {"variant", "Nope"}}); }) == ErrorCode::Config);

  const RunConfig sweep = RunConfig::from_json(Json{{"data", "x.csv"}, {"variant", "ProjFAA"}, {"sweep", true}});
  CHECK(sweep.sweep_depths == std::vector<int>{4, 6, 8});
  CHECK(sweep.sweep_weight_decays == std::vector<double>{0.0, 1e-4});
  CHECK(sweep.epochs == 2000);
  CHECK(sweep.plateau_patience == 100);
  CHECK(sweep.early_stop_patience == 200);
  const RunConfig paper = RunConfig::from_json(Json{{"data", "x.csv"}, {"variant", "ProjFAA"}, {"paper_budget", true}});
  CHECK(paper.epochs == 10000);
  CHECK(paper.early_stop_patience == 1000);

  // Round trip through JSON.
  RunConfig r = RunConfig::from_json(Json{{"data", "d.csv"}, {"variant", "ExpIAA"}, {"kernel", "so3"}, {"seed", 7}, {"lr", 0.01}});
  CHECK(RunConfig::from_json(r.to_json()).to_json() == r.to_json());
}

TEST_CASE("gen_data is byte-identical and keeps the split sizes") {
  const std::string dir = scratch_dir("harness_gen");
  const std::string a = make_data(dir + "/a", "sphere", 1000, 0);
  const std::string b = make_data(dir + "/b", "sphere", 1000, 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(dyn::manifest_path_for(a)) == slurp(dyn::manifest_path_for(b)));
  const std::string c = make_data(dir + "/c", "sphere", 1000, 1);
  CHECK(slurp(a) != slurp(c));

  const Json r = gen_data(Json{{"dataset", "disk"}, {"n", 1000}, {"seed", 3}, {"out", dir + "/disk.csv"}});
  CHECK(r.at("splits").at("train") == 800);
  CHECK(r.at("splits").at("val") == 100);
  CHECK(r.at("splits").at("test") == 100);

  CHECK(code_of([&] { gen_data(Json{{"n", 10}, {"seed", 0}}); }) == ErrorCode::Config);
  CHECK(code_of([&] { gen_data(Json{{"dataset", "torus"}, {"seed", 0}}); }) == ErrorCode::Config);
  CHECK(code_of([&] { gen_data(Json{{"dataset", "disk"}}); }) == ErrorCode::Config);
}

TEST_CASE("epochs = 0 writes the initial checkpoint and an empty history") {
  const std::string dir = scratch_dir("harness_zero");
  const std::string data = make_data(dir, "disk", 200, 0);
  const TrainResult r = train_loop(disk_config(data, dir + "/run", 0));
  CHECK(r.history.empty());
  CHECK(r.epochs_run == 0);
  CHECK(r.best_val == r.initial_val);
  CHECK(fs::exists(dir + "/run/best.json"));
  CHECK(fs::exists(dir + "/run/best.bin"));
  CHECK(fs::exists(dir + "/run/state.json"));
  CHECK(slurp(dir + "/run/history.csv") == "epoch,train_loss,val_loss,lr\n");
}

TEST_CASE("missing dataset and shape mismatch") {
  const std::string dir = scratch_dir("harness_missing");
  CHECK(code_of([&] { train_loop(disk_config(dir + "/nothing.csv", dir + "/run", 1)); }) == ErrorCode::Io);
  const std::string data = make_data(dir, "disk", 100, 0);
  RunConfig c = disk_config(data, dir + "/run", 1);
  c.model.kernel = "sphere:3";
  CHECK(code_of([&] { train_loop(c); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("training is deterministic and resumes exactly") {
  const std::string dir = scratch_dir("harness_resume");
  const std::string data = make_data(dir, "disk", 300, 0);

  RunConfig full = disk_config(data, dir + "/full", 8);
  full.plateau_patience = 2;  // exercise the scheduler state across the break
  const TrainResult a = train_loop(full);
  RunConfig again = full;
  again.out = dir + "/again";
  const TrainResult b = train_loop(again);
  CHECK(history_to_json(a.history) == history_to_json(b.history));
  CHECK(slurp(dir + "/full/best.bin") == slurp(dir + "/again/best.bin"));

  RunConfig part = full;
  part.out = dir + "/part";
  part.stop_after = 3;
  const TrainResult first = train_loop(part);
  CHECK(first.epochs_run == 3);
  CHECK_FALSE(first.finished);
  part.stop_after = 0;
  part.resume = true;
  const TrainResult second = train_loop(part);
  CHECK(second.epochs_run == 8);
  CHECK(history_to_json(second.history) == history_to_json(a.history));
  CHECK(slurp(dir + "/part/best.bin") == slurp(dir + "/full/best.bin"));
  CHECK(slurp(dir + "/part/history.csv") == slurp(dir + "/full/history.csv"));

  const auto ds = dyn::load_dataset(data);
  Json ma = evaluate_model(dir + "/full/best", ds).to_json();
  Json mb = evaluate_model(dir + "/again/best", ds).to_json();
  ma.erase("checkpoint");
  mb.erase("checkpoint");
  CHECK(ma == mb);
}

TEST_CASE("metrics report schema") {
  const std::string dir = scratch_dir("harness_schema");
  const std::string sphere = make_data(dir, "sphere", 100, 0);
  const std::string disk = make_data(dir, "disk", 100, 0);
  const auto sds = dyn::load_dataset(sphere);
  const auto dds = dyn::load_dataset(disk);
  struct Case {
    const char* variant;
    const char* kernel;
    const dyn::TrajectoryDataset* ds;
    std::string data;
  };
  const std::vector<Case> cases{{"Regular", "sphere:3", &sds, sphere},  {"ProjIAA", "sphere:3", &sds, sphere},
                                {"ExpIAA", "sphere:3", &sds, sphere},   {"ProjFAA", "disk", &dds, disk},
                                {"ExpFAA", "sphere:3", &sds, sphere},   {"ProbAnchor", "sphere:3", &sds, sphere},
                                {"FlowFAA", "disk", &dds, disk}};
  for (const auto& k : cases) {
    RunConfig c = disk_config(k.data, dir + "/" + k.variant, 1);
    c.model.variant = nn::parse_variant(k.variant);
    c.model.kernel = k.kernel;
    c.model.anchors = 16;
    train_loop(c);
    const Json j = evaluate_model(dir + "/" + k.variant + "/best", *k.ds).to_json();
    std::vector<std::string> keys;
    for (const auto& [key, v] : j.items()) keys.push_back(key);
    std::vector<std::string> want = metrics_fields();
    std::sort(want.begin(), want.end());
    INFO(k.variant);
    CHECK(keys == want);
    CHECK(j.at("n_test") == 10);
    CHECK(j.at("history").size() == 1);
  }
}

TEST_CASE("constrained predictions stay feasible after training") {
  const std::string dir = scratch_dir("harness_feasible");
  const std::string data = make_data(dir, "disk", 400, 0);
  RunConfig c = disk_config(data, dir + "/run", 20);
  const TrainResult r = train_loop(c);
  CHECK(r.best_val < r.initial_val);
  const MetricsReport m = evaluate_model(dir + "/run/best", dyn::load_dataset(data));
  CHECK(m.max_residual <= 1e-9);
  CHECK(m.test_mse > 0.0);
}

TEST_CASE("disk ProjFAA reduces validation loss tenfold in 500 epochs") {
  const std::string dir = scratch_dir("harness_disk500");
  const std::string data = make_data(dir, "disk", 1000, 0);
  RunConfig c = disk_config(data, dir + "/run", 500);
  c.batch = 500;
  const TrainResult r = train_loop(c);
  INFO("initial " << r.initial_val << " best " << r.best_val);
  CHECK(r.history.back().val_loss * 10.0 <= r.initial_val);
}

TEST_CASE("selection never reads the test split") {
  const std::string dir = scratch_dir("harness_isolation");
  const std::string data = make_data(dir, "disk", 300, 0);

  // Same file with the test rows dropped.
  dyn::TrajectoryDataset full = dyn::load_dataset(data);
  const auto keep = [&] {
    std::vector<int> k = full.indices(dyn::Split::Train);
    const auto v = full.indices(dyn::Split::Val);
    k.insert(k.end(), v.begin(), v.end());
    std::sort(k.begin(), k.end());
    return k;
  }();
  dyn::TrajectoryDataset cut = full;
  cut.x0.resize(static_cast<Eigen::Index>(keep.size()), full.dim());
  cut.xT.resize(static_cast<Eigen::Index>(keep.size()), full.dim());
  cut.splits.clear();
  for (std::size_t i = 0; i < keep.size(); ++i) {
    cut.x0.row(static_cast<Eigen::Index>(i)) = full.x0.row(keep[i]);
    cut.xT.row(static_cast<Eigen::Index>(i)) = full.xT.row(keep[i]);
    cut.splits.push_back(full.splits[static_cast<std::size_t>(keep[i])]);
  }
  const std::string cut_csv = dir + "/cut.csv";
  dyn::save_dataset(cut, cut_csv, dyn::manifest_path_for(cut_csv));

  std::vector<SweepRun> with, without;
  for (int depth : {4, 6}) {
    for (double wd : {0.0, 1e-4}) {
      RunConfig c = disk_config(data, dir + "/a" + std::to_string(depth) + std::to_string(wd > 0), 5);
      c.model.depth = depth;
      c.weight_decay = wd;
      with.push_back({depth, wd, c.out, train_loop(c).best_val});
      c.data = cut_csv;
      c.out += "_cut";
      without.push_back({depth, wd, c.out, train_loop(c).best_val});
    }
  }
  CHECK(select_run(with) == select_run(without));
  for (std::size_t i = 0; i < with.size(); ++i) CHECK(with[i].best_val == without[i].best_val);
}

TEST_CASE("sweep selects on validation and reports test metrics") {
  const std::string dir = scratch_dir("harness_sweep");
  const std::string data = make_data(dir, "disk", 200, 0);
  const Json report = train(Json{{"data", data},
                                 {"out", dir + "/sweep"},
                                 {"variant", "ProjFAA"},
                                 {"epochs", 3},
                                 {"batch", 80},
                                 {"seed", 0},
                                 {"jobs", 2},
                                 {"sweep", {{"depths", {4, 6}}, {"weight_decays", {0.0, 1e-4}}}}});
  REQUIRE(report.at("runs").size() == 4);
  std::vector<SweepRun> runs;
  for (const auto& r : report.at("runs")) {
    runs.push_back({r.at("depth").get<int>(), r.at("weight_decay").get<double>(), r.at("dir").get<std::string>(),
                    r.at("best_val").get<double>()});
  }
  const SweepRun& sel = runs[select_run(runs)];
  CHECK(report.at("selected").at("depth") == sel.depth);
  CHECK(report.at("selected").at("best_val") == sel.best_val);
  CHECK(fs::exists(dir + "/sweep/metrics.json"));
  CHECK(report.at("metrics").at("n_test") == 20);

  // Parallel and sequential sweeps agree.
  const Json seq = train(Json{{"data", data},
                              {"out", dir + "/seq"},
                              {"variant", "ProjFAA"},
                              {"epochs", 3},
                              {"batch", 80},
                              {"seed", 0},
                              {"sweep", {{"depths", {4, 6}}, {"weight_decays", {0.0, 1e-4}}}}});
  for (std::size_t i = 0; i < 4; ++i) CHECK(seq.at("runs")[i].at("best_val") == report.at("runs")[i].at("best_val"));
  CHECK(seq.at("metrics").at("test_mse") == report.at("metrics").at("test_mse"));
}

TEST_CASE("project and evaluate entry points") {
  const std::string dir = scratch_dir("harness_project");
  Mat pts(3, 3);
  pts << 2.0, 0.0, 0.0, 0.0, -0.5, 0.0, 1.0, 1.0, 1.0;
  write_points_csv(dir + "/in.csv", pts);
  CHECK(read_points_csv(dir + "/in.csv") == pts);
  const Json r = project(Json{{"input", dir + "/in.csv"}, {"projector", "analytic:sphere:3"}, {"output", dir + "/out.csv"}});
  CHECK(r.at("rows") == 3);
  const Mat out = read_points_csv(dir + "/out.csv");
  CHECK(out(0, 0) == 1.0);
  CHECK(out(1, 1) == -1.0);
  CHECK(out.row(2).norm() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(code_of([&] { project(Json{{"input", dir + "/in.csv"}, {"projector", "analytic:disk"}, {"output", dir + "/o.csv"}}); }) ==
        ErrorCode::ShapeMismatch);
  CHECK(code_of([&] { project(Json{{"input", dir + "/in.csv"}, {"output", dir + "/o.csv"}}); }) == ErrorCode::Config);

  // Noise sweep on an FAA model writes the curve CSV.
  const std::string data = make_data(dir, "disk", 100, 0);
  train_loop(disk_config(data, dir + "/run", 2));
  const Json ev = evaluate(Json{{"checkpoint", dir + "/run/best"}, {"data", data}, {"noise_sigma", {0.0, 0.1}}});
  REQUIRE(ev.at("noise_curve").size() == 2);
  CHECK(ev.at("noise_curve")[0].at("mse") == ev.at("test_mse"));
  CHECK(fs::exists(ev.at("noise_csv").get<std::string>()));
}

TEST_CASE("output root override") {
  const std::string dir = scratch_dir("harness_root");
  setenv("GEOPROJ_OUT_ROOT", dir.c_str(), 1);
  CHECK(resolve_out("a/b.csv") == (fs::path(dir) / "a/b.csv").string());
  CHECK(resolve_out("/abs/b.csv") == "/abs/b.csv");
  const Json r = gen_data(Json{{"dataset", "circle"}, {"n", 50}, {"seed", 0}, {"out", "data/circle.csv"}});
  CHECK(fs::exists(dir + "/data/circle.csv"));
  CHECK(r.at("csv") == (fs::path(dir) / "data/circle.csv").string());
  unsetenv("GEOPROJ_OUT_ROOT");
  CHECK(resolve_out("a/b.csv") == "a/b.csv");
}

TEST_CASE("verify entry point") {
  const Json v = verify(Json{{"check", "varadhan"}, {"manifold", "circle"}});
  CHECK(v.at("status") == "PASS");
  CHECK(v.at("results")[0].at("slope").get<double>() >= 0.45);
  CHECK(verify(Json{{"check", "faa"}, {"manifold", "disk"}}).at("status") == "PASS");
  CHECK(verify(Json{{"check", "exp"}}).at("status") == "PASS");
  CHECK(verify(Json{{"check", "gronwall"}, {"delta", 1e-3}, {"horizon", 1.0}, {"samples", 20}}).at("status") == "PASS");
  CHECK(code_of([] { verify(Json{{"check", "nope"}}); }) == ErrorCode::Config);
}
