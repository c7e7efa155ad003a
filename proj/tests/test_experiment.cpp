#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "latentid/errors.hpp"
#include "latentid/experiment.hpp"

using namespace latentid;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = LATENTID_SOURCE_DIR;

std::string field_of(const json& j) {
  try {
    parse_config(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

json tiny_sweep() {
  return json::parse(R"({
    "experiment": "invertibility_sweep",
    "model": {"n_latent": 2, "graph": {"kind": "chain"}},
    "mixing": {"n_perms": 2, "observed_sizes": [1, 4]},
    "data": {"n_train": 400, "n_test": 200},
    "predictor": {"embed_dim": 8, "hidden_dim": 16, "n_layers": 1, "feature_dim": 8},
    "train": {"epochs": 2, "batch_size": 64},
    "seeds": [0, 1]
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("latentid_exp_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("config errors name the field") {
  CHECK(field_of(json::parse(R"({"experiment": "er_sweep"})")) == "seeds");
  CHECK(field_of(json::parse(R"({"seeds": [0]})")) == "experiment");
  CHECK(field_of(json::parse(R"({"experiment": "er_sweep", "seeds": []})")) == "seeds");
  CHECK(field_of(json::parse(R"({"experiment": "bogus", "seeds": [0]})")) == "experiment");
  CHECK(field_of(json::parse(R"({"experiment": "er_sweep", "seeds": [0], "train": {"lr": "fast"}})")) == "train.lr");
  CHECK(field_of(json::parse(R"({"experiment": "er_sweep", "seeds": [0], "train": {"learning_rate": 1}})")) ==
        "train.learning_rate");
  CHECK(field_of(json::parse(R"({"experiment": "invertibility_sweep", "seeds": [0],
                                 "mixing": {"observed_sizes": [3, 2]}})")) == "mixing.observed_sizes");
  CHECK(field_of(json::parse(R"({"experiment": "invertibility_sweep", "seeds": [0],
                                 "mixing": {"observed_sizes": [25]}})")) == "mixing.observed_sizes");
}

TEST_CASE("latent count above the enumeration cap") {
  try {
    load_config(kSource / "tests/data/too_many_latents.json");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "model.n_latent");
    CHECK(std::string(e.what()).find("16") != std::string::npos);
  }
  CHECK_THROWS_AS(load_config(kSource / "tests/data/missing_seeds.json"), ConfigError);
}

TEST_CASE("shipped sample configs validate") {
  int n = 0;
  for (const auto& entry : fs::directory_iterator(kSource / "configs")) {
    if (entry.path().extension() != ".json") continue;
    CAPTURE(entry.path().string());
    CHECK_NOTHROW(load_config(entry.path()));
    ++n;
  }
  CHECK(n >= 4);
}

TEST_CASE("resolved config is a fixed point") {
  const auto cfg = parse_config(tiny_sweep());
  const json resolved = resolved_json(cfg);
  CHECK(resolved.at("train").at("epochs") == 2);
  CHECK(resolved.at("train").at("lr") == 1e-4);
  const auto again = parse_config(resolved);
  CHECK(resolved_json(again) == resolved);
}

TEST_CASE("run csv header") {
  std::ostringstream os;
  write_runs_csv(os, {});
  CHECK(os.str().rfind(std::string(kRunsHeader) + "\n", 0) == 0);
}

TEST_CASE("sweep artifacts are reproducible") {
  const auto cfg = parse_config(tiny_sweep());
  const auto d1 = scratch("a");
  const auto d2 = scratch("b");
  const auto out = run_experiment(cfg, d1);
  run_experiment(cfg, d2);
  for (const char* f : {"runs.csv", "aggregate.csv", "resolved_config.json", "summary.json"}) {
    CHECK(fs::exists(d1 / f));
  }
  CHECK(slurp(d1 / "aggregate.csv") == slurp(d2 / "aggregate.csv"));
  CHECK(slurp(d1 / "runs.csv") == slurp(d2 / "runs.csv"));

  std::istringstream runs(slurp(d1 / "runs.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(runs, line)) ++rows;
  CHECK(rows == 4);
  CHECK(slurp(d1 / "aggregate.csv").rfind("m,n_runs,n_failed,probe_acc_mean,probe_acc_std,", 0) == 0);
  CHECK(out.summary.at("checks").size() >= 3);

  auto par = cfg;
  par.parallel = true;
  par.threads = 2;
  const auto d3 = scratch("c");
  run_experiment(par, d3);
  CHECK(slurp(d1 / "runs.csv") == slurp(d3 / "runs.csv"));
  for (const auto& d : {d1, d2, d3}) fs::remove_all(d);
}

TEST_CASE("diverging runs are marked failed and the sweep completes") {
  auto j = tiny_sweep();
  j["train"]["lr"] = 1e300;
  const auto cfg = parse_config(j);
  const auto dir = scratch("diverge");
  const auto out = run_experiment(cfg, dir);
  CHECK_FALSE(out.all_passed);
  CHECK(out.summary.at("failed_runs").size() == 4);
  CHECK(out.summary.at("runs").size() == 4);
  fs::remove_all(dir);
}

TEST_CASE("masked-bit run on an invertible chain") {
  auto cfg = parse_config(tiny_sweep());
  cfg.n_latent = 3;
  cfg.n_perms = 0;
  cfg.n_train = 4000;
  cfg.n_test = 2000;
  cfg.predictor = PredictorConfig{.feature_dim = 0};
  cfg.train.epochs = 4;
  const auto full = run_masked_bit(cfg, {GraphSpec::chain(), 3, 0, 24});
  const auto one = run_masked_bit(cfg, {GraphSpec::chain(), 3, 0, 1});
  CHECK_FALSE(full.failed);
  CHECK(full.m == 24);
  CHECK(full.H_c_given_x == doctest::Approx(0.0));
  CHECK(full.probe_acc > 0.95);
  CHECK(full.affine_r2 > 0.9);
  CHECK(full.affine_r2 > one.affine_r2);
  CHECK(one.H_c_given_x > 0.0);
  CHECK(full.identity_dim == 8);
  CHECK(full.steering_hit_rate >= 0.9);
}

TEST_CASE("random identity baseline is near one") {
  const auto b = random_identity_baseline(64, 8, 1000, 3);
  CHECK(b.draws == 1000);
  CHECK(b.pooled_dominance > 0.8);
  CHECK(b.pooled_dominance < 1.2);
}

TEST_CASE("counterfactual experiment on the synthetic set") {
  auto cfg = parse_config(json::parse(R"({"experiment": "counterfactual", "seeds": [0]})"));
  const auto dir = scratch("cf");
  const auto out = run_experiment(cfg, dir);
  CHECK(out.all_passed);
  CHECK(fs::exists(dir / "heatmap.csv"));
  CHECK(fs::exists(dir / "embeddings" / "manifest.json"));
  const auto report = json::parse(slurp(dir / "identity_report.json"));
  CHECK(report.at("row_argmax_hits") == 27);
  CHECK(slurp(dir / "heatmap.csv").rfind("row,verb => 3pSg,", 0) == 0);

  cfg.embeddings_dir = (dir / "embeddings").string();
  const auto dir2 = scratch("cf2");
  CHECK(run_experiment(cfg, dir2).all_passed);
  CHECK(slurp(dir / "heatmap.csv") == slurp(dir2 / "heatmap.csv"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}
