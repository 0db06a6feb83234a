#include <doctest.h>

#include <cstdlib>
#include <sys/wait.h>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "bandmod/trace.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string binary_path() {
  const char* env = std::getenv("BANDMOD_BIN");
  REQUIRE_MESSAGE(env != nullptr, "BANDMOD_BIN must point at the CLI binary");
  return env;
}

struct RunResult {
  int exit_code;
  std::string out;
};

RunResult run(const std::string& args) {
  const fs::path out_file = fs::temp_directory_path() / "bandmod_cli_out.txt";
  const std::string cmd =
      binary_path() + " " + args + " >" + out_file.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream f(out_file);
  std::stringstream ss;
  ss << f.rdbuf();
  int code = -1;
  if (WIFEXITED(status)) code = WEXITSTATUS(status);
  return {code, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE_MESSAGE(f.good(), "missing file: " << p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("gen-dataset writes a balanced manifest and is byte-reproducible") {
  const fs::path work = fresh_dir("bandmod_cli_gen");
  const fs::path config = work / "config.json";
  {
    std::ofstream f(config);
    f << R"({"flows_per_class": 3, "duration_s": 6.0})" << "\n";
  }
  const fs::path out1 = work / "d1";
  const fs::path out2 = work / "d2";
  auto r1 = run("gen-dataset --config " + config.string() + " --seed 5 --out " + out1.string());
  REQUIRE_MESSAGE(r1.exit_code == 0, r1.out);
  auto r2 = run("gen-dataset --config " + config.string() + " --seed 5 --out " + out2.string());
  REQUIRE(r2.exit_code == 0);

  const json manifest = json::parse(slurp(out1 / "manifest.json"));
  REQUIRE(manifest.at("flows").size() == 12);
  std::map<int, int> per_label;
  for (const auto& fj : manifest.at("flows")) per_label[fj.at("label").get<int>()] += 1;
  for (int k = 0; k < 4; ++k) CHECK(per_label[k] == 3);

  CHECK(slurp(out1 / "manifest.json") == slurp(out2 / "manifest.json"));
  CHECK(slurp(out1 / "provenance.json") == slurp(out2 / "provenance.json"));
  CHECK(slurp(out1 / "traces" / "m1_0000.jsonl") == slurp(out2 / "traces" / "m1_0000.jsonl"));
  CHECK(slurp(out1 / "serialized" / "m3_0002.bits") ==
        slurp(out2 / "serialized" / "m3_0002.bits"));

  // A different seed must change the data.
  const fs::path out3 = work / "d3";
  REQUIRE(run("gen-dataset --config " + config.string() + " --seed 6 --out " + out3.string())
              .exit_code == 0);
  CHECK(slurp(out1 / "traces" / "m1_0000.jsonl") != slurp(out3 / "traces" / "m1_0000.jsonl"));
}

TEST_CASE("gen-dataset requires a seed") {
  const auto r = run("gen-dataset --out /tmp/unused_dataset_dir");
  CHECK(r.exit_code == 2);
}

TEST_CASE("missing config file maps to a runtime error") {
  const auto r = run("gen-dataset --seed 1 --config /nonexistent/cfg.json --out /tmp/x");
  CHECK(r.exit_code == 3);
  CHECK(r.out.find("\"type\":\"runtime\"") != std::string::npos);
}

TEST_CASE("prob-table single cell reproduces the closed form") {
  const auto r = run("prob-table --p-exit 1.0 --p1 1.0 --p2 0.5 --pi 1.0 --r-max 2 --t-max 1");
  REQUIRE_MESSAGE(r.exit_code == 0, r.out);
  std::stringstream ss(r.out);
  std::string header, row1, row2;
  std::getline(ss, header);
  std::getline(ss, row1);
  std::getline(ss, row2);
  CHECK(header.find("p_exit,r,T,q_1,p_corr_1,q_mix,p_corr_mix,p_total_mix") == 0);
  CHECK(row1.find("1,1,1,0.5,0.5,") == 0);
  CHECK(row2.find("1,2,1,0.5,0.75,") == 0);
}

TEST_CASE("sim-exit sweep is sorted with a zero baseline") {
  const fs::path work = fresh_dir("bandmod_cli_sim");
  const fs::path csv = work / "sweep.csv";
  const auto r = run("sim-exit --preset paper-vi-a --seed 3 --trials 4000 --n-max 3 --out " +
                     csv.string());
  REQUIRE_MESSAGE(r.exit_code == 0, r.out);
  std::ifstream f(csv);
  std::string line;
  std::getline(f, line);
  CHECK(line == "n,adv_bw_each,p_hat,stderr,p_analytic");
  double prev_analytic = -1.0;
  int expected_n = 0;
  while (std::getline(f, line)) {
    std::stringstream ls(line);
    std::string field;
    std::getline(ls, field, ',');
    CHECK(std::stoi(field) == expected_n);
    std::getline(ls, field, ',');
    std::getline(ls, field, ',');
    const double p_hat = std::stod(field);
    std::getline(ls, field, ',');
    std::getline(ls, field, ',');
    const double analytic = std::stod(field);
    if (expected_n == 0) {
      CHECK(p_hat == 0.0);
      CHECK(analytic == 0.0);
    }
    CHECK(analytic >= prev_analytic);
    prev_analytic = analytic;
    ++expected_n;
  }
  CHECK(expected_n == 4);
}

TEST_CASE("featurize emits constant columns for a constant-rate flow") {
  const fs::path work = fresh_dir("bandmod_cli_feat");
  bandmod::FlowTrace flow;
  flow.flow_id = "const";
  flow.label = 0;
  for (int i = 0; i < 40; ++i) {
    bandmod::PacketRecord p;
    p.ts_us = static_cast<int64_t>(i) * 250000;
    p.size = 1000;
    flow.packets.push_back(std::move(p));
  }
  const fs::path trace = work / "const.jsonl";
  bandmod::write_flow_jsonl(flow, trace.string());

  const auto r = run("featurize --trace " + trace.string() + " --bin 1.0 --window 4 --out " +
                     (work / "features").string());
  REQUIRE_MESSAGE(r.exit_code == 0, r.out);

  std::ifstream tp(work / "features" / "const_throughput.csv");
  std::string line;
  std::getline(tp, line);
  CHECK(line == "bin_start_s,throughput_bytes_per_s");
  int rows = 0;
  while (std::getline(tp, line)) {
    CHECK(line.substr(line.find(',') + 1) == "4000");
    ++rows;
  }
  CHECK(rows == 10);

  std::ifstream iat(work / "features" / "const_iat.csv");
  std::getline(iat, line);
  CHECK(line == "index,rolling_iat_s");
  while (std::getline(iat, line)) {
    CHECK(line.substr(line.find(',') + 1) == "0.25");
  }
}

TEST_CASE("featurize handles an empty flow with a header-only csv") {
  const fs::path work = fresh_dir("bandmod_cli_feat_empty");
  bandmod::FlowTrace flow;
  flow.flow_id = "empty";
  const fs::path trace = work / "empty.jsonl";
  bandmod::write_flow_jsonl(flow, trace.string());
  const auto r =
      run("featurize --trace " + trace.string() + " --out " + (work / "f").string());
  REQUIRE(r.exit_code == 0);
  CHECK(slurp(work / "f" / "empty_throughput.csv") == "bin_start_s,throughput_bytes_per_s\n");
  CHECK(slurp(work / "f" / "empty_iat.csv") == "index,rolling_iat_s\n");
}

TEST_CASE("shape-trace applies the modulation to a stored trace") {
  const fs::path work = fresh_dir("bandmod_cli_shape");
  bandmod::FlowTrace flow;
  flow.flow_id = "offered";
  for (int i = 0; i < 200; ++i) {
    bandmod::PacketRecord p;
    p.ts_us = static_cast<int64_t>(i) * 10000;
    p.size = 1000;
    flow.packets.push_back(std::move(p));
  }
  const fs::path in = work / "in.jsonl";
  bandmod::write_flow_jsonl(flow, in.string());
  const fs::path spec = work / "spec.json";
  {
    std::ofstream f(spec);
    f << R"({"kind":"sine","r_base":50000,"amplitude_A":20000,"f_mod":0.1,)"
      << R"("phase_phi":0,"r_min":5000,"r_max":70000})" << "\n";
  }
  const fs::path out = work / "out.jsonl";
  const auto r = run("shape-trace --in " + in.string() + " --spec " + spec.string() +
                     " --capacity 2000 --out " + out.string());
  REQUIRE_MESSAGE(r.exit_code == 0, r.out);
  const bandmod::FlowTrace shaped = bandmod::read_flow_jsonl_file(out.string());
  REQUIRE(shaped.packets.size() == flow.packets.size());
  for (size_t i = 1; i < shaped.packets.size(); ++i)
    CHECK(shaped.packets[i].ts_us >= shaped.packets[i - 1].ts_us);
}

TEST_SUITE_END();
