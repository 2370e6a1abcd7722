#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mstd/bytes.hpp"
#include "mstd/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kCli = MSTD_CLI_PATH;
const fs::path kTiny = fs::path(MSTD_SOURCE_DIR) / "configs" / "tiny.json";

struct Result {
  int code = -1;
  std::string out;
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mstd_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Result cli(const std::string& args, const fs::path& dir) {
  const fs::path out = dir / "stdout.txt";
  const std::string cmd = kCli.string() + " " + args + " > " + out.string() + " 2> " + (dir / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

void write_config(const fs::path& path, const nlohmann::json& doc) { std::ofstream(path) << doc.dump(2); }

nlohmann::json tiny_doc() {
  std::ifstream in(kTiny);
  return nlohmann::json::parse(in);
}

std::string bytes_of(const fs::path& p) {
  const auto b = mstd::read_file(p);
  return std::string(b.begin(), b.end());
}

}  // namespace

TEST_CASE("cli: usage and configuration failures exit 2") {
  const fs::path dir = scratch("usage");
  CHECK(cli("", dir).code == 2);
  CHECK(cli("frobnicate", dir).code == 2);
  CHECK(cli("train --config " + kTiny.string(), dir).code == 2);  // --out missing
  CHECK(cli("train --config " + kTiny.string() + " --out x --stage s4", dir).code == 2);
  CHECK(cli("train --config /nonexistent.json --out " + (dir / "r").string(), dir).code == 2);

  nlohmann::json doc = tiny_doc();
  doc["plan"]["k"] = 99;
  write_config(dir / "k.json", doc);
  CHECK(cli("train --config " + (dir / "k.json").string() + " --out " + (dir / "r").string(), dir).code == 2);
  CHECK_FALSE(fs::exists(dir / "r" / "metrics.jsonl"));
  CHECK(cli("--help", dir).code == 0);
}

TEST_CASE("cli: missing prerequisites exit 4 and name the path") {
  const fs::path dir = scratch("deps");
  CHECK(cli("train --config " + kTiny.string() + " --stage s2 --out " + (dir / "r").string(), dir).code == 4);
  std::ifstream err(dir / "stderr.txt");
  std::stringstream ss;
  ss << err.rdbuf();
  CHECK(ss.str().find("data.mstd") != std::string::npos);
}

TEST_CASE("cli: unreadable or corrupt files exit 3") {
  const fs::path dir = scratch("io");
  CHECK(cli("eval --checkpoint /nonexistent.ckpt --data /nonexistent.mstd --seed 1", dir).code == 3);
  std::ofstream(dir / "junk.mstd") << "not a dataset";
  REQUIRE(cli("train --config " + kTiny.string() + " --stage s1 --seed 1 --out " + (dir / "r").string(), dir).code == 0);
  CHECK(cli("eval --checkpoint " + (dir / "r" / "s1" / "m2.ckpt").string() + " --data " + (dir / "junk.mstd").string(),
            dir).code == 3);
}

TEST_CASE("cli: diverging training exits 5") {
  const fs::path dir = scratch("numeric");
  nlohmann::json doc = tiny_doc();
  doc["train"]["lr"] = 1e30;
  write_config(dir / "hot.json", doc);
  CHECK(cli("train --config " + (dir / "hot.json").string() + " --out " + (dir / "r").string(), dir).code == 5);
}

TEST_CASE("cli: eval of the saved student reproduces the logged final metrics") {
  const fs::path dir = scratch("train");
  const fs::path run = dir / "run";
  REQUIRE(cli("train --config " + kTiny.string() + " --seed 3 --out " + run.string(), dir).code == 0);
  for (const char* f : {"run.json", "data.mstd", "metrics.jsonl", "registry.json", "s3/student.ckpt", "s3/gatenet.ckpt"}) {
    CHECK(fs::exists(run / f));
  }
  std::ifstream log(run / "metrics.jsonl");
  std::string line;
  mstd::LogLine last_val, last_test;
  while (std::getline(log, line)) {
    const mstd::LogLine l = mstd::parse_log_line(line);
    if (l.stage != "s3") continue;
    (l.split == "val" ? last_val : last_test) = l;
  }
  for (const auto& [split, want] : {std::pair{"val", last_val}, std::pair{"test", last_test}}) {
    CAPTURE(split);
    const Result r = cli("eval --checkpoint " + (run / "s3" / "student.ckpt").string() + " --data " +
                             (run / "data.mstd").string() + " --split " + split,
                         dir);
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(r.out);
    CHECK(j["overall_accuracy"].get<double>() == want.oa);
    CHECK(j["loss"].get<double>() == want.loss);
    CHECK(j["split"] == split);
  }

  const Result routes = cli("route-stats --run-dir " + run.string(), dir);
  REQUIRE(routes.code == 0);
  CHECK(routes.out.find("MM@m0") != std::string::npos);
  CHECK(routes.out.find("CM@m1") != std::string::npos);
  std::istringstream table(routes.out);
  std::getline(table, line);  // header
  int rows = 0;
  while (std::getline(table, line)) {
    std::istringstream cells(line);
    int epoch = -1;
    cells >> epoch;
    CHECK(epoch == rows);
    double sum = 0.0, v = 0.0;
    while (cells >> v) sum += v;
    CHECK(std::fabs(sum - 1.0) <= 1e-5);
    ++rows;
  }
  CHECK(rows == tiny_doc()["plan"]["epochs"]["s3"].get<int>());
}

TEST_CASE("cli: staged training matches a single full run") {
  const fs::path dir = scratch("staged");
  const std::string base = "train --config " + kTiny.string() + " --seed 4 --out ";
  REQUIRE(cli(base + (dir / "all").string(), dir).code == 0);
  for (const char* st : {"s1", "s2", "s3"}) {
    REQUIRE(cli(base + (dir / "staged").string() + " --stage " + st, dir).code == 0);
  }
  CHECK(bytes_of(dir / "all" / "metrics.jsonl") == bytes_of(dir / "staged" / "metrics.jsonl"));
  CHECK(bytes_of(dir / "all" / "s3" / "student.ckpt") == bytes_of(dir / "staged" / "s3" / "student.ckpt"));
}

TEST_CASE("cli: gen-data and compare") {
  const fs::path dir = scratch("compare");
  REQUIRE(cli("gen-data --config " + kTiny.string() + " --seed 2 --out " + (dir / "d.mstd").string(), dir).code == 0);
  REQUIRE(cli("gen-data --config " + kTiny.string() + " --seed 2 --out " + (dir / "e.mstd").string(), dir).code == 0);
  CHECK(fs::file_size(dir / "d.mstd") > 0);
  CHECK(bytes_of(dir / "d.mstd") == bytes_of(dir / "e.mstd"));
  const Result r = cli("compare --config " + kTiny.string() + " --seeds 1,2 --methods no_kd,mst --out " +
                           (dir / "rep").string(),
                       dir);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("no_kd") != std::string::npos);
  CHECK(r.out.find("mst") != std::string::npos);
  std::ifstream in(dir / "rep" / "report.json");
  const auto j = nlohmann::json::parse(in);
  REQUIRE(j["rows"].size() == 2);
  for (const auto& row : j["rows"]) {
    const auto per_seed = row["per_seed"].get<std::vector<double>>();
    REQUIRE(per_seed.size() == 2);
    CHECK(std::fabs(row["mean"].get<double>() - (per_seed[0] + per_seed[1]) / 2.0) <= 1e-9);
    for (double v : per_seed) CHECK((v >= 0.0 && v <= 1.0));
  }
  CHECK(j["rows"][0]["method"] == "no_kd");
  CHECK(j["rows"][0]["gain_over_no_kd"].get<double>() == 0.0);
  CHECK(cli("compare --config " + kTiny.string() + " --seeds 1 --methods nope --out " + (dir / "rep").string(), dir)
            .code == 2);
}
