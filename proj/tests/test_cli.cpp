#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "flowseg/model.hpp"
#include "flowseg/wire.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

#ifndef FLOWSEG_CLI_PATH
#error "FLOWSEG_CLI_PATH must point at the flowseg executable"
#endif

namespace {

int run(const std::string& args) {
  const std::string cmd = "env -u FLOWSEG_CHECKPOINT " + std::string(FLOWSEG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("cli exit codes and outputs") {
  const fs::path dir = fs::temp_directory_path() / "flowseg_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string d = dir.string();

  CHECK(run("") == 2);
  CHECK(run("gen --bogus") == 2);
  CHECK(run("gen --mode sideways --out " + d) == 2);
  CHECK(run("eval --heldout volumetric") == 2);

  CHECK(run("gen --mode unordered --n 5 --seed 1 --frames 3 --size 16 --out " + d + "/u") == 0);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "u")) files += e.path().extension() == ".flow";
  CHECK(files == 5);

  const fs::path ckpt = dir / "tiny.ckpt";
  flowseg::save_checkpoint(flowseg::ModelParams(flowseg::ModelConfig::tiny(), 4), ckpt);
  const std::string flow = (dir / "u" / "flow_0000.flow").string();
  const std::string prompt = R"('{"frame":0,"type":"auto","kind":"mask"}')";
  const std::string base = "propagate --checkpoint " + ckpt.string() + " --flow " + flow + " --prompt " + prompt;
  CHECK(run(base + " --out " + d + "/a.fmsk --metrics " + d + "/a.json") == 0);
  CHECK(run(base + " --out " + d + "/b.fmsk --metrics " + d + "/b.json") == 0);
  CHECK(flowseg::wire::read_file(dir / "a.fmsk") == flowseg::wire::read_file(dir / "b.fmsk"));
  std::ifstream mj(dir / "a.json");
  const json metrics = json::parse(mj);
  CHECK(metrics.at("frames").size() == 3);
  CHECK(metrics.contains("mean_dice"));

  CHECK(run("score --flow " + flow + " --pred " + d + "/a.fmsk --report " + d + "/score.jsonl") == 0);
  CHECK(run("propagate --checkpoint " + ckpt.string() + " --flow " + flow + " --prompt '{bad' --out " + d + "/c.fmsk") == 2);
  CHECK(run("propagate --checkpoint " + d + "/none.ckpt --flow " + flow + " --prompt " + prompt + " --out " + d + "/c.fmsk") == 1);
  CHECK(run("eval --checkpoint " + ckpt.string() + " --data " + d + "/u --bank-mode confidence --report " + d + "/e.jsonl") == 0);
  CHECK(run("eval --checkpoint " + ckpt.string() + " --data " + d + "/u --bank-mode lru") == 2);
  CHECK(run("train --steps 2 --size 16 --frames 3 --n-volumetric 2 --n-unordered 2 --out " + d + "/t.ckpt") == 0);
  CHECK(flowseg::load_checkpoint(dir / "t.ckpt").step == 2);
  fs::remove_all(dir);
}
