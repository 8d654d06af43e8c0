// flowseg command line: gen / train / eval / propagate / score / serve.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowseg/engine.hpp"
#include "flowseg/errors.hpp"
#include "flowseg/metrics.hpp"
#include "flowseg/model.hpp"
#include "flowseg/service.hpp"
#include "flowseg/trainer.hpp"
#include "flowseg/wire.hpp"

namespace fs = std::filesystem;
using namespace flowseg;
using nlohmann::json;

namespace {

struct UsageFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string checkpoint_or_env(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("FLOWSEG_CHECKPOINT"); env && *env) return env;
  throw UsageFailure("--checkpoint is required (or set FLOWSEG_CHECKPOINT)");
}

std::vector<fs::path> flow_files(const fs::path& p) {
  std::vector<fs::path> out;
  if (fs::is_directory(p)) {
    for (const auto& e : fs::directory_iterator(p))
      if (e.path().extension() == ".flow") out.push_back(e.path());
    std::sort(out.begin(), out.end());
  } else {
    out.push_back(p);
  }
  return out;
}

void write_json_lines(const std::vector<json>& lines, const std::string& out_path) {
  if (out_path.empty() || out_path == "-") {
    for (const auto& j : lines) std::cout << j.dump() << '\n';
    return;
  }
  std::ofstream out(out_path);
  if (!out) throw Error("cannot open " + out_path + " for writing");
  for (const auto& j : lines) out << j.dump() << '\n';
}

json frame_line(const trainer::FrameScore& f) {
  return {{"kind", "frame"}, {"flow", f.flow}, {"frame", f.frame}, {"dice", f.dice}, {"iou", f.iou},
          {"hd95", f.hd95 ? json(*f.hd95) : json(nullptr)}, {"confidence", f.confidence}};
}

json summary_line(const trainer::MetricSummary& s) {
  return {{"kind", "summary"},      {"flows", s.flows},         {"frames", s.frames},
          {"mean_dice", s.mean_dice}, {"mean_iou", s.mean_iou},   {"mean_hd95", s.mean_hd95},
          {"hd95_frames", s.hd95_frames}, {"hd95_excluded", s.hd95_excluded}, {"spearman", s.spearman}};
}

service::HttpServer* g_server = nullptr;
void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowseg: memory-conditioned segmentation of image flows"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "synthesize a dataset of .flow files");
  std::string gen_mode = "volumetric", gen_out, gen_class;
  std::size_t gen_n = 10, gen_frames = 8, gen_size = 64;
  std::uint64_t gen_seed = 0;
  gen->add_option("--mode", gen_mode, "volumetric or unordered")->check(CLI::IsMember({"volumetric", "unordered"}));
  gen->add_option("--n", gen_n, "number of flows");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--frames", gen_frames, "frames per flow");
  gen->add_option("--size", gen_size, "image side in pixels");
  gen->add_option("--task-class", gen_class, "ellipse, ring or polygon_blob (default: cycle)");
  gen->add_option("--out", gen_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train a model on synthetic flows");
  trainer::TrainConfig tc;
  std::string train_out, train_log;
  train->add_option("--steps", tc.steps);
  train->add_option("--seed", tc.seed);
  train->add_option("--data-seed", tc.data_seed);
  train->add_option("--lr", tc.learning_rate);
  train->add_option("--batch", tc.batch_flows);
  train->add_option("--lambda-bce", tc.loss.bce);
  train->add_option("--lambda-dice", tc.loss.dice);
  train->add_option("--lambda-cal", tc.loss.cal);
  train->add_option("--n-volumetric", tc.n_volumetric);
  train->add_option("--n-unordered", tc.n_unordered);
  train->add_option("--frames", tc.frames_per_flow);
  train->add_option("--size", tc.image_size);
  train->add_option("--checkpoint-every", tc.checkpoint_every);
  train->add_option("--checkpoint-dir", tc.checkpoint_dir);
  train->add_option("--log-every", tc.log_every, "progress line interval on stderr (0: silent)");
  train->add_option("--log", train_log, "write the training log as JSON lines");
  train->add_option("--out", train_out, "final checkpoint path")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint under the one-prompt protocol");
  std::string eval_ckpt, eval_bank = "native", eval_data, eval_heldout, eval_kind = "mask", eval_report;
  bool eval_frames = false;
  eval->add_option("--checkpoint", eval_ckpt);
  eval->add_option("--bank-mode", eval_bank)->check(CLI::IsMember({"none", "fifo", "confidence", "native"}));
  eval->add_option("--data", eval_data, ".flow file or directory");
  eval->add_option("--heldout", eval_heldout, "built-in held-out set")->check(CLI::IsMember({"volumetric", "unordered"}));
  eval->add_option("--prompt-kind", eval_kind)->check(CLI::IsMember({"point", "box", "mask"}));
  eval->add_option("--report", eval_report, "JSON lines output (default stdout)");
  eval->add_flag("--per-frame", eval_frames, "include one line per frame");

  // propagate
  auto* prop = app.add_subcommand("propagate", "segment one flow from a prompt");
  std::string prop_flow, prop_prompt, prop_ckpt, prop_out, prop_metrics, prop_bank;
  prop->add_option("--flow", prop_flow)->required();
  prop->add_option("--prompt", prop_prompt, "JSON {\"frame\":i, \"type\":...}")->required();
  prop->add_option("--checkpoint", prop_ckpt);
  prop->add_option("--bank", prop_bank, "bank config JSON");
  prop->add_option("--out", prop_out, "prediction file (.fmsk)")->required();
  prop->add_option("--metrics", prop_metrics, "metrics JSON path (default stdout)");

  // score
  auto* score = app.add_subcommand("score", "score a prediction file against a flow's ground truth");
  std::string score_flow, score_pred, score_report;
  score->add_option("--flow", score_flow)->required();
  score->add_option("--pred", score_pred)->required();
  score->add_option("--report", score_report);

  // serve
  auto* serve = app.add_subcommand("serve", "run the HTTP session service");
  std::string serve_ckpt, serve_host = "127.0.0.1";
  int serve_port = 8080;
  serve->add_option("--checkpoint", serve_ckpt);
  serve->add_option("--host", serve_host);
  serve->add_option("--port", serve_port);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) {
      const FlowMode mode = parse_flow_mode(gen_mode);
      fs::create_directories(gen_out);
      std::vector<Flow> flows;
      if (gen_class.empty()) {
        flows = trainer::make_dataset(mode, gen_n, gen_frames, gen_size, gen_seed).flows;
      } else {
        const TaskClass cls = parse_task_class(gen_class);
        for (std::size_t i = 0; i < gen_n; ++i) {
          const std::uint64_t s = mix_seed(gen_seed, i);
          flows.push_back(mode == FlowMode::volumetric ? generate_volume_flow(s, gen_frames, cls, gen_size)
                                                       : generate_unordered_flow(s, gen_frames, cls, gen_size));
        }
      }
      for (std::size_t i = 0; i < flows.size(); ++i) {
        std::ostringstream name;
        name << "flow_" << std::setw(4) << std::setfill('0') << i << ".flow";
        save_flow(flows[i], fs::path(gen_out) / name.str());
      }
      std::cout << json{{"written", flows.size()}, {"dir", gen_out}}.dump() << '\n';
      return 0;
    }

    if (*train) {
      tc.validate();
      const std::size_t every = tc.log_every;
      const auto [params, log] = trainer::train(tc, [&](const trainer::StepRecord& r) {
        if (every && r.step % every == 0)
          std::cerr << "step " << r.step << " loss " << r.loss.total() << " (bce " << r.loss.bce << ", dice "
                    << r.loss.dice << ", cal " << r.loss.cal << ")\n";
      });
      save_checkpoint(params, train_out);
      if (!train_log.empty()) {
        std::ofstream out(train_log);
        log.write_jsonl(out);
      }
      return 0;
    }

    if (*eval) {
      const auto params = std::make_shared<const ModelParams>(load_checkpoint(checkpoint_or_env(eval_ckpt)));
      if (eval_data.empty() == eval_heldout.empty()) throw UsageFailure("give exactly one of --data or --heldout");
      std::vector<Flow> flows;
      if (!eval_data.empty()) {
        for (const auto& p : flow_files(eval_data)) flows.push_back(load_flow(p));
      } else {
        flows = eval_heldout == "volumetric" ? trainer::heldout_volumetric() : trainer::heldout_unordered();
      }
      trainer::EvalOptions opt;
      opt.memory = trainer::parse_eval_memory(eval_bank);
      opt.prompt_kind = parse_prompt_kind(eval_kind);
      const auto summary = trainer::evaluate(params, flows, opt);
      std::vector<json> lines;
      if (eval_frames)
        for (const auto& f : summary.per_frame) lines.push_back(frame_line(f));
      json s = summary_line(summary);
      s["bank_mode"] = eval_bank;
      lines.push_back(s);
      write_json_lines(lines, eval_report);
      return 0;
    }

    if (*prop) {
      const auto params = std::make_shared<const ModelParams>(load_checkpoint(checkpoint_or_env(prop_ckpt)));
      const Flow flow = load_flow(prop_flow);
      json pj;
      try {
        pj = json::parse(prop_prompt);
      } catch (const json::parse_error& e) {
        throw UsageFailure(std::string("--prompt is not JSON: ") + e.what());
      }
      if (!pj.contains("frame") || !pj.at("frame").is_number_unsigned()) throw UsageFailure("--prompt needs a 'frame'");
      const std::size_t frame = pj.at("frame").get<std::size_t>();
      const Prompt prompt = wire::prompt_from_json(pj, flow, frame);
      engine::SessionConfig cfg = engine::default_session_config(flow.mode);
      if (!prop_bank.empty()) cfg.bank = wire::bank_config_from_json(json::parse(prop_bank), cfg.bank);
      engine::Session s = engine::start_session(flow, params, cfg);
      engine::add_prompt(s, frame, prompt);
      const auto result = engine::propagate(s);
      wire::save_predictions(result.masks, prop_out);

      json frames = json::array();
      double dice_sum = 0;
      for (std::size_t f = 0; f < flow.size(); ++f) {
        const double d = metrics::dice(result.masks[f].mask, flow.frames[f].mask);
        dice_sum += d;
        frames.push_back({{"frame", f},
                          {"dice", d},
                          {"iou", metrics::iou(result.masks[f].mask, flow.frames[f].mask)},
                          {"confidence", result.masks[f].confidence}});
      }
      const json m{{"flow", prop_flow}, {"order", result.order},       {"frames", frames},
                   {"mean_dice", dice_sum / static_cast<double>(flow.size())}, {"predictions", prop_out}};
      if (prop_metrics.empty()) std::cout << m.dump() << '\n';
      else std::ofstream(prop_metrics) << m.dump() << '\n';
      return 0;
    }

    if (*score) {
      const Flow flow = load_flow(score_flow);
      const auto preds = wire::load_predictions(score_pred);
      if (preds.size() != flow.size()) throw ShapeError("prediction file and flow differ in frame count");
      std::vector<json> lines;
      double dsum = 0, isum = 0, hsum = 0;
      std::size_t hn = 0;
      for (std::size_t f = 0; f < flow.size(); ++f) {
        const Mask& gt = flow.frames[f].mask;
        const double d = metrics::dice(preds[f].mask, gt), j = metrics::iou(preds[f].mask, gt);
        json line{{"kind", "frame"}, {"frame", f}, {"dice", d}, {"iou", j}, {"hd95", nullptr}};
        if (!preds[f].mask.empty() && !gt.empty()) {
          const double h = metrics::hd95(preds[f].mask, gt);
          line["hd95"] = h;
          hsum += h;
          ++hn;
        }
        dsum += d;
        isum += j;
        lines.push_back(line);
      }
      const double n = static_cast<double>(flow.size());
      lines.push_back({{"kind", "summary"}, {"frames", flow.size()}, {"mean_dice", dsum / n}, {"mean_iou", isum / n},
                       {"mean_hd95", hn ? hsum / static_cast<double>(hn) : 0.0}, {"hd95_excluded", flow.size() - hn}});
      write_json_lines(lines, score_report);
      return 0;
    }

    if (*serve) {
      const std::string ckpt = checkpoint_or_env(serve_ckpt);
      service::Service svc(std::make_shared<const ModelParams>(load_checkpoint(ckpt)));
      service::HttpServer server(svc);
      const int port = server.bind(serve_host, serve_port);
      if (port < 0) throw Error("cannot bind " + serve_host + ":" + std::to_string(serve_port));
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "serving on http://" << serve_host << ":" << port << " (checkpoint " << ckpt << ")\n";
      return server.run() ? 0 : 1;
    }
  } catch (const UsageFailure& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
