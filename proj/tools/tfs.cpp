// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: generate / train / eval / bench / plot.

#include "tfs/evaluation.hpp"
#include "tfs/plot.hpp"
#include "tfs/scene.hpp"
#include "tfs/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Usage / IO problems the user can fix; mapped to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string resolve(const std::string& root, const std::string& path) {
  if (path.empty()) return path;
  fs::path p(path);
  return p.is_absolute() ? path : (fs::path(root) / p).string();
}

std::string timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

json load_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw UsageError(std::string(what) + ": cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw UsageError(std::string(what) + ": invalid JSON in " + path + ": " +
                     e.what());
  }
  return j;
}

// Refuses an existing non-empty output directory unless --overwrite.
void prepare_out_dir(const std::string& path, bool overwrite) {
  if (fs::exists(path) && !fs::is_empty(path)) {
    if (!overwrite)
      throw UsageError("output directory " + path +
                       " is not empty (use --overwrite)");
    fs::remove_all(path);
  }
  fs::create_directories(path);
}

void write_manifest(const std::string& run_dir, const std::string& command,
                    const json& config, std::uint64_t seed,
                    const std::string& ds_hash, const json& outputs,
                    const std::string& started) {
  json m;
  m["command"] = command;
  m["code_version"] = kVersion;
  m["config"] = config;
  m["seed"] = seed;
  m["dataset_hash"] = ds_hash;
  m["outputs"] = outputs;
  m["started"] = started;
  m["finished"] = timestamp();
  std::ofstream out(fs::path(run_dir) / "manifest.json");
  out << m.dump(2) << '\n';
}

tfs::Dataset open_dataset(const std::string& path) {
  if (!fs::exists(fs::path(path) / "meta.json"))
    throw UsageError("dataset not found at " + path);
  return tfs::load_dataset(path);
}

int cmd_generate(const std::string& spec_path, const std::string& out,
                 std::uint64_t seed, int frames, int cams, bool overwrite,
                 int mesh_res) {
  std::string started = timestamp();
  json spec = spec_path.empty() ? json::object()
                                : load_json_file(spec_path, "generate");
  tfs::SceneConfig cfg = tfs::SceneConfig::from_json(spec);
  if (frames > 0) cfg.frames = frames;
  if (cams > 0) cfg.cams = cams;

  prepare_out_dir(out, overwrite);
  tfs::AnalyticScene scene = tfs::build_scene(cfg);
  std::vector<tfs::FramePose> poses = tfs::pose_sequence(scene, cfg.frames);
  std::vector<tfs::Camera> cameras = tfs::make_cameras(cfg);
  tfs::export_dataset(scene, poses, cameras, out, seed, true, mesh_res);

  std::string hash = tfs::dataset_hash(out);
  write_manifest(out, "generate", cfg.to_json(), seed, hash,
                 json{{"dataset", out}}, started);
  std::cout << "dataset: " << out << "\n  frames: " << cfg.frames
            << "\n  cameras: " << cfg.cams << "\n  entities: 2"
            << "\n  hash: " << hash << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& dataset_path,
              const std::string& out, const std::string& backend, int steps,
              std::int64_t seed, bool overwrite) {
  std::string started = timestamp();
  json jcfg = config_path.empty() ? json::object()
                                  : load_json_file(config_path, "train");
  // CLI flags override file values; the merged config enters the manifest.
  if (!backend.empty()) jcfg["backend"] = backend;
  if (steps >= 0) jcfg["steps"] = steps;
  if (seed >= 0) jcfg["seed"] = static_cast<std::uint64_t>(seed);
  tfs::TrainConfig cfg;
  try {
    cfg = tfs::TrainConfig::from_json(jcfg);
  } catch (const tfs::InvalidInput& e) {
    throw UsageError(e.what());
  }

  tfs::Dataset dataset = open_dataset(dataset_path);
  prepare_out_dir(out, overwrite);
  tfs::TrainResult res = tfs::train(cfg, dataset, out);
  write_manifest(out, "train", cfg.to_json(), cfg.seed,
                 tfs::dataset_hash(dataset_path),
                 json{{"log", out + "/train_log.csv"},
                      {"checkpoints", out + "/checkpoints"}},
                 started);
  if (res.nan_abort) {
    std::cerr << "train: non-finite loss at step " << res.abort_step
              << "; aborted (last checkpoint retained)\n";
    return kExitRuntime;
  }
  std::cout << "trained " << res.steps_done << " steps (" << cfg.backend
            << ") -> " << out << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& dataset_path,
             const std::string& out, const std::vector<int>& frames,
             double threshold_cm, int mesh_res, int n_points, bool vertices,
             bool overwrite) {
  std::string started = timestamp();
  if (!fs::exists(ckpt_path))
    throw UsageError("checkpoint not found at " + ckpt_path);
  tfs::Dataset dataset = open_dataset(dataset_path);
  tfs::SceneModel model =
      tfs::SceneModel::load(tfs::Checkpoint::load(ckpt_path), dataset);
  prepare_out_dir(out, overwrite);

  tfs::EvalOptions opts;
  opts.frames = frames;
  opts.threshold_cm = threshold_cm;
  opts.mesh_res = mesh_res;
  opts.n_points = n_points;
  opts.use_vertices = vertices;
  tfs::EvalResult res = tfs::evaluate_run(model, dataset, opts, out);

  write_manifest(out, "eval", model.config().to_json(), model.config().seed,
                 tfs::dataset_hash(dataset_path),
                 json{{"metrics_csv", out + "/metrics.csv"},
                      {"metrics_json", out + "/metrics.json"}},
                 started);
  for (const auto& [group, rep] : res.aggregate)
    std::cout << group << ": chamfer " << rep.chamfer_cm << " cm, f-score "
              << rep.f_score_pct << " %\n";
  if (!res.skipped_frames.empty())
    std::cout << "skipped " << res.skipped_frames.size()
              << " frame(s) with missing ground truth\n";
  return 0;
}

int cmd_bench(const std::string& config_path, const std::string& dataset_path,
              const std::string& out, double budget_s, bool overwrite,
              int eval_res, int eval_points) {
  std::string started = timestamp();
  json jcfg = config_path.empty() ? json::object()
                                  : load_json_file(config_path, "bench");
  tfs::TrainConfig cfg;
  try {
    cfg = tfs::TrainConfig::from_json(jcfg);
  } catch (const tfs::InvalidInput& e) {
    throw UsageError(e.what());
  }
  tfs::Dataset dataset = open_dataset(dataset_path);
  prepare_out_dir(out, overwrite);

  tfs::BenchResult res =
      tfs::bench_backends(cfg, dataset, budget_s, out, eval_res, eval_points);
  std::string plot = tfs::plot_bench(out + "/bench.csv", out + "/bench.svg");
  write_manifest(out, "bench", cfg.to_json(), cfg.seed,
                 tfs::dataset_hash(dataset_path),
                 json{{"csv", out + "/bench.csv"}, {"plot", plot}}, started);
  std::cout << "bench: step time inn " << res.step_time_inn << " s, broyden "
            << res.step_time_broyden << " s"
            << (res.budget_exhausted ? " (budget exhausted)" : "") << "\n";
  return 0;
}

int cmd_plot(const std::string& run_dir, const std::string& out) {
  std::string log = run_dir + "/train_log.csv";
  if (!fs::exists(log)) throw UsageError("no train_log.csv under " + run_dir);
  std::vector<std::string> written;
  try {
    written = tfs::plot_train_log(log, out);
  } catch (const tfs::InvalidInput& e) {
    throw UsageError(e.what());
  }
  if (fs::exists(run_dir + "/bench.csv"))
    written.push_back(tfs::plot_bench(run_dir + "/bench.csv", out + "/bench.svg"));
  for (const std::string& p : written) std::cout << p << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Template-free semantic reconstruction of dynamic scenes"};
  app.require_subcommand(1);
  std::string root = ".";
  app.add_option("--root", root, "Base directory for relative paths");

  // generate
  auto* gen = app.add_subcommand("generate", "Synthesize a dataset");
  std::string gen_spec, gen_out;
  std::uint64_t gen_seed = 0;
  int gen_frames = -1, gen_cams = -1, gen_mesh_res = 96;
  bool gen_overwrite = false;
  gen->add_option("--spec", gen_spec, "Scene config JSON (defaults when omitted)");
  gen->add_option("--out", gen_out, "Dataset directory")->required();
  gen->add_option("--seed", gen_seed, "RNG seed");
  gen->add_option("--frames", gen_frames, "Override frame count");
  gen->add_option("--cams", gen_cams, "Override camera count");
  gen->add_option("--mesh-res", gen_mesh_res, "Ground-truth mesh grid resolution");
  gen->add_flag("--overwrite", gen_overwrite, "Replace an existing dataset");

  // train
  auto* tr = app.add_subcommand("train", "Optimize a scene model");
  std::string tr_config, tr_dataset, tr_out, tr_backend;
  int tr_steps = -1;
  std::int64_t tr_seed = -1;
  bool tr_overwrite = false;
  tr->add_option("--config", tr_config, "Training config JSON");
  tr->add_option("--dataset", tr_dataset, "Dataset directory")->required();
  tr->add_option("--out", tr_out, "Run directory")->required();
  tr->add_option("--backend", tr_backend, "inn or broyden")
      ->check(CLI::IsMember({"", "inn", "broyden"}));
  tr->add_option("--steps", tr_steps, "Override step count");
  tr->add_option("--seed", tr_seed, "Override RNG seed");
  tr->add_flag("--overwrite", tr_overwrite, "Replace an existing run directory");

  // eval
  auto* ev = app.add_subcommand("eval", "Score a checkpoint against ground truth");
  std::string ev_ckpt, ev_dataset, ev_out;
  std::vector<int> ev_frames;
  double ev_threshold = 5.0;
  int ev_mesh_res = 192, ev_points = 10000;
  bool ev_vertices = false, ev_overwrite = false;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--dataset", ev_dataset, "Dataset directory")->required();
  ev->add_option("--out", ev_out, "Report directory")->required();
  ev->add_option("--frames", ev_frames, "Frame subset (default: all)");
  ev->add_option("--threshold-cm", ev_threshold, "Precision/recall threshold");
  ev->add_option("--mesh-res", ev_mesh_res, "Marching-cubes resolution");
  ev->add_option("--points", ev_points, "Surface samples per mesh");
  ev->add_flag("--vertices", ev_vertices, "Score vertices instead of samples");
  ev->add_flag("--overwrite", ev_overwrite, "Replace an existing report");

  // bench
  auto* be = app.add_subcommand("bench", "Compare inn and broyden backends");
  std::string be_config, be_dataset, be_out;
  double be_budget = 3600.0;
  int be_eval_res = 48, be_eval_points = 2000;
  bool be_overwrite = false;
  be->add_option("--config", be_config, "Training config JSON");
  be->add_option("--dataset", be_dataset, "Dataset directory")->required();
  be->add_option("--out", be_out, "Output directory")->required();
  be->add_option("--budget-s", be_budget, "Total wall-clock budget (seconds)");
  be->add_option("--eval-res", be_eval_res, "Chamfer-eval mesh resolution");
  be->add_option("--eval-points", be_eval_points, "Chamfer-eval sample count");
  be->add_flag("--overwrite", be_overwrite, "Replace an existing output");

  // plot
  auto* pl = app.add_subcommand("plot", "Render loss curves from a run");
  std::string pl_run, pl_out;
  pl->add_option("--run", pl_run, "Run directory")->required();
  pl->add_option("--out", pl_out, "Image directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen)
      return cmd_generate(resolve(root, gen_spec), resolve(root, gen_out),
                          gen_seed, gen_frames, gen_cams, gen_overwrite,
                          gen_mesh_res);
    if (*tr)
      return cmd_train(resolve(root, tr_config), resolve(root, tr_dataset),
                       resolve(root, tr_out), tr_backend, tr_steps, tr_seed,
                       tr_overwrite);
    if (*ev)
      return cmd_eval(resolve(root, ev_ckpt), resolve(root, ev_dataset),
                      resolve(root, ev_out), ev_frames, ev_threshold,
                      ev_mesh_res, ev_points, ev_vertices, ev_overwrite);
    if (*be)
      return cmd_bench(resolve(root, be_config), resolve(root, be_dataset),
                       resolve(root, be_out), be_budget, be_overwrite,
                       be_eval_res, be_eval_points);
    if (*pl) return cmd_plot(resolve(root, pl_run), resolve(root, pl_out));
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
