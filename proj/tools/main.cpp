#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "nnbf/config.hpp"
#include "nnbf/selftest.hpp"
#include "nnbf/serialize.hpp"

namespace fs = std::filesystem;
using namespace nnbf;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string manifest_path;
  std::string out_dir;
  std::string checkpoint;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int jobs = 1;
};

cli::ExperimentConfig load_config(const CommonArgs& args, std::string* command) {
  cli::ExperimentConfig cfg;
  if (!args.manifest_path.empty()) {
    cfg = cli::config_from_manifest(args.manifest_path, command);
  } else if (!args.config_path.empty()) {
    cfg = cli::parse_config(args.config_path);
  } else {
    throw cli::ParseError("either --config or --from-manifest is required");
  }
  if (args.seed_set) {
    cfg.seed = args.seed;
    cfg.training.seed = args.seed;
  }
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (const char* env = std::getenv("NNBF_OUT_DIR")) cfg.out_dir = env;
  return cfg;
}

fs::path prepare_out_dir(const cli::ExperimentConfig& cfg) {
  fs::path dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  // probe writability regardless of create_directories outcome
  fs::path probe = dir / ".write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw IoError("output directory not writable: " + dir.string());
  }
  fs::remove(probe, ec);
  return dir;
}

void echo_defaults(const cli::ExperimentConfig& cfg) {
  for (const auto& d : cfg.applied_defaults) std::cout << "default: " << d << "\n";
}

int cmd_train(const CommonArgs& args) {
  std::string command = "train";
  cli::ExperimentConfig cfg = load_config(args, &command);
  echo_defaults(cfg);
  fs::path dir = prepare_out_dir(cfg);

  model::Model m(cfg.model, cfg.seed);
  std::cout << "model parameters: " << m.param_count() << "\n";
  train::CurriculumSchedule sched =
      train::CurriculumSchedule::standard(cfg.steps_per_stage);
  std::int64_t total = sched.total_steps();
  auto progress = [&](const train::TrainLogRow& row) {
    if (row.step % 100 == 0 || row.step + 1 == total)
      std::cout << "step " << row.step << "/" << total << "  stage " << row.stage
                << "  snr " << row.snr_db << " dB  loss " << row.loss
                << "  sum-rate " << row.sum_rate << std::endl;
  };
  train::TrainResult result =
      train::train(m, cfg.training, sched, cfg.scenario, progress);

  fs::path ckpt = dir / "checkpoint.bin";
  fs::path csv = dir / "train_log.csv";
  fs::path manifest = dir / "manifest.json";
  m.save_checkpoint(ckpt.string());
  io::write_text_file(csv.string(), train::train_log_csv(result, cfg.scenario.N));
  io::write_text_file(manifest.string(),
                      cli::manifest_json("train", cfg, {ckpt.string(), csv.string()}));
  if (result.diverged) {
    std::cerr << "training diverged after " << result.steps_done
              << " steps; last finite-loss checkpoint retained\n";
    return cli::kExitDiverged;
  }
  std::cout << "wrote " << ckpt.string() << ", " << csv.string() << ", "
            << manifest.string() << "\n";
  return cli::kExitOk;
}

int cmd_eval(const CommonArgs& args) {
  std::string command = "eval";
  cli::ExperimentConfig cfg = load_config(args, &command);
  echo_defaults(cfg);

  bool wants_nnbf = false;
  for (auto b : cfg.eval.beamformers)
    if (b == linkeval::BeamformerKind::Nnbf) wants_nnbf = true;
  std::optional<model::Model> m;
  if (wants_nnbf) {
    if (args.checkpoint.empty()) {
      std::cerr << "nnbf beamformer requested but no --checkpoint given\n";
      return cli::kExitCheckpointMismatch;
    }
    m.emplace(model::Model::load_checkpoint(args.checkpoint));
    const auto& mc = m->config();
    if (mc.M != cfg.scenario.M || mc.N != cfg.scenario.N || mc.L != cfg.scenario.L ||
        mc.K != cfg.scenario.K) {
      std::cerr << "checkpoint/scenario mismatch:\n  checkpoint: M=" << mc.M
                << " N=" << mc.N << " L=" << mc.L << " K=" << mc.K
                << "\n  scenario:   M=" << cfg.scenario.M << " N=" << cfg.scenario.N
                << " L=" << cfg.scenario.L << " K=" << cfg.scenario.K << "\n";
      return cli::kExitCheckpointMismatch;
    }
  }

  fs::path dir = prepare_out_dir(cfg);
  linkeval::LinkConfig link;
  link.scenario = cfg.scenario;
  link.modulation_order = cfg.eval.modulation;
  link.coded = cfg.eval.coded;
  link.rate = cfg.eval.rate;
  link.pilot_len = cfg.eval.pilot_len;
  auto rows = linkeval::sweep(link, cfg.eval.beamformers, m ? &*m : nullptr,
                              cfg.eval.snr_db, cfg.eval.trials, cfg.seed, args.jobs);

  fs::path csv = dir / "metrics.csv";
  fs::path js = dir / "metrics.json";
  fs::path manifest = dir / "eval_manifest.json";
  io::write_text_file(csv.string(), linkeval::metrics_csv(rows));
  io::write_text_file(js.string(), linkeval::metrics_json(rows));
  io::write_text_file(manifest.string(),
                      cli::manifest_json("eval", cfg, {csv.string(), js.string()}));

  // dominance summary per beamformer pair
  size_t nb = cfg.eval.beamformers.size();
  size_t ns = cfg.eval.snr_db.size();
  for (size_t a = 0; a < nb; ++a)
    for (size_t b = a + 1; b < nb; ++b) {
      std::string na = rows[a * ns].beamformer;
      std::string nbm = rows[b * ns].beamformer;
      std::string where;
      for (size_t s = 0; s < ns; ++s) {
        bool adom = rows[a * ns + s].sum_rate_mean >= rows[b * ns + s].sum_rate_mean;
        if (adom) {
          if (!where.empty()) where += ", ";
          where += std::to_string(cfg.eval.snr_db[s]);
        }
      }
      std::cout << "summary: " << na << " >= " << nbm << " (sum-rate) at SNR {"
                << (where.empty() ? "none" : where) << "} dB\n";
    }
  std::cout << "wrote " << csv.string() << ", " << js.string() << ", "
            << manifest.string() << "\n";
  return cli::kExitOk;
}

int cmd_show_config(const CommonArgs& args) {
  std::string command;
  cli::ExperimentConfig cfg = load_config(args, &command);
  echo_defaults(cfg);
  std::cout << cfg.to_text();
  return cli::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uplink MU-SIMO beamforming simulator and trainer"};
  app.require_subcommand(1);

  CommonArgs args;
  auto add_common = [&](CLI::App* sub, bool with_checkpoint) {
    sub->add_option("--config", args.config_path, "experiment config file");
    sub->add_option("--from-manifest", args.manifest_path,
                    "reproduce a run from its manifest");
    sub->add_option("--out", args.out_dir, "output directory override");
    sub->add_option("--seed", args.seed, "root seed override")
        ->each([&](const std::string&) { args.seed_set = true; });
    sub->add_option("--jobs", args.jobs, "worker threads for sweeps");
    if (with_checkpoint)
      sub->add_option("--checkpoint", args.checkpoint, "model checkpoint path");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "train the neural beamformer");
  add_common(train_cmd, false);
  CLI::App* eval_cmd = app.add_subcommand("eval", "run the link-level sweep");
  add_common(eval_cmd, true);
  CLI::App* show_cmd = app.add_subcommand("show-config", "print the resolved config");
  add_common(show_cmd, false);
  app.add_subcommand("selftest", "run the fast invariant suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("selftest")) {
      auto results = selftest::run_selftest(std::cout);
      if (selftest::all_passed(results)) return cli::kExitOk;
      std::cerr << "selftest failed:";
      for (const auto& r : results)
        if (!r.passed) std::cerr << " " << r.name;
      std::cerr << "\n";
      return cli::kExitSelftestFailed;
    }
    if (app.got_subcommand("train")) return cmd_train(args);
    if (app.got_subcommand("eval")) return cmd_eval(args);
    if (app.got_subcommand("show-config")) return cmd_show_config(args);
  } catch (const cli::ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return cli::kExitConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return cli::kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return cli::kExitIo;
  } catch (const TrainingDivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return cli::kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return cli::kExitIo;
  }
  return cli::kExitOk;
}
