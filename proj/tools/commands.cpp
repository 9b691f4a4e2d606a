#include "commands.hpp"

#include "lift/checkpoint.hpp"
#include "lift/config.hpp"
#include "lift/efficiency.hpp"
#include "lift/gradcheck.hpp"
#include "lift/head.hpp"
#include "lift/synthetic.hpp"
#include "lift/training.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>

namespace lift::cli {
namespace {

using Real = float;

std::shared_ptr<spdlog::logger> logger() {
  static auto log = [] {
    auto l = spdlog::stderr_color_mt("lift");
    const char* level = std::getenv("LIFT_LOG_LEVEL");
    const std::string name = level ? level : "info";
    if (name == "error") {
      l->set_level(spdlog::level::err);
    } else if (name == "debug") {
      l->set_level(spdlog::level::debug);
    } else {
      l->set_level(spdlog::level::info);
    }
    return l;
  }();
  return log;
}

struct Flags {
  std::string config_path;
  std::string profile = "tiny";
  std::vector<std::pair<std::string, std::string>> overrides;
};

RunConfig resolve(const Flags& f) {
  RunConfig cfg;
  apply_profile(cfg, f.profile);
  if (!f.config_path.empty()) apply_config_file(cfg, f.config_path);
  for (const auto& [k, v] : f.overrides) apply_setting(cfg, k, v);
  cfg.validate();
  return cfg;
}

void echo(const RunConfig& cfg, std::ostream& out) {
  for (const auto& [k, v] : resolved_settings(cfg)) out << "config\t" << k << '\t' << v << '\n';
}

Rng init_rng(const RunConfig& cfg) {
  std::seed_seq seq{cfg.train.seed, std::uint64_t{0x696e6974}};
  return Rng(seq);
}

void print_metrics(std::ostream& out, const std::string& prefix, const EvalMetrics& m) {
  out << std::setprecision(9);
  out << prefix << "\tkeypoint_mse\t" << m.keypoint_mse << '\n';
  out << prefix << "\ttwist_angle_deg\t" << m.twist_angle_deg << '\n';
  out << prefix << "\tbeta_mse\t" << m.beta_mse << '\n';
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  if (cfg.train.epochs == 0) {
    logger()->info("epochs = 0, nothing to train");
    return kOk;
  }
  SyntheticTask<Real> task(cfg.head, cfg.data);
  const auto data = task.generate(static_cast<std::size_t>(cfg.n_train), 0);
  Rng rng = init_rng(cfg);
  const auto initial = HeadParams<Real>::make(cfg.head, rng);

  TrainConfig tc = cfg.train;
  tc.checkpoint_dir = cfg.out_dir;
  logger()->info("training {} parameters on {} samples", initial.element_count(), data.size());
  std::int64_t last_epoch = 0;
  auto result = train(initial, data, tc, [&last_epoch](const StepRecord& r) {
    logger()->debug("step {} epoch {} lr {:.6g} loss {:.6g}", r.step, r.epoch, r.lr, r.loss);
    if (r.epoch != last_epoch) {
      last_epoch = r.epoch;
      if (r.epoch % 50 == 1) logger()->info("epoch {} step {} loss {:.6g}", r.epoch, r.step, r.loss);
    }
  });

  const auto metrics_path = cfg.metrics_path();
  if (metrics_path.has_parent_path()) std::filesystem::create_directories(metrics_path.parent_path());
  std::ofstream ms(metrics_path);
  if (!ms) throw ConfigError("paths.metrics_file", "cannot write '" + metrics_path.string() + "'");
  write_metrics(ms, result.log);

  out << std::setprecision(9);
  out << "result\tsteps\t" << result.log.size() << '\n';
  out << "result\tfirst_epoch_loss\t" << result.epoch_loss.front() << '\n';
  out << "result\tfinal_epoch_loss\t" << result.epoch_loss.back() << '\n';
  print_metrics(out, "train_averaged", evaluate(result.averaged, data));
  out << "result\taveraged_checkpoint\t"
      << (std::filesystem::path(cfg.out_dir) / "averaged.ckpt").string() << '\n';
  return kOk;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, std::ostream& out) {
  auto loaded = load_checkpoint<Real>(checkpoint, cfg.head);
  SyntheticTask<Real> task(cfg.head, cfg.data);
  const auto data = task.generate(static_cast<std::size_t>(cfg.n_eval), 1);
  print_metrics(out, "eval", evaluate(loaded.params, data));
  return kOk;
}

int cmd_gradcheck(const std::string& fault, std::ostream& out, std::ostream& err) {
  GradcheckOptions opts;
  opts.inject_fault = fault;
  const auto results = run_gradcheck_suite(opts);
  bool ok = true;
  for (const auto& r : results) {
    out << "gradcheck\t" << r.name << '\t' << std::scientific << std::setprecision(3)
        << r.worst_rel_err << '\t' << r.tolerance << '\t' << (r.passed ? "PASS" : "FAIL")
        << std::defaultfloat << '\n';
    if (!r.passed) {
      err << "gradcheck: " << r.name << " exceeds tolerance (" << r.worst_rel_err << " >= "
          << r.tolerance << ")\n";
      ok = false;
    }
  }
  return ok ? kOk : kGradcheckFailed;
}

int cmd_params(const RunConfig& cfg, std::ostream& out) {
  DeconvConfig deconv;
  deconv.n_joints = cfg.head.n_joints;
  deconv.heatmap_channels = deconv.n_joints * deconv.depth_bins;
  out << efficiency_report(cfg.head, deconv).to_text();
  return kOk;
}

int cmd_schedule(const RunConfig& cfg, std::int64_t steps, std::int64_t every, std::ostream& out) {
  if (steps < 1) throw ConfigError("steps", "must be >= 1");
  if (every < 1) throw ConfigError("every", "must be >= 1");
  out << std::setprecision(12);
  for (std::int64_t s = 1; s <= steps; ++s) {
    if (s % every == 0 || s == 1 || s == steps) {
      out << s << '\t' << lr_at(s, cfg.train.max_lr, cfg.train.warmup_steps) << '\n';
    }
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transformer lifting head: training, evaluation and verification"};
  app.require_subcommand(1);
  app.fallthrough();

  Flags flags;
  app.add_option("--config", flags.config_path, "sectioned key = value config file");
  app.add_option("--profile", flags.profile, "tiny or paper")->capture_default_str();
  auto mirror = [&app, &flags](const std::string& flag, const std::string& key, const std::string& help) {
    app.add_option_function<std::string>(
        flag, [&flags, key](const std::string& v) { flags.overrides.emplace_back(key, v); }, help);
  };
  mirror("--seed", "train.seed", "initialization / shuffling seed");
  mirror("--out", "paths.out_dir", "output directory for checkpoints and metrics");
  mirror("--epochs", "train.epochs", "training epochs");
  mirror("--batch-size", "train.batch_size", "batch size");
  mirror("--max-lr", "train.max_lr", "peak learning rate");
  mirror("--warmup-steps", "train.warmup_steps", "warmup length in batches");
  mirror("--max-steps", "train.max_steps", "step cap (0: none)");
  mirror("--avg-last-epochs", "train.avg_last_epochs", "epochs averaged into the final model");
  mirror("--data-seed", "data.seed", "synthetic data seed");
  mirror("--noise-sigma", "data.noise_sigma", "synthetic feature noise");
  mirror("--n-train", "data.n_train", "training samples");
  mirror("--n-eval", "data.n_eval", "held-out samples");
  mirror("--metrics", "paths.metrics_file", "metrics log path");
  app.add_option_function<std::vector<std::string>>(
      "--set",
      [&flags](const std::vector<std::string>& kvs) {
        for (const auto& kv : kvs) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos) throw ConfigError(kv, "expected section.key=value");
          flags.overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
        }
      },
      "any config field as section.key=value");

  auto* train = app.add_subcommand("train", "train on the synthetic task");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  auto* gradcheck = app.add_subcommand("gradcheck", "64-bit finite-difference gradient suite");
  std::string fault;
  gradcheck->add_option("--inject-fault", fault, "perturb one check's analytic gradient (test hook)");
  auto* params = app.add_subcommand("params", "parameter and FLOP accounting report");
  auto* schedule = app.add_subcommand("schedule", "print the learning-rate schedule");
  std::int64_t steps = 4000;
  std::int64_t every = 1;
  schedule->add_option("--steps", steps, "last step to print");
  schedule->add_option("--every", every, "print every k-th step");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  }

  try {
    const RunConfig cfg = resolve(flags);
    echo(cfg, out);
    if (train->parsed()) return cmd_train(cfg, out);
    if (eval->parsed()) return cmd_eval(cfg, checkpoint, out);
    if (gradcheck->parsed()) return cmd_gradcheck(fault, out, err);
    if (params->parsed()) return cmd_params(cfg, out);
    if (schedule->parsed()) return cmd_schedule(cfg, steps, every, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NonFiniteLossError& e) {
    err << "training aborted: " << e.what() << '\n';
    return kNonFiniteLoss;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kConfigError;
  }
  return kConfigError;
}

}  // namespace lift::cli
