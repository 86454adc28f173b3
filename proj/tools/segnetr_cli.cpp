#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "segnetr/checks.hpp"
#include "segnetr/cost_report.hpp"
#include "segnetr/harness.hpp"
#include "segnetr/model.hpp"

using namespace segnetr;

namespace {

model::ModelConfig load(const std::string& path) {
  auto cfg = model::load_config(path);
  model::apply_env_overrides(cfg);
  model::validate(cfg);
  return cfg;
}

int print_checks(const std::vector<checks::CheckResult>& rs) {
  std::size_t failed = 0;
  for (const auto& r : rs) {
    std::cout << checks::format(r) << '\n';
    failed += !r.passed;
  }
  std::cout << (rs.size() - failed) << "/" << rs.size() << " checks passed\n";
  return failed ? 1 : 0;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SegNetr reference implementation"};
  app.require_subcommand(1);

  std::string config_path, convention = "mac", out_dir, checkpoint, modes = "without,local,global,series,parallel";
  bool csv = false, f64 = false;
  std::size_t steps = 500, ablate_steps = 0, seeds = 20, cases = 50, samples = 32;
  std::uint64_t seed = 0;
  harness::TrainOptions topt;
  double stop_at_dice = 0;

  auto* summarize = app.add_subcommand("summarize", "parameter and FLOP report");
  summarize->add_option("--config", config_path, "model config JSON")->required();
  summarize->add_option("--convention", convention, "mac or 2flop")->check(CLI::IsMember({"mac", "2flop"}));
  summarize->add_flag("--csv", csv, "emit layer,params,macs CSV instead of the table");

  auto* train = app.add_subcommand("train", "train on the synthetic task");
  train->add_option("--config", config_path, "model config JSON")->required();
  train->add_option("--steps", steps, "optimizer steps")->capture_default_str();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--lr", topt.lr, "Adam learning rate")->capture_default_str();
  train->add_option("--batch", topt.batch_size, "batch size")->capture_default_str();
  train->add_option("--eval-interval", topt.eval_interval, "steps between held-out evaluations")->capture_default_str();
  train->add_option("--train-samples", topt.train_samples, "size of the cycled training set")->capture_default_str();
  train->add_option("--eval-samples", topt.eval_samples, "size of the held-out set")->capture_default_str();
  train->add_option("--noise", topt.data.noise_sigma, "image noise sigma")->capture_default_str();
  train->add_option("--stop-at-dice", stop_at_dice, "stop after an evaluation reaching this Dice (0: off)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--config", config_path, "model config JSON")->required();
  eval->add_option("--samples", samples, "held-out samples")->capture_default_str();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_flag("--f64", f64, "64-bit mode (the reference tolerances)");
  gradcheck->add_option("--seeds", seeds, "random cases per primitive op")->capture_default_str();
  gradcheck->add_option("--seed", seed, "base seed")->capture_default_str();

  auto* layout_test = app.add_subcommand("layout-test", "layout invariant suite");
  layout_test->add_option("--cases", cases, "random tensors per property")->capture_default_str();
  layout_test->add_option("--seed", seed, "base seed")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "interaction-mode ablation report");
  ablate->add_option("--modes", modes, "comma-separated modes")->capture_default_str();
  ablate->add_option("--config", config_path, "model config JSON")->required();
  ablate->add_option("--steps", ablate_steps, "training steps per mode for metrics (0: costs only)")
      ->capture_default_str();
  ablate->add_option("--lr", topt.lr, "Adam learning rate")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (summarize->parsed()) {
      const auto cfg = load(config_path);
      const auto rep = cost::summarize(cfg, cost::parse_convention(convention));
      std::cout << (csv ? rep.to_csv() : rep.to_text());
      return 0;
    }

    if (train->parsed()) {
      const auto cfg = load(config_path);
      auto net = model::build_model<float>(cfg);
      topt.steps = steps;
      topt.out_dir = out_dir;
      if (stop_at_dice > 0) topt.stop_at_dice = stop_at_dice;
      topt.on_eval = [](const harness::LogRow& r) {
        std::printf("step %zu loss %.4f mean_iou %.4f mean_dice %.4f\n", r.step, r.loss, *r.mean_iou, *r.mean_dice);
        std::fflush(stdout);
      };
      const auto t0 = std::chrono::steady_clock::now();
      const auto res = harness::train(*net, topt);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("steps %zu  initial loss %.4f  final loss %.4f  held-out IoU %.4f  Dice %.4f  (%.1f s)\n",
                  res.steps_run, res.initial_loss, res.final_loss, res.final_iou, res.final_dice, secs);
      std::printf("wrote %s/{metrics.csv,model.ckpt,config.json}\n", out_dir.c_str());
      return 0;
    }

    if (eval->parsed()) {
      const auto cfg = load(config_path);
      auto net = model::build_model<float>(cfg);
      harness::load_checkpoint(*net, checkpoint);
      harness::TrainOptions o;
      o.eval_samples = samples;
      const auto s = harness::evaluate(*net, harness::eval_split(cfg, o));
      std::printf("held-out samples %zu  mean IoU %.4f  mean Dice %.4f\n", samples, s.mean_iou, s.mean_dice);
      for (std::size_t k = 0; k < s.iou.size(); ++k)
        std::printf("  class %zu  IoU %.4f  Dice %.4f%s\n", k, s.iou[k], s.dice[k], s.counted[k] ? "" : "  (absent)");
      return 0;
    }

    if (gradcheck->parsed()) {
      checks::GradcheckOptions o;
      o.f64 = f64;
      o.seed = seed;
      o.op_seeds = seeds;
      std::cout << (f64 ? "64-bit" : "32-bit") << " central differences\n";
      return print_checks(checks::gradcheck_suite(o));
    }

    if (layout_test->parsed()) return print_checks(checks::layout_suite(seed, cases));

    if (ablate->parsed()) {
      const auto base = load(config_path);
      std::vector<std::pair<std::string, cost::CostReport>> rows;
      std::printf("%-10s %12s %10s %10s %10s %10s\n", "mode", "params", "GFLOPs", "GFLOPs2", "IoU", "Dice");
      for (const auto& m : split(modes, ',')) {
        auto cfg = base;
        cfg.interaction_mode = nn::parse_interaction_mode(m);
        const auto rep = cost::summarize(cfg);
        std::string iou = "-", dice = "-";
        if (ablate_steps > 0) {
          auto net = model::build_model<float>(cfg);
          harness::TrainOptions o = topt;
          o.steps = ablate_steps;
          o.eval_interval = 0;
          const auto res = harness::train(*net, o);
          char b[32];
          std::snprintf(b, sizeof b, "%.4f", res.final_iou);
          iou = b;
          std::snprintf(b, sizeof b, "%.4f", res.final_dice);
          dice = b;
        }
        std::printf("%-10s %11.3fM %10.3f %10.3f %10s %10s\n", m.c_str(), rep.total_params / 1e6,
                    rep.flops(cost::Convention::mac) / 1e9, rep.flops(cost::Convention::two_flop) / 1e9, iou.c_str(),
                    dice.c_str());
        rows.emplace_back(m, rep);
      }
      auto params = [&](const char* m) -> std::optional<std::uint64_t> {
        for (const auto& [name, rep] : rows)
          if (name == m) return rep.total_params;
        return std::nullopt;
      };
      std::vector<checks::CheckResult> order;
      auto less = [&](const char* a, const char* b) {
        if (params(a) && params(b))
          order.push_back({std::string("params(") + a + ") < params(" + b + ")", *params(a) < *params(b), ""});
      };
      less("without", "local");
      less("without", "global");
      if (params("series") && params("parallel"))
        order.push_back({"params(series) == params(parallel)", *params("series") == *params("parallel"), ""});
      return order.empty() ? 0 : print_checks(order);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
