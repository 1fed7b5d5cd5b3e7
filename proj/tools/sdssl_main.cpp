#include "sdssl/data.hpp"
#include "sdssl/runner.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <sstream>

namespace {

using namespace sdssl;
namespace fs = std::filesystem;

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

ExperimentConfig build_config(const std::string& path, const std::vector<std::string>& overrides) {
  if (path.empty()) {
    ExperimentConfig c;
    apply_overrides(c, overrides);
    return c;
  }
  return load_config(path, overrides);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-distilled self-supervised ViT training and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  // train
  auto* train = app.add_subcommand("train", "Train a model from a config file");
  std::string train_config;
  std::vector<std::string> train_sets;
  bool resume = false, quiet = false, dry_run = false;
  std::int64_t max_steps = -1;
  train->add_option("--config,-c", train_config, "Experiment config file (defaults apply when omitted)");
  train->add_option("--set,-s", train_sets, "Override a key: dotted.key=value (repeatable)");
  train->add_flag("--resume", resume, "Continue from the run directory's checkpoint");
  train->add_option("--max-steps", max_steps, "Stop after this global step (checkpoint written)");
  train->add_flag("--quiet,-q", quiet, "No progress output");
  train->add_flag("--dry-run", dry_run, "Validate and print the resolved config without training");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ckpt, kind = "knn", probe = "knn", eval_dataset, eval_out;
  eval->add_option("--checkpoint,-k", ckpt, "Checkpoint file")->required();
  eval->add_option("--kind", kind, "knn | linear | multiexit | metrics")->capture_default_str();
  eval->add_option("--probe", probe, "Per-layer classifier for multiexit: knn | linear")->capture_default_str();
  eval->add_option("--dataset", eval_dataset, "Evaluate on another cached dataset");
  eval->add_option("--out,-o", eval_out, "Report directory (default: <checkpoint dir>/eval)");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Run the reference and ablation variants side by side");
  std::string ablate_config, suites = "no_anneal,no_pred", ablate_out;
  std::vector<std::string> ablate_sets;
  ablate->add_option("--config,-c", ablate_config, "Reference experiment config");
  ablate->add_option("--set,-s", ablate_sets, "Override a key of the reference (repeatable)");
  ablate->add_option("--suite", suites, "Comma list of baseline, no_anneal, no_pred, pred_only, same_view")
      ->capture_default_str();
  ablate->add_option("--out,-o", ablate_out, "Output directory (default: the reference run directory)");

  // dataset-fetch
  auto* fetch = app.add_subcommand("dataset-fetch", "Download or generate a dataset into the cache");
  std::string ds_name, ds_url, ds_archive;
  bool force = false, verify_only = false;
  Index syn_train = 10000, syn_test = 2000;
  fetch->add_option("name", ds_name, "cifar10 | cifar100 | synthetic")->required();
  fetch->add_flag("--force", force, "Re-download and rebuild even if cached");
  fetch->add_flag("--verify", verify_only, "Only re-hash the cache against its manifest");
  fetch->add_option("--archive", ds_archive, "Use a local archive instead of downloading");
  fetch->add_option("--url", ds_url, "Override the download URL");
  fetch->add_option("--synthetic-train", syn_train, "Training samples for the synthetic dataset")->capture_default_str();
  fetch->add_option("--synthetic-test", syn_test, "Test samples for the synthetic dataset")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  std::ostream* log = quiet ? nullptr : &std::cout;
  try {
    if (*train) {
      ExperimentConfig config = build_config(train_config, train_sets);
      config.validate();
      if (dry_run) {
        std::cout << config.to_text();
        return kOk;
      }
      RunOptions opts;
      opts.resume = resume;
      opts.max_steps = max_steps;
      opts.log = log;
      const RunResult r = run_training(config, opts);
      std::cout << "trained " << r.steps_done << "/" << r.total_steps << " steps; outputs in " << r.dir.string()
                << "\n";
    } else if (*eval) {
      EvalRequest req;
      req.command = parse_eval_command(kind);
      req.probe = parse_eval_kind(probe);
      req.dataset = eval_dataset;
      req.out_dir = eval_out.empty() ? fs::path(ckpt).parent_path() / "eval" : fs::path(eval_out);
      const LoadedModel model = load_model(ckpt);
      run_eval(model, req, &std::cout);
      std::cout << "reports in " << req.out_dir.string() << "\n";
    } else if (*ablate) {
      const ExperimentConfig config = build_config(ablate_config, ablate_sets);
      const fs::path out = ablate_out.empty() ? config.run_dir() : fs::path(ablate_out);
      const auto rows = run_ablation(config, split_list(suites), out, log);
      std::cout << format_ablation_table(rows);
    } else if (*fetch) {
      if (verify_only) {
        verify_cache(ds_name);
        std::cout << ds_name << ": cache verified\n";
        return kOk;
      }
      FetchOptions opt;
      opt.url = ds_url;
      opt.archive = ds_archive;
      opt.force = force;
      opt.synthetic_train = syn_train;
      opt.synthetic_test = syn_test;
      for (const auto& h : fetch_dataset(ds_name, opt))
        std::cout << h.name << "/" << h.split << ": " << h.num_samples << " samples, " << h.num_classes
                  << " classes, sha256 " << h.checksum << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
