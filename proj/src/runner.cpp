#include "sdssl/runner.hpp"

#include "sdssl/data.hpp"
#include "sdssl/plot.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

namespace sdssl {

namespace fs = std::filesystem;

namespace {

// Evaluation subsets are drawn with a fixed seed so runs trained under
// different seeds are scored on the same images.
constexpr std::uint64_t kEvalSubsetSeed = 0x5eed;

std::string metrics_header() { return "step,loss_total,loss_ssl,loss_isd,loss_pred,alpha,lr,ema_m,ms_per_step"; }

std::string metrics_row(const StepRecord& r) {
  std::ostringstream os;
  os.precision(17);
  os << r.step << ',' << r.losses.total << ',' << r.losses.ssl << ',' << r.losses.isd << ',' << r.losses.pred
     << ',' << r.alpha << ',' << r.lr << ',' << r.ema_m << ',';
  os.precision(6);
  os << r.ms_per_step;
  return os.str();
}

/// The config text that determines training; run.* only names outputs.
std::string training_signature(const ExperimentConfig& c) {
  ExperimentConfig copy = c;
  copy.run = RunConfig{};
  return copy.to_text();
}

void check_channels(const Dataset& data, const ExperimentConfig& config) {
  if (data.channels != config.trainer.encoder.channels)
    throw ConfigError("dataset '" + data.name + "' has " + std::to_string(data.channels) +
                      " channels but encoder.channels = " + std::to_string(config.trainer.encoder.channels));
}

/// Keeps the header and rows logged before `step`; later rows belong to
/// steps that will be replayed after a resume.
void truncate_metrics(const fs::path& path, std::int64_t step) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read metrics log '" + path.string() + "' for resume");
  std::vector<std::string> kept;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (std::stoll(line.substr(0, comma)) < step) kept.push_back(line);
  }
  in.close();
  std::string text = metrics_header() + "\n";
  for (const auto& k : kept) text += k + "\n";
  write_text_file(path, text);
}

Real mean_of(const std::vector<Real>& v, std::size_t from, std::size_t to) {
  if (to <= from) return 0.0;
  return std::accumulate(v.begin() + static_cast<std::ptrdiff_t>(from), v.begin() + static_cast<std::ptrdiff_t>(to), 0.0) /
         static_cast<Real>(to - from);
}

}  // namespace

Dataset load_training_data(const ExperimentConfig& config) {
  Dataset full = open_dataset(config.data.dataset, "train");
  check_channels(full, config);
  return balanced_subset(full, config.data.train_subset, config.trainer.seed);
}

PipelineConfig make_pipeline(const ExperimentConfig& config) {
  PipelineConfig p;
  p.recipe = config.data.recipe;
  p.image_size = config.trainer.encoder.image_size;
  p.workers = config.data.workers;
  if (config.data.normalize) {
    p.norm = ChannelNorm::from_dataset(open_dataset(config.data.dataset, "train"));
  } else {
    p.norm = ChannelNorm::none(config.trainer.encoder.channels);
  }
  return p;
}

RunResult run_training(ExperimentConfig config, const RunOptions& options) {
  config.validate();
  const Dataset data = load_training_data(config);
  config.resolve_schedule(data.size());
  const PipelineConfig pipeline = make_pipeline(config);
  const std::string config_text = config.to_text();

  RunResult result;
  result.dir = config.run_dir();
  result.total_steps = config.trainer.schedule.total_steps;
  std::error_code ec;
  fs::create_directories(result.dir, ec);
  if (ec) throw IoError("cannot create run directory '" + result.dir.string() + "': " + ec.message());

  const fs::path ckpt_path = result.dir / kCheckpointFile;
  const fs::path metrics_path = result.dir / kMetricsFile;

  Trainer trainer(config.trainer);
  if (options.resume && fs::exists(ckpt_path)) {
    const CheckpointData ck = read_checkpoint(ckpt_path);
    if (training_signature(parse_config(ck.config_text)) != training_signature(config))
      throw FormatError("checkpoint '" + ckpt_path.string() + "' was written under a different configuration");
    restore(trainer, ck);
    truncate_metrics(metrics_path, trainer.step());
    if (options.log) *options.log << "resumed from step " << trainer.step() << "\n";
  } else {
    write_text_file(metrics_path, metrics_header() + "\n");
  }
  write_text_file(result.dir / kResolvedConfigFile, config_text);
  write_text_file(result.dir / kVersionFile,
                  std::string("sdssl ") + kVersion + "\ncheckpoint_format " + std::to_string(kCheckpointVersion) + "\n");

  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw IoError("cannot append to metrics log '" + metrics_path.string() + "'");

  auto save = [&]() { write_checkpoint(snapshot(trainer, config_text), ckpt_path); };

  const Index per_epoch = config.steps_per_epoch(data.size());
  const std::int64_t total = config.trainer.schedule.total_steps;
  const std::int64_t stop = options.max_steps >= 0 ? std::min(total, options.max_steps) : total;
  std::int64_t cached_epoch = -1;
  std::vector<std::vector<std::int64_t>> batches;

  while (trainer.step() < stop) {
    const std::int64_t step = trainer.step();
    const std::int64_t epoch = step / per_epoch;
    if (epoch != cached_epoch) {
      batches = epoch_iterator(data.size(), config.data.batch_size, config.trainer.seed, epoch);
      cached_epoch = epoch;
    }
    const auto& batch = batches[static_cast<std::size_t>(step % per_epoch)];
    const ViewPair views = make_view_pair(data, batch, pipeline, config.trainer.seed, step);
    result.last = trainer.train_step(views);

    metrics << metrics_row(result.last) << '\n';
    metrics.flush();
    if (!metrics) throw IoError("write failed for metrics log '" + metrics_path.string() + "'");

    if (options.log && config.run.log_every > 0 && (step + 1) % config.run.log_every == 0) {
      *options.log << "step " << step + 1 << "/" << total << "  loss " << std::setprecision(5)
                   << result.last.losses.total << "  ssl " << result.last.losses.ssl << "  isd "
                   << result.last.losses.isd << "  pred " << result.last.losses.pred << "  alpha "
                   << result.last.alpha << "  lr " << result.last.lr << "  " << std::setprecision(4)
                   << result.last.ms_per_step << " ms/step" << std::endl;
    }
    const bool epoch_end = (step + 1) % per_epoch == 0;
    if (epoch_end && config.run.checkpoint_every > 0 &&
        ((step + 1) / per_epoch) % config.run.checkpoint_every == 0 && trainer.step() < stop)
      save();
  }
  save();
  result.steps_done = trainer.step();
  return result;
}

LoadedModel load_model(const fs::path& checkpoint) {
  const CheckpointData ck = read_checkpoint(checkpoint);
  LoadedModel m;
  try {
    m.config = parse_config(ck.config_text);
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint '" + checkpoint.string() + "' carries an unreadable config: " + e.what());
  }
  if (std::string(to_string(m.config.trainer.framework)) != ck.framework)
    throw FormatError("checkpoint '" + checkpoint.string() + "' framework tag '" + ck.framework +
                      "' disagrees with its config");
  m.trainer = std::make_unique<Trainer>(m.config.trainer);
  restore(*m.trainer, ck);
  return m;
}

EvalCommand parse_eval_command(const std::string& s) {
  if (s == "knn") return EvalCommand::knn;
  if (s == "linear") return EvalCommand::linear;
  if (s == "multiexit") return EvalCommand::multiexit;
  if (s == "metrics") return EvalCommand::metrics;
  throw ConfigError("unknown eval kind '" + s + "' (expected knn, linear, multiexit or metrics)");
}

namespace {

struct EvalSplits {
  Dataset bank;
  Dataset test;
  PipelineConfig pipeline;
};

EvalSplits eval_splits(const ExperimentConfig& config) {
  EvalSplits s;
  s.bank = balanced_subset(open_dataset(config.data.dataset, "train"), config.eval.bank_subset, kEvalSubsetSeed);
  s.test = balanced_subset(open_dataset(config.data.dataset, "test"), config.eval.test_subset, kEvalSubsetSeed);
  check_channels(s.bank, config);
  s.pipeline = make_pipeline(config);
  return s;
}

}  // namespace

std::vector<Real> knn_per_layer(const ViTEncoder& encoder, const ExperimentConfig& config) {
  const EvalSplits s = eval_splits(config);
  const LayerFeatureStack tr = extract_features(encoder, s.bank, s.pipeline);
  const LayerFeatureStack te = extract_features(encoder, s.test, s.pipeline);
  return multi_exit_eval(tr, s.bank.labels, te, s.test.labels, s.bank.num_classes, EvalKind::knn,
                         config.eval.knn, config.eval.probe);
}

MetricsReport run_eval(const LoadedModel& model, const EvalRequest& request, std::ostream* log) {
  ExperimentConfig config = model.config;
  if (!request.dataset.empty()) config.data.dataset = request.dataset;
  const ViTEncoder& encoder = model.trainer->student_encoder();
  const EvalSplits s = eval_splits(config);
  const int layers = config.trainer.encoder.num_layers;

  MetricsReport report;
  const fs::path out = request.out_dir;
  if (request.command == EvalCommand::metrics) {
    report.metrics = layer_metrics(encoder, s.test, s.pipeline, config.eval.metrics);
    report.write_csv(out / "metrics_wide.csv", out / "metrics_long.csv");
    report.write_json(out / "metrics.json");
    report.write_plots(out, config.run.name);
    if (log)
      for (const auto& m : report.metrics)
        *log << "layer " << m.layer << "  L_ali " << m.alignment << "  L_uni " << m.uniformity << "  L_ali_n "
             << m.negative_alignment << "  D " << m.difference << "\n";
    return report;
  }

  const LayerFeatureStack tr = extract_features(encoder, s.bank, s.pipeline);
  const LayerFeatureStack te = extract_features(encoder, s.test, s.pipeline);
  const int classes = s.bank.num_classes;
  if (request.command == EvalCommand::multiexit) {
    report.accuracy_kind = to_string(request.probe);
    report.accuracy = multi_exit_eval(tr, s.bank.labels, te, s.test.labels, classes, request.probe,
                                      config.eval.knn, config.eval.probe);
  } else {
    const auto last = static_cast<std::size_t>(layers - 1);
    const FeatureBank bank{tr.layers[last], s.bank.labels, classes, layers, "train", false};
    const FeatureBank test{te.layers[last], s.test.labels, classes, layers, "test", false};
    const bool knn = request.command == EvalCommand::knn;
    report.accuracy_kind = knn ? "knn" : "linear";
    // a single-entry report holds the final layer only
    report.accuracy = {knn ? knn_classify(bank, test, config.eval.knn)
                           : linear_probe(bank, test, config.eval.probe)};
  }
  const std::string stem = request.command == EvalCommand::multiexit ? "multiexit_" + report.accuracy_kind
                                                                     : report.accuracy_kind;
  report.write_accuracy_csv(out / (stem + ".csv"));
  report.write_json(out / (stem + ".json"));
  if (request.command == EvalCommand::multiexit) report.write_plots(out, config.run.name);
  if (log)
    for (std::size_t i = 0; i < report.accuracy.size(); ++i)
      *log << (report.accuracy.size() == 1 ? "final layer" : "layer " + std::to_string(i + 1)) << "  "
           << report.accuracy_kind << " " << std::fixed << std::setprecision(2) << 100.0 * report.accuracy[i]
           << "%\n"
           << std::defaultfloat;
  return report;
}

const std::vector<std::string>& ablation_suites() {
  static const std::vector<std::string> s = {"baseline", "no_anneal", "no_pred", "pred_only", "same_view"};
  return s;
}

ExperimentConfig ablation_variant(const ExperimentConfig& reference, const std::string& suite) {
  ExperimentConfig c = reference;
  c.trainer.sdssl_enabled = true;
  if (suite == "reference") {
  } else if (suite == "baseline") {
    c.trainer.sdssl_enabled = false;
  } else if (suite == "no_anneal") {
    c.trainer.alpha_anneal = false;
  } else if (suite == "no_pred") {
    c.trainer.loss.beta = 0.0;
  } else if (suite == "pred_only") {
    c.trainer.schedule.alpha_max = 0.0;
    c.trainer.loss.beta = 1.0;
  } else if (suite == "same_view") {
    c.trainer.loss.distill_view = DistillView::same_view;
  } else {
    throw ConfigError("unknown ablation suite '" + suite + "' (expected baseline, no_anneal, no_pred, pred_only or same_view)");
  }
  c.run.name = suite;
  return c;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& reference, const std::vector<std::string>& suites,
                                      const fs::path& out_dir, std::ostream* log) {
  reference.validate();
  std::vector<std::string> variants = {"reference"};
  for (const auto& s : suites) {
    (void)ablation_variant(reference, s);  // reject unknown names before any training
    if (std::find(variants.begin(), variants.end(), s) == variants.end()) variants.push_back(s);
  }

  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    ExperimentConfig c = ablation_variant(reference, v);
    c.run.output_dir = (out_dir / v).string();
    if (log) *log << "== " << v << " ==\n";
    RunOptions opts;
    opts.log = log;
    run_training(c, opts);
    const LoadedModel m = load_model(out_dir / v / kCheckpointFile);
    AblationRow row;
    row.variant = v;
    row.knn = knn_per_layer(m.trainer->student_encoder(), m.config);
    row.final_knn = row.knn.back();
    row.mean_knn = mean_of(row.knn, 0, row.knn.size());
    rows.push_back(row);
  }
  for (auto& r : rows) {
    r.delta_final = r.final_knn - rows.front().final_knn;
    r.delta_mean = r.mean_knn - rows.front().mean_knn;
  }

  std::ostringstream csv;
  csv.precision(10);
  csv << "variant,final_knn,mean_knn,delta_final,delta_mean";
  for (std::size_t l = 0; l < rows.front().knn.size(); ++l) csv << ",knn_layer" << l + 1;
  csv << "\n";
  for (const auto& r : rows) {
    csv << r.variant << ',' << r.final_knn << ',' << r.mean_knn << ',' << r.delta_final << ',' << r.delta_mean;
    for (Real a : r.knn) csv << ',' << a;
    csv << "\n";
  }
  write_text_file(out_dir / "ablation.csv", csv.str());
  write_text_file(out_dir / "ablation.md", format_ablation_table(rows));
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "| variant | k-NN final (%) | delta | k-NN mean over layers (%) | delta |\n";
  os << "|---|---:|---:|---:|---:|\n";
  for (const auto& r : rows) {
    os << "| " << r.variant << " | " << 100.0 * r.final_knn << " | " << std::showpos << 100.0 * r.delta_final
       << std::noshowpos << " | " << 100.0 * r.mean_knn << " | " << std::showpos << 100.0 * r.delta_mean
       << std::noshowpos << " |\n";
  }
  return os.str();
}

}  // namespace sdssl
