// uloc: synthetic-data generation, training and uncertainty-aware evaluation
// for the dropout-equipped heteroscedastic pose regressor.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "uloc/evalreport.hpp"
#include "uloc/mcdropout.hpp"
#include "uloc/net.hpp"
#include "uloc/rejection.hpp"
#include "uloc/synthdata.hpp"
#include "uloc/version.hpp"

namespace fs = std::filesystem;
using namespace uloc;

namespace {

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out = "out";
  std::string world_path;
  std::string dataset;
  std::string checkpoint;

  int traj_loops = 4;
  int traj_zigzags = 4;
  int traj_back_and_forth = 2;
  int traj_rotations = 2;
  double traj_step = 0.1;
  double traj_rotation_step_deg = 3.0;
  double traj_margin = 1.0;
  int traj_zigzag_lanes = 5;

  std::size_t net_hidden = 32;
  std::size_t net_heads = 2;
  std::size_t net_encoder_depth = 2;
  double train_lr = 1e-3;
  std::size_t train_epochs = 80;
  std::size_t train_batch = 32;
  std::string train_optimizer = "adam";

  double dropout = 0.2;
  std::size_t passes = 40;  // T
  std::vector<int> thresholds = {100, 90, 80, 70};
  std::string mode = "per-quantity";
};

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<int> parse_thresholds(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = trim(tok);
    if (tok.empty()) continue;
    int v = 0;
    try {
      v = std::stoi(tok);
    } catch (const std::exception&) {
      throw ConfigError("thresholds: '" + tok + "' is not an integer");
    }
    if (v < 1 || v > 100) throw ConfigError("thresholds: values must be in 1..100");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("thresholds: empty list");
  return out;
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::stringstream ss(value);
  T v{};
  ss >> v;
  if (ss.fail() || !ss.eof()) {
    throw ConfigError("config key '" + key + "': cannot parse value '" + value + "'");
  }
  return v;
}

void apply_key(RunConfig& c, const std::string& key, const std::string& value) {
  if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "out") c.out = value;
  else if (key == "world") c.world_path = value;
  else if (key == "dataset") c.dataset = value;
  else if (key == "checkpoint") c.checkpoint = value;
  else if (key == "traj.loops") c.traj_loops = parse_number<int>(key, value);
  else if (key == "traj.zigzags") c.traj_zigzags = parse_number<int>(key, value);
  else if (key == "traj.back_and_forth") c.traj_back_and_forth = parse_number<int>(key, value);
  else if (key == "traj.rotations") c.traj_rotations = parse_number<int>(key, value);
  else if (key == "traj.step") c.traj_step = parse_number<double>(key, value);
  else if (key == "traj.rotation_step_deg") c.traj_rotation_step_deg = parse_number<double>(key, value);
  else if (key == "traj.margin") c.traj_margin = parse_number<double>(key, value);
  else if (key == "traj.zigzag_lanes") c.traj_zigzag_lanes = parse_number<int>(key, value);
  else if (key == "net.hidden") c.net_hidden = parse_number<std::size_t>(key, value);
  else if (key == "net.heads") c.net_heads = parse_number<std::size_t>(key, value);
  else if (key == "net.encoder_depth") c.net_encoder_depth = parse_number<std::size_t>(key, value);
  else if (key == "train.lr") c.train_lr = parse_number<double>(key, value);
  else if (key == "train.epochs") c.train_epochs = parse_number<std::size_t>(key, value);
  else if (key == "train.batch") c.train_batch = parse_number<std::size_t>(key, value);
  else if (key == "train.optimizer") c.train_optimizer = value;
  else if (key == "dropout") c.dropout = parse_number<double>(key, value);
  else if (key == "T") c.passes = parse_number<std::size_t>(key, value);
  else if (key == "thresholds") c.thresholds = parse_thresholds(value);
  else if (key == "mode") c.mode = value;
  else throw ConfigError("unknown config key '" + key + "'");
}

void load_config_file(RunConfig& c, const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": empty key");
    }
    apply_key(c, key, value);
  }
}

std::string thresholds_to_string(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

// The echo is itself a loadable config file; re-running any command from it
// reproduces the outputs byte for byte.
void write_config_echo(const RunConfig& c, const fs::path& dir) {
  std::ofstream out(dir / "config_echo.cfg");
  if (!out) throw IoError("cannot write config echo in " + dir.string());
  char buf[64];
  out << "# uloc " << kVersion << " resolved configuration\n";
  out << "seed = " << c.seed << "\n";
  out << "out = " << c.out << "\n";
  out << "world = " << c.world_path << "\n";
  out << "dataset = " << c.dataset << "\n";
  out << "checkpoint = " << c.checkpoint << "\n";
  out << "traj.loops = " << c.traj_loops << "\n";
  out << "traj.zigzags = " << c.traj_zigzags << "\n";
  out << "traj.back_and_forth = " << c.traj_back_and_forth << "\n";
  out << "traj.rotations = " << c.traj_rotations << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", c.traj_step);
  out << "traj.step = " << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", c.traj_rotation_step_deg);
  out << "traj.rotation_step_deg = " << buf << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", c.traj_margin);
  out << "traj.margin = " << buf << "\n";
  out << "traj.zigzag_lanes = " << c.traj_zigzag_lanes << "\n";
  out << "net.hidden = " << c.net_hidden << "\n";
  out << "net.heads = " << c.net_heads << "\n";
  out << "net.encoder_depth = " << c.net_encoder_depth << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", c.train_lr);
  out << "train.lr = " << buf << "\n";
  out << "train.epochs = " << c.train_epochs << "\n";
  out << "train.batch = " << c.train_batch << "\n";
  out << "train.optimizer = " << c.train_optimizer << "\n";
  std::snprintf(buf, sizeof(buf), "%.17g", c.dropout);
  out << "dropout = " << buf << "\n";
  out << "T = " << c.passes << "\n";
  out << "thresholds = " << thresholds_to_string(c.thresholds) << "\n";
  out << "mode = " << c.mode << "\n";
}

void write_version_stamp(const fs::path& dir) {
  std::ofstream out(dir / "version.txt");
  if (!out) throw IoError("cannot write version stamp in " + dir.string());
  out << "uloc " << kVersion << "\n";
}

void prepare_out_dir(const RunConfig& c) {
  fs::create_directories(c.out);
  write_config_echo(c, c.out);
  write_version_stamp(c.out);
}

WorldSpec resolve_world(const RunConfig& c) {
  if (c.world_path.empty()) return WorldSpec{};
  return load_world(c.world_path);
}

TrajectorySpec resolve_traj(const RunConfig& c) {
  TrajectorySpec t;
  t.loop_sequences = c.traj_loops;
  t.zigzag_sequences = c.traj_zigzags;
  t.back_and_forth_sequences = c.traj_back_and_forth;
  t.rotation_sequences = c.traj_rotations;
  t.step_m = c.traj_step;
  t.rotation_step_deg = c.traj_rotation_step_deg;
  t.margin_m = c.traj_margin;
  t.zigzag_lanes = c.traj_zigzag_lanes;
  return t;
}

fs::path manifest_path_for(const fs::path& dataset_path) {
  return dataset_path.parent_path() / "split_manifest.json";
}

int cmd_gen_data(const RunConfig& c) {
  prepare_out_dir(c);
  const WorldSpec world = resolve_world(c);
  const TrajectorySpec traj = resolve_traj(c);
  const std::uint64_t data_seed = substream_seed(c.seed, "data");
  const Dataset ds = generate_dataset(world, traj, data_seed);

  const fs::path out(c.out);
  write_dataset_jsonl(out / "dataset.jsonl", world, data_seed, ds.samples);
  write_split_manifest(out / "split_manifest.json", world, data_seed, ds.splits);

  std::cout << "wrote " << ds.samples.size() << " samples ("
            << ds.splits.train.size() << " train / " << ds.splits.val.size()
            << " val / " << ds.splits.test.size() << " test sequences) to " << c.out
            << "\n";
  return 0;
}

int cmd_train(const RunConfig& c) {
  if (c.dataset.empty()) throw ConfigError("train: --dataset is required");
  prepare_out_dir(c);
  const LoadedDataset ds = load_dataset_jsonl(c.dataset);
  const SplitManifest manifest = load_split_manifest(manifest_path_for(c.dataset));
  const auto train_split = filter_split(ds.samples, manifest.train);
  if (train_split.empty()) throw ConfigError("train: the train split is empty");

  TrainConfig cfg;
  cfg.net.image_dim = ds.world.image_feature_dim;
  cfg.net.scan_dim = ds.world.scan_rays;
  cfg.net.hidden_dim = c.net_hidden;
  cfg.net.num_heads = c.net_heads;
  cfg.net.encoder_depth = c.net_encoder_depth;
  cfg.learning_rate = c.train_lr;
  cfg.epochs = c.train_epochs;
  cfg.batch_size = std::min(c.train_batch, train_split.size());
  cfg.seed = substream_seed(c.seed, "train");
  cfg.dropout.rate = c.dropout;
  if (c.train_optimizer == "adam") cfg.optimizer = Optimizer::Adam;
  else if (c.train_optimizer == "sgd") cfg.optimizer = Optimizer::Sgd;
  else throw ConfigError("train.optimizer must be 'adam' or 'sgd'");

  const TrainResult result = train(train_split, cfg);

  const fs::path out(c.out);
  save_checkpoint(result.params, out / "checkpoint.json");
  write_loss_curve_csv(result.epoch_mean_loss, out / "loss_curve.csv");
  std::cout << "trained on " << train_split.size() << " samples for " << cfg.epochs
            << " epochs; final mean loss " << result.epoch_mean_loss.back() << "\n";
  return 0;
}

int cmd_evaluate(const RunConfig& c) {
  if (c.dataset.empty()) throw ConfigError("evaluate: --dataset is required");
  if (c.checkpoint.empty()) throw ConfigError("evaluate: --checkpoint is required");
  prepare_out_dir(c);
  const LoadedDataset ds = load_dataset_jsonl(c.dataset);
  const SplitManifest manifest = load_split_manifest(manifest_path_for(c.dataset));
  const auto test_split = filter_split(ds.samples, manifest.test);
  if (test_split.empty()) throw ConfigError("evaluate: the test split is empty");

  const ModelParams params = load_checkpoint(c.checkpoint);

  EvalOptions opt;
  opt.passes = c.passes;
  opt.dropout.rate = c.dropout;
  opt.thresholds = c.thresholds;
  opt.mode = eval_mode_from_string(c.mode);
  opt.seed = substream_seed(c.seed, "eval");
  const Evaluation ev = evaluate(params, test_split, opt);

  const fs::path out(c.out);
  EvalMetadata meta;
  meta.dataset = c.dataset;
  meta.checkpoint = c.checkpoint;
  meta.passes = opt.passes;
  meta.dropout_rate = opt.dropout.rate;
  meta.mode = opt.mode;
  meta.seed = opt.seed;
  meta.sample_count = ev.records.size();

  {
    std::ofstream f(out / "report.txt");
    write_report_text(f, ev.reports, meta);
  }
  {
    std::ofstream f(out / "report.json");
    write_report_json(f, ev.reports, meta);
  }
  {
    std::ofstream f(out / "scatter.csv");
    export_scatter_csv(f, ev.records, opt.thresholds);
  }
  {
    std::ofstream f(out / "eval_records.jsonl");
    write_eval_records_jsonl(f, ev.records);
  }
  for (int keep : opt.thresholds) {
    char name[48];
    std::snprintf(name, sizeof(name), "trajectory_%03d.csv", keep);
    std::ofstream f(out / name);
    export_trajectory_csv(f, ev.records, keep, opt.mode);
  }
  {
    std::vector<std::string> ids;
    std::vector<UncertainPose> estimates;
    for (const auto& r : ev.records) {
      ids.push_back(r.sample_id);
      estimates.push_back(r.estimate);
    }
    if (opt.mode == EvalMode::PerQuantity) {
      std::ofstream fp(out / "retention_position.csv");
      write_retention_csv(fp, ids, estimates, RejectionMode::PositionOnly, opt.thresholds);
      std::ofstream fq(out / "retention_orientation.csv");
      write_retention_csv(fq, ids, estimates, RejectionMode::OrientationOnly,
                          opt.thresholds);
    } else {
      const RejectionMode rm = opt.mode == EvalMode::PositionOnly
                                   ? RejectionMode::PositionOnly
                                   : (opt.mode == EvalMode::OrientationOnly
                                          ? RejectionMode::OrientationOnly
                                          : RejectionMode::JointEither);
      std::ofstream f(out / "retention.csv");
      write_retention_csv(f, ids, estimates, rm, opt.thresholds);
    }
  }

  write_report_text(std::cout, ev.reports, meta);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"uncertainty-aware multi-modal pose regression toolkit"};
  app.set_version_flag("--version", std::string("uloc ") + kVersion);
  app.require_subcommand(1);

  struct Overrides {
    std::optional<std::string> config, out, world, dataset, checkpoint, mode, thresholds;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> passes;
    std::optional<double> dropout;
  };
  Overrides ov;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", ov.config, "key = value configuration file");
    sub->add_option("--seed", ov.seed, "root seed (data/train/eval substreams)");
    sub->add_option("--out", ov.out, "output directory");
    sub->add_option("--T", ov.passes, "MC-dropout passes per prediction");
    sub->add_option("--dropout", ov.dropout, "dropout rate in [0,1)");
    sub->add_option("--thresholds", ov.thresholds, "keep-percent sweep, e.g. 100,90,80,70");
    sub->add_option("--mode", ov.mode,
                    "rejection mode: per-quantity | position-only | orientation-only | "
                    "joint-either");
    sub->add_option("--dataset", ov.dataset, "dataset JSONL path");
    sub->add_option("--checkpoint", ov.checkpoint, "model checkpoint path");
    sub->add_option("--world", ov.world, "world spec JSON path");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  CLI::App* tr = app.add_subcommand("train", "train the pose regressor");
  CLI::App* ev = app.add_subcommand("evaluate", "MC-dropout evaluation with rejection sweep");
  add_common(gen);
  add_common(tr);
  add_common(ev);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg;
    if (ov.config) load_config_file(cfg, *ov.config);
    if (ov.seed) cfg.seed = *ov.seed;
    if (ov.out) cfg.out = *ov.out;
    if (ov.world) cfg.world_path = *ov.world;
    if (ov.dataset) cfg.dataset = *ov.dataset;
    if (ov.checkpoint) cfg.checkpoint = *ov.checkpoint;
    if (ov.mode) cfg.mode = *ov.mode;
    if (ov.thresholds) cfg.thresholds = parse_thresholds(*ov.thresholds);
    if (ov.passes) cfg.passes = *ov.passes;
    if (ov.dropout) cfg.dropout = *ov.dropout;
    eval_mode_from_string(cfg.mode);  // validate early
    DropoutSpec{cfg.dropout}.validate();

    if (gen->parsed()) return cmd_gen_data(cfg);
    if (tr->parsed()) return cmd_train(cfg);
    if (ev->parsed()) return cmd_evaluate(cfg);
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
