// Copyright 2026 The qtrain Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#include "qtrain/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "qtrain/errors.hpp"

namespace qtrain {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- configuration -----------------------------------------------------------

namespace {

void reject_unknown(const json& obj, const std::string& where, std::set<std::string> allowed) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      throw ConfigError(where + ": unknown key '" + key + "' (allowed: " + list + ")");
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& dst, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

std::uint32_t read_u32(const json& obj, const char* key, std::uint32_t fallback,
                       const std::string& where) {
  std::int64_t v = fallback;
  read(obj, key, v, where);
  if (v < 0 || v > 0xffffffffLL) throw ConfigError(where + "." + key + ": out of range");
  return static_cast<std::uint32_t>(v);
}

BlockSpec parse_block(const json& j, const std::string& where) {
  std::string type;
  read(j, "type", type, where);
  BlockSpec b;
  if (type == "conv") {
    reject_unknown(j, where, {"type", "out", "kernel", "stride", "padding", "relu"});
    b.type = BlockSpec::Type::Conv;
    b.out = read_u32(j, "out", 0, where);
    b.kernel = read_u32(j, "kernel", 3, where);
    b.stride = read_u32(j, "stride", 1, where);
    b.padding = read_u32(j, "padding", 0, where);
    read(j, "relu", b.relu, where);
    if (b.out == 0) throw ConfigError(where + ": conv needs out > 0");
  } else if (type == "linear") {
    reject_unknown(j, where, {"type", "out", "relu"});
    b.type = BlockSpec::Type::Linear;
    b.out = read_u32(j, "out", 0, where);
    read(j, "relu", b.relu, where);
    if (b.out == 0) throw ConfigError(where + ": linear needs out > 0");
  } else if (type == "maxpool") {
    reject_unknown(j, where, {"type", "size"});
    b.type = BlockSpec::Type::MaxPool;
    b.pool = read_u32(j, "size", 2, where);
  } else if (type == "flatten") {
    reject_unknown(j, where, {"type"});
    b.type = BlockSpec::Type::Flatten;
  } else {
    throw ConfigError(where + ": unknown block type '" + type +
                      "' (conv, linear, maxpool, flatten)");
  }
  return b;
}

std::string resolve(const std::string& path, const fs::path& base) {
  if (path.empty() || base.empty() || fs::path(path).is_absolute()) return path;
  return (base / path).lexically_normal().string();
}

RunConfig parse_run_config_impl(const std::string& text, const fs::path& base) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  reject_unknown(root, "config", {"model", "data", "train", "output", "bench", "limits"});
  RunConfig cfg;
  if (root.contains("model")) {
    const json& m = root["model"];
    reject_unknown(m, "model", {"blocks"});
    if (m.contains("blocks")) {
      if (!m["blocks"].is_array()) throw ConfigError("model.blocks: expected an array");
      for (std::size_t i = 0; i < m["blocks"].size(); ++i) {
        cfg.blocks.push_back(parse_block(m["blocks"][i], "model.blocks[" + std::to_string(i) + "]"));
      }
    }
  }
  if (root.contains("data")) {
    const json& d = root["data"];
    reject_unknown(d, "data", {"images", "labels", "test_images", "test_labels",
                               "train_fraction", "class_count", "synthetic"});
    read(d, "images", cfg.data.images, "data");
    read(d, "labels", cfg.data.labels, "data");
    read(d, "test_images", cfg.data.test_images, "data");
    read(d, "test_labels", cfg.data.test_labels, "data");
    read(d, "train_fraction", cfg.data.train_fraction, "data");
    read(d, "class_count", cfg.data.class_count, "data");
    read(d, "synthetic", cfg.data.synthetic, "data");
    cfg.data.images = resolve(cfg.data.images, base);
    cfg.data.labels = resolve(cfg.data.labels, base);
    cfg.data.test_images = resolve(cfg.data.test_images, base);
    cfg.data.test_labels = resolve(cfg.data.test_labels, base);
  }
  if (root.contains("train")) {
    const json& t = root["train"];
    reject_unknown(t, "train", {"precision", "learning_rate", "batch_size", "epochs", "seed",
                                "sparse", "reset_layers", "init_checkpoint", "rounding"});
    std::string precision = to_string(cfg.train.precision);
    read(t, "precision", precision, "train");
    cfg.train.precision = parse_precision_mode(precision);
    read(t, "learning_rate", cfg.train.learning_rate, "train");
    std::string rounding = to_string(cfg.train.rounding);
    read(t, "rounding", rounding, "train");
    cfg.train.rounding = parse_rounding(rounding);
    std::int64_t batch = cfg.train.batch_size;
    read(t, "batch_size", batch, "train");
    if (batch < 1 || batch > 0xffffffffLL) {
      throw ConfigError("train.batch_size must be at least 1, got " + std::to_string(batch));
    }
    cfg.train.batch_size = static_cast<std::uint32_t>(batch);
    read(t, "epochs", cfg.epochs, "train");
    read(t, "seed", cfg.train.seed, "train");
    read(t, "reset_layers", cfg.reset_layers, "train");
    read(t, "init_checkpoint", cfg.init_checkpoint, "train");
    cfg.init_checkpoint = resolve(cfg.init_checkpoint, base);
    if (t.contains("sparse") && !t["sparse"].is_null()) {
      const json& s = t["sparse"];
      reject_unknown(s, "train.sparse", {"lambda_min", "lambda_max", "output_layer"});
      SparseConfig sc;
      read(s, "lambda_min", sc.lambda_min, "train.sparse");
      read(s, "lambda_max", sc.lambda_max, "train.sparse");
      read(s, "output_layer", sc.output_layer, "train.sparse");
      cfg.train.sparse = sc;
    }
  }
  if (root.contains("output")) {
    const json& o = root["output"];
    reject_unknown(o, "output", {"dir", "step_metrics"});
    read(o, "dir", cfg.out_dir, "output");
    read(o, "step_metrics", cfg.step_metrics, "output");
  }
  if (root.contains("bench")) {
    const json& b = root["bench"];
    reject_unknown(b, "bench", {"lambda_min", "steps"});
    read(b, "lambda_min", cfg.bench.lambda_min, "bench");
    read(b, "steps", cfg.bench.steps, "bench");
    if (cfg.bench.lambda_min.empty()) throw ConfigError("bench.lambda_min: list is empty");
    for (double l : cfg.bench.lambda_min) {
      if (!(l >= 0.0 && l <= 1.0)) throw ConfigError("bench.lambda_min: values must lie in [0, 1]");
    }
  }
  if (root.contains("limits")) {
    const json& l = root["limits"];
    reject_unknown(l, "limits", {"preset", "ram_kb", "flash_kb"});
    std::string preset;
    read(l, "preset", preset, "limits");
    if (!preset.empty()) {
      auto p = preset_limits(preset);
      if (!p) throw ConfigError("limits.preset: unknown board '" + preset + "'");
      cfg.limits = *p;
    }
    std::size_t kb = 0;
    if (l.contains("ram_kb")) {
      read(l, "ram_kb", kb, "limits");
      cfg.limits.ram_bytes = kb * 1024;
    }
    if (l.contains("flash_kb")) {
      read(l, "flash_kb", kb, "limits");
      cfg.limits.flash_bytes = kb * 1024;
    }
  }
  cfg.train.validate();
  if (!(cfg.data.train_fraction > 0.0 && cfg.data.train_fraction < 1.0)) {
    throw ConfigError("data.train_fraction must lie strictly between 0 and 1");
  }
  if (cfg.data.class_count < 2) throw ConfigError("data.class_count must be at least 2");
  return cfg;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  return parse_run_config_impl(json_text, {});
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config_impl(ss.str(), fs::path(path).parent_path());
}

std::optional<Limits> preset_limits(const std::string& name) {
  constexpr std::size_t kKB = 1024, kMB = 1024 * 1024;
  if (name == "rp2040") return Limits{264 * kKB, 16 * kMB};
  if (name == "nrf52840") return Limits{256 * kKB, 1 * kMB};
  if (name == "imxrt1062" || name == "imxrt2062") return Limits{2 * 512 * kKB, 16 * kMB};
  return std::nullopt;
}

// ---- experiment drivers ----------------------------------------------------------

Splits load_splits(const RunConfig& cfg) {
  const DataConfig& d = cfg.data;
  if (d.synthetic > 0) {
    const Dataset all = synthetic_blobs(d.synthetic, d.class_count, cfg.train.seed);
    auto [train, test] = split_shuffle(all, d.train_fraction, cfg.train.seed);
    return {std::move(train), std::move(test)};
  }
  if (d.images.empty() || d.labels.empty()) {
    throw ConfigError("data.images and data.labels are required unless data.synthetic is set");
  }
  Dataset all = load_idx(d.images, d.labels, d.class_count);
  if (!d.test_images.empty() || !d.test_labels.empty()) {
    if (d.test_images.empty() || d.test_labels.empty()) {
      throw ConfigError("data.test_images and data.test_labels must be given together");
    }
    Dataset test = load_idx(d.test_images, d.test_labels, d.class_count);
    return {std::move(all), std::move(test)};
  }
  auto [train, test] = split_shuffle(all, d.train_fraction, cfg.train.seed);
  return {std::move(train), std::move(test)};
}

namespace {

std::vector<BlockSpec> blocks_for(const RunConfig& cfg) {
  return cfg.blocks.empty() ? small_cnn_blocks(static_cast<std::uint32_t>(cfg.data.class_count))
                            : cfg.blocks;
}

}  // namespace

Model make_model(const RunConfig& cfg, const Dataset& train, TrainerState* state) {
  Model model;
  if (!cfg.init_checkpoint.empty()) {
    Checkpoint ck = load_checkpoint_file(cfg.init_checkpoint);
    model = std::move(ck.model);
    if (model.input_shape() != train.sample_shape) {
      throw ConfigError("checkpoint input " + to_string(model.input_shape()) +
                        " does not match data samples " + to_string(train.sample_shape));
    }
    if (state) *state = ck.trainer;
  } else {
    const std::vector<BlockSpec> blocks = blocks_for(cfg);
    model = build_model(train.sample_shape, blocks, cfg.train.precision, cfg.train.seed);
  }
  if (model.output_shape() != Shape{cfg.data.class_count}) {
    throw ConfigError("model produces " + to_string(model.output_shape()) + " logits for " +
                      std::to_string(cfg.data.class_count) + " classes");
  }
  if (cfg.reset_layers > 0) {
    reset_layers(model, cfg.reset_layers, cfg.train.seed + 1);
    if (state) *state = {};
  }
  return model;
}

EvalReport evaluate(const Model& model, const Dataset& ds) {
  EvalReport r;
  r.confusion.assign(ds.class_count, std::vector<std::size_t>(ds.class_count, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const ForwardResult f = forward(model, to_input_qtensor(ds, i));
    const std::size_t p = argmax(f.logits);
    const std::size_t t = ds.labels[i];
    correct += p == t;
    if (p < ds.class_count) ++r.confusion[t][p];
  }
  r.accuracy = ds.size() ? static_cast<double>(correct) / static_cast<double>(ds.size()) : 0.0;
  return r;
}

namespace {

void ensure_calibrated(Model& model, const Dataset& train, std::size_t count) {
  if (model.calibrated()) return;
  std::vector<QTensor> samples;
  for (std::size_t i = 0; i < std::min(count, train.size()); ++i) {
    samples.push_back(to_input_qtensor(train, i));
  }
  calibrate(model, samples);
}

double mean_loss(const Model& model, const Dataset& ds) {
  double sum = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    sum += softmax_xent(forward(model, to_input_qtensor(ds, i)).logits, ds.labels[i]).loss;
  }
  return ds.size() ? sum / static_cast<double>(ds.size()) : 0.0;
}

}  // namespace

TrainRun train_model(Model& model, const RunConfig& cfg, const Splits& data, TrainerState state,
                     std::uint64_t max_steps) {
  TrainRun run;
  ensure_calibrated(model, data.train, cfg.train.batch_size);
  run.memory = plan_memory(model, cfg.train);
  Trainer trainer(model, cfg.train, state);

  EpochMetrics base;
  base.step = trainer.state().steps;
  base.loss = mean_loss(model, data.test);
  base.test_acc = evaluate(model, data.test).accuracy;
  run.epochs.push_back(base);

  std::uint64_t trained = 0;
  std::uint64_t macs_bwd_total = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (max_steps && trained >= max_steps) break;
    EpochMetrics em;
    em.epoch = epoch;
    double loss_sum = 0.0, frac_sum = 0.0;
    std::size_t n = 0;
    for (std::size_t idx : epoch_order(data.train.size(), cfg.train.seed, epoch)) {
      if (max_steps && trained >= max_steps) break;
      const StepMetrics m = trainer.train_step(to_input_qtensor(data.train, idx), data.train.labels[idx]);
      ++trained;
      ++n;
      loss_sum += m.loss;
      frac_sum += m.selected_frac_mean();
      em.macs_fwd += m.macs_fwd;
      em.macs_bwd += m.macs_bwd;
      macs_bwd_total += m.macs_bwd;
      if (cfg.step_metrics) {
        const double wall =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        run.steps.push_back({epoch, trainer.state().steps, m.loss, m.selected_frac_mean(),
                             macs_bwd_total, wall});
      }
    }
    em.step = trainer.state().steps;
    em.loss = n ? loss_sum / static_cast<double>(n) : 0.0;
    em.selected_frac_mean = n ? frac_sum / static_cast<double>(n) : 1.0;
    em.test_acc = evaluate(model, data.test).accuracy;
    run.epochs.push_back(em);
  }
  run.visits = trainer.visits();
  run.state = trainer.state();
  return run;
}

namespace {

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

}  // namespace

std::string metrics_csv(const TrainRun& run) {
  std::ostringstream os;
  os << "epoch,step,loss,test_acc,macs_fwd,macs_bwd,selected_frac_mean\n";
  for (const EpochMetrics& e : run.epochs) {
    os << e.epoch << ',' << e.step << ',' << fmt(e.loss) << ',' << fmt(e.test_acc) << ','
       << e.macs_fwd << ',' << e.macs_bwd << ',' << fmt(e.selected_frac_mean) << '\n';
  }
  return os.str();
}

std::string steps_csv(const TrainRun& run) {
  std::ostringstream os;
  os << "epoch,step,loss,selected_frac_mean,macs_bwd_total\n";
  for (const StepRecord& s : run.steps) {
    os << s.epoch << ',' << s.step << ',' << fmt(s.loss) << ',' << fmt(s.selected_frac_mean)
       << ',' << s.macs_bwd_total << '\n';
  }
  return os.str();
}

// ---- commands ----------------------------------------------------------------------

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string preset;
  std::string checkpoint;
};

RunConfig config_from(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) cfg.train.seed = *o.seed;
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (!o.preset.empty()) {
    auto p = preset_limits(o.preset);
    if (!p) throw ConfigError("--preset: unknown board '" + o.preset + "'");
    cfg.limits = *p;
  }
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << text;
}

json memory_json(const MemoryReport& m) {
  return {{"feature_map_bytes", m.feature_map_bytes},
          {"trainable_weight_and_gradbuf_bytes", m.trainable_weight_and_gradbuf_bytes},
          {"static_weight_bytes", m.static_weight_bytes}};
}

void print_memory(std::ostream& out, const std::string& label, const MemoryReport& m) {
  out << std::left << std::setw(9) << label << std::right << std::setw(14) << m.feature_map_bytes
      << std::setw(18) << m.trainable_weight_and_gradbuf_bytes << std::setw(14)
      << m.static_weight_bytes << '\n';
}

void print_memory_header(std::ostream& out) {
  out << std::left << std::setw(9) << "mode" << std::right << std::setw(14) << "feature_maps"
      << std::setw(18) << "trainable+gradbuf" << std::setw(14) << "static" << '\n';
}

int cmd_train(const Options& o, std::ostream& out) {
  const RunConfig cfg = config_from(o);
  const Splits data = load_splits(cfg);
  TrainerState state;
  RunConfig effective = cfg;
  if (!o.checkpoint.empty()) effective.init_checkpoint = o.checkpoint;
  Model model = make_model(effective, data.train, &state);
  out << "train: " << data.train.size() << " samples, test: " << data.test.size()
      << ", precision " << to_string(model.precision_mode()) << ", epochs " << cfg.epochs
      << '\n';
  print_memory_header(out);
  print_memory(out, to_string(model.precision_mode()), plan_memory(model, cfg.train));

  const auto t0 = std::chrono::steady_clock::now();
  const TrainRun run = train_model(model, effective, data, state);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const EpochMetrics& e : run.epochs) {
    out << "epoch " << e.epoch << "  loss " << fmt(e.loss, 4) << "  test_acc "
        << fmt(e.test_acc, 4) << "  macs_bwd " << e.macs_bwd << "  selected "
        << fmt(e.selected_frac_mean, 3) << '\n';
  }

  fs::create_directories(cfg.out_dir);
  const fs::path dir(cfg.out_dir);
  write_text(dir / "metrics.csv", metrics_csv(run));
  if (cfg.step_metrics) write_text(dir / "steps.csv", steps_csv(run));
  save_checkpoint_file((dir / "model.qtrn").string(), model, run.state);
  json summary = {{"precision", to_string(model.precision_mode())},
                  {"epochs", cfg.epochs},
                  {"steps", run.state.steps},
                  {"final_test_acc", run.epochs.back().test_acc},
                  {"final_loss", run.epochs.back().loss},
                  {"max_loss_observed", run.state.max_loss_observed},
                  {"memory", memory_json(run.memory)},
                  {"checkpoint", (dir / "model.qtrn").string()}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  out << "wrote " << (dir / "metrics.csv").string() << ", " << (dir / "model.qtrn").string()
      << " (" << fmt(wall, 1) << " s)\n";
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
  const RunConfig cfg = config_from(o);
  Checkpoint ck = load_checkpoint_file(o.checkpoint);
  const Splits data = load_splits(cfg);
  if (!ck.model.calibrated()) ensure_calibrated(ck.model, data.train, cfg.train.batch_size);
  const EvalReport r = evaluate(ck.model, data.test);
  out << "accuracy " << fmt(r.accuracy, 4) << " on " << data.test.size() << " samples\n";
  out << "confusion (rows: true class, columns: predicted)\n";
  for (const auto& row : r.confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) out << (j ? " " : "") << std::setw(5) << row[j];
    out << '\n';
  }
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    json j = {{"accuracy", r.accuracy}, {"samples", data.test.size()}, {"confusion", r.confusion}};
    write_text(fs::path(o.out) / "eval.json", j.dump(2) + "\n");
  }
  return 0;
}

struct BenchRow {
  double lambda_min = 1.0;
  bool dense = false;
  std::uint64_t macs_bwd = 0;
  double wall = 0.0;
  double final_loss = 0.0;
  double test_acc = 0.0;
};

BenchRow bench_run(const RunConfig& base, const Splits& data, std::optional<double> lambda) {
  RunConfig cfg = base;
  if (lambda) {
    SparseConfig sc = base.train.sparse.value_or(SparseConfig{});
    sc.lambda_min = *lambda;
    sc.lambda_max = std::max(*lambda, 1.0);
    sc.max_loss_observed = 0.0;
    cfg.train.sparse = sc;
  } else {
    cfg.train.sparse.reset();
  }
  Model model = make_model(cfg, data.train);
  ensure_calibrated(model, data.train, cfg.train.batch_size);
  Trainer trainer(model, cfg.train);
  BenchRow row;
  row.dense = !lambda;
  row.lambda_min = lambda.value_or(1.0);
  const std::size_t window = std::min<std::size_t>(100, std::max<std::size_t>(cfg.bench.steps, 1));
  std::vector<double> losses;
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t done = 0;
  for (std::size_t epoch = 1; done < cfg.bench.steps; ++epoch) {
    for (std::size_t idx : epoch_order(data.train.size(), cfg.train.seed, epoch)) {
      if (done >= cfg.bench.steps) break;
      const StepMetrics m = trainer.train_step(to_input_qtensor(data.train, idx), data.train.labels[idx]);
      row.macs_bwd += m.macs_bwd;
      losses.push_back(m.loss);
      ++done;
    }
  }
  row.wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const std::size_t from = losses.size() > window ? losses.size() - window : 0;
  double sum = 0.0;
  for (std::size_t i = from; i < losses.size(); ++i) sum += losses[i];
  row.final_loss = losses.size() > from ? sum / static_cast<double>(losses.size() - from) : 0.0;
  row.test_acc = evaluate(model, data.test).accuracy;
  return row;
}

int cmd_bench(const Options& o, std::ostream& out) {
  const RunConfig cfg = config_from(o);
  const Splits data = load_splits(cfg);
  const BenchRow dense = bench_run(cfg, data, std::nullopt);
  std::vector<BenchRow> rows;
  for (double l : cfg.bench.lambda_min) rows.push_back(bench_run(cfg, data, l));

  std::ostringstream csv;
  csv << "lambda_min,steps,macs_bwd,mac_ratio,wall_seconds,wall_ratio,final_loss,test_acc\n";
  json report = {{"precision", to_string(cfg.train.precision)},
                 {"steps", cfg.bench.steps},
                 {"dense", {{"macs_bwd", dense.macs_bwd}, {"wall_seconds", dense.wall},
                            {"final_loss", dense.final_loss}, {"test_acc", dense.test_acc}}},
                 {"runs", json::array()}};
  out << "dense: macs_bwd " << dense.macs_bwd << ", " << fmt(dense.wall, 2) << " s\n";
  for (const BenchRow& r : rows) {
    const double mac_ratio = r.macs_bwd ? static_cast<double>(dense.macs_bwd) / r.macs_bwd : 0.0;
    const double wall_ratio = r.wall > 0 ? dense.wall / r.wall : 0.0;
    csv << fmt(r.lambda_min, 3) << ',' << cfg.bench.steps << ',' << r.macs_bwd << ','
        << fmt(mac_ratio, 4) << ',' << fmt(r.wall, 3) << ',' << fmt(wall_ratio, 3) << ','
        << fmt(r.final_loss) << ',' << fmt(r.test_acc) << '\n';
    report["runs"].push_back({{"lambda_min", r.lambda_min}, {"macs_bwd", r.macs_bwd},
                              {"mac_ratio", mac_ratio}, {"wall_seconds", r.wall},
                              {"wall_ratio", wall_ratio}, {"final_loss", r.final_loss},
                              {"test_acc", r.test_acc}});
    out << "lambda_min " << fmt(r.lambda_min, 2) << ": mac_ratio " << fmt(mac_ratio, 2)
        << ", wall_ratio " << fmt(wall_ratio, 2) << ", final_loss " << fmt(r.final_loss, 4)
        << '\n';
  }
  fs::create_directories(cfg.out_dir);
  write_text(fs::path(cfg.out_dir) / "bench.csv", csv.str());
  write_text(fs::path(cfg.out_dir) / "bench.json", report.dump(2) + "\n");
  return 0;
}

int cmd_memory(const Options& o, std::ostream& out) {
  const RunConfig cfg = config_from(o);
  const Shape input = cfg.data.synthetic > 0 ? Shape{1, 8, 8} : Shape{1, 28, 28};
  Dataset shape_only;
  shape_only.sample_shape = input;
  json report = {{"modes", json::object()},
                 {"limits", {{"ram_bytes", cfg.limits.ram_bytes},
                             {"flash_bytes", cfg.limits.flash_bytes}}}};
  print_memory_header(out);
  bool exceeded = false;
  for (PrecisionMode mode : {PrecisionMode::Uint8, PrecisionMode::Mixed, PrecisionMode::Float32}) {
    RunConfig mc = cfg;
    mc.train.precision = mode;
    mc.init_checkpoint.clear();
    const Model model = make_model(mc, shape_only);
    const MemoryReport m = plan_memory(model, mc.train);
    print_memory(out, to_string(mode), m);
    json entry = memory_json(m);
    const bool ram_over = cfg.limits.ram_bytes && m.ram_bytes() > cfg.limits.ram_bytes;
    const bool flash_over = cfg.limits.flash_bytes && m.static_weight_bytes > cfg.limits.flash_bytes;
    entry["ram_bytes"] = m.ram_bytes();
    entry["exceeds_ram"] = ram_over;
    entry["exceeds_flash"] = flash_over;
    if (ram_over) out << "  " << to_string(mode) << ": RAM " << m.ram_bytes() << " exceeds limit " << cfg.limits.ram_bytes << '\n';
    if (flash_over) out << "  " << to_string(mode) << ": Flash " << m.static_weight_bytes << " exceeds limit " << cfg.limits.flash_bytes << '\n';
    exceeded = exceeded || ram_over || flash_over;
    report["modes"][to_string(mode)] = entry;
  }
  if (!o.out.empty() || !o.config.empty()) {
    fs::create_directories(cfg.out_dir);
    write_text(fs::path(cfg.out_dir) / "memory.json", report.dump(2) + "\n");
  }
  (void)exceeded;
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"qtrain: fully quantized on-device training for small CNNs"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--seed", seed, "Override train.seed");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--preset", o.preset, "Board limits: rp2040, nrf52840, imxrt1062");
  };
  CLI::App* train = app.add_subcommand("train", "Train a model and write metrics and a checkpoint");
  add_common(train);
  train->add_option("--checkpoint", o.checkpoint, "Start from this checkpoint");
  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  add_common(eval);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate")->required();
  CLI::App* bench = app.add_subcommand("bench", "Compare sparse and dense backward passes");
  add_common(bench);
  CLI::App* memory = app.add_subcommand("memory", "Print the memory segments per precision mode");
  add_common(memory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  for (CLI::App* sub : {train, eval, bench, memory}) {
    if (sub->parsed() && sub->count("--seed")) o.seed = seed;
  }
  try {
    if (train->parsed()) return cmd_train(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (bench->parsed()) return cmd_bench(o, out);
    return cmd_memory(o, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace qtrain
