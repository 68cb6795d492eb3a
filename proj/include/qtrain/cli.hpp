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
#pragma once

// Run configuration and the experiment drivers behind the qtrain command
// line: training with per-epoch metrics, evaluation, the sparse-update
// benchmark and the memory report.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qtrain/config.hpp"
#include "qtrain/data.hpp"
#include "qtrain/memory.hpp"
#include "qtrain/model.hpp"
#include "qtrain/optim.hpp"

namespace qtrain {

struct DataConfig {
  std::string images;
  std::string labels;
  // Separate test files; when absent the training files are split.
  std::string test_images;
  std::string test_labels;
  double train_fraction = 0.8;
  std::size_t class_count = 10;
  // When positive, replaces the files with this many synthetic blob samples.
  std::size_t synthetic = 0;
};

struct BenchConfig {
  std::vector<double> lambda_min{1.0, 0.5, 0.1};
  std::size_t steps = 480;
};

struct Limits {
  std::size_t ram_bytes = 0;    // 0 means unlimited
  std::size_t flash_bytes = 0;
};

struct RunConfig {
  std::vector<BlockSpec> blocks;  // empty selects the default network
  DataConfig data;
  TrainConfig train;
  std::size_t epochs = 5;
  // Reinitialize and train only the last k weighted layers (0 = train all).
  std::size_t reset_layers = 0;
  std::string init_checkpoint;
  std::string out_dir = "qtrain_out";
  bool step_metrics = false;
  BenchConfig bench;
  Limits limits;
};

// Parses and validates a JSON run configuration; unknown keys are errors.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Presets of RAM and Flash limits for the supported boards.
std::optional<Limits> preset_limits(const std::string& name);

struct Splits {
  Dataset train;
  Dataset test;
};
Splits load_splits(const RunConfig& cfg);

// Builds the configured network for the given data (fresh weights from the
// train seed) or loads cfg.init_checkpoint, then applies reset_layers.
Model make_model(const RunConfig& cfg, const Dataset& train, TrainerState* state = nullptr);

struct EvalReport {
  double accuracy = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
};
// Requires a calibrated model.
EvalReport evaluate(const Model& model, const Dataset& ds);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::uint64_t step = 0;  // cumulative samples trained
  double loss = 0.0;       // mean training loss over the epoch
  double test_acc = 0.0;
  std::uint64_t macs_fwd = 0;
  std::uint64_t macs_bwd = 0;
  double selected_frac_mean = 1.0;
};

struct StepRecord {
  std::size_t epoch = 0;
  std::uint64_t step = 0;
  double loss = 0.0;
  double selected_frac_mean = 1.0;
  std::uint64_t macs_bwd_total = 0;
  double wall_seconds = 0.0;
};

struct TrainRun {
  std::vector<EpochMetrics> epochs;  // epoch 0 is the untrained baseline
  std::vector<StepRecord> steps;     // only with step_metrics
  std::vector<std::uint64_t> visits;
  TrainerState state;
  MemoryReport memory;
};

// Calibrates activation ranges on the first minibatch if needed, evaluates
// the baseline, then trains cfg.epochs epochs over the streamed training
// split. `max_steps` truncates training (0 = no limit).
TrainRun train_model(Model& model, const RunConfig& cfg, const Splits& data,
                     TrainerState state = {}, std::uint64_t max_steps = 0);

std::string metrics_csv(const TrainRun& run);
std::string steps_csv(const TrainRun& run);

// Entry point of the qtrain executable.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace qtrain
