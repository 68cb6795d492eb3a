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

// Sequential model container, tape-recording forward pass, backward pass
// over the trainable suffix, and the binary checkpoint format.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "qtrain/config.hpp"
#include "qtrain/layers.hpp"
#include "qtrain/qcore.hpp"

namespace qtrain {

enum class LayerKind : std::uint8_t {
  QConv2d = 1,
  QLinear = 2,
  Conv2d = 3,
  Linear = 4,
  MaxPool2d = 5,
  ReLU = 6,
  Flatten = 7,
  Dequant = 8,
};

enum class Precision : std::uint8_t { Quantized = 0, Float = 1 };

std::string to_string(LayerKind kind);

using Geometry = std::variant<std::monostate, ConvGeometry, LinearGeometry, PoolGeometry>;

struct LayerSpec {
  LayerKind kind = LayerKind::Flatten;
  // Precision of the layer's input. Dequant takes quantized input and
  // produces float output.
  Precision precision = Precision::Quantized;
  Geometry geometry;
  // QConv2d/QLinear only: ReLU fused into the requantization.
  bool fused_relu = false;

  bool weighted() const;
  Precision output_precision() const;
  void validate() const;
  Shape output_shape(const Shape& input) const;
  // Output channels (conv) or features (linear); 0 for weightless layers.
  std::size_t structures() const;
  std::size_t fan_in() const;
  std::uint64_t forward_macs(const Shape& input) const;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Exponential moving average of an observed real-valued range, used to pick
// the qparams of activations and errors.
struct RangeTracker {
  static constexpr double kMomentum = 0.99;

  bool initialized = false;
  float lo = 0.0f;
  float hi = 0.0f;

  // The first observation initializes; later ones blend with kMomentum.
  void observe(float observed_lo, float observed_hi);
  QuantParams qparams() const { return derive_qparams(lo, hi); }

  friend bool operator==(const RangeTracker&, const RangeTracker&) = default;
};

struct Layer {
  LayerSpec spec;
  // Quantized weighted layers.
  QTensor qweight;
  // Scale s_w * s_x, zero point 0.
  std::vector<std::int32_t> qbias;
  // Float weighted layers.
  FTensor fweight;
  std::vector<float> fbias;
  // Output activations of quantized weighted layers.
  RangeTracker output_range;
  // Errors propagated to this layer's quantized input.
  RangeTracker error_range;

  std::size_t weight_elements() const;
  // Weight plus bias storage in the layer's own precision.
  std::size_t parameter_bytes() const;
};

class Model {
 public:
  static constexpr QuantParams kInputQParams{1.0f / 255.0f, 0};

  Model() = default;
  // Validates the layer chain: shapes, one Dequant boundary with quantized
  // layers before it and float layers after it, weight payloads matching
  // their geometry. All weighted layers start trainable.
  Model(Shape input_shape, std::vector<Layer> layers);

  const Shape& input_shape() const { return input_shape_; }
  const Shape& layer_input_shape(std::size_t i) const { return in_shapes_.at(i); }
  const Shape& layer_output_shape(std::size_t i) const { return out_shapes_.at(i); }
  const Shape& output_shape() const { return out_shapes_.back(); }
  std::size_t size() const { return layers_.size(); }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  Layer& layer(std::size_t i) { return layers_.at(i); }
  const std::vector<Layer>& layers() const { return layers_; }

  PrecisionMode precision_mode() const;
  std::size_t dequant_index() const { return dequant_index_; }

  std::vector<std::size_t> weighted_layers() const;
  bool trainable(std::size_t i) const { return trainable_.at(i) != 0; }
  std::vector<std::size_t> trainable_layers() const;
  // Throws unless every index names a weighted layer.
  void set_trainable(std::span<const std::size_t> layers);
  void freeze_all();
  // Earliest trainable layer: the backward pass stops there.
  std::optional<std::size_t> first_trainable() const;

  // Qparams of the quantized activation entering layer i.
  QuantParams input_qparams(std::size_t i) const;
  // True once every quantized weighted layer has an output range.
  bool calibrated() const;

 private:
  Shape input_shape_;
  std::vector<Layer> layers_;
  std::vector<Shape> in_shapes_;
  std::vector<Shape> out_shapes_;
  std::vector<std::uint8_t> trainable_;
  std::size_t dequant_index_ = 0;
};

// Convolution block description used by model builders; precision-specific
// layer kinds are chosen when the model is built.
struct BlockSpec {
  enum class Type { Conv, Linear, MaxPool, Flatten } type = Type::Conv;
  std::uint32_t out = 0;  // channels or features
  std::uint32_t kernel = 3;
  std::uint32_t stride = 1;
  std::uint32_t padding = 0;
  bool relu = false;
  std::uint32_t pool = 2;
};

// Builds a model in the given precision mode with weights initialized
// uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)] and zero bias. The Dequant
// boundary goes last (uint8), before the first linear block (mixed) or first
// (float32).
Model build_model(const Shape& input_shape, std::span<const BlockSpec> blocks,
                  PrecisionMode mode, std::uint64_t seed);

// Two convolutions, max pooling and two linear layers, all but the last
// with ReLU.
std::vector<BlockSpec> small_cnn_blocks(std::uint32_t classes);

// Reinitializes the last k weighted layers and makes exactly those
// trainable; k = 0 leaves the model untouched.
void reset_layers(Model& model, std::size_t k, std::uint64_t seed);

// ---- tape -----------------------------------------------------------------

// What a visited layer's backward reads from the forward pass.
struct BackwardNeeds {
  bool input = false;      // x_cached for the weight gradient
  bool relu_mask = false;  // fused or standalone ReLU activity
  bool argmax = false;     // max-pool winners

  friend bool operator==(const BackwardNeeds&, const BackwardNeeds&) = default;
};

// Dependencies of layer i's backward when the backward pass visits it.
BackwardNeeds backward_needs(const Model& model, std::size_t i);

struct TapeEntry {
  std::optional<Activation> input;
  std::vector<std::uint8_t> active;
  std::vector<std::uint32_t> argmax;
  // Forward step that produced the cache and backward step that consumes it.
  std::size_t first_use = 0;
  std::size_t last_use = 0;

  std::size_t bytes() const;
};

struct Tape {
  std::size_t model_layers = 0;
  // Earliest visited layer; entries[i - first_layer] belongs to layer i.
  std::size_t first_layer = 0;
  std::vector<TapeEntry> entries;

  bool empty() const { return entries.empty(); }
  std::size_t cached_bytes() const;
  const TapeEntry& entry(std::size_t layer) const;
};

// Step index of layer i's backward on the shared forward/backward timeline:
// forward of layer i runs at step i, the loss at step L.
std::size_t backward_step(std::size_t layers, std::size_t i);

enum class ForwardMode { Infer, Train };

struct ForwardResult {
  FTensor logits;
  std::optional<Tape> tape;
  std::uint64_t macs = 0;
};

// Inference on a calibrated model; never mutates it.
ForwardResult forward(const Model& model, const QTensor& input);
// Train mode records a tape for the trainable suffix and folds the observed
// activation ranges into the model's EMA trackers. Infer mode caches nothing
// and only initializes trackers that have never seen data.
ForwardResult forward(Model& model, const QTensor& input, ForwardMode mode);

// Folds the activation ranges of the given samples into the trackers.
void calibrate(Model& model, std::span<const QTensor> samples);

// Chooses which error structures a weighted layer propagates; an empty
// mask keeps all of them.
using StructureSelector = std::function<StructureMask(std::size_t layer, const Activation& error)>;

struct BackwardResult {
  // Gradients of trainable layers only.
  std::map<std::size_t, LayerGrad> grads;
  // Kernel invocations per layer index.
  std::vector<std::uint32_t> visits;
  // Fraction of structures kept, per visited weighted layer.
  std::map<std::size_t, double> selected_fraction;
  std::uint64_t macs = 0;
};

// Errors entering quantized layers are requantized with `rounding`.
BackwardResult backward(Model& model, const Tape& tape, const FTensor& d_logits,
                        const StructureSelector& select = {},
                        Rounding rounding = Rounding::Nearest);

// ---- checkpoints ----------------------------------------------------------

struct TrainerState {
  double max_loss_observed = 0.0;
  std::uint64_t steps = 0;

  friend bool operator==(const TrainerState&, const TrainerState&) = default;
};

struct Checkpoint {
  Model model;
  TrainerState trainer;
};

void save_checkpoint(std::ostream& os, const Model& model, const TrainerState& state = {});
Checkpoint load_checkpoint(std::istream& is);
void save_checkpoint_file(const std::string& path, const Model& model,
                          const TrainerState& state = {});
Checkpoint load_checkpoint_file(const std::string& path);

}  // namespace qtrain
