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
#include "qtrain/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "qtrain/errors.hpp"

namespace qtrain {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::QConv2d: return "QConv2d";
    case LayerKind::QLinear: return "QLinear";
    case LayerKind::Conv2d: return "Conv2d";
    case LayerKind::Linear: return "Linear";
    case LayerKind::MaxPool2d: return "MaxPool2d";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::Flatten: return "Flatten";
    case LayerKind::Dequant: return "Dequant";
  }
  return "Unknown";
}

// ---- LayerSpec ----------------------------------------------------------------

bool LayerSpec::weighted() const {
  return kind == LayerKind::QConv2d || kind == LayerKind::QLinear ||
         kind == LayerKind::Conv2d || kind == LayerKind::Linear;
}

Precision LayerSpec::output_precision() const {
  return kind == LayerKind::Dequant ? Precision::Float : precision;
}

void LayerSpec::validate() const {
  const auto expect = [&](bool ok, const std::string& what) {
    if (!ok) throw DimensionError(to_string(kind) + ": " + what);
  };
  switch (kind) {
    case LayerKind::QConv2d:
    case LayerKind::Conv2d:
      expect(std::holds_alternative<ConvGeometry>(geometry), "needs conv geometry");
      std::get<ConvGeometry>(geometry).validate();
      break;
    case LayerKind::QLinear:
    case LayerKind::Linear:
      expect(std::holds_alternative<LinearGeometry>(geometry), "needs linear geometry");
      std::get<LinearGeometry>(geometry).validate();
      break;
    case LayerKind::MaxPool2d:
      expect(std::holds_alternative<PoolGeometry>(geometry), "needs pool geometry");
      std::get<PoolGeometry>(geometry).validate();
      break;
    case LayerKind::ReLU:
    case LayerKind::Flatten:
    case LayerKind::Dequant:
      expect(std::holds_alternative<std::monostate>(geometry), "takes no geometry");
      break;
  }
  const bool quantized_kind = kind == LayerKind::QConv2d || kind == LayerKind::QLinear ||
                              kind == LayerKind::Dequant;
  const bool float_kind = kind == LayerKind::Conv2d || kind == LayerKind::Linear;
  expect(!quantized_kind || precision == Precision::Quantized, "must be quantized");
  expect(!float_kind || precision == Precision::Float, "must be float");
  expect(!fused_relu || kind == LayerKind::QConv2d || kind == LayerKind::QLinear,
         "only quantized weighted layers fuse ReLU");
}

Shape LayerSpec::output_shape(const Shape& input) const {
  switch (kind) {
    case LayerKind::QConv2d:
    case LayerKind::Conv2d:
      return std::get<ConvGeometry>(geometry).output_shape(input);
    case LayerKind::QLinear:
    case LayerKind::Linear:
      return std::get<LinearGeometry>(geometry).output_shape(input);
    case LayerKind::MaxPool2d:
      return std::get<PoolGeometry>(geometry).output_shape(input);
    case LayerKind::Flatten:
      return {element_count(input)};
    case LayerKind::ReLU:
    case LayerKind::Dequant:
      return input;
  }
  return input;
}

std::size_t LayerSpec::structures() const {
  if (const auto* c = std::get_if<ConvGeometry>(&geometry)) return c->out_channels;
  if (const auto* l = std::get_if<LinearGeometry>(&geometry)) return l->out_features;
  return 0;
}

std::size_t LayerSpec::fan_in() const {
  if (const auto* c = std::get_if<ConvGeometry>(&geometry)) return c->fan_in();
  if (const auto* l = std::get_if<LinearGeometry>(&geometry)) return l->fan_in();
  return 0;
}

std::uint64_t LayerSpec::forward_macs(const Shape& input) const {
  if (!weighted()) return 0;
  return std::uint64_t{fan_in()} * element_count(output_shape(input));
}

void RangeTracker::observe(float observed_lo, float observed_hi) {
  if (!initialized) {
    lo = observed_lo;
    hi = observed_hi;
    initialized = true;
    return;
  }
  lo = static_cast<float>(kMomentum * lo + (1.0 - kMomentum) * observed_lo);
  hi = static_cast<float>(kMomentum * hi + (1.0 - kMomentum) * observed_hi);
}

std::size_t Layer::weight_elements() const {
  return spec.precision == Precision::Quantized ? qweight.size() : fweight.size();
}

std::size_t Layer::parameter_bytes() const {
  if (!spec.weighted()) return 0;
  if (spec.precision == Precision::Quantized) {
    return qweight.size() + qbias.size() * sizeof(std::int32_t);
  }
  return (fweight.size() + fbias.size()) * sizeof(float);
}

// ---- Model ----------------------------------------------------------------------

Model::Model(Shape input_shape, std::vector<Layer> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (layers_.empty()) throw DimensionError("model: no layers");
  std::size_t dequants = 0;
  Shape shape = input_shape_;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer& l = layers_[i];
    try {
      l.spec.validate();
      in_shapes_.push_back(shape);
      shape = l.spec.output_shape(shape);
      out_shapes_.push_back(shape);
    } catch (const DimensionError& e) {
      throw DimensionError("layer " + std::to_string(i) + " (" + to_string(l.spec.kind) +
                           "): " + e.what());
    }
    if (l.spec.kind == LayerKind::Dequant) {
      ++dequants;
      dequant_index_ = i;
    }
    if (l.spec.weighted()) {
      const Shape ws = l.spec.kind == LayerKind::QConv2d || l.spec.kind == LayerKind::Conv2d
                           ? std::get<ConvGeometry>(l.spec.geometry).weight_shape()
                           : std::get<LinearGeometry>(l.spec.geometry).weight_shape();
      const bool quantized = l.spec.precision == Precision::Quantized;
      const Shape& actual = quantized ? l.qweight.shape() : l.fweight.shape();
      const std::size_t bias = quantized ? l.qbias.size() : l.fbias.size();
      if (actual != ws || bias != l.spec.structures()) {
        throw DimensionError("layer " + std::to_string(i) + ": weight " + to_string(actual) +
                             " / bias " + std::to_string(bias) + " do not match geometry " +
                             to_string(ws));
      }
    }
  }
  if (dequants != 1) {
    throw DimensionError("model: expected exactly one Dequant boundary, found " +
                         std::to_string(dequants));
  }
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const bool before = i <= dequant_index_;
    if ((layers_[i].spec.precision == Precision::Quantized) != before) {
      throw DimensionError("layer " + std::to_string(i) +
                           ": layers before the Dequant boundary must be quantized and "
                           "layers after it float");
    }
  }
  trainable_.assign(layers_.size(), 0);
  for (std::size_t i = 0; i < layers_.size(); ++i) trainable_[i] = layers_[i].spec.weighted();
}

PrecisionMode Model::precision_mode() const {
  if (dequant_index_ == 0) return PrecisionMode::Float32;
  if (dequant_index_ + 1 == layers_.size()) return PrecisionMode::Uint8;
  return PrecisionMode::Mixed;
}

std::vector<std::size_t> Model::weighted_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].spec.weighted()) out.push_back(i);
  return out;
}

std::vector<std::size_t> Model::trainable_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (trainable_[i]) out.push_back(i);
  return out;
}

void Model::set_trainable(std::span<const std::size_t> layers) {
  std::vector<std::uint8_t> flags(layers_.size(), 0);
  for (std::size_t i : layers) {
    if (i >= layers_.size() || !layers_[i].spec.weighted()) {
      throw Error("set_trainable: layer " + std::to_string(i) + " is not a weighted layer");
    }
    flags[i] = 1;
  }
  trainable_ = std::move(flags);
}

void Model::freeze_all() { std::fill(trainable_.begin(), trainable_.end(), 0); }

std::optional<std::size_t> Model::first_trainable() const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (trainable_[i]) return i;
  return std::nullopt;
}

QuantParams Model::input_qparams(std::size_t i) const {
  if (i > dequant_index_) {
    throw Error("input_qparams: layer " + std::to_string(i) + " has float input");
  }
  for (std::size_t j = i; j-- > 0;) {
    const LayerSpec& s = layers_[j].spec;
    if (s.kind == LayerKind::QConv2d || s.kind == LayerKind::QLinear) {
      return layers_[j].output_range.qparams();
    }
  }
  return kInputQParams;
}

bool Model::calibrated() const {
  for (const Layer& l : layers_) {
    const bool needs = l.spec.kind == LayerKind::QConv2d || l.spec.kind == LayerKind::QLinear;
    if (needs && !l.output_range.initialized) return false;
  }
  return true;
}

// ---- builders -------------------------------------------------------------------

namespace {

class UniformInit {
 public:
  explicit UniformInit(std::uint64_t seed) : rng_(seed) {}
  // Uniform in [-r, r) from the top 53 bits of the generator.
  float operator()(double r) {
    const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
    return static_cast<float>((2.0 * u - 1.0) * r);
  }

 private:
  std::mt19937_64 rng_;
};

void init_weights(Layer& l, UniformInit& init) {
  const double r = std::sqrt(1.0 / static_cast<double>(l.spec.fan_in()));
  const Shape ws = std::holds_alternative<ConvGeometry>(l.spec.geometry)
                       ? std::get<ConvGeometry>(l.spec.geometry).weight_shape()
                       : std::get<LinearGeometry>(l.spec.geometry).weight_shape();
  FTensor w(ws);
  for (float& v : w.values()) v = init(r);
  if (l.spec.precision == Precision::Quantized) {
    l.qweight = quantize_tensor(w);
    l.qbias.assign(l.spec.structures(), 0);
  } else {
    l.fweight = std::move(w);
    l.fbias.assign(l.spec.structures(), 0.0f);
  }
}

Layer make_layer(LayerKind kind, Precision p, Geometry g = {}, bool relu = false) {
  Layer l;
  l.spec = LayerSpec{kind, p, g, relu};
  return l;
}

}  // namespace

Model build_model(const Shape& input_shape, std::span<const BlockSpec> blocks,
                  PrecisionMode mode, std::uint64_t seed) {
  std::vector<Layer> layers;
  Shape shape = input_shape;
  bool quantized = mode != PrecisionMode::Float32;
  UniformInit init(seed);
  if (mode == PrecisionMode::Float32) layers.push_back(make_layer(LayerKind::Dequant, Precision::Quantized));
  const auto push = [&](Layer l) {
    shape = l.spec.output_shape(shape);
    layers.push_back(std::move(l));
  };
  for (const BlockSpec& b : blocks) {
    const Precision p = quantized ? Precision::Quantized : Precision::Float;
    switch (b.type) {
      case BlockSpec::Type::Conv: {
        if (shape.size() != 3) throw DimensionError("build_model: conv block needs CxHxW input");
        ConvGeometry g{static_cast<std::uint32_t>(shape[0]), b.out, b.kernel, b.kernel, b.stride,
                       b.padding};
        Layer l = make_layer(quantized ? LayerKind::QConv2d : LayerKind::Conv2d, p, g,
                             quantized && b.relu);
        init_weights(l, init);
        push(std::move(l));
        if (!quantized && b.relu) push(make_layer(LayerKind::ReLU, p));
        break;
      }
      case BlockSpec::Type::Linear: {
        if (mode == PrecisionMode::Mixed && quantized) {
          push(make_layer(LayerKind::Dequant, Precision::Quantized));
          quantized = false;
        }
        const Precision lp = quantized ? Precision::Quantized : Precision::Float;
        if (shape.size() != 1) throw DimensionError("build_model: linear block needs flat input");
        LinearGeometry g{static_cast<std::uint32_t>(shape[0]), b.out};
        Layer l = make_layer(quantized ? LayerKind::QLinear : LayerKind::Linear, lp, g,
                             quantized && b.relu);
        init_weights(l, init);
        push(std::move(l));
        if (!quantized && b.relu) push(make_layer(LayerKind::ReLU, lp));
        break;
      }
      case BlockSpec::Type::MaxPool:
        push(make_layer(LayerKind::MaxPool2d, p, PoolGeometry{b.pool, b.pool}));
        break;
      case BlockSpec::Type::Flatten:
        push(make_layer(LayerKind::Flatten, p));
        break;
    }
  }
  if (quantized) layers.push_back(make_layer(LayerKind::Dequant, Precision::Quantized));
  return Model(input_shape, std::move(layers));
}

std::vector<BlockSpec> small_cnn_blocks(std::uint32_t classes) {
  using T = BlockSpec::Type;
  return {
      {T::Conv, 8, 3, 1, 0, true, 2},
      {T::Conv, 16, 3, 2, 0, true, 2},
      {T::MaxPool, 0, 0, 0, 0, false, 2},
      {T::Flatten, 0, 0, 0, 0, false, 2},
      {T::Linear, 64, 0, 0, 0, true, 2},
      {T::Linear, classes, 0, 0, 0, false, 2},
  };
}

void reset_layers(Model& model, std::size_t k, std::uint64_t seed) {
  const std::vector<std::size_t> weighted = model.weighted_layers();
  if (k > weighted.size()) {
    throw Error("reset_layers: k = " + std::to_string(k) + " exceeds the " +
                std::to_string(weighted.size()) + " weighted layers");
  }
  if (k == 0) return;
  UniformInit init(seed);
  std::vector<std::size_t> reset(weighted.end() - static_cast<std::ptrdiff_t>(k), weighted.end());
  for (std::size_t i : reset) {
    Layer& l = model.layer(i);
    init_weights(l, init);
    l.output_range = {};
    l.error_range = {};
  }
  model.set_trainable(reset);
}

// ---- tape -----------------------------------------------------------------------

BackwardNeeds backward_needs(const Model& model, std::size_t i) {
  const LayerSpec& s = model.layer(i).spec;
  BackwardNeeds n;
  switch (s.kind) {
    case LayerKind::QConv2d:
    case LayerKind::QLinear:
      n.input = model.trainable(i);
      n.relu_mask = s.fused_relu;
      break;
    case LayerKind::Conv2d:
    case LayerKind::Linear:
      n.input = model.trainable(i);
      break;
    case LayerKind::MaxPool2d:
      n.argmax = true;
      break;
    case LayerKind::ReLU:
      n.relu_mask = true;
      break;
    case LayerKind::Flatten:
    case LayerKind::Dequant:
      break;
  }
  return n;
}

std::size_t TapeEntry::bytes() const {
  std::size_t b = active.size() + argmax.size() * sizeof(std::uint32_t);
  if (input) b += byte_size(*input);
  return b;
}

std::size_t Tape::cached_bytes() const {
  std::size_t b = 0;
  for (const TapeEntry& e : entries) b += e.bytes();
  return b;
}

const TapeEntry& Tape::entry(std::size_t layer) const {
  if (layer < first_layer || layer - first_layer >= entries.size()) {
    throw StateError("tape: layer " + std::to_string(layer) + " was not recorded");
  }
  return entries[layer - first_layer];
}

std::size_t backward_step(std::size_t layers, std::size_t i) { return 2 * layers - i; }

namespace {

// Shared forward walk. `mut` is null for const inference.
ForwardResult run_forward(const Model& model, Model* mut, const QTensor& input,
                          ForwardMode mode) {
  if (input.shape() != model.input_shape()) {
    throw DimensionError("forward: input shape " + to_string(input.shape()) +
                         " does not match model input " + to_string(model.input_shape()));
  }
  const bool train = mode == ForwardMode::Train;
  const std::size_t n = model.size();
  ForwardResult result;
  std::size_t first = n;
  if (train) {
    first = model.first_trainable().value_or(n);
    result.tape = Tape{n, first, std::vector<TapeEntry>(n - first)};
  }
  Activation a = input;
  for (std::size_t i = 0; i < n; ++i) {
    const Layer& layer = model.layer(i);
    const LayerSpec& s = layer.spec;
    const bool visited = train && i >= first;
    const BackwardNeeds needs = visited ? backward_needs(model, i) : BackwardNeeds{};
    TapeEntry* entry = visited ? &result.tape->entries[i - first] : nullptr;
    if (entry) {
      entry->first_use = i;
      entry->last_use = backward_step(n, i);
      if (needs.input) entry->input = a;
    }
    result.macs += s.forward_macs(model.layer_input_shape(i));
    try {
      switch (s.kind) {
        case LayerKind::QConv2d:
        case LayerKind::QLinear: {
          const QTensor& x = std::get<QTensor>(a);
          IntAccum acc = s.kind == LayerKind::QConv2d
                             ? qconv2d_accumulate(x, layer.qweight, layer.qbias,
                                                  std::get<ConvGeometry>(s.geometry))
                             : qlinear_accumulate(x, layer.qweight, layer.qbias);
          auto [lo, hi] = acc.real_range();
          if (s.fused_relu) {
            lo = std::max(lo, 0.0f);
            hi = std::max(hi, 0.0f);
          }
          QuantParams qp;
          if (mut) {
            RangeTracker& tracker = mut->layer(i).output_range;
            if (!tracker.initialized) {
              tracker.observe(lo, hi);
              qp = tracker.qparams();
            } else {
              qp = tracker.qparams();
              if (train) tracker.observe(lo, hi);
            }
          } else {
            if (!layer.output_range.initialized) {
              throw StateError("forward: layer " + std::to_string(i) +
                               " has no calibrated output range");
            }
            qp = layer.output_range.qparams();
          }
          QTensor y = requantize(acc, qp, s.fused_relu);
          if (entry && needs.relu_mask) entry->active = relu_active(y);
          a = std::move(y);
          break;
        }
        case LayerKind::Conv2d:
          a = conv2d_forward(std::get<FTensor>(a), layer.fweight, layer.fbias,
                             std::get<ConvGeometry>(s.geometry));
          break;
        case LayerKind::Linear:
          a = linear_forward(std::get<FTensor>(a), layer.fweight, layer.fbias);
          break;
        case LayerKind::MaxPool2d: {
          const PoolGeometry& g = std::get<PoolGeometry>(s.geometry);
          if (auto* q = std::get_if<QTensor>(&a)) {
            auto r = maxpool_forward(*q, g);
            if (entry) entry->argmax = std::move(r.argmax);
            a = std::move(r.output);
          } else {
            auto r = maxpool_forward(std::get<FTensor>(a), g);
            if (entry) entry->argmax = std::move(r.argmax);
            a = std::move(r.output);
          }
          break;
        }
        case LayerKind::ReLU:
          if (auto* q = std::get_if<QTensor>(&a)) {
            QTensor y = relu_forward(*q);
            if (entry) entry->active = relu_active(y);
            a = std::move(y);
          } else {
            FTensor y = relu_forward(std::get<FTensor>(a));
            if (entry) entry->active = relu_active(y);
            a = std::move(y);
          }
          break;
        case LayerKind::Flatten:
          std::visit([&](auto& t) { t.reshape({t.size()}); }, a);
          break;
        case LayerKind::Dequant:
          a = dequant_boundary_forward(std::get<QTensor>(a));
          break;
      }
    } catch (const std::bad_variant_access&) {
      throw DimensionError("layer " + std::to_string(i) + " (" + to_string(s.kind) +
                           "): input has the wrong precision");
    } catch (const DimensionError& e) {
      throw DimensionError("layer " + std::to_string(i) + " (" + to_string(s.kind) +
                           "): " + e.what());
    }
  }
  result.logits = std::get<FTensor>(std::move(a));
  return result;
}

std::size_t kept_count(const StructureMask& keep, std::size_t n) {
  if (keep.empty()) return n;
  return static_cast<std::size_t>(std::count_if(keep.begin(), keep.end(),
                                                [](std::uint8_t k) { return k != 0; }));
}

}  // namespace

ForwardResult forward(const Model& model, const QTensor& input) {
  return run_forward(model, nullptr, input, ForwardMode::Infer);
}

ForwardResult forward(Model& model, const QTensor& input, ForwardMode mode) {
  return run_forward(model, &model, input, mode);
}

void calibrate(Model& model, std::span<const QTensor> samples) {
  for (const QTensor& s : samples) {
    // Train mode observes ranges; with nothing trainable it records no tape.
    std::vector<std::size_t> trainable = model.trainable_layers();
    model.freeze_all();
    forward(model, s, ForwardMode::Train);
    model.set_trainable(trainable);
  }
}

BackwardResult backward(Model& model, const Tape& tape, const FTensor& d_logits,
                        const StructureSelector& select, Rounding rounding) {
  const std::size_t n = model.size();
  if (tape.model_layers != n || tape.first_layer > n ||
      tape.entries.size() != n - tape.first_layer) {
    throw StateError("backward: tape was recorded for a different model");
  }
  if (d_logits.shape() != model.output_shape()) {
    throw DimensionError("backward: d_logits shape " + to_string(d_logits.shape()) +
                         " does not match model output " + to_string(model.output_shape()));
  }
  BackwardResult result;
  result.visits.assign(n, 0);
  if (tape.empty()) return result;
  const std::size_t first = tape.first_layer;
  Activation e = d_logits;
  for (std::size_t i = n; i-- > first;) {
    Layer& layer = model.layer(i);
    const LayerSpec& s = layer.spec;
    const TapeEntry& t = tape.entry(i);
    const Shape& in_shape = model.layer_input_shape(i);
    ++result.visits[i];
    try {
      switch (s.kind) {
        case LayerKind::Dequant:
          e = dequant_boundary_backward(std::get<FTensor>(e), rounding);
          break;
        case LayerKind::Flatten:
          std::visit([&](auto& te) { te.reshape(in_shape); }, e);
          break;
        case LayerKind::MaxPool2d:
          if (auto* q = std::get_if<QTensor>(&e)) {
            e = maxpool_backward(*q, t.argmax, in_shape);
          } else {
            e = maxpool_backward(std::get<FTensor>(e), t.argmax, in_shape);
          }
          break;
        case LayerKind::ReLU:
          std::visit([&](auto& te) { mask_error(te, t.active); }, e);
          break;
        case LayerKind::QConv2d:
        case LayerKind::QLinear: {
          QTensor& eq = std::get<QTensor>(e);
          if (s.fused_relu) mask_error(eq, t.active);
          BackwardOptions opts;
          if (select) opts.keep = select(i, e);
          opts.input_grad = i > first;
          opts.weight_grad = model.trainable(i);
          const QTensor placeholder =
              t.input ? QTensor() : QTensor(in_shape, model.input_qparams(i));
          const QTensor& x = t.input ? std::get<QTensor>(*t.input) : placeholder;
          QuantizedBackward raw =
              s.kind == LayerKind::QConv2d
                  ? qconv2d_backward_raw(eq, x, layer.qweight,
                                         std::get<ConvGeometry>(s.geometry), opts)
                  : qlinear_backward_raw(eq, x, layer.qweight, opts);
          result.macs += raw.macs;
          result.selected_fraction[i] =
              static_cast<double>(kept_count(opts.keep, s.structures())) /
              static_cast<double>(s.structures());
          std::optional<Activation> d_input;
          if (raw.d_input) {
            const auto [lo, hi] = raw.d_input->real_range();
            RangeTracker& tracker = layer.error_range;
            QuantParams qp;
            if (!tracker.initialized) {
              tracker.observe(lo, hi);
              qp = tracker.qparams();
            } else {
              qp = tracker.qparams();
              tracker.observe(lo, hi);
            }
            d_input = requantize(*raw.d_input, qp, false, rounding);
          }
          if (opts.weight_grad) {
            result.grads[i] = LayerGrad{std::nullopt, std::move(raw.d_weight),
                                        std::move(raw.d_bias), raw.macs, opts.keep};
          }
          if (d_input) e = std::move(*d_input);
          break;
        }
        case LayerKind::Conv2d:
        case LayerKind::Linear: {
          const FTensor& ef = std::get<FTensor>(e);
          BackwardOptions opts;
          if (select) opts.keep = select(i, e);
          opts.input_grad = i > first;
          opts.weight_grad = model.trainable(i);
          const FTensor placeholder = t.input ? FTensor() : FTensor(in_shape);
          const FTensor& x = t.input ? std::get<FTensor>(*t.input) : placeholder;
          LayerGrad g = s.kind == LayerKind::Conv2d
                            ? conv2d_backward(ef, x, layer.fweight,
                                              std::get<ConvGeometry>(s.geometry), opts)
                            : linear_backward(ef, x, layer.fweight, opts);
          result.macs += g.macs;
          result.selected_fraction[i] =
              static_cast<double>(kept_count(opts.keep, s.structures())) /
              static_cast<double>(s.structures());
          std::optional<Activation> d_input = std::move(g.d_input);
          g.d_input.reset();
          g.computed = opts.keep;
          if (opts.weight_grad) result.grads[i] = std::move(g);
          if (d_input) e = std::move(*d_input);
          break;
        }
      }
    } catch (const std::bad_variant_access&) {
      throw DimensionError("backward layer " + std::to_string(i) + " (" + to_string(s.kind) +
                           "): error has the wrong precision");
    }
  }
  return result;
}

// ---- checkpoints ------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'Q', 'T', 'R', 'N'};
constexpr std::uint16_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  void u8(std::uint8_t v) { os_.put(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i32(std::int32_t v) { le(static_cast<std::uint32_t>(v), 4); }
  void f32(float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    le(bits, 4);
  }
  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    le(bits, 8);
  }
  void qparams(QuantParams qp) {
    f32(qp.scale);
    u8(qp.zero_point);
  }

 private:
  void le(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) os_.put(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  QuantParams qparams() {
    QuantParams qp;
    qp.scale = f32();
    qp.zero_point = u8();
    if (!(qp.scale > 0.0f) || !std::isfinite(qp.scale)) {
      throw ParseError("checkpoint: non-positive quantization scale");
    }
    return qp;
  }
  void bytes(char* dst, std::size_t n) {
    is_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) throw ParseError("checkpoint: truncated");
  }

 private:
  std::uint64_t le(int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      const int c = is_.get();
      if (c == std::char_traits<char>::eof()) throw ParseError("checkpoint: truncated");
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
  }
  std::istream& is_;
};

std::vector<std::uint32_t> geometry_fields(const LayerSpec& s) {
  if (const auto* c = std::get_if<ConvGeometry>(&s.geometry)) {
    return {c->in_channels, c->out_channels, c->kernel_h, c->kernel_w, c->stride, c->padding,
            s.fused_relu ? 1u : 0u};
  }
  if (const auto* l = std::get_if<LinearGeometry>(&s.geometry)) {
    return {l->in_features, l->out_features, s.fused_relu ? 1u : 0u};
  }
  if (const auto* p = std::get_if<PoolGeometry>(&s.geometry)) return {p->size, p->stride};
  return {};
}

std::size_t geometry_field_count(LayerKind kind) {
  switch (kind) {
    case LayerKind::QConv2d:
    case LayerKind::Conv2d: return 7;
    case LayerKind::QLinear:
    case LayerKind::Linear: return 3;
    case LayerKind::MaxPool2d: return 2;
    default: return 0;
  }
}

}  // namespace

void save_checkpoint(std::ostream& os, const Model& model, const TrainerState& state) {
  Writer w(os);
  os.write(kMagic, 4);
  w.u16(kVersion);
  w.u16(static_cast<std::uint16_t>(model.size()));
  for (const Layer& l : model.layers()) {
    w.u8(static_cast<std::uint8_t>(l.spec.kind));
    w.u8(static_cast<std::uint8_t>(l.spec.precision));
    for (std::uint32_t f : geometry_fields(l.spec)) w.u32(f);
    const bool quantized_weights = l.spec.weighted() && l.spec.precision == Precision::Quantized;
    w.qparams(quantized_weights ? l.qweight.qparams() : QuantParams{});
    w.u8(l.output_range.initialized ? 1 : 0);
    w.f32(l.output_range.lo);
    w.f32(l.output_range.hi);
    if (!l.spec.weighted()) continue;
    if (quantized_weights) {
      os.write(reinterpret_cast<const char*>(l.qweight.values().data()),
               static_cast<std::streamsize>(l.qweight.size()));
      for (std::int32_t b : l.qbias) w.i32(b);
    } else {
      for (float v : l.fweight.values()) w.f32(v);
      for (float b : l.fbias) w.f32(b);
    }
  }
  w.u8(static_cast<std::uint8_t>(model.input_shape().size()));
  for (std::size_t d : model.input_shape()) w.u32(static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < model.size(); ++i) w.u8(model.trainable(i) ? 1 : 0);
  w.f64(state.max_loss_observed);
  w.u64(state.steps);
  if (!os) throw Error("checkpoint: write failed");
}

Checkpoint load_checkpoint(std::istream& is) {
  Reader r(is);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw ParseError("checkpoint: bad magic (not a QTRN file)");
  const std::uint16_t version = r.u16();
  if (version != kVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint16_t count = r.u16();
  std::vector<Layer> layers(count);
  for (Layer& l : layers) {
    const std::uint8_t kind = r.u8();
    if (kind < 1 || kind > 8) throw ParseError("checkpoint: unknown layer kind " + std::to_string(kind));
    l.spec.kind = static_cast<LayerKind>(kind);
    const std::uint8_t precision = r.u8();
    if (precision > 1) throw ParseError("checkpoint: unknown precision tag");
    l.spec.precision = static_cast<Precision>(precision);
    std::vector<std::uint32_t> f(geometry_field_count(l.spec.kind));
    for (auto& v : f) v = r.u32();
    switch (l.spec.kind) {
      case LayerKind::QConv2d:
      case LayerKind::Conv2d:
        l.spec.geometry = ConvGeometry{f[0], f[1], f[2], f[3], f[4], f[5]};
        l.spec.fused_relu = f[6] != 0;
        break;
      case LayerKind::QLinear:
      case LayerKind::Linear:
        l.spec.geometry = LinearGeometry{f[0], f[1]};
        l.spec.fused_relu = f[2] != 0;
        break;
      case LayerKind::MaxPool2d:
        l.spec.geometry = PoolGeometry{f[0], f[1]};
        break;
      default:
        break;
    }
    try {
      l.spec.validate();
    } catch (const DimensionError& e) {
      throw ParseError(std::string("checkpoint: ") + e.what());
    }
    const QuantParams wqp = r.qparams();
    l.output_range.initialized = r.u8() != 0;
    l.output_range.lo = r.f32();
    l.output_range.hi = r.f32();
    if (!l.spec.weighted()) continue;
    const Shape ws = std::holds_alternative<ConvGeometry>(l.spec.geometry)
                         ? std::get<ConvGeometry>(l.spec.geometry).weight_shape()
                         : std::get<LinearGeometry>(l.spec.geometry).weight_shape();
    const std::size_t n = element_count(ws);
    const std::size_t nb = l.spec.structures();
    if (l.spec.precision == Precision::Quantized) {
      std::vector<std::uint8_t> data(n);
      r.bytes(reinterpret_cast<char*>(data.data()), n);
      l.qweight = QTensor(ws, std::move(data), wqp);
      l.qbias.resize(nb);
      for (auto& b : l.qbias) b = r.i32();
    } else {
      std::vector<float> data(n);
      for (auto& v : data) v = r.f32();
      l.fweight = FTensor(ws, std::move(data));
      l.fbias.resize(nb);
      for (auto& b : l.fbias) b = r.f32();
    }
  }
  Shape input(r.u8());
  for (auto& d : input) d = r.u32();
  std::vector<std::uint8_t> trainable(count);
  for (auto& t : trainable) t = r.u8();
  TrainerState state;
  state.max_loss_observed = r.f64();
  state.steps = r.u64();
  Model model = [&] {
    try {
      return Model(std::move(input), std::move(layers));
    } catch (const DimensionError& e) {
      throw ParseError(std::string("checkpoint: inconsistent model: ") + e.what());
    }
  }();
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < trainable.size(); ++i)
    if (trainable[i]) train_idx.push_back(i);
  try {
    model.set_trainable(train_idx);
  } catch (const Error& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  return Checkpoint{std::move(model), state};
}

void save_checkpoint_file(const std::string& path, const Model& model,
                          const TrainerState& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  save_checkpoint(os, model, state);
}

Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open checkpoint " + path);
  return load_checkpoint(is);
}

}  // namespace qtrain
