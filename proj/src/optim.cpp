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
#include "qtrain/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "qtrain/errors.hpp"

namespace qtrain {

GradientBuffer::GradientBuffer(const Shape& weight_shape, std::size_t channels)
    : accum_(weight_shape),
      bias_accum_(channels, 0.0f),
      mean_(channels, 0.0f),
      m2_(channels, 0.0f),
      channel_count_(channels, 0) {
  if (channels == 0 || weight_shape.empty() || weight_shape[0] != channels) {
    throw DimensionError("gradient buffer: weight shape " + to_string(weight_shape) +
                         " does not have " + std::to_string(channels) + " output channels");
  }
}

GradientBuffer::GradientBuffer(const Layer& layer)
    : GradientBuffer(layer.spec.precision == Precision::Quantized ? layer.qweight.shape()
                                                                  : layer.fweight.shape(),
                     layer.spec.structures()) {}

float GradientBuffer::sigma(std::size_t c) const {
  if (channel_count_.at(c) == 0) return kSigmaFloor;
  const double per = static_cast<double>(accum_.size() / channels() + 1);
  const double var = m2_[c] / (per * channel_count_[c]);
  return std::max(static_cast<float>(std::sqrt(var)), kSigmaFloor);
}

std::size_t GradientBuffer::byte_size() const {
  return 4 * (accum_.size() + bias_accum_.size()) +
         4 * (mean_.size() + m2_.size() + channel_count_.size()) + sizeof(sample_count_);
}

void GradientBuffer::reset() {
  std::fill(accum_.values().begin(), accum_.values().end(), 0.0f);
  std::fill(bias_accum_.begin(), bias_accum_.end(), 0.0f);
  std::fill(mean_.begin(), mean_.end(), 0.0f);
  std::fill(m2_.begin(), m2_.end(), 0.0f);
  std::fill(channel_count_.begin(), channel_count_.end(), 0u);
  sample_count_ = 0;
}

void accumulate(GradientBuffer& buf, const LayerGrad& grad) {
  if (grad.d_weight.shape() != buf.accum_.shape() ||
      grad.d_bias.size() != buf.bias_accum_.size()) {
    throw DimensionError("accumulate: gradient " + to_string(grad.d_weight.shape()) +
                         " does not match buffer " + to_string(buf.accum_.shape()));
  }
  if (!grad.computed.empty() && grad.computed.size() != buf.channels()) {
    throw DimensionError("accumulate: structure mask does not match the channel count");
  }
  const std::size_t channels = buf.channels();
  const std::size_t per = buf.accum_.size() / channels;
  const std::span<const float> dw = grad.d_weight.values();
  std::span<float> acc = buf.accum_.values();
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += dw[i];
  // Chan's parallel merge of this sample's channel values into the running
  // statistics.
  const double m = static_cast<double>(per + 1);
  for (std::size_t c = 0; c < channels; ++c) {
    buf.bias_accum_[c] += grad.d_bias[c];
    if (!grad.computed.empty() && !grad.computed[c]) continue;
    const double na = m * buf.channel_count_[c];
    double sum = grad.d_bias[c];
    for (std::size_t j = 0; j < per; ++j) sum += dw[c * per + j];
    const double mb = sum / m;
    double m2b = (grad.d_bias[c] - mb) * (grad.d_bias[c] - mb);
    for (std::size_t j = 0; j < per; ++j) {
      const double d = dw[c * per + j] - mb;
      m2b += d * d;
    }
    const double delta = mb - buf.mean_[c];
    const double n = na + m;
    buf.mean_[c] = static_cast<float>(buf.mean_[c] + delta * m / n);
    buf.m2_[c] = static_cast<float>(buf.m2_[c] + m2b + delta * delta * na * m / n);
    ++buf.channel_count_[c];
  }
  ++buf.sample_count_;
}

void apply_update(Layer& layer, GradientBuffer& buf, double learning_rate, std::uint32_t batch,
                  float input_scale, Rounding rounding) {
  if (!layer.spec.weighted()) throw Error("apply_update: layer has no weights");
  if (buf.sample_count() != batch) {
    throw StateError("apply_update: " + std::to_string(buf.sample_count()) +
                     " samples buffered, a full minibatch needs " + std::to_string(batch));
  }
  const bool quantized = layer.spec.precision == Precision::Quantized;
  const Shape& ws = quantized ? layer.qweight.shape() : layer.fweight.shape();
  if (ws != buf.accum().shape()) {
    throw DimensionError("apply_update: buffer " + to_string(buf.accum().shape()) +
                         " does not match weights " + to_string(ws));
  }
  const std::size_t channels = buf.channels();
  const std::size_t per = buf.accum().size() / channels;
  std::vector<double> sigma(channels);
  for (std::size_t c = 0; c < channels; ++c) sigma[c] = buf.sigma(c);
  const auto step = [&](float sum, std::size_t c) {
    const double count = buf.channel_count(c);
    return learning_rate * (sum - count * buf.mean()[c]) / sigma[c];
  };

  const std::span<const float> acc = buf.accum().values();
  if (quantized) {
    const QuantParams old_qp = layer.qweight.qparams();
    FTensor candidates(ws);
    std::span<float> f = candidates.values();
    for (std::size_t i = 0; i < f.size(); ++i) {
      f[i] = static_cast<float>(layer.qweight.real(i) - step(acc[i], i / per));
    }
    const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
    const QuantParams qp = derive_qparams(*lo, *hi);
    layer.qweight = quantize_tensor(candidates, qp, rounding);
    const double old_bias_scale = static_cast<double>(old_qp.scale) * input_scale;
    const double new_bias_scale = static_cast<double>(qp.scale) * input_scale;
    for (std::size_t c = 0; c < channels; ++c) {
      const double b = layer.qbias[c] * old_bias_scale - step(buf.bias_accum()[c], c);
      const double q = static_cast<double>(round_to_int(b / new_bias_scale, rounding));
      layer.qbias[c] = static_cast<std::int32_t>(
          std::clamp(q, static_cast<double>(std::numeric_limits<std::int32_t>::min()),
                     static_cast<double>(std::numeric_limits<std::int32_t>::max())));
    }
  } else {
    std::span<float> w = layer.fweight.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] = static_cast<float>(w[i] - step(acc[i], i / per));
    }
    for (std::size_t c = 0; c < channels; ++c) {
      layer.fbias[c] = static_cast<float>(layer.fbias[c] - step(buf.bias_accum()[c], c));
    }
  }
  buf.reset();
}

double loss_ratio(double current_loss, double max_loss_observed) {
  if (!(max_loss_observed > 0.0)) return 1.0;
  return std::clamp(current_loss / max_loss_observed, 0.0, 1.0);
}

std::size_t sparse_rate(const SparseConfig& cfg, double current_loss, std::size_t n) {
  if (n == 0) return 0;
  if (current_loss < 0.0) throw Error("sparse_rate: negative loss");
  const double r = loss_ratio(current_loss, cfg.max_loss_observed);
  const double rate = std::min(cfg.lambda_min + r * (cfg.lambda_max - cfg.lambda_min), 1.0);
  // The epsilon keeps products such as 0.5 * 100 from landing just below an
  // integer.
  const double scaled = rate * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::floor(scaled + 1e-9 * std::max(1.0, scaled)));
  return std::clamp<std::size_t>(k, 1, n);
}

std::vector<std::size_t> select_structures(const Activation& error, std::size_t k) {
  const Shape& shape = shape_of(error);
  if (shape.empty()) throw DimensionError("select_structures: empty error shape");
  const std::size_t n = shape[0];
  const std::size_t per = element_count(shape) / std::max<std::size_t>(n, 1);
  if (k > n) {
    throw Error("select_structures: k = " + std::to_string(k) + " exceeds " +
                std::to_string(n) + " structures");
  }
  std::vector<double> l1(n, 0.0);
  if (const auto* q = std::get_if<QTensor>(&error)) {
    const QuantParams qp = q->qparams();
    for (std::size_t s = 0; s < n; ++s) {
      std::int64_t sum = 0;
      for (std::size_t j = 0; j < per; ++j) {
        sum += std::abs(static_cast<int>((*q)[s * per + j]) - qp.zero_point);
      }
      l1[s] = static_cast<double>(sum) * qp.scale;
    }
  } else {
    const FTensor& f = std::get<FTensor>(error);
    for (std::size_t s = 0; s < n; ++s) {
      double sum = 0.0;
      for (std::size_t j = 0; j < per; ++j) sum += std::fabs(f[s * per + j]);
      l1[s] = sum;
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return l1[a] > l1[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

StructureMask structure_mask(std::span<const std::size_t> selected, std::size_t n) {
  StructureMask mask(n, 0);
  for (std::size_t s : selected) {
    if (s >= n) throw Error("structure_mask: index out of range");
    mask[s] = 1;
  }
  return mask;
}

double StepMetrics::selected_frac_mean() const {
  if (selected_fraction.empty()) return 1.0;
  double sum = 0.0;
  for (const auto& [layer, frac] : selected_fraction) sum += frac;
  return sum / static_cast<double>(selected_fraction.size());
}

std::size_t argmax(const FTensor& logits) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

Trainer::Trainer(Model& model, TrainConfig config, TrainerState state)
    : model_(model), config_(std::move(config)), state_(state) {
  config_.validate();
  for (std::size_t i : model_.trainable_layers()) buffers_.emplace(i, GradientBuffer(model_.layer(i)));
  visits_.assign(model_.size(), 0);
}

std::size_t Trainer::buffer_bytes() const {
  std::size_t total = 0;
  for (const auto& [i, b] : buffers_) total += b.byte_size();
  return total;
}

StepMetrics Trainer::train_step(const QTensor& input, std::size_t label) {
  StepMetrics m;
  ForwardResult fwd = forward(model_, input, ForwardMode::Train);
  m.macs_fwd = fwd.macs;
  m.prediction = argmax(fwd.logits);
  const LossResult loss = softmax_xent(fwd.logits, label);
  m.loss = loss.loss;
  state_.max_loss_observed = std::max(state_.max_loss_observed, loss.loss);

  StructureSelector select;
  if (config_.sparse) {
    SparseConfig sc = *config_.sparse;
    sc.max_loss_observed = state_.max_loss_observed;
    const std::size_t output_layer = model_.weighted_layers().back();
    select = [this, sc, output_layer, current = loss.loss](std::size_t layer,
                                                           const Activation& error) {
      if (layer == output_layer && !sc.output_layer) return StructureMask{};
      const std::size_t n = model_.layer(layer).spec.structures();
      const std::size_t k = sparse_rate(sc, current, n);
      return structure_mask(select_structures(error, k), n);
    };
  }
  BackwardResult bwd = backward(model_, *fwd.tape, loss.d_logits, select, config_.rounding);
  m.macs_bwd = bwd.macs;
  m.selected_fraction = std::move(bwd.selected_fraction);
  for (std::size_t i = 0; i < visits_.size(); ++i) visits_[i] += bwd.visits[i];
  for (auto& [i, grad] : bwd.grads) {
    auto it = buffers_.find(i);
    if (it == buffers_.end()) {
      throw StateError("train_step: layer " + std::to_string(i) +
                       " became trainable after the trainer was created");
    }
    accumulate(it->second, grad);
  }
  ++state_.steps;
  if (!buffers_.empty() && buffers_.begin()->second.sample_count() == config_.batch_size) {
    for (auto& [i, buf] : buffers_) {
      Layer& layer = model_.layer(i);
      const float input_scale = layer.spec.precision == Precision::Quantized
                                    ? model_.input_qparams(i).scale
                                    : 1.0f;
      apply_update(layer, buf, config_.learning_rate, config_.batch_size, input_scale,
                   config_.rounding);
    }
    m.updated = true;
  }
  return m;
}

}  // namespace qtrain
