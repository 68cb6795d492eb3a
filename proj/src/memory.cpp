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
#include "qtrain/memory.hpp"

#include <algorithm>
#include <numeric>

namespace qtrain {

namespace {

ArenaPlan place_in_order(std::span<const BufferLifetime> buffers,
                         std::span<const std::size_t> order) {
  ArenaPlan plan;
  plan.offsets.assign(buffers.size(), 0);
  std::vector<std::size_t> placed;
  for (std::size_t idx : order) {
    const BufferLifetime& b = buffers[idx];
    std::vector<std::pair<std::size_t, std::size_t>> busy;  // [begin, end)
    for (std::size_t p : placed) {
      if (buffers[p].live.overlaps(b.live) && buffers[p].bytes > 0) {
        busy.emplace_back(plan.offsets[p], plan.offsets[p] + buffers[p].bytes);
      }
    }
    std::sort(busy.begin(), busy.end());
    std::size_t offset = 0;
    for (const auto& [begin, end] : busy) {
      if (begin >= offset + b.bytes) break;
      offset = std::max(offset, end);
    }
    plan.offsets[idx] = offset;
    plan.peak = std::max(plan.peak, offset + b.bytes);
    placed.push_back(idx);
  }
  return plan;
}

}  // namespace

ArenaPlan first_fit(std::span<const BufferLifetime> buffers) {
  std::vector<std::size_t> by_start(buffers.size());
  std::iota(by_start.begin(), by_start.end(), std::size_t{0});
  std::stable_sort(by_start.begin(), by_start.end(), [&](std::size_t a, std::size_t b) {
    return buffers[a].live.first < buffers[b].live.first;
  });
  // Largest first, ties by start; long-lived caches otherwise get stranded
  // above short early buffers.
  std::vector<std::size_t> by_size = by_start;
  std::stable_sort(by_size.begin(), by_size.end(), [&](std::size_t a, std::size_t b) {
    return buffers[a].bytes > buffers[b].bytes;
  });
  ArenaPlan a = place_in_order(buffers, by_start);
  ArenaPlan b = place_in_order(buffers, by_size);
  return b.peak < a.peak ? b : a;
}

std::vector<BufferLifetime> feature_lifetimes(const Model& model, ForwardMode mode) {
  const std::size_t n = model.size();
  const bool train = mode == ForwardMode::Train;
  const std::size_t first = train ? model.first_trainable().value_or(n) : n;

  // Activation j is the model input (j = 0) or the output of layer j - 1.
  std::vector<BufferLifetime> out;
  std::vector<std::size_t> buffer_of(n + 1);
  const auto act_bytes = [&](std::size_t j) {
    const Shape& s = j == 0 ? model.input_shape() : model.layer_output_shape(j - 1);
    const bool quantized = j == 0 || model.layer(j - 1).spec.output_precision() == Precision::Quantized;
    return element_count(s) * (quantized ? 1 : 4);
  };
  out.push_back({"input", act_bytes(0), {0, 0}});
  buffer_of[0] = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (model.layer(i).spec.kind == LayerKind::Flatten) {
      buffer_of[i + 1] = buffer_of[i];
    } else {
      buffer_of[i + 1] = out.size();
      out.push_back({"act" + std::to_string(i), act_bytes(i + 1), {i, i}});
    }
    // Consumed by the next layer, or by the loss at step n.
    BufferLifetime& produced = out[buffer_of[i + 1]];
    produced.live.last = std::max(produced.live.last, i + 1);
    BufferLifetime& consumed = out[buffer_of[i]];
    consumed.live.last = std::max(consumed.live.last, i);
  }
  if (!train || first == n) return out;

  for (std::size_t i = first; i < n; ++i) {
    const BackwardNeeds needs = backward_needs(model, i);
    const std::size_t step = backward_step(n, i);
    if (needs.input) {
      BufferLifetime& cached = out[buffer_of[i]];
      cached.live.last = std::max(cached.live.last, step);
    }
    const std::size_t outputs = element_count(model.layer_output_shape(i));
    if (needs.relu_mask) out.push_back({"mask" + std::to_string(i), outputs, {i, step}});
    if (needs.argmax) out.push_back({"argmax" + std::to_string(i), outputs * 4, {i, step}});
    // Error arriving at layer i's output, produced one step before its use.
    // Flatten relabels its error in place.
    if (i + 1 < n && model.layer(i + 1).spec.kind == LayerKind::Flatten) continue;
    out.push_back({"err" + std::to_string(i), act_bytes(i + 1), {step - 1, step}});
  }
  return out;
}

std::size_t gradient_buffer_bytes(const Layer& layer) {
  if (!layer.spec.weighted()) return 0;
  const std::size_t oc = layer.spec.structures();
  return 4 * (layer.weight_elements() + oc) + 12 * oc + 4;
}

MemoryReport plan_memory(const Model& model, const TrainConfig& config, ForwardMode mode) {
  (void)config;  // every segment is independent of the batch size
  MemoryReport r;
  const std::vector<BufferLifetime> buffers = feature_lifetimes(model, mode);
  r.feature_map_bytes = first_fit(buffers).peak;
  const bool train = mode == ForwardMode::Train;
  for (std::size_t i = 0; i < model.size(); ++i) {
    const Layer& l = model.layer(i);
    if (!l.spec.weighted()) continue;
    if (train && model.trainable(i)) {
      r.trainable_weight_and_gradbuf_bytes += l.parameter_bytes() + gradient_buffer_bytes(l);
    } else {
      r.static_weight_bytes += l.parameter_bytes();
    }
  }
  return r;
}

}  // namespace qtrain
