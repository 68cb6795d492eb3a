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

// Static memory accounting for one training (or inference) run, split into
// the three segments an MCU deployment cares about: the feature-map arena,
// trainable weights with their gradient buffers, and frozen weights that can
// stay in Flash.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "qtrain/config.hpp"
#include "qtrain/model.hpp"

namespace qtrain {

// Inclusive step range during which a buffer must stay resident.
struct Interval {
  std::size_t first = 0;
  std::size_t last = 0;

  bool overlaps(const Interval& o) const { return first <= o.last && o.first <= last; }
  friend bool operator==(const Interval&, const Interval&) = default;
};

struct BufferLifetime {
  std::string name;
  std::size_t bytes = 0;
  Interval live;
};

struct ArenaPlan {
  std::vector<std::size_t> offsets;  // parallel to the input buffers
  std::size_t peak = 0;
};

// Places each buffer at the lowest offset that does not collide with an
// already placed buffer whose lifetime overlaps. Runs the placement once in
// order of liveness start and once largest first, keeping the lower peak.
ArenaPlan first_fit(std::span<const BufferLifetime> buffers);

// Feature-map buffers of one sample on the forward/backward timeline.
// Infer mode holds each activation from its producer to its consumer. Train
// mode additionally keeps tape caches alive until their backward step and
// adds the backward error tensors. Flatten aliases its input.
std::vector<BufferLifetime> feature_lifetimes(const Model& model, ForwardMode mode);

struct MemoryReport {
  std::size_t feature_map_bytes = 0;
  std::size_t trainable_weight_and_gradbuf_bytes = 0;
  std::size_t static_weight_bytes = 0;

  std::size_t ram_bytes() const { return feature_map_bytes + trainable_weight_and_gradbuf_bytes; }
  friend bool operator==(const MemoryReport&, const MemoryReport&) = default;
};

// Float accumulators for weights and bias, per-channel mean and variance
// basis, and the sample counter. Depends on the layer geometry only.
std::size_t gradient_buffer_bytes(const Layer& layer);

// Train mode counts the trainable set as RAM-resident; frozen weights go to
// the static segment either way.
MemoryReport plan_memory(const Model& model, const TrainConfig& config,
                         ForwardMode mode = ForwardMode::Train);

}  // namespace qtrain
