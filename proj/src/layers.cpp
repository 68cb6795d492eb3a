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
#include "qtrain/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "qtrain/errors.hpp"

namespace qtrain {

const Shape& shape_of(const Activation& a) {
  return std::visit([](const auto& t) -> const Shape& { return t.shape(); }, a);
}

bool is_quantized(const Activation& a) { return std::holds_alternative<QTensor>(a); }

std::size_t byte_size(const Activation& a) {
  return is_quantized(a) ? std::get<QTensor>(a).size()
                         : std::get<FTensor>(a).size() * sizeof(float);
}

FTensor to_float(const Activation& a) {
  if (const auto* q = std::get_if<QTensor>(&a)) return dequantize_tensor(*q);
  return std::get<FTensor>(a);
}

// ---- geometry ---------------------------------------------------------------

void ConvGeometry::validate() const {
  if (in_channels == 0 || out_channels == 0 || kernel_h == 0 || kernel_w == 0 ||
      stride == 0) {
    throw DimensionError("conv geometry: dimensions must be positive");
  }
  if (padding >= kernel_h || padding >= kernel_w) {
    throw DimensionError("conv geometry: padding must be smaller than the kernel");
  }
}

Shape ConvGeometry::weight_shape() const {
  return {out_channels, in_channels, kernel_h, kernel_w};
}

Shape ConvGeometry::output_shape(const Shape& input) const {
  validate();
  if (input.size() != 3 || input[0] != in_channels) {
    throw DimensionError("conv: expected input [" + std::to_string(in_channels) +
                         "xHxW], got " + to_string(input));
  }
  const std::size_t hp = input[1] + 2 * padding;
  const std::size_t wp = input[2] + 2 * padding;
  if (hp < kernel_h || wp < kernel_w) {
    throw DimensionError("conv: kernel larger than padded input " + to_string(input));
  }
  return {out_channels, (hp - kernel_h) / stride + 1, (wp - kernel_w) / stride + 1};
}

void LinearGeometry::validate() const {
  if (in_features == 0 || out_features == 0) {
    throw DimensionError("linear geometry: dimensions must be positive");
  }
}

Shape LinearGeometry::weight_shape() const { return {out_features, in_features}; }

Shape LinearGeometry::output_shape(const Shape& input) const {
  validate();
  if (input.size() != 1 || input[0] != in_features) {
    throw DimensionError("linear: expected input [" + std::to_string(in_features) +
                         "], got " + to_string(input));
  }
  return {out_features};
}

void PoolGeometry::validate() const {
  if (size == 0 || stride == 0) throw DimensionError("pool geometry: must be positive");
  if (stride < size) {
    throw DimensionError("pool geometry: overlapping windows (stride < size)");
  }
}

Shape PoolGeometry::output_shape(const Shape& input) const {
  validate();
  if (input.size() != 3 || input[1] < size || input[2] < size) {
    throw DimensionError("maxpool: input " + to_string(input) +
                         " is not CxHxW with H, W >= " + std::to_string(size));
  }
  return {input[0], (input[1] - size) / stride + 1, (input[2] - size) / stride + 1};
}

// ---- requantization ---------------------------------------------------------

std::pair<float, float> IntAccum::real_range() const {
  if (values.empty()) return {0.0f, 0.0f};
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  return {static_cast<float>(*lo * scale), static_cast<float>(*hi * scale)};
}

QTensor requantize(const IntAccum& acc, QuantParams out_qp, bool relu, Rounding rounding) {
  const double m = acc.scale / out_qp.scale;
  const std::int64_t floor_q = relu ? out_qp.zero_point : 0;
  std::vector<std::uint8_t> out(acc.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::int64_t q = round_to_int(acc.values[i] * m, rounding) + out_qp.zero_point;
    out[i] = saturate_u8(std::max(q, floor_q));
  }
  return QTensor(acc.shape, std::move(out), out_qp);
}

void mask_error(QTensor& e, std::span<const std::uint8_t> active) {
  if (active.size() != e.size()) throw DimensionError("mask_error: size mismatch");
  const std::uint8_t z = e.qparams().zero_point;
  for (std::size_t i = 0; i < e.size(); ++i)
    if (!active[i]) e[i] = z;
}

void mask_error(FTensor& e, std::span<const std::uint8_t> active) {
  if (active.size() != e.size()) throw DimensionError("mask_error: size mismatch");
  for (std::size_t i = 0; i < e.size(); ++i)
    if (!active[i]) e[i] = 0.0f;
}

std::vector<std::uint8_t> relu_active(const QTensor& y) {
  std::vector<std::uint8_t> active(y.size());
  const std::uint8_t z = y.qparams().zero_point;
  for (std::size_t i = 0; i < y.size(); ++i) active[i] = y[i] > z;
  return active;
}

std::vector<std::uint8_t> relu_active(const FTensor& y) {
  std::vector<std::uint8_t> active(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) active[i] = y[i] > 0.0f;
  return active;
}

namespace {

std::vector<std::int16_t> shifted(const QTensor& t) {
  std::vector<std::int16_t> out(t.size());
  const int z = t.qparams().zero_point;
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<std::int16_t>(t[i] - z);
  return out;
}

bool kept(const StructureMask& keep, std::size_t s) { return keep.empty() || keep[s]; }

void check_keep(const StructureMask& keep, std::size_t n, const char* who) {
  if (!keep.empty() && keep.size() != n) {
    throw DimensionError(std::string(who) + ": structure mask has " +
                         std::to_string(keep.size()) + " entries, expected " +
                         std::to_string(n));
  }
}

std::size_t count_kept(const StructureMask& keep, std::size_t n) {
  if (keep.empty()) return n;
  return static_cast<std::size_t>(std::count_if(keep.begin(), keep.end(),
                                                [](std::uint8_t k) { return k != 0; }));
}

// ---- convolution cores ------------------------------------------------------
//
// All cores walk a zero-padded input plane set `xp` of shape C x Hp x Wp.
// Per output element the reduction order is (ic, kh, kw) for the forward,
// (oh, ow) for the weight gradient and (oc, kh, kw) for the input error.

struct ConvDims {
  std::size_t c, h, w, hp, wp, oc, oh, ow, kh, kw, stride, pad;
};

ConvDims conv_dims(const Shape& in, const ConvGeometry& g) {
  const Shape out = g.output_shape(in);
  return {in[0], in[1], in[2], in[1] + 2 * g.padding, in[2] + 2 * g.padding,
          out[0], out[1], out[2], g.kernel_h, g.kernel_w, g.stride, g.padding};
}

template <typename T, typename Src>
std::vector<T> pad_planes(const ConvDims& d, const Src* src) {
  std::vector<T> xp(d.c * d.hp * d.wp, T{0});
  for (std::size_t c = 0; c < d.c; ++c)
    for (std::size_t y = 0; y < d.h; ++y)
      std::copy_n(src + (c * d.h + y) * d.w, d.w,
                  xp.begin() + static_cast<std::ptrdiff_t>((c * d.hp + y + d.pad) * d.wp + d.pad));
  return xp;
}

template <typename T, typename Acc>
void conv_forward_core(const ConvDims& d, const T* xp, const T* w, Acc* out) {
  const std::size_t plane = d.oh * d.ow;
  for (std::size_t oc = 0; oc < d.oc; ++oc) {
    Acc* op = out + oc * plane;
    for (std::size_t ic = 0; ic < d.c; ++ic) {
      for (std::size_t kh = 0; kh < d.kh; ++kh) {
        for (std::size_t kw = 0; kw < d.kw; ++kw) {
          const Acc wv = static_cast<Acc>(w[((oc * d.c + ic) * d.kh + kh) * d.kw + kw]);
          for (std::size_t oy = 0; oy < d.oh; ++oy) {
            const T* xr = xp + (ic * d.hp + oy * d.stride + kh) * d.wp + kw;
            Acc* orow = op + oy * d.ow;
            if (d.stride == 1) {
              for (std::size_t ox = 0; ox < d.ow; ++ox) orow[ox] += wv * static_cast<Acc>(xr[ox]);
            } else {
              for (std::size_t ox = 0; ox < d.ow; ++ox)
                orow[ox] += wv * static_cast<Acc>(xr[ox * d.stride]);
            }
          }
        }
      }
    }
  }
}

template <typename T, typename Acc>
void conv_weight_grad_core(const ConvDims& d, const T* xp, const T* e,
                           const StructureMask& keep, Acc* dw) {
  const std::size_t plane = d.oh * d.ow;
  for (std::size_t oc = 0; oc < d.oc; ++oc) {
    if (!kept(keep, oc)) continue;
    const T* ep = e + oc * plane;
    for (std::size_t ic = 0; ic < d.c; ++ic) {
      for (std::size_t kh = 0; kh < d.kh; ++kh) {
        for (std::size_t kw = 0; kw < d.kw; ++kw) {
          Acc sum{0};
          for (std::size_t oy = 0; oy < d.oh; ++oy) {
            const T* xr = xp + (ic * d.hp + oy * d.stride + kh) * d.wp + kw;
            const T* er = ep + oy * d.ow;
            for (std::size_t ox = 0; ox < d.ow; ++ox)
              sum += static_cast<Acc>(er[ox]) * static_cast<Acc>(xr[ox * d.stride]);
          }
          dw[((oc * d.c + ic) * d.kh + kh) * d.kw + kw] = sum;
        }
      }
    }
  }
}

// Scatters into a padded error buffer; the caller crops the border.
template <typename T, typename Acc>
void conv_input_grad_core(const ConvDims& d, const T* w, const T* e,
                          const StructureMask& keep, Acc* dxp) {
  const std::size_t plane = d.oh * d.ow;
  for (std::size_t oc = 0; oc < d.oc; ++oc) {
    if (!kept(keep, oc)) continue;
    const T* ep = e + oc * plane;
    for (std::size_t ic = 0; ic < d.c; ++ic) {
      for (std::size_t kh = 0; kh < d.kh; ++kh) {
        for (std::size_t kw = 0; kw < d.kw; ++kw) {
          const Acc wv = static_cast<Acc>(w[((oc * d.c + ic) * d.kh + kh) * d.kw + kw]);
          for (std::size_t oy = 0; oy < d.oh; ++oy) {
            Acc* dr = dxp + (ic * d.hp + oy * d.stride + kh) * d.wp + kw;
            const T* er = ep + oy * d.ow;
            if (d.stride == 1) {
              for (std::size_t ox = 0; ox < d.ow; ++ox) dr[ox] += wv * static_cast<Acc>(er[ox]);
            } else {
              for (std::size_t ox = 0; ox < d.ow; ++ox)
                dr[ox * d.stride] += wv * static_cast<Acc>(er[ox]);
            }
          }
        }
      }
    }
  }
}

template <typename Acc>
std::vector<Acc> crop(const ConvDims& d, const std::vector<Acc>& padded) {
  std::vector<Acc> out(d.c * d.h * d.w);
  for (std::size_t c = 0; c < d.c; ++c)
    for (std::size_t y = 0; y < d.h; ++y)
      std::copy_n(padded.begin() + static_cast<std::ptrdiff_t>((c * d.hp + y + d.pad) * d.wp + d.pad),
                  d.w, out.begin() + static_cast<std::ptrdiff_t>((c * d.h + y) * d.w));
  return out;
}

void check_weight(const Shape& actual, const Shape& expected, const char* who) {
  if (actual != expected) {
    throw DimensionError(std::string(who) + ": weight shape " + to_string(actual) +
                         " does not match geometry " + to_string(expected));
  }
}

LinearGeometry linear_geometry(const Shape& w) {
  if (w.size() != 2) throw DimensionError("linear: weight must be out x in");
  return {static_cast<std::uint32_t>(w[1]), static_cast<std::uint32_t>(w[0])};
}

}  // namespace

// ---- fully connected ----------------------------------------------------------

IntAccum qlinear_accumulate(const QTensor& x, const QTensor& w,
                            std::span<const std::int32_t> bias) {
  const LinearGeometry g = linear_geometry(w.shape());
  const Shape out_shape = g.output_shape(x.shape());
  if (!bias.empty() && bias.size() != g.out_features) {
    throw DimensionError("qlinear: bias length " + std::to_string(bias.size()) +
                         " != out_features " + std::to_string(g.out_features));
  }
  const auto xs = shifted(x);
  const int zw = w.qparams().zero_point;
  IntAccum acc{out_shape, std::vector<std::int32_t>(g.out_features, 0),
               static_cast<double>(w.qparams().scale) * x.qparams().scale};
  const std::size_t n = g.in_features;
  for (std::size_t o = 0; o < g.out_features; ++o) {
    const std::uint8_t* wr = w.values().data() + o * n;
    std::int32_t sum = 0;
    for (std::size_t i = 0; i < n; ++i) sum += (static_cast<int>(wr[i]) - zw) * xs[i];
    acc.values[o] = sum + (bias.empty() ? 0 : bias[o]);
  }
  return acc;
}

QTensor qlinear_forward(const QTensor& x, const QTensor& w,
                        std::span<const std::int32_t> bias, QuantParams out_qp,
                        bool fused_relu) {
  return requantize(qlinear_accumulate(x, w, bias), out_qp, fused_relu);
}

QuantizedBackward qlinear_backward_raw(const QTensor& e_out, const QTensor& x_cached,
                                       const QTensor& w, const BackwardOptions& opts) {
  const LinearGeometry g = linear_geometry(w.shape());
  g.output_shape(x_cached.shape());
  if (e_out.shape() != Shape{g.out_features}) {
    throw DimensionError("qlinear_backward: error shape " + to_string(e_out.shape()) +
                         " does not match output [" + std::to_string(g.out_features) + "]");
  }
  check_keep(opts.keep, g.out_features, "qlinear_backward");
  const std::size_t n = g.in_features;
  const std::size_t kept_rows = count_kept(opts.keep, g.out_features);
  const auto es = shifted(e_out);
  const double se = e_out.qparams().scale;

  QuantizedBackward r;
  if (opts.weight_grad) {
    const auto xs = shifted(x_cached);
    const double sgrad = se * x_cached.qparams().scale;
    r.d_weight = FTensor(w.shape());
    r.d_bias.assign(g.out_features, 0.0f);
    float* dw = r.d_weight.values().data();
    for (std::size_t o = 0; o < g.out_features; ++o) {
      if (!kept(opts.keep, o) || es[o] == 0) continue;
      const int eo = es[o];
      for (std::size_t i = 0; i < n; ++i)
        dw[o * n + i] = static_cast<float>(sgrad * (eo * xs[i]));
      r.d_bias[o] = static_cast<float>(se * eo);
    }
    r.macs += kept_rows * n;
  }
  if (opts.input_grad) {
    IntAccum acc{x_cached.shape(), std::vector<std::int32_t>(n, 0),
                 se * static_cast<double>(w.qparams().scale)};
    const int zw = w.qparams().zero_point;
    for (std::size_t o = 0; o < g.out_features; ++o) {
      if (!kept(opts.keep, o) || es[o] == 0) continue;
      const int eo = es[o];
      const std::uint8_t* wr = w.values().data() + o * n;
      for (std::size_t i = 0; i < n; ++i) acc.values[i] += (static_cast<int>(wr[i]) - zw) * eo;
    }
    r.d_input = std::move(acc);
    r.macs += kept_rows * n;
  }
  return r;
}

LayerGrad qlinear_backward(const QTensor& e_out, const QTensor& x_cached,
                           const QTensor& w, QuantParams e_in_qp,
                           const BackwardOptions& opts, Rounding rounding) {
  QuantizedBackward raw = qlinear_backward_raw(e_out, x_cached, w, opts);
  LayerGrad g{std::nullopt, std::move(raw.d_weight), std::move(raw.d_bias), raw.macs, {}};
  if (raw.d_input) g.d_input = requantize(*raw.d_input, e_in_qp, false, rounding);
  return g;
}

FTensor linear_forward(const FTensor& x, const FTensor& w, std::span<const float> bias) {
  const LinearGeometry g = linear_geometry(w.shape());
  const Shape out_shape = g.output_shape(x.shape());
  if (!bias.empty() && bias.size() != g.out_features) {
    throw DimensionError("linear: bias length does not match out_features");
  }
  FTensor y(out_shape);
  const std::size_t n = g.in_features;
  for (std::size_t o = 0; o < g.out_features; ++o) {
    const float* wr = w.values().data() + o * n;
    float sum = 0.0f;
    for (std::size_t i = 0; i < n; ++i) sum += wr[i] * x[i];
    y[o] = sum + (bias.empty() ? 0.0f : bias[o]);
  }
  return y;
}

LayerGrad linear_backward(const FTensor& e_out, const FTensor& x_cached, const FTensor& w,
                          const BackwardOptions& opts) {
  const LinearGeometry g = linear_geometry(w.shape());
  g.output_shape(x_cached.shape());
  if (e_out.shape() != Shape{g.out_features}) {
    throw DimensionError("linear_backward: error shape " + to_string(e_out.shape()) +
                         " does not match output [" + std::to_string(g.out_features) + "]");
  }
  check_keep(opts.keep, g.out_features, "linear_backward");
  const std::size_t n = g.in_features;
  const std::size_t kept_rows = count_kept(opts.keep, g.out_features);
  LayerGrad r;
  if (opts.weight_grad) {
    r.d_weight = FTensor(w.shape());
    r.d_bias.assign(g.out_features, 0.0f);
    float* dw = r.d_weight.values().data();
    for (std::size_t o = 0; o < g.out_features; ++o) {
      if (!kept(opts.keep, o)) continue;
      for (std::size_t i = 0; i < n; ++i) dw[o * n + i] = e_out[o] * x_cached[i];
      r.d_bias[o] = e_out[o];
    }
    r.macs += kept_rows * n;
  }
  if (opts.input_grad) {
    FTensor dx(x_cached.shape());
    for (std::size_t o = 0; o < g.out_features; ++o) {
      if (!kept(opts.keep, o)) continue;
      const float eo = e_out[o];
      const float* wr = w.values().data() + o * n;
      for (std::size_t i = 0; i < n; ++i) dx[i] += wr[i] * eo;
    }
    r.d_input = std::move(dx);
    r.macs += kept_rows * n;
  }
  return r;
}

// ---- convolution --------------------------------------------------------------

IntAccum qconv2d_accumulate(const QTensor& x, const QTensor& w,
                            std::span<const std::int32_t> bias, const ConvGeometry& g) {
  check_weight(w.shape(), g.weight_shape(), "qconv2d");
  const ConvDims d = conv_dims(x.shape(), g);
  if (!bias.empty() && bias.size() != d.oc) {
    throw DimensionError("qconv2d: bias length does not match out_channels");
  }
  const auto xs = shifted(x);
  const auto xp = pad_planes<std::int16_t>(d, xs.data());
  const auto ws = shifted(w);
  IntAccum acc{{d.oc, d.oh, d.ow}, std::vector<std::int32_t>(d.oc * d.oh * d.ow, 0),
               static_cast<double>(w.qparams().scale) * x.qparams().scale};
  conv_forward_core<std::int16_t, std::int32_t>(d, xp.data(), ws.data(), acc.values.data());
  if (!bias.empty()) {
    const std::size_t plane = d.oh * d.ow;
    for (std::size_t oc = 0; oc < d.oc; ++oc)
      for (std::size_t i = 0; i < plane; ++i) acc.values[oc * plane + i] += bias[oc];
  }
  return acc;
}

QTensor qconv2d_forward(const QTensor& x, const QTensor& w,
                        std::span<const std::int32_t> bias, const ConvGeometry& g,
                        QuantParams out_qp, bool fused_relu) {
  return requantize(qconv2d_accumulate(x, w, bias, g), out_qp, fused_relu);
}

QuantizedBackward qconv2d_backward_raw(const QTensor& e_out, const QTensor& x_cached,
                                       const QTensor& w, const ConvGeometry& g,
                                       const BackwardOptions& opts) {
  check_weight(w.shape(), g.weight_shape(), "qconv2d_backward");
  const ConvDims d = conv_dims(x_cached.shape(), g);
  if (e_out.shape() != Shape{d.oc, d.oh, d.ow}) {
    throw DimensionError("qconv2d_backward: error shape " + to_string(e_out.shape()) +
                         " does not match output " + to_string({d.oc, d.oh, d.ow}));
  }
  check_keep(opts.keep, d.oc, "qconv2d_backward");
  const std::size_t per_structure = d.c * d.kh * d.kw * d.oh * d.ow;
  const std::size_t kept_ch = count_kept(opts.keep, d.oc);
  const auto es = shifted(e_out);
  const double se = e_out.qparams().scale;

  QuantizedBackward r;
  if (opts.weight_grad) {
    const auto xs = shifted(x_cached);
    const auto xp = pad_planes<std::int16_t>(d, xs.data());
    std::vector<std::int32_t> dw(w.size(), 0);
    conv_weight_grad_core<std::int16_t, std::int32_t>(d, xp.data(), es.data(), opts.keep,
                                                      dw.data());
    const double sgrad = se * x_cached.qparams().scale;
    r.d_weight = FTensor(w.shape());
    for (std::size_t i = 0; i < dw.size(); ++i)
      r.d_weight[i] = static_cast<float>(sgrad * dw[i]);
    r.d_bias.assign(d.oc, 0.0f);
    const std::size_t plane = d.oh * d.ow;
    for (std::size_t oc = 0; oc < d.oc; ++oc) {
      if (!kept(opts.keep, oc)) continue;
      std::int64_t sum = 0;
      for (std::size_t i = 0; i < plane; ++i) sum += es[oc * plane + i];
      r.d_bias[oc] = static_cast<float>(se * static_cast<double>(sum));
    }
    r.macs += kept_ch * per_structure;
  }
  if (opts.input_grad) {
    const auto ws = shifted(w);
    std::vector<std::int32_t> dxp(d.c * d.hp * d.wp, 0);
    conv_input_grad_core<std::int16_t, std::int32_t>(d, ws.data(), es.data(), opts.keep,
                                                     dxp.data());
    r.d_input = IntAccum{x_cached.shape(), crop(d, dxp), se * static_cast<double>(w.qparams().scale)};
    r.macs += kept_ch * per_structure;
  }
  return r;
}

LayerGrad qconv2d_backward(const QTensor& e_out, const QTensor& x_cached,
                           const QTensor& w, const ConvGeometry& g,
                           QuantParams e_in_qp, const BackwardOptions& opts,
                           Rounding rounding) {
  QuantizedBackward raw = qconv2d_backward_raw(e_out, x_cached, w, g, opts);
  LayerGrad lg{std::nullopt, std::move(raw.d_weight), std::move(raw.d_bias), raw.macs, {}};
  if (raw.d_input) lg.d_input = requantize(*raw.d_input, e_in_qp, false, rounding);
  return lg;
}

FTensor conv2d_forward(const FTensor& x, const FTensor& w, std::span<const float> bias,
                       const ConvGeometry& g) {
  check_weight(w.shape(), g.weight_shape(), "conv2d");
  const ConvDims d = conv_dims(x.shape(), g);
  if (!bias.empty() && bias.size() != d.oc) {
    throw DimensionError("conv2d: bias length does not match out_channels");
  }
  const auto xp = pad_planes<float>(d, x.values().data());
  FTensor y({d.oc, d.oh, d.ow});
  conv_forward_core<float, float>(d, xp.data(), w.values().data(), y.values().data());
  if (!bias.empty()) {
    const std::size_t plane = d.oh * d.ow;
    for (std::size_t oc = 0; oc < d.oc; ++oc)
      for (std::size_t i = 0; i < plane; ++i) y[oc * plane + i] += bias[oc];
  }
  return y;
}

LayerGrad conv2d_backward(const FTensor& e_out, const FTensor& x_cached, const FTensor& w,
                          const ConvGeometry& g, const BackwardOptions& opts) {
  check_weight(w.shape(), g.weight_shape(), "conv2d_backward");
  const ConvDims d = conv_dims(x_cached.shape(), g);
  if (e_out.shape() != Shape{d.oc, d.oh, d.ow}) {
    throw DimensionError("conv2d_backward: error shape " + to_string(e_out.shape()) +
                         " does not match output " + to_string({d.oc, d.oh, d.ow}));
  }
  check_keep(opts.keep, d.oc, "conv2d_backward");
  const std::size_t per_structure = d.c * d.kh * d.kw * d.oh * d.ow;
  const std::size_t kept_ch = count_kept(opts.keep, d.oc);
  LayerGrad r;
  if (opts.weight_grad) {
    const auto xp = pad_planes<float>(d, x_cached.values().data());
    r.d_weight = FTensor(w.shape());
    conv_weight_grad_core<float, float>(d, xp.data(), e_out.values().data(), opts.keep,
                                        r.d_weight.values().data());
    r.d_bias.assign(d.oc, 0.0f);
    const std::size_t plane = d.oh * d.ow;
    for (std::size_t oc = 0; oc < d.oc; ++oc) {
      if (!kept(opts.keep, oc)) continue;
      float sum = 0.0f;
      for (std::size_t i = 0; i < plane; ++i) sum += e_out[oc * plane + i];
      r.d_bias[oc] = sum;
    }
    r.macs += kept_ch * per_structure;
  }
  if (opts.input_grad) {
    std::vector<float> dxp(d.c * d.hp * d.wp, 0.0f);
    conv_input_grad_core<float, float>(d, w.values().data(), e_out.values().data(), opts.keep,
                                       dxp.data());
    r.d_input = FTensor(x_cached.shape(), crop(d, dxp));
    r.macs += kept_ch * per_structure;
  }
  return r;
}

// ---- max pooling ----------------------------------------------------------------

namespace {

template <typename Tensor, typename Make>
PoolResult<Tensor> maxpool_impl(const Tensor& x, const PoolGeometry& g, Make make_output) {
  const Shape out_shape = g.output_shape(x.shape());
  const std::size_t c = out_shape[0], oh = out_shape[1], ow = out_shape[2];
  const std::size_t h = x.shape()[1], w = x.shape()[2];
  PoolResult<Tensor> r{make_output(out_shape), std::vector<std::uint32_t>(c * oh * ow)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (ch * h + oy * g.stride) * w + ox * g.stride;
        for (std::size_t ky = 0; ky < g.size; ++ky) {
          for (std::size_t kx = 0; kx < g.size; ++kx) {
            const std::size_t idx = (ch * h + oy * g.stride + ky) * w + ox * g.stride + kx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (ch * oh + oy) * ow + ox;
        r.output[o] = x[best];
        r.argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return r;
}

void check_routing(std::size_t e_size, std::size_t argmax_size, std::size_t in_size) {
  if (e_size != argmax_size) {
    throw DimensionError("maxpool_backward: " + std::to_string(argmax_size) +
                         " winners for " + std::to_string(e_size) + " error elements");
  }
  (void)in_size;
}

}  // namespace

PoolResult<QTensor> maxpool_forward(const QTensor& x, const PoolGeometry& g) {
  return maxpool_impl(x, g, [&](const Shape& s) { return QTensor(s, x.qparams()); });
}

PoolResult<FTensor> maxpool_forward(const FTensor& x, const PoolGeometry& g) {
  return maxpool_impl(x, g, [](const Shape& s) { return FTensor(s); });
}

QTensor maxpool_backward(const QTensor& e_out, std::span<const std::uint32_t> argmax,
                         const Shape& input_shape) {
  QTensor e_in(input_shape, e_out.qparams());
  check_routing(e_out.size(), argmax.size(), e_in.size());
  for (std::size_t i = 0; i < argmax.size(); ++i) {
    if (argmax[i] >= e_in.size()) throw DimensionError("maxpool_backward: winner out of range");
    e_in[argmax[i]] = e_out[i];
  }
  return e_in;
}

FTensor maxpool_backward(const FTensor& e_out, std::span<const std::uint32_t> argmax,
                         const Shape& input_shape) {
  FTensor e_in(input_shape);
  check_routing(e_out.size(), argmax.size(), e_in.size());
  for (std::size_t i = 0; i < argmax.size(); ++i) {
    if (argmax[i] >= e_in.size()) throw DimensionError("maxpool_backward: winner out of range");
    e_in[argmax[i]] = e_out[i];
  }
  return e_in;
}

// ---- elementwise ----------------------------------------------------------------

FTensor relu_forward(const FTensor& x) {
  FTensor y = x;
  for (float& v : y.values()) v = std::max(v, 0.0f);
  return y;
}

QTensor relu_forward(const QTensor& x) {
  QTensor y = x;
  const std::uint8_t z = x.qparams().zero_point;
  for (std::uint8_t& v : y.values()) v = std::max(v, z);
  return y;
}

FTensor dequant_boundary_forward(const QTensor& x) { return dequantize_tensor(x); }

QTensor dequant_boundary_backward(const FTensor& e_out, Rounding rounding) {
  return quantize_tensor(e_out, rounding);
}

// ---- loss -------------------------------------------------------------------------

LossResult softmax_xent(const FTensor& logits, std::size_t label) {
  const std::size_t n = logits.size();
  if (n == 0) throw DimensionError("softmax_xent: empty logits");
  if (label >= n) {
    throw Error("softmax_xent: label " + std::to_string(label) + " out of range for " +
                std::to_string(n) + " classes");
  }
  double max_logit = logits[0];
  for (std::size_t i = 1; i < n; ++i) max_logit = std::max(max_logit, double{logits[i]});
  std::vector<double> p(n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp(double{logits[i]} - max_logit);
    sum += p[i];
  }
  LossResult r;
  r.loss = std::log(sum) - (double{logits[label]} - max_logit);
  r.d_logits = FTensor(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const double pi = p[i] / sum;
    r.d_logits[i] = static_cast<float>(i == label ? pi - 1.0 : pi);
  }
  // p - 1 loses everything below 1e-16 of p; use the complementary sum so a
  // confident correct prediction keeps a nonzero gradient.
  double rest = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    if (i != label) rest += p[i];
  r.d_logits[label] = static_cast<float>(-rest / sum);
  return r;
}

}  // namespace qtrain
