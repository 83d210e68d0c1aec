// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "lt3r/tensor.hpp"

namespace lt3r::fp8 {

// E4M3FN: 1 sign / 4 exponent / 3 mantissa bits, bias 7, no infinities,
// 0x7F / 0xFF decode to NaN. Largest finite magnitude is 448, smallest
// positive subnormal is 2^-9.
inline constexpr float kFp8Max = 448.0f;
inline constexpr float kFp8Min = -448.0f;
inline constexpr float kScaleEps = 1e-8f;

// Round-to-nearest-even encode. NaN maps to a NaN code (sign preserved);
// magnitudes beyond 448 saturate to the max finite code.
std::uint8_t encode(float x);
float decode(std::uint8_t code);

enum class ScaleAxis {
  kPerOutputRow,  // weights: one scale per output row of [d_out x d_in]
  kPerToken,      // activations: one scale per token row, last dim reduced
};

// FP8 codes plus per-slice f32 scales. A slice is one row of the flattened
// [slices x last_dim] view of the original tensor.
struct QuantizedTensor {
  ByteBuf codes;
  FloatBuf scales;
  ScaleAxis axis = ScaleAxis::kPerOutputRow;
  std::vector<int> shape;

  long long numel() const { return static_cast<long long>(codes.size()); }
  int slice_len() const { return shape.empty() ? 0 : shape.back(); }
  int slice_count() const { return static_cast<int>(scales.size()); }
};

// scale = max(max|slice| / 448, 1e-8); values are clamped to [-448, 448]
// after scaling and encoded with round-to-nearest-even.
QuantizedTensor quantize_scaled(const Tensor& x, ScaleAxis axis);

Tensor dequantize(const QuantizedTensor& q);

// Forward equals dequantize(quantize_scaled(x, axis)) exactly; backward is
// the straight-through identity.
Tensor fake_quant_ste(const Tensor& x, ScaleAxis axis);

}  // namespace lt3r::fp8
