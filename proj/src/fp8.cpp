// SPDX-License-Identifier: Apache-2.0
#include "lt3r/fp8.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace lt3r::fp8 {

namespace {

// Integer round-half-to-even for non-negative v. All callers pass dyadic
// rationals that are exact in double, so the 0.5 comparison is exact too.
long round_half_even(double v) {
  const double f = std::floor(v);
  const double frac = v - f;
  if (frac > 0.5) return static_cast<long>(f) + 1;
  if (frac < 0.5) return static_cast<long>(f);
  const long fl = static_cast<long>(f);
  return (fl % 2 == 0) ? fl : fl + 1;
}

}  // namespace

float decode(std::uint8_t code) {
  const int sign = code >> 7;
  const int e = (code >> 3) & 0xF;
  const int m = code & 0x7;
  if (e == 0xF && m == 0x7) {
    const float nan = std::numeric_limits<float>::quiet_NaN();
    return sign ? -nan : nan;
  }
  double mag;
  if (e == 0) {
    mag = std::ldexp(static_cast<double>(m) / 8.0, -6);  // subnormal
  } else {
    mag = std::ldexp(1.0 + static_cast<double>(m) / 8.0, e - 7);
  }
  const float v = static_cast<float>(mag);
  return sign ? -v : v;
}

std::uint8_t encode(float x) {
  const std::uint8_t sign = std::signbit(x) ? 0x80 : 0x00;
  if (std::isnan(x)) return sign | 0x7F;

  const double ax = std::fabs(static_cast<double>(x));
  if (ax > 448.0) return sign | 0x7E;  // saturate
  if (ax == 0.0) return sign;

  int e2;
  std::frexp(ax, &e2);     // ax = fr * 2^e2, fr in [0.5, 1)
  const int exp = e2 - 1;  // ax = (2*fr) * 2^exp, 2*fr in [1, 2)

  if (exp < -6) {
    // subnormal region: grid step is 2^-9
    const long q = round_half_even(ax * 512.0);
    if (q == 0) return sign;
    if (q >= 8) return sign | 0x08;  // rounds up to the smallest normal
    return sign | static_cast<std::uint8_t>(q);
  }

  const double mant = (std::ldexp(ax, -exp) - 1.0) * 8.0;  // in [0, 8)
  long m = round_half_even(mant);
  int e = exp;
  if (m == 8) {
    m = 0;
    ++e;
  }
  if (e > 8 || (e == 8 && m == 7)) return sign | 0x7E;  // above max finite
  return sign | static_cast<std::uint8_t>((e + 7) << 3) | static_cast<std::uint8_t>(m);
}

QuantizedTensor quantize_scaled(const Tensor& x, ScaleAxis axis) {
  if (x.shape.empty() || x.numel() == 0) {
    throw std::invalid_argument("quantize_scaled: empty tensor");
  }
  for (float v : x.data) {
    if (!std::isfinite(v)) throw std::invalid_argument("quantize_scaled: input must be finite");
  }

  const int width = x.shape.back();
  const int slices = static_cast<int>(x.numel() / width);

  QuantizedTensor q;
  q.axis = axis;
  q.shape = x.shape;
  q.codes.resize(x.data.size());
  q.scales.resize(static_cast<std::size_t>(slices));

  for (int s = 0; s < slices; ++s) {
    const std::size_t base = static_cast<std::size_t>(s) * width;
    float amax = 0.0f;
    for (int j = 0; j < width; ++j) amax = std::max(amax, std::fabs(x.data[base + j]));
    const float scale = std::max(amax / kFp8Max, kScaleEps);
    q.scales[static_cast<std::size_t>(s)] = scale;
    for (int j = 0; j < width; ++j) {
      const float z = std::clamp(x.data[base + j] / scale, kFp8Min, kFp8Max);
      q.codes[base + j] = encode(z);
    }
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape);
  const int width = q.slice_len();
  for (int s = 0; s < q.slice_count(); ++s) {
    const std::size_t base = static_cast<std::size_t>(s) * width;
    const float scale = q.scales[static_cast<std::size_t>(s)];
    for (int j = 0; j < width; ++j) out.data[base + j] = decode(q.codes[base + j]) * scale;
  }
  return out;
}

Tensor fake_quant_ste(const Tensor& x, ScaleAxis axis) {
  Tensor y = dequantize(quantize_scaled(x, axis));
  if (!x.on_tape()) return y;
  return straight_through(x, y);
}

}  // namespace lt3r::fp8
