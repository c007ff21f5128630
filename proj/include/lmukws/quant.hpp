#pragma once

// Power-of-two symmetric fixed point: real = q * 2^scale_exp with q a
// two's complement integer of `bits` width. Rounding is half-to-even
// everywhere, both in the real domain and for integer right shifts, so the
// fake-quantized training graph and the integer kernels agree bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "lmukws/error.hpp"

namespace lmukws {

inline constexpr int kActivationBits = 7;
inline constexpr int kConstantBits = 8;
inline constexpr int kAccumulatorBits = 32;

struct QuantSpec {
  int bits = kActivationBits;
  bool is_signed = true;
  int scale_exp = 0;

  std::int64_t qmax() const { return (std::int64_t{1} << (bits - 1)) - 1; }
  std::int64_t qmin() const { return -(std::int64_t{1} << (bits - 1)); }
  double step() const { return std::ldexp(1.0, scale_exp); }
  double max_real() const { return std::ldexp(static_cast<double>(qmax()), scale_exp); }
  double min_real() const { return std::ldexp(static_cast<double>(qmin()), scale_exp); }

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

inline bool valid_bits(int bits) { return bits == 4 || bits == 7 || bits == 8 || bits == 32; }

inline QuantSpec make_spec(int bits, int scale_exp) {
  detail::require(valid_bits(bits), "QuantSpec: bits must be one of 4, 7, 8, 32");
  return QuantSpec{bits, true, scale_exp};
}

struct QuantTensor {
  std::vector<std::int64_t> shape;
  std::vector<std::int32_t> data;  // one integer per element, within spec range
  QuantSpec spec;

  std::size_t size() const { return data.size(); }

  std::int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  std::int32_t at(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * cols() + c)];
  }

  std::size_t nonzeros() const {
    return static_cast<std::size_t>(
        std::count_if(data.begin(), data.end(), [](std::int32_t v) { return v != 0; }));
  }

  friend bool operator==(const QuantTensor&, const QuantTensor&) = default;
};

inline std::int64_t element_count(std::span<const std::int64_t> shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1},
                         std::multiplies<std::int64_t>());
}

inline std::int64_t saturate(std::int64_t v, const QuantSpec& spec) {
  return std::clamp(v, spec.qmin(), spec.qmax());
}

/// Round to nearest integer, ties to even. Exact for all finite doubles.
inline double round_half_even(double x) {
  const double r = std::round(x);  // ties away from zero
  if (std::fabs(x - std::trunc(x)) == 0.5) {
    return 2.0 * std::round(x / 2.0);
  }
  return r;
}

inline std::int32_t quantize_scalar(double x, const QuantSpec& spec) {
  const double scaled = std::ldexp(x, -spec.scale_exp);
  const double lo = static_cast<double>(spec.qmin());
  const double hi = static_cast<double>(spec.qmax());
  if (!(scaled > lo)) return static_cast<std::int32_t>(spec.qmin());
  if (!(scaled < hi)) return static_cast<std::int32_t>(spec.qmax());
  return static_cast<std::int32_t>(round_half_even(scaled));
}

inline double dequantize_scalar(std::int64_t q, const QuantSpec& spec) {
  return std::ldexp(static_cast<double>(q), spec.scale_exp);
}

inline QuantTensor quantize(std::span<const double> x, std::vector<std::int64_t> shape,
                            const QuantSpec& spec) {
  detail::require_shape(element_count(shape) == static_cast<std::int64_t>(x.size()),
                        "quantize: shape does not match data");
  QuantTensor t;
  t.shape = std::move(shape);
  t.spec = spec;
  t.data.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    detail::require(std::isfinite(x[i]), "quantize: non-finite input");
    t.data[i] = quantize_scalar(x[i], spec);
  }
  return t;
}

inline std::vector<double> dequantize(const QuantTensor& t) {
  std::vector<double> out(t.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = dequantize_scalar(t.data[i], t.spec);
  return out;
}

/// Fake quantization: forward value on the grid, straight-through gradient
/// mask (1 inside the representable range, 0 where saturated).
struct FakeQuantResult {
  double value;
  double grad_mask;
};

inline FakeQuantResult fake_quant(double x, const QuantSpec& spec) {
  const double q = dequantize_scalar(quantize_scalar(x, spec), spec);
  const bool inside = x >= spec.min_real() && x <= spec.max_real();
  return {q, inside ? 1.0 : 0.0};
}

/// Divide by 2^shift with round-half-even (shift > 0) or multiply by
/// 2^-shift (shift <= 0). Pure integer arithmetic.
inline std::int64_t rounding_shift(std::int64_t v, int shift) {
  if (shift <= 0) return v * (std::int64_t{1} << (-shift));
  if (shift >= 62) return 0;
  const std::int64_t div = std::int64_t{1} << shift;
  // floor division for negatives
  std::int64_t q = v >> shift;
  const std::int64_t rem = v - q * div;  // in [0, div)
  const std::int64_t half = div >> 1;
  if (rem > half || (rem == half && (q & 1) != 0)) ++q;
  return q;
}

/// Requantize an accumulator value with exponent `acc_exp` to `out`.
inline std::int32_t requantize(std::int64_t acc, int acc_exp, const QuantSpec& out) {
  const int shift = out.scale_exp - acc_exp;
  if (shift < 0) {
    // left shift could overflow; saturate first
    const int s = -shift;
    if (s >= 40) return static_cast<std::int32_t>(acc == 0 ? 0 : (acc > 0 ? out.qmax() : out.qmin()));
    return static_cast<std::int32_t>(saturate(acc * (std::int64_t{1} << s), out));
  }
  return static_cast<std::int32_t>(saturate(rounding_shift(acc, shift), out));
}

/// Smallest exponent e with max_abs <= qmax * 2^e, clamped to [lo, hi].
/// An all-zero tensor gets `hi` so that it never lowers an accumulator
/// alignment exponent.
inline int covering_exponent(double max_abs, int bits, int lo = -24, int hi = 16) {
  if (!(max_abs > 0.0)) return hi;
  const double qmax = static_cast<double>((std::int64_t{1} << (bits - 1)) - 1);
  int e = static_cast<int>(std::ceil(std::log2(max_abs / qmax)));
  // guard log2 rounding at exact powers
  while (e > lo && std::ldexp(qmax, e - 1) >= max_abs) --e;
  while (std::ldexp(qmax, e) < max_abs) ++e;
  return std::clamp(e, lo, hi);
}

/// Nearest-rank percentile of |x|, p in (0, 100].
inline double abs_percentile(std::vector<double> values, double p) {
  if (values.empty()) return 0.0;
  for (auto& v : values) v = std::fabs(v);
  const auto n = values.size();
  auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(n) / 100.0));
  rank = std::clamp<std::size_t>(rank, 1, n);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank - 1),
                   values.end());
  return values[rank - 1];
}

/// Integer matrix-vector product with a 32-bit accumulator, requantized to
/// `out_spec`. W is rows x cols with 4- or 8-bit weights; a has 7-bit
/// activations.
inline QuantTensor qmatvec(const QuantTensor& W, const QuantTensor& a, const QuantSpec& out_spec) {
  detail::require(W.spec.bits == 4 || W.spec.bits == 8, "qmatvec: weights must be 4 or 8 bit");
  detail::require(a.spec.bits == kActivationBits, "qmatvec: activations must be 7 bit");
  detail::require_shape(W.shape.size() == 2 && static_cast<std::int64_t>(a.size()) == W.cols(),
                        "qmatvec: dimension mismatch");
  const std::int64_t bound = W.cols() * (std::int64_t{1} << (W.spec.bits - 1)) *
                             (std::int64_t{1} << (kActivationBits - 1));
  detail::require(bound <= std::numeric_limits<std::int32_t>::max(),
                  "qmatvec: fan-in too large for a 32-bit accumulator");
  QuantTensor out;
  out.shape = {W.rows()};
  out.spec = out_spec;
  out.data.resize(static_cast<std::size_t>(W.rows()));
  const int acc_exp = W.spec.scale_exp + a.spec.scale_exp;
  for (std::int64_t r = 0; r < W.rows(); ++r) {
    std::int32_t acc = 0;
    for (std::int64_t c = 0; c < W.cols(); ++c) {
      acc += W.at(r, c) * a.data[static_cast<std::size_t>(c)];
    }
    out.data[static_cast<std::size_t>(r)] = requantize(acc, acc_exp, out_spec);
  }
  return out;
}

}  // namespace lmukws
