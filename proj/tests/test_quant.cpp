#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_int.hpp>

#include "lmukws/quant.hpp"
#include "lmukws/rng.hpp"

using namespace lmukws;
using boost::multiprecision::cpp_int;

TEST(QuantSpec, Ranges) {
  const auto s = make_spec(7, -4);
  EXPECT_EQ(s.qmin(), -64);
  EXPECT_EQ(s.qmax(), 63);
  EXPECT_EQ(make_spec(4, 0).qmax(), 7);
  EXPECT_EQ(make_spec(8, 0).qmin(), -128);
  EXPECT_DOUBLE_EQ(s.max_real(), 63.0 / 16.0);
  EXPECT_THROW(make_spec(5, 0), ArgumentError);
}

TEST(Quantize, ZeroMapsToZero) {
  for (int bits : {4, 7, 8, 32})
    for (int e : {-20, -3, 0, 5}) EXPECT_EQ(quantize_scalar(0.0, make_spec(bits, e)), 0);
}

TEST(Quantize, SaturatesAtRangeEdge) {
  const auto s = make_spec(7, -7);
  EXPECT_EQ(quantize_scalar(0.5, s), 63);
  EXPECT_EQ(quantize_scalar(-0.5, s), -64);
  EXPECT_EQ(quantize_scalar(-1e30, s), -64);
  EXPECT_EQ(quantize_scalar(1e30, s), 63);
}

TEST(Quantize, RoundHalfEven) {
  const auto s = make_spec(8, 0);
  EXPECT_EQ(quantize_scalar(0.5, s), 0);
  EXPECT_EQ(quantize_scalar(1.5, s), 2);
  EXPECT_EQ(quantize_scalar(2.5, s), 2);
  EXPECT_EQ(quantize_scalar(-0.5, s), 0);
  EXPECT_EQ(quantize_scalar(-1.5, s), -2);
  EXPECT_EQ(quantize_scalar(-2.5, s), -2);
  EXPECT_EQ(quantize_scalar(2.5000001, s), 3);
}

TEST(Quantize, RoundTripWithinHalfStep) {
  Rng rng(5);
  for (int trial = 0; trial < 2000; ++trial) {
    const int bits = trial % 2 ? 8 : 4;
    const int e = static_cast<int>(rng.below(12)) - 8;
    const auto s = make_spec(bits, e);
    const double x = rng.uniform(s.min_real(), s.max_real());
    // scalar loop reference: nearest grid point by search
    double best = 0, err = 1e300;
    for (auto q = s.qmin(); q <= s.qmax(); ++q) {
      const double v = std::ldexp(static_cast<double>(q), e);
      if (std::fabs(v - x) < err) err = std::fabs(v - x), best = v;
    }
    const double got = dequantize_scalar(quantize_scalar(x, s), s);
    EXPECT_LE(std::fabs(got - x), s.step() / 2);
    EXPECT_EQ(got, best);
  }
}

TEST(Quantize, TensorShapeChecked) {
  const std::vector<double> x{1, 2, 3};
  EXPECT_THROW(quantize(x, {2, 2}, make_spec(8, 0)), StructuralError);
  const auto t = quantize(x, {3}, make_spec(8, -1));
  EXPECT_EQ(t.data, (std::vector<std::int32_t>{2, 4, 6}));
  EXPECT_EQ(dequantize(t), x);
}

TEST(FakeQuant, InRangeOnGrid) {
  const auto s = make_spec(7, -5);
  Rng rng(9);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(s.min_real(), s.max_real());
    const auto r = fake_quant(x, s);
    EXPECT_EQ(r.grad_mask, 1.0);
    EXPECT_LE(std::fabs(r.value - x), s.step() / 2);
    EXPECT_EQ(std::ldexp(r.value, 5), std::round(std::ldexp(r.value, 5)));
  }
}

TEST(FakeQuant, OutOfRangePinnedWithZeroGradient) {
  const auto s = make_spec(7, -5);
  const auto hi = fake_quant(10.0, s), lo = fake_quant(-10.0, s);
  EXPECT_EQ(hi.value, s.max_real());
  EXPECT_EQ(lo.value, s.min_real());
  EXPECT_EQ(hi.grad_mask, 0.0);
  EXPECT_EQ(lo.grad_mask, 0.0);
}

TEST(RoundingShift, HalfEvenOnIntegers) {
  EXPECT_EQ(rounding_shift(15, 2), 4);   // 3.75
  EXPECT_EQ(rounding_shift(10, 2), 2);   // 2.5 -> 2
  EXPECT_EQ(rounding_shift(14, 2), 4);   // 3.5 -> 4
  EXPECT_EQ(rounding_shift(-10, 2), -2);
  EXPECT_EQ(rounding_shift(-14, 2), -4);
  EXPECT_EQ(rounding_shift(-15, 2), -4);
  EXPECT_EQ(rounding_shift(3, -2), 12);
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const auto v = static_cast<std::int64_t>(rng.below(1 << 20)) - (1 << 19);
    const int s = static_cast<int>(rng.below(10)) + 1;
    EXPECT_EQ(rounding_shift(v, s), static_cast<std::int64_t>(round_half_even(std::ldexp(double(v), -s))));
  }
}

TEST(CoveringExponent, SmallestCoveringPowerOfTwo) {
  EXPECT_EQ(covering_exponent(7.0, 4), 0);
  EXPECT_EQ(covering_exponent(7.01, 4), 1);
  EXPECT_EQ(covering_exponent(3.5, 4), -1);
  EXPECT_EQ(covering_exponent(1.0, 7), -5);  // 63/32 covers 1, 63/64 does not
  EXPECT_EQ(covering_exponent(0.0, 8), 16);
  EXPECT_EQ(covering_exponent(1e-30, 8), -24);
}

TEST(Percentile, NearestRank) {
  std::vector<double> v;
  for (int i = 1; i <= 1000; ++i) v.push_back(i % 2 ? -i : i);
  EXPECT_EQ(abs_percentile(v, 99.9), 999.0);
  EXPECT_EQ(abs_percentile(v, 100), 1000.0);
  EXPECT_EQ(abs_percentile(v, 50), 500.0);
  EXPECT_EQ(abs_percentile({}, 50), 0.0);
}

TEST(QMatVec, ZeroWeights) {
  const auto W = quantize(std::vector<double>(6, 0.0), {2, 3}, make_spec(8, -2));
  const auto a = quantize(std::vector<double>{1, -1, 0.5}, {3}, make_spec(7, -4));
  const auto out = qmatvec(W, a, make_spec(7, -4));
  EXPECT_EQ(out.data, (std::vector<std::int32_t>{0, 0}));
}

TEST(QMatVec, ScalarExample) {
  QuantTensor W{{1, 1}, {3}, make_spec(8, -2)};
  QuantTensor a{{1}, {5}, make_spec(7, -4)};
  EXPECT_EQ(qmatvec(W, a, make_spec(7, -4)).data[0], 4);  // 15 * 2^-6 -> round(15/4)
}

TEST(QMatVec, MatchesBigIntegerReference) {
  Rng rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const int bits = trial % 2 ? 8 : 4;
    const auto rows = 1 + static_cast<std::int64_t>(rng.below(20));
    const auto cols = 1 + static_cast<std::int64_t>(rng.below(200));
    const auto ws = make_spec(bits, static_cast<int>(rng.below(8)) - 6);
    const auto as = make_spec(7, static_cast<int>(rng.below(8)) - 6);
    const auto os = make_spec(7, static_cast<int>(rng.below(16)) - 10);
    QuantTensor W{{rows, cols}, {}, ws}, a{{cols}, {}, as};
    for (std::int64_t i = 0; i < rows * cols; ++i)
      W.data.push_back(static_cast<std::int32_t>(ws.qmin() + static_cast<std::int64_t>(rng.below(1u << bits))));
    for (std::int64_t i = 0; i < cols; ++i)
      a.data.push_back(static_cast<std::int32_t>(-64 + static_cast<std::int64_t>(rng.below(128))));
    const auto out = qmatvec(W, a, os);
    const int shift = os.scale_exp - (ws.scale_exp + as.scale_exp);
    for (std::int64_t r = 0; r < rows; ++r) {
      cpp_int acc = 0;
      for (std::int64_t c = 0; c < cols; ++c) acc += cpp_int(W.at(r, c)) * a.data[c];
      // exact rational rounding: acc / 2^shift, ties to even
      cpp_int q;
      if (shift <= 0) {
        q = acc << -shift;
      } else {
        const cpp_int den = cpp_int(1) << shift;
        cpp_int fl = acc / den;
        if (acc < 0 && fl * den != acc) fl -= 1;  // floor
        const cpp_int rem2 = (acc - fl * den) * 2;
        q = fl;
        if (rem2 > den || (rem2 == den && (fl % 2 != 0))) q += 1;
      }
      if (q > os.qmax()) q = os.qmax();
      if (q < os.qmin()) q = os.qmin();
      EXPECT_EQ(cpp_int(out.data[r]), q) << "trial " << trial << " row " << r;
    }
  }
}

TEST(QMatVec, RejectsBadOperands) {
  QuantTensor W{{1, 2}, {1, 1}, make_spec(8, 0)};
  QuantTensor a{{3}, {1, 1, 1}, make_spec(7, 0)};
  EXPECT_THROW(qmatvec(W, a, make_spec(7, 0)), StructuralError);
  QuantTensor a8{{2}, {1, 1}, make_spec(8, 0)};
  EXPECT_THROW(qmatvec(W, a8, make_spec(7, 0)), ArgumentError);
}
