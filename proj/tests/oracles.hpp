#pragma once

// Straight-line reference implementations used as test oracles. They share
// no code with the library kernels.

#include <cmath>
#include <random>
#include <vector>

#include "segnetr/tensor.hpp"

namespace oracle {

using segnetr::Shape;
using segnetr::Tensor;

template <typename T>
Tensor<T> random(std::mt19937_64& rng, Shape shape, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

// Direct 6-loop cross-correlation (plus batch and group loops).
inline std::vector<double> conv2d(const Tensor<double>& x, const Tensor<double>& w, const std::vector<double>* b,
                                  std::size_t stride, std::size_t pad, std::size_t groups) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), Cg = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  const std::size_t OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  const std::size_t Og = O / groups;
  auto xd = x.data();
  auto wd = w.data();
  std::vector<double> y(N * O * OH * OW, 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double s = b ? (*b)[o] : 0.0;
          const std::size_t g = o / Og;
          for (std::size_t c = 0; c < Cg; ++c)
            for (std::size_t ky = 0; ky < KH; ++ky)
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                s += wd[((o * Cg + c) * KH + ky) * KW + kx] *
                     xd[((n * C + g * Cg + c) * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
              }
          y[((n * O + o) * OH + oy) * OW + ox] = s;
        }
  return y;
}

// tanh through exp computed as a truncated power series in long double.
inline long double exp_series(long double z) {
  long double term = 1, s = 1;
  for (int k = 1; k < 60; ++k) {
    term *= z / k;
    s += term;
  }
  return s;
}

inline double gelu_tanh(double x) {
  const long double pi = 3.14159265358979323846264338327950288L;
  const long double z = std::sqrt(2.0L / pi) * (x + 0.044715L * x * x * x);
  const long double e = exp_series(2 * z);
  return static_cast<double>(0.5L * x * (1 + (e - 1) / (e + 1)));
}

}  // namespace oracle
