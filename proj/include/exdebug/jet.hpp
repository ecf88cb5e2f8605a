#pragma once

#include <cmath>

namespace exdebug {

// Second-order truncated Taylor number: f(t) ~ v + d1 t + d2 t^2 / 2 along one
// direction. Propagating it through a forward pass yields exact first and
// second directional derivatives without a tape.
struct Jet2 {
  double v = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;

  Jet2() = default;
  constexpr Jet2(double value) : v(value) {}  // NOLINT(google-explicit-constructor)
  constexpr Jet2(double value, double first, double second) : v(value), d1(first), d2(second) {}

  Jet2& operator+=(const Jet2& o) {
    v += o.v;
    d1 += o.d1;
    d2 += o.d2;
    return *this;
  }
};

inline Jet2 operator+(Jet2 a, const Jet2& b) { return a += b; }
inline Jet2 operator-(const Jet2& a, const Jet2& b) { return {a.v - b.v, a.d1 - b.d1, a.d2 - b.d2}; }
inline Jet2 operator*(const Jet2& a, const Jet2& b) {
  return {a.v * b.v, a.d1 * b.v + a.v * b.d1, a.d2 * b.v + 2.0 * a.d1 * b.d1 + a.v * b.d2};
}
inline Jet2 operator*(double s, const Jet2& a) { return {s * a.v, s * a.d1, s * a.d2}; }

// Chain rule for a scalar function with known f, f', f''.
inline Jet2 compose(const Jet2& x, double f, double df, double d2f) {
  return {f, df * x.d1, d2f * x.d1 * x.d1 + df * x.d2};
}

inline Jet2 tanh(const Jet2& x) {
  const double t = std::tanh(x.v);
  const double dt = 1.0 - t * t;
  return compose(x, t, dt, -2.0 * t * dt);
}

}  // namespace exdebug
