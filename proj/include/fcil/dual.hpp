#pragma once

#include <cmath>

namespace fcil {

// First-order forward-mode number: value plus one tangent. Running the
// hand-written backward pass on Duals yields directional derivatives of
// gradients, which is how exemplar pixels receive exact gradients of
// gradient-matching losses.
struct Dual {
  double v = 0.0;
  double d = 0.0;

  constexpr Dual() = default;
  constexpr Dual(double value) : v(value) {}  // NOLINT(google-explicit-constructor)
  constexpr Dual(double value, double tangent) : v(value), d(tangent) {}

  constexpr Dual& operator+=(Dual o) { v += o.v; d += o.d; return *this; }
  constexpr Dual& operator-=(Dual o) { v -= o.v; d -= o.d; return *this; }
  constexpr Dual& operator*=(Dual o) { d = d * o.v + v * o.d; v *= o.v; return *this; }
  constexpr Dual& operator/=(Dual o) { *this = Dual{v / o.v, (d * o.v - v * o.d) / (o.v * o.v)}; return *this; }
};

constexpr Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d + b.d}; }
constexpr Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d - b.d}; }
constexpr Dual operator-(Dual a) { return {-a.v, -a.d}; }
constexpr Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
constexpr Dual operator/(Dual a, Dual b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }

inline Dual exp(Dual a) {
  const double e = std::exp(a.v);
  return {e, e * a.d};
}
inline Dual log(Dual a) { return {std::log(a.v), a.d / a.v}; }

constexpr double value_of(double x) { return x; }
constexpr double value_of(Dual x) { return x.v; }

}  // namespace fcil
