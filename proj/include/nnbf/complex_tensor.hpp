#pragma once

#include <complex>
#include <vector>

#include "nnbf/errors.hpp"
#include "nnbf/tensor.hpp"

namespace nnbf {

using cplx = std::complex<double>;

// Dense row-major complex tensor used for channels, received signals and
// combiner weights on the simulation side (outside the autodiff graph).
struct CTensor {
  Shape shape;
  std::vector<cplx> v;

  CTensor() = default;
  explicit CTensor(Shape s) : shape(std::move(s)) {
    v.assign(static_cast<size_t>(shape_numel(shape)), cplx(0.0, 0.0));
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int axis) const { return shape.at(static_cast<size_t>(axis)); }

  cplx& operator[](std::int64_t i) { return v[static_cast<size_t>(i)]; }
  const cplx& operator[](std::int64_t i) const { return v[static_cast<size_t>(i)]; }

  cplx& at4(std::int64_t i0, std::int64_t i1, std::int64_t i2, std::int64_t i3) {
    return v[static_cast<size_t>(((i0 * shape[1] + i1) * shape[2] + i2) * shape[3] + i3)];
  }
  const cplx& at4(std::int64_t i0, std::int64_t i1, std::int64_t i2,
                  std::int64_t i3) const {
    return v[static_cast<size_t>(((i0 * shape[1] + i1) * shape[2] + i2) * shape[3] + i3)];
  }

  bool all_finite() const {
    for (const auto& z : v)
      if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) return false;
    return true;
  }
};

}  // namespace nnbf
