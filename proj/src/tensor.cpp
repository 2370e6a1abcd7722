#include "mstd/tensor.hpp"

#include <cmath>
#include <sstream>

#include "mstd/error.hpp"

namespace mstd {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, float fill) : shape(std::move(s)), data(shape_numel(shape), fill) {
  for (std::size_t d : shape) {
    if (d == 0) fail(ErrorKind::kDimension, "zero-sized dimension in shape " + shape_str(shape));
  }
}

Tensor::Tensor(Shape s, std::vector<float> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != data.size()) {
    fail(ErrorKind::kDimension, "shape " + shape_str(shape) + " does not match " +
                                    std::to_string(data.size()) + " values");
  }
}

std::size_t Tensor::rows() const {
  if (shape.empty()) return 1;
  return data.size() / shape.back();
}

std::size_t Tensor::cols() const { return shape.empty() ? 1 : shape.back(); }

bool Tensor::all_finite() const {
  for (float v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace mstd
