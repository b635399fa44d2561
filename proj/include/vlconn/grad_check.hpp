#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "vlconn/tensor.hpp"

namespace vlc {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ParamGradError {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t coordinates_checked = 0;
};

struct GradCheckReport {
  std::vector<ParamGradError> per_param;
  double max_relative_error = 0.0;
  double step = 0.0;
  bool pass = false;
  std::string failure;  // set when f was non-finite
};

struct GradCheckOptions {
  // Parameters larger than this are checked on a fixed random subset.
  std::size_t max_coords_per_param = 64;
  std::uint64_t seed = 7;
};

// Compares reverse-mode gradients of the scalar f() against central differences
// (f(p+h) - f(p-h)) / 2h. The relative error denominator is
// max(|analytic|, |numeric|, 1e-8).
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params, double h,
                           double tol, const GradCheckOptions& options = {});

}  // namespace vlc
