#include "vlconn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace vlc {

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params, double h,
                           double tol, const GradCheckOptions& options) {
  if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  GradCheckReport report;
  report.step = h;

  for (const auto& p : params) {
    auto t = p.tensor;
    if (!t.is_leaf()) throw std::invalid_argument("grad_check: parameter '" + p.name + "' is not a leaf");
    t.zero_grad();
  }

  Tensor out = f();
  if (out.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
  if (!std::isfinite(out.item())) {
    report.failure = "f is non-finite at the base point";
    return report;
  }
  out.backward();

  std::mt19937_64 rng(options.seed);
  NoGradGuard no_grad;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    const auto analytic = t.grad();
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > options.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    ParamGradError err{p.name, 0.0, coords.size()};
    auto values = t.mutable_data();
    for (auto i : coords) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f().item();
      values[i] = saved - h;
      const double down = f().item();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.failure = "f is non-finite near parameter '" + p.name + "'";
        report.per_param.push_back(err);
        return report;
      }
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      err.max_relative_error = std::max(err.max_relative_error, std::abs(analytic[i] - numeric) / denom);
    }
    report.max_relative_error = std::max(report.max_relative_error, err.max_relative_error);
    report.per_param.push_back(err);
  }
  report.pass = report.max_relative_error < tol;
  return report;
}

}  // namespace vlc
