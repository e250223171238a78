#include "emkd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace emkd {

double finite_diff_check(const std::function<Tensor()>& loss, std::span<const Probe> probes,
                         double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  for (const auto& p : probes) p.tensor.impl()->grad.clear();
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor out = loss();
    tape.backward(out);
  }
  std::vector<double> analytic;
  analytic.reserve(probes.size());
  for (const auto& p : probes) analytic.push_back(p.tensor.grad()[p.index]);

  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    auto& slot = probes[i].tensor.impl()->data[probes[i].index];
    const double saved = slot;
    slot = saved + h;
    const double up = loss().item();
    slot = saved - h;
    const double down = loss().item();
    slot = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  x.set_requires_grad(true);
  std::vector<Probe> probes;
  for (std::size_t i = 0; i < x.numel(); ++i) probes.push_back({x, i});
  return finite_diff_check([&] { return f(x); }, probes, h);
}

}  // namespace emkd
