#include "msvm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "msvm/rng.hpp"

namespace msvm {

namespace {

double eval_scalar(const std::function<Tensor<double>()>& loss) {
  const auto out = loss();
  if (out.numel() != 1) throw GradCheckError("gradient check: function is not scalar-valued (shape " + shape_str(out.shape()) + ")");
  return out.item();
}

}  // namespace

GradCheckReport check_param_grads(const std::function<Tensor<double>()>& loss, std::span<Parameter<double>* const> params,
                                  const GradCheckOptions& opts) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    const auto out = loss();
    if (out.numel() != 1) throw GradCheckError("gradient check: function is not scalar-valued (shape " + shape_str(out.shape()) + ")");
    tape.backward(out);
    for (auto* p : params) analytic.push_back(tape.grad(*p));
  }

  GradCheckReport report;
  Rng rng(opts.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto* p = params[pi];
    if (!p->trainable) continue;
    std::vector<std::size_t> coords(p->value.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.max_coords && coords.size() > opts.max_coords) {
      rng.shuffle(coords);
      coords.resize(opts.max_coords);
      std::sort(coords.begin(), coords.end());
    }
    for (auto i : coords) {
      const double orig = p->value[i];
      p->value.mutable_data()[i] = orig + opts.step;
      const double fp = eval_scalar(loss);
      p->value.mutable_data()[i] = orig - opts.step;
      const double fm = eval_scalar(loss);
      p->value.mutable_data()[i] = orig;
      const double fd = (fp - fm) / (2.0 * opts.step);
      const double err = std::abs(analytic[pi][i] - fd) / std::max(1.0, std::abs(fd));
      ++report.coords;
      if (report.worst.empty() || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

double finite_diff_grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
                              const std::vector<Tensor<double>>& inputs, double step) {
  std::vector<std::unique_ptr<Parameter<double>>> owned;
  std::vector<Parameter<double>*> ptrs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    owned.push_back(std::make_unique<Parameter<double>>(Parameter<double>{"input" + std::to_string(i), inputs[i].detach(), true}));
    ptrs.push_back(owned.back().get());
  }
  auto loss = [&]() {
    std::vector<Tensor<double>> xs;
    for (auto* p : ptrs) xs.push_back(use(*p));
    return fn(xs);
  };
  GradCheckOptions opts;
  opts.step = step;
  return check_param_grads(loss, ptrs, opts).max_rel_error;
}

}  // namespace msvm
