#include "badseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "badseg/random.hpp"

namespace badseg {

namespace {

double evaluate(const LossBuilder& loss, const std::vector<Tensor>& params) {
  ad::Graph g;
  std::vector<ad::Var> vars;
  vars.reserve(params.size());
  for (const Tensor& p : params) vars.push_back(g.constant_ref(p));
  const ad::Var out = loss(g, vars);
  if (out.value().size() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NonFiniteError("grad_check: non-finite loss at probe point");
  return v;
}

}  // namespace

double grad_check(const LossBuilder& loss, std::vector<Tensor> params, const GradCheckOptions& opts) {
  if (!(opts.step > 0.0f)) throw std::invalid_argument("grad_check: step must be positive");

  std::vector<Tensor> analytic;
  {
    ad::Graph g;
    std::vector<ad::Var> vars;
    for (const Tensor& p : params) vars.push_back(g.variable_ref(p));
    const ad::Var out = loss(g, vars);
    if (out.value().size() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
    if (!std::isfinite(out.value()[0])) throw NonFiniteError("grad_check: non-finite loss");
    g.backward(out);
    for (const ad::Var& v : vars) analytic.push_back(g.grad(v));
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::size_t total = 0;
  for (const Tensor& p : params) total += p.size();
  if (total <= static_cast<std::size_t>(opts.probes)) {
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t].size(); ++i) coords.emplace_back(t, i);
  } else {
    Rng rng(opts.seed);
    for (int n = 0; n < opts.probes; ++n) {
      std::size_t flat = rng.below(total);
      std::size_t t = 0;
      while (flat >= params[t].size()) flat -= params[t++].size();
      coords.emplace_back(t, flat);
    }
  }

  double worst = 0.0;
  for (auto [t, i] : coords) {
    const float orig = params[t][i];
    const float hi = orig + opts.step;
    const float lo = orig - opts.step;
    params[t][i] = hi;
    const double f_hi = evaluate(loss, params);
    params[t][i] = lo;
    const double f_lo = evaluate(loss, params);
    params[t][i] = orig;
    const double numeric = (f_hi - f_lo) / (static_cast<double>(hi) - static_cast<double>(lo));
    const double err = std::fabs(analytic[t][i] - numeric) / std::max(1.0, std::fabs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace badseg
