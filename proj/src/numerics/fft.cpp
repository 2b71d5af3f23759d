#include <fftw3.h>

#include <mutex>
#include <stdexcept>

#include "badseg/signal.hpp"

namespace badseg {

namespace {

// Planner calls are not thread-safe in FFTW; execution with fftw_execute_dft is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

ComplexGrid transform(const ComplexGrid& x, int sign) {
  if (x.height < 1 || x.width < 1) throw std::invalid_argument("fft2: empty grid");
  ComplexGrid in = x;
  ComplexGrid out(x.height, x.width);
  auto* pin = reinterpret_cast<fftw_complex*>(in.data.data());
  auto* pout = reinterpret_cast<fftw_complex*>(out.data.data());
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_dft_2d(x.height, x.width, pin, pout, sign, FFTW_ESTIMATE);
  }
  if (!plan) throw std::runtime_error("fftw planning failed");
  fftw_execute(plan);
  {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan);
  }
  return out;
}

}  // namespace

ComplexGrid::ComplexGrid(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w) {}

ComplexGrid fft2(const ComplexGrid& x) { return transform(x, FFTW_FORWARD); }

ComplexGrid ifft2(const ComplexGrid& x) {
  ComplexGrid out = transform(x, FFTW_BACKWARD);
  const double inv = 1.0 / (static_cast<double>(x.height) * x.width);
  for (auto& v : out.data) v *= inv;
  return out;
}

}  // namespace badseg
