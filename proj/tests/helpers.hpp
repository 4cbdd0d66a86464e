#pragma once

#include <unistd.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "demun/dataset.hpp"
#include "demun/image_io.hpp"
#include "demun/rng.hpp"
#include "demun/tensor.hpp"

namespace demun::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_normal_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = stddev * rng.normal();
  return t;
}

/// Central finite-difference check of autodiff gradients for the given
/// parameters. `run_backward` must run one forward/backward pass that
/// accumulates into the parameter grads; `forward_value` must rerun the
/// same forward (same randomness) and return the loss value.
struct GradCheckResult {
  double max_abs_err = 0.0;
  double max_rel_err = 0.0;
  int64_t checked = 0;
  bool ok = true;
  std::string worst;
};

inline GradCheckResult check_gradients(const std::vector<Parameter*>& params,
                                       const std::function<void()>& run_backward,
                                       const std::function<double()>& forward_value,
                                       double h = 1e-5, double rtol = 1e-4, double atol = 1e-7) {
  for (Parameter* p : params) p->zero_grad();
  run_backward();
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Parameter* p : params) grads.push_back(p->grad);

  GradCheckResult result;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double f_plus = forward_value();
      p.value[i] = saved - h;
      const double f_minus = forward_value();
      p.value[i] = saved;
      const double fd = (f_plus - f_minus) / (2.0 * h);
      const double ad = grads[pi][i];
      const double abs_err = std::abs(ad - fd);
      const double rel_err = abs_err / std::max({std::abs(ad), std::abs(fd), 1e-300});
      result.checked += 1;
      if (abs_err > result.max_abs_err) result.max_abs_err = abs_err;
      if (abs_err > atol + rtol * std::max(std::abs(ad), std::abs(fd))) {
        if (rel_err > result.max_rel_err) {
          result.worst = "param " + std::to_string(pi) + "[" + std::to_string(i) +
                         "]: ad=" + std::to_string(ad) + " fd=" + std::to_string(fd);
        }
        result.ok = false;
      }
      if (rel_err > result.max_rel_err && std::abs(fd) > atol) result.max_rel_err = rel_err;
    }
  }
  return result;
}

/// Smooth synthetic grayscale image: a mix of low-frequency cosines and a
/// gradient, scaled into [0, 255]. Deterministic in the seed.
inline GrayImage synth_image(int64_t width, int64_t height, uint64_t seed) {
  Rng rng(seed);
  struct Wave {
    double fy, fx, phase, amp;
  };
  std::vector<Wave> waves;
  for (int j = 0; j < 5; ++j) {
    waves.push_back({rng.uniform(-2.5, 2.5) / static_cast<double>(height),
                     rng.uniform(-2.5, 2.5) / static_cast<double>(width),
                     rng.uniform(0.0, 2.0 * M_PI), rng.uniform(0.3, 1.0)});
  }
  const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
  GrayImage img;
  img.width = width;
  img.height = height;
  img.pixels.resize(static_cast<size_t>(width * height));
  double lo = 1e300, hi = -1e300;
  for (int64_t y = 0; y < height; ++y) {
    for (int64_t x = 0; x < width; ++x) {
      double v = gx * static_cast<double>(x) / static_cast<double>(width) +
                 gy * static_cast<double>(y) / static_cast<double>(height);
      for (const Wave& w : waves)
        v += w.amp * std::cos(2.0 * M_PI * (w.fy * static_cast<double>(y) +
                                            w.fx * static_cast<double>(x)) + w.phase);
      img.at(y, x) = v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  const double span = hi > lo ? hi - lo : 1.0;
  for (double& v : img.pixels) v = 255.0 * (v - lo) / span;
  return img;
}

/// In-memory dataset of smooth synthetic tiles (no files), split test-first.
inline Dataset synth_dataset(int64_t k, int64_t n_test, int64_t n_train, int64_t n_val,
                             uint64_t seed) {
  Dataset ds;
  ds.k = k;
  const int64_t total = n_test + n_train + n_val;
  for (int64_t i = 0; i < total; ++i) {
    const GrayImage img = synth_image(k, k, Rng::derive(seed, static_cast<uint64_t>(i)));
    Tensor tile({k * k});
    for (int64_t j = 0; j < k * k; ++j) tile[j] = img.pixels[static_cast<size_t>(j)] / 255.0;
    ds.tiles.push_back(std::move(tile));
    ds.manifest.push_back({"synth" + std::to_string(i), 0});
  }
  split(ds, n_test, n_train, n_val);
  return ds;
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<uint64_t> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("demun_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter.fetch_add(1)));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace demun::testing
