#pragma once

// Shared test helpers: a central finite-difference oracle, random fixtures and
// MNIST discovery. Oracles here are written independently of the library's
// backward passes; they only ever call forward functions.

#include "hetfed/models.hpp"
#include "hetfed/rng.hpp"
#include "hetfed/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace hetfed::testing {

inline TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * uniform01(rng);
  return t;
}

// Values spaced 0.05 apart in random order, so no 2x2 window holds two values
// closer than the finite-difference step.
inline TensorD untied_tensor(Shape shape, Rng& rng) {
  TensorD t(std::move(shape));
  std::vector<double> v(static_cast<std::size_t>(t.size()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i);
  std::shuffle(v.begin(), v.end(), rng);
  for (Index i = 0; i < t.size(); ++i) t[i] = v[static_cast<std::size_t>(i)];
  return t;
}

/// Central difference (f(x + h e_i) - f(x - h e_i)) / 2h at the listed
/// coordinates of `x` (all of them when `coords` is empty). `x` is restored.
inline Eigen::VectorXd numeric_grad(TensorD& x, const std::function<double()>& f,
                                    double h = 1e-3, std::vector<Index> coords = {}) {
  if (coords.empty()) {
    coords.resize(static_cast<std::size_t>(x.size()));
    for (Index i = 0; i < x.size(); ++i) coords[static_cast<std::size_t>(i)] = i;
  }
  Eigen::VectorXd g(static_cast<Index>(coords.size()));
  for (std::size_t k = 0; k < coords.size(); ++k) {
    const Index i = coords[k];
    const double old = x[i];
    x[i] = old + h;
    const double up = f();
    x[i] = old - h;
    const double down = f();
    x[i] = old;
    g[static_cast<Index>(k)] = (up - down) / (2.0 * h);
  }
  return g;
}

inline Eigen::VectorXd gather(const TensorD::Vector& v, const std::vector<Index>& coords) {
  if (coords.empty()) return v;
  Eigen::VectorXd out(static_cast<Index>(coords.size()));
  for (std::size_t k = 0; k < coords.size(); ++k) out[static_cast<Index>(k)] = v[coords[k]];
  return out;
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double scale = std::max(a.norm(), b.norm());
  return scale == 0.0 ? 0.0 : (a - b).norm() / scale;
}

/// Scalar probe loss sum_i r_i y_i; its gradient with respect to y is r.
inline double project(const TensorD& y, const TensorD& r) { return y.values().dot(r.values()); }

inline std::vector<Index> sample_coords(Index size, std::size_t count, Rng& rng) {
  std::vector<Index> coords;
  for (std::size_t k = 0; k < count; ++k) {
    coords.push_back(static_cast<Index>(rng() % static_cast<std::uint64_t>(size)));
  }
  std::sort(coords.begin(), coords.end());
  coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
  return coords;
}

// Finite-difference check of compute_gradients on a few sampled coordinates
// of every trainable tensor; the SNN runs with the relaxed spike so its loss
// is differentiable. The step is small because max-pooling windows of a
// full-size network are dense enough that a 1e-3 step crosses argmax switches.
inline double model_grad_error(ModelKind kind, Rng& rng, double h = 1e-5) {
  ParamSet<double> p = ParamSetF::initialize(rng).cast<double>();
  p.bn1.gamma = random_tensor({32}, rng, 0.5, 1.5);
  p.bn2.beta = random_tensor({32}, rng, -0.5, 0.5);
  ModelOptions opt;
  opt.t_steps = 3;
  opt.neuron.spike = SpikeFunction::relaxed;
  const Index n = 2;
  TensorD input = kind == ModelKind::cnn ? random_tensor({n, 1, 32, 32}, rng, 0.0, 1.0)
                                         : TensorD({opt.t_steps, n, 1, 32, 32});
  if (kind == ModelKind::snn) {
    for (Index i = 0; i < input.size(); ++i) input[i] = uniform01(rng) < 0.4 ? 1.0 : 0.0;
  }
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (auto& l : labels) l = static_cast<int>(rng() % 10);

  ParamSet<double> g = p;
  compute_gradients(g, kind, input, labels, opt);
  std::vector<const TensorD*> grads;
  g.for_each([&](std::string_view, const TensorD& t, bool trainable) {
    if (trainable) grads.push_back(&t);
  });

  Eigen::VectorXd numeric(0), analytic(0);
  std::size_t slot = 0;
  p.for_each([&](std::string_view, TensorD& t, bool trainable) {
    if (!trainable) return;
    const auto coords = sample_coords(t.size(), 4, rng);
    const auto num = numeric_grad(
        t, [&] { return training_loss(p, kind, input, labels, opt); }, h, coords);
    const auto ana = gather(grads[slot++]->grad(), coords);
    numeric.conservativeResize(numeric.size() + num.size());
    numeric.tail(num.size()) = num;
    analytic.conservativeResize(analytic.size() + ana.size());
    analytic.tail(ana.size()) = ana;
  });
  return rel_error(numeric, analytic);
}

/// Directory with the four MNIST IDX files, from HETFED_DATA_DIR or the path
/// configured at build time; empty when neither holds the files.
inline std::optional<std::filesystem::path> mnist_dir() {
  std::vector<std::string> candidates;
  if (const char* env = std::getenv("HETFED_DATA_DIR"); env && *env) candidates.push_back(env);
#ifdef HETFED_TEST_MNIST_DIR
  candidates.push_back(HETFED_TEST_MNIST_DIR);
#endif
  for (const auto& c : candidates) {
    if (!c.empty() && std::filesystem::exists(std::filesystem::path(c) / "train-images-idx3-ubyte")) {
      return std::filesystem::path(c);
    }
  }
  return std::nullopt;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("hetfed_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace hetfed::testing
