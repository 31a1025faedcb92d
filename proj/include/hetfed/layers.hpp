#pragma once

// Forward and backward passes for the fixed layer set of the client networks.
// Every function is a pure function of its arguments (plus explicit state);
// backward passes take the cache produced by the matching forward pass.
//
// All functions are instantiated for float (training) and double (gradient
// verification).

#include "hetfed/tensor.hpp"

#include <cstdint>
#include <vector>

namespace hetfed {

/// Per-channel affine parameters and running statistics of a 2-D batch norm.
template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar epsilon = Scalar(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(Index channels)
      : gamma(Tensor<Scalar>::constant({channels}, Scalar(1))),
        beta(Tensor<Scalar>::zeros({channels})),
        running_mean(Tensor<Scalar>::zeros({channels})),
        running_var(Tensor<Scalar>::constant({channels}, Scalar(1))) {}

  Index channels() const { return gamma.size(); }

  /// Throws ShapeError / std::invalid_argument when the invariants are broken.
  void validate() const;
};

// -- conv2d: 3x3 kernel, stride 1, zero padding 1, no bias -------------------

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight);

template <typename Scalar>
struct Conv2dGrads {
  Tensor<Scalar> input;   // empty when not requested
  Tensor<Scalar> weight;
};

template <typename Scalar>
Conv2dGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input,
                                    const Tensor<Scalar>& weight,
                                    const Tensor<Scalar>& grad_output,
                                    bool want_input_grad = true);

// -- batchnorm2d ------------------------------------------------------------

template <typename Scalar>
struct BatchNormCache {
  Tensor<Scalar> normalized;          // x_hat
  std::vector<Scalar> inv_std;        // per channel
};

/// Normalizes over every axis except axis 1. In training mode the batch
/// statistics are used and the running statistics in `state` are updated by an
/// exponential moving average (unbiased variance); in eval mode the running
/// statistics are used and `state` is left untouched. `cache` is filled only in
/// training mode.
template <typename Scalar>
Tensor<Scalar> batchnorm2d(const Tensor<Scalar>& input, BatchNormState<Scalar>& state,
                           bool training, BatchNormCache<Scalar>* cache = nullptr);

template <typename Scalar>
struct BatchNormGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
};

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm2d_backward(const BatchNormCache<Scalar>& cache,
                                            const Tensor<Scalar>& gamma,
                                            const Tensor<Scalar>& grad_output);

// -- maxpool2d: 2x2 window, stride 2 -----------------------------------------

struct MaxPoolCache {
  Shape input_shape;
  std::vector<std::int32_t> argmax;  // flat input offset within each (n, c) plane
};

/// Ties resolve to the first element in row-major scan order of the window.
template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& input, MaxPoolCache* cache = nullptr);

template <typename Scalar>
Tensor<Scalar> maxpool2d_backward(const MaxPoolCache& cache,
                                  const Tensor<Scalar>& grad_output);

// -- linear: y = x W^T, no bias ----------------------------------------------

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& input, const Tensor<Scalar>& weight);

template <typename Scalar>
struct LinearGrads {
  Tensor<Scalar> input;   // empty when not requested
  Tensor<Scalar> weight;
};

template <typename Scalar>
LinearGrads<Scalar> linear_backward(const Tensor<Scalar>& input,
                                    const Tensor<Scalar>& weight,
                                    const Tensor<Scalar>& grad_output,
                                    bool want_input_grad = true);

// -- sigmoid ------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& input);

/// Takes the forward *output* y and returns dy * y (1 - y).
template <typename Scalar>
Tensor<Scalar> sigmoid_backward(const Tensor<Scalar>& output,
                                const Tensor<Scalar>& grad_output);

// -- loss and optimizer -------------------------------------------------------

/// Mean of squared errors over every element.
template <typename Scalar>
Scalar mse_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target);

template <typename Scalar>
Tensor<Scalar> mse_loss_backward(const Tensor<Scalar>& pred,
                                 const Tensor<Scalar>& target);

/// param - eta * grad.
template <typename Scalar>
Tensor<Scalar> sgd_step(const Tensor<Scalar>& param, const Tensor<Scalar>& grad,
                        Scalar eta);

}  // namespace hetfed
