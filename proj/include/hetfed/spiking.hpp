#pragma once

#include "hetfed/rng.hpp"
#include "hetfed/tensor.hpp"

#include <Eigen/Dense>

#include <optional>
#include <vector>

namespace hetfed {

struct SurrogateParams {
  double alpha = 4.0;  // slope of the sigmoid surrogate; must be > 0
};

enum class ResetMode {
  hard,      // v <- 0 after a spike
  subtract,  // v <- v - threshold after a spike
};

/// How the forward pass turns a membrane potential into a spike.
enum class SpikeFunction {
  heaviside,  // binary spike, surrogate gradient in backward (training)
  relaxed,    // spike = sigmoid(alpha (v - threshold)); exact gradient, used by
              // finite-difference checks of the backward recursion
};

struct IFConfig {
  double threshold = 1.0;
  ResetMode reset = ResetMode::hard;
  SpikeFunction spike = SpikeFunction::heaviside;
  SurrogateParams surrogate{};
};

/// Membrane state of one layer of integrate-and-fire neurons (no leak).
template <typename Scalar>
struct IFState {
  Tensor<Scalar> v;
  Scalar threshold = Scalar(1);
  ResetMode reset = ResetMode::hard;

  IFState() = default;
  IFState(Shape shape, Scalar threshold_, ResetMode reset_ = ResetMode::hard)
      : v(std::move(shape)), threshold(threshold_), reset(reset_) {}
};

/// Binary tensor of shape [T, ...]; axis 0 is time.
class SpikeTrain {
 public:
  SpikeTrain() = default;
  /// Throws std::invalid_argument if any element is not exactly 0 or 1.
  explicit SpikeTrain(TensorF data);

  const TensorF& data() const { return data_; }
  Index t_steps() const { return data_.rank() ? data_.dim(0) : 0; }
  Index frame_size() const { return t_steps() ? data_.size() / t_steps() : 0; }
  Shape frame_shape() const { return Shape(data_.shape().begin() + 1, data_.shape().end()); }

 private:
  TensorF data_;
};

/// Bernoulli rate coding: at every step each pixel spikes with probability
/// equal to its intensity. Output shape is [T, ...image shape].
SpikeTrain poisson_encode(const TensorF& image, Index t_steps, Rng& rng);

/// Encodes images [N, ...] into [T, N, ...], drawing image by image so the
/// result equals encoding each image separately with the same stream.
SpikeTrain poisson_encode_batch(const TensorF& images, Index t_steps, Rng& rng);

/// One integrate-and-fire step: v += input, spike where v >= threshold, reset.
template <typename Scalar>
Tensor<Scalar> if_step(IFState<Scalar>& state, const Tensor<Scalar>& input);

/// alpha * s(alpha x) * (1 - s(alpha x)), the derivative of sigmoid(alpha x).
template <typename Scalar>
Tensor<Scalar> surrogate_sigmoid_grad(const Tensor<Scalar>& v_minus_threshold,
                                      const SurrogateParams& params);

/// Mean over the time axis: [T, ...] -> [...].
TensorF rate_decode(const SpikeTrain& spikes);
template <typename Scalar>
Tensor<Scalar> rate_decode(const Tensor<Scalar>& spikes_time_major);

// Multi-step IF layer used by the SNN. Input is time-major: [T * N, ...]
// where frame t * N + n holds sample n at step t. States start at zero.

template <typename Scalar>
struct IFSequenceCache {
  Tensor<Scalar> membrane;  // potential after integration, before reset
  Tensor<Scalar> spikes;
};

template <typename Scalar>
Tensor<Scalar> if_forward_sequence(const Tensor<Scalar>& input, Index t_steps,
                                   const IFConfig& config,
                                   IFSequenceCache<Scalar>* cache = nullptr);

/// Backpropagation through time. The reset path stays attached, so the
/// dependence of each step's potential on the previous spike is differentiated.
template <typename Scalar>
Tensor<Scalar> if_backward_sequence(const IFSequenceCache<Scalar>& cache,
                                    const Tensor<Scalar>& grad_spikes, Index t_steps,
                                    const IFConfig& config);

// -- continuous-time LIF reference integrator ----------------------------------

struct LIFParams {
  double tau_mem = 10.0;  // ms
  double tau_syn = 5.0;   // ms
  double r_in = 1.0;
  double u_rest = 0.0;
  double v_threshold = 1.0;
  double dt = 0.1;  // ms

  /// Throws std::invalid_argument unless time constants are positive and
  /// dt <= min(tau_mem, tau_syn) / 10.
  void validate() const;
};

struct LIFTrace {
  Eigen::MatrixXd membrane;  // (steps + 1) x n_out, row 0 is the initial state
  Eigen::MatrixXd current;   // (steps + 1) x n_out
  Eigen::MatrixXd spikes;    // steps x n_out, row k holds spikes at time (k+1) dt
  double dt = 0;

  Eigen::Index steps() const { return spikes.rows(); }
  /// Spike times (in time units) of output neuron i.
  std::vector<double> spike_times(Eigen::Index neuron) const;
};

struct LIFInput {
  Eigen::MatrixXd w_ff;                  // n_out x n_in
  std::optional<Eigen::MatrixXd> w_rec;  // n_out x n_out
  Eigen::MatrixXd spikes;                // steps x n_in, row k = spikes at time k dt
  Eigen::VectorXd bias_current;          // n_out, constant external drive (optional)
};

/// Forward-Euler integration of the LIF membrane equation driven by an
/// exponentially decaying synaptic current with feed-forward and optional
/// recurrent spike inputs; a spike lowers the potential by (threshold - rest).
/// Presynaptic spikes are Dirac impulses: each one steps the current by its
/// weight. Test-oracle use only.
LIFTrace lif_reference_simulate(const LIFParams& params, const LIFInput& input,
                                double horizon);

}  // namespace hetfed
