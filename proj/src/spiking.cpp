#include "hetfed/spiking.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace hetfed {

SpikeTrain::SpikeTrain(TensorF data) : data_(std::move(data)) {
  if (data_.rank() < 1) throw ShapeError("spike train: rank must be >= 1");
  const auto v = data_.values().array();
  if (!((v == 0.0f) || (v == 1.0f)).all()) {
    throw std::invalid_argument("spike train: elements must be 0 or 1");
  }
}

namespace {

void encode_into(const float* pixels, Index count, Index t_steps, Index stride,
                 float* out, Rng& rng) {
  for (Index t = 0; t < t_steps; ++t) {
    float* dst = out + t * stride;
    for (Index i = 0; i < count; ++i) {
      dst[i] = uniform01(rng) < static_cast<double>(pixels[i]) ? 1.0f : 0.0f;
    }
  }
}

void check_intensities(const TensorF& images) {
  const auto v = images.values().array();
  if (!((v >= 0.0f) && (v <= 1.0f)).all()) {
    throw std::invalid_argument("poisson_encode: pixel intensities must lie in [0, 1]");
  }
}

}  // namespace

SpikeTrain poisson_encode(const TensorF& image, Index t_steps, Rng& rng) {
  if (t_steps < 1) throw std::invalid_argument("poisson_encode: t_steps must be >= 1");
  check_intensities(image);
  Shape shape{t_steps};
  shape.insert(shape.end(), image.shape().begin(), image.shape().end());
  TensorF out(shape);
  encode_into(image.data(), image.size(), t_steps, image.size(), out.data(), rng);
  return SpikeTrain(std::move(out));
}

SpikeTrain poisson_encode_batch(const TensorF& images, Index t_steps, Rng& rng) {
  if (t_steps < 1) throw std::invalid_argument("poisson_encode: t_steps must be >= 1");
  if (images.rank() < 1) throw ShapeError("poisson_encode_batch: rank must be >= 1");
  check_intensities(images);
  const Index n = images.dim(0);
  const Index frame = n ? images.size() / n : 0;
  Shape shape{t_steps};
  shape.insert(shape.end(), images.shape().begin(), images.shape().end());
  TensorF out(shape);
  for (Index i = 0; i < n; ++i) {
    encode_into(images.data() + i * frame, frame, t_steps, n * frame,
                out.data() + i * frame, rng);
  }
  return SpikeTrain(std::move(out));
}

template <typename Scalar>
Tensor<Scalar> if_step(IFState<Scalar>& state, const Tensor<Scalar>& input) {
  if (state.v.shape() != input.shape()) {
    throw ShapeError("if_step: state " + shape_string(state.v.shape()) + " vs input " +
                     shape_string(input.shape()));
  }
  Tensor<Scalar> spikes(input.shape());
  auto v = state.v.values().array();
  v += input.values().array();
  spikes.values().array() = (v >= state.threshold).template cast<Scalar>();
  if (state.reset == ResetMode::hard) {
    v *= Scalar(1) - spikes.values().array();
  } else {
    v -= state.threshold * spikes.values().array();
  }
  return spikes;
}

template <typename Scalar>
Tensor<Scalar> surrogate_sigmoid_grad(const Tensor<Scalar>& x, const SurrogateParams& params) {
  if (!(params.alpha > 0)) throw std::invalid_argument("surrogate: alpha must be > 0");
  const auto a = static_cast<Scalar>(params.alpha);
  Tensor<Scalar> out(x.shape());
  const auto s = Scalar(1) / (Scalar(1) + (-a * x.values().array()).exp());
  out.values().array() = a * s * (Scalar(1) - s);
  return out;
}

template <typename Scalar>
Tensor<Scalar> rate_decode(const Tensor<Scalar>& spikes) {
  if (spikes.rank() < 1 || spikes.dim(0) < 1) throw ShapeError("rate_decode: empty time axis");
  const Index t_steps = spikes.dim(0);
  const Index frame = spikes.size() / t_steps;
  Tensor<Scalar> rates(Shape(spikes.shape().begin() + 1, spikes.shape().end()));
  rates.values() = spikes.matrix(t_steps, frame).colwise().sum().transpose() /
                   static_cast<Scalar>(t_steps);
  return rates;
}

TensorF rate_decode(const SpikeTrain& spikes) { return rate_decode(spikes.data()); }

template <typename Scalar>
Tensor<Scalar> if_forward_sequence(const Tensor<Scalar>& input, Index t_steps,
                                   const IFConfig& config, IFSequenceCache<Scalar>* cache) {
  if (t_steps < 1 || input.rank() < 1 || input.dim(0) % t_steps != 0) {
    throw ShapeError("if_forward_sequence: leading axis of " + shape_string(input.shape()) +
                     " is not a multiple of T=" + std::to_string(t_steps));
  }
  using Vec = typename Tensor<Scalar>::Vector;
  const Index block = input.size() / t_steps;
  const auto threshold = static_cast<Scalar>(config.threshold);
  const auto alpha = static_cast<Scalar>(config.surrogate.alpha);

  Tensor<Scalar> spikes(input.shape());
  if (cache) cache->membrane = Tensor<Scalar>(input.shape());
  Vec v = Vec::Zero(block);
  Scalar* vp = v.data();
  const bool hard = config.reset == ResetMode::hard;
  for (Index t = 0; t < t_steps; ++t) {
    const Scalar* in = input.data() + t * block;
    Scalar* s = spikes.data() + t * block;
    Scalar* mem = cache ? cache->membrane.data() + t * block : nullptr;
    if (config.spike == SpikeFunction::heaviside) {
      for (Index j = 0; j < block; ++j) {
        const Scalar h = vp[j] + in[j];
        const Scalar fired = h >= threshold ? Scalar(1) : Scalar(0);
        if (mem) mem[j] = h;
        s[j] = fired;
        vp[j] = hard ? h * (Scalar(1) - fired) : h - threshold * fired;
      }
    } else {
      v += Eigen::Map<const Vec>(in, block);
      auto sa = Eigen::Map<Vec>(s, block).array();
      sa = Scalar(1) / (Scalar(1) + (-alpha * (v.array() - threshold)).exp());
      if (mem) Eigen::Map<Vec>(mem, block) = v;
      if (hard) {
        v.array() *= Scalar(1) - sa;
      } else {
        v.array() -= threshold * sa;
      }
    }
  }
  if (cache) cache->spikes = spikes;
  return spikes;
}

template <typename Scalar>
Tensor<Scalar> if_backward_sequence(const IFSequenceCache<Scalar>& cache,
                                    const Tensor<Scalar>& grad_spikes, Index t_steps,
                                    const IFConfig& config) {
  if (grad_spikes.shape() != cache.membrane.shape()) {
    throw ShapeError("if_backward_sequence: gradient shape mismatch");
  }
  using Vec = typename Tensor<Scalar>::Vector;
  const Index block = grad_spikes.size() / t_steps;
  const auto threshold = static_cast<Scalar>(config.threshold);
  const auto alpha = static_cast<Scalar>(config.surrogate.alpha);

  Tensor<Scalar> grad_input(grad_spikes.shape());
  Vec grad_v = Vec::Zero(block);  // dL/dv_t carried back from step t + 1
  for (Index t = t_steps - 1; t >= 0; --t) {
    const Index off = t * block;
    const auto h = Eigen::Map<const Vec>(cache.membrane.data() + off, block).array();
    const auto s = Eigen::Map<const Vec>(cache.spikes.data() + off, block).array();
    const auto ds = Eigen::Map<const Vec>(grad_spikes.data() + off, block).array();
    const auto sig = Scalar(1) / (Scalar(1) + (-alpha * (h - threshold)).exp());
    const auto sg = alpha * sig * (Scalar(1) - sig);
    auto dh = Eigen::Map<Vec>(grad_input.data() + off, block).array();
    if (config.reset == ResetMode::hard) {
      dh = ds * sg + grad_v.array() * ((Scalar(1) - s) - h * sg);
    } else {
      dh = ds * sg + grad_v.array() * (Scalar(1) - threshold * sg);
    }
    grad_v = Eigen::Map<const Vec>(grad_input.data() + off, block);
  }
  return grad_input;
}

// -- LIF reference ------------------------------------------------------------

void LIFParams::validate() const {
  if (!(tau_mem > 0) || !(tau_syn > 0) || !(dt > 0)) {
    throw std::invalid_argument("lif: tau_mem, tau_syn and dt must be positive");
  }
  if (dt > std::min(tau_mem, tau_syn) / 10.0) {
    throw std::invalid_argument("lif: dt=" + std::to_string(dt) +
                                " exceeds min(tau_mem, tau_syn) / 10");
  }
}

std::vector<double> LIFTrace::spike_times(Eigen::Index neuron) const {
  std::vector<double> times;
  for (Eigen::Index k = 0; k < spikes.rows(); ++k) {
    if (spikes(k, neuron) != 0.0) times.push_back(static_cast<double>(k + 1) * dt);
  }
  return times;
}

LIFTrace lif_reference_simulate(const LIFParams& params, const LIFInput& input,
                                double horizon) {
  params.validate();
  if (!(horizon >= 0)) throw std::invalid_argument("lif: horizon must be >= 0");
  const Eigen::Index n_out = input.w_ff.rows();
  const Eigen::Index n_in = input.w_ff.cols();
  if (input.spikes.size() > 0 && input.spikes.cols() != n_in) {
    throw ShapeError("lif: input spikes have " + std::to_string(input.spikes.cols()) +
                     " columns, weights expect " + std::to_string(n_in));
  }
  if (input.w_rec && (input.w_rec->rows() != n_out || input.w_rec->cols() != n_out)) {
    throw ShapeError("lif: recurrent matrix must be n_out x n_out");
  }
  if (input.bias_current.size() != 0 && input.bias_current.size() != n_out) {
    throw ShapeError("lif: bias current must have n_out entries");
  }

  const auto steps = static_cast<Eigen::Index>(std::llround(horizon / params.dt));
  const double syn_decay = 1.0 - params.dt / params.tau_syn;
  const double mem_rate = params.dt / params.tau_mem;
  const double reset_drop = params.v_threshold - params.u_rest;
  const Eigen::VectorXd bias =
      input.bias_current.size() ? input.bias_current : Eigen::VectorXd::Zero(n_out);

  LIFTrace trace;
  trace.dt = params.dt;
  trace.membrane.resize(steps + 1, n_out);
  trace.current.resize(steps + 1, n_out);
  trace.spikes = Eigen::MatrixXd::Zero(steps, n_out);

  Eigen::VectorXd u = Eigen::VectorXd::Constant(n_out, params.u_rest);
  Eigen::VectorXd i_syn = Eigen::VectorXd::Zero(n_out);
  Eigen::VectorXd last_spikes = Eigen::VectorXd::Zero(n_out);
  trace.membrane.row(0) = u.transpose();
  trace.current.row(0) = i_syn.transpose();

  for (Eigen::Index k = 0; k < steps; ++k) {
    // impulses arriving at t = k dt, then one Euler step of both equations
    if (k < input.spikes.rows()) i_syn.noalias() += input.w_ff * input.spikes.row(k).transpose();
    if (input.w_rec) i_syn.noalias() += *input.w_rec * last_spikes;
    u += mem_rate * (-(u.array() - params.u_rest).matrix() + params.r_in * (i_syn + bias));
    i_syn *= syn_decay;

    for (Eigen::Index j = 0; j < n_out; ++j) {
      last_spikes[j] = u[j] >= params.v_threshold ? 1.0 : 0.0;
      if (last_spikes[j] != 0.0) u[j] -= reset_drop;
    }
    trace.spikes.row(k) = last_spikes.transpose();
    trace.membrane.row(k + 1) = u.transpose();
    trace.current.row(k + 1) = i_syn.transpose();
  }
  return trace;
}

#define HETFED_INSTANTIATE_SPIKING(S)                                                  \
  template Tensor<S> if_step(IFState<S>&, const Tensor<S>&);                           \
  template Tensor<S> surrogate_sigmoid_grad(const Tensor<S>&, const SurrogateParams&); \
  template Tensor<S> rate_decode(const Tensor<S>&);                                    \
  template Tensor<S> if_forward_sequence(const Tensor<S>&, Index, const IFConfig&,     \
                                         IFSequenceCache<S>*);                         \
  template Tensor<S> if_backward_sequence(const IFSequenceCache<S>&, const Tensor<S>&, \
                                          Index, const IFConfig&);

HETFED_INSTANTIATE_SPIKING(float)
HETFED_INSTANTIATE_SPIKING(double)

#undef HETFED_INSTANTIATE_SPIKING

}  // namespace hetfed
