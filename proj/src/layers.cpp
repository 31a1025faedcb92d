#include "hetfed/layers.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace hetfed {
namespace {

constexpr Index kKernel = 3;

template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::RowMatrix;

template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;

void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  if (shape.size() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_string(shape));
  }
}

// Unfolds one [C, H, W] frame into a (C*9) x (H*W) matrix of padded 3x3 patches.
template <typename Scalar>
void im2col(const Scalar* frame, Index channels, Index height, Index width,
            RowMatrix<Scalar>& cols) {
  const Index plane = height * width;
  cols.resize(channels * kKernel * kKernel, plane);
  for (Index c = 0; c < channels; ++c) {
    const Scalar* src = frame + c * plane;
    for (Index ky = 0; ky < kKernel; ++ky) {
      for (Index kx = 0; kx < kKernel; ++kx) {
        Scalar* dst = cols.row((c * kKernel + ky) * kKernel + kx).data();
        const Index dx = kx - 1;
        const Index x_begin = std::max<Index>(0, -dx);
        const Index x_end = std::min<Index>(width, width - dx);
        for (Index y = 0; y < height; ++y) {
          Scalar* out = dst + y * width;
          const Index iy = y + ky - 1;
          if (iy < 0 || iy >= height) {
            std::fill(out, out + width, Scalar(0));
            continue;
          }
          const Scalar* in = src + iy * width + dx;
          std::fill(out, out + x_begin, Scalar(0));
          std::copy(in + x_begin, in + x_end, out + x_begin);
          std::fill(out + x_end, out + width, Scalar(0));
        }
      }
    }
  }
}

// Adjoint of im2col: scatters patch gradients back onto a [C, H, W] frame.
template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, Index channels, Index height,
                Index width, Scalar* frame) {
  const Index plane = height * width;
  for (Index c = 0; c < channels; ++c) {
    Scalar* dst = frame + c * plane;
    for (Index ky = 0; ky < kKernel; ++ky) {
      for (Index kx = 0; kx < kKernel; ++kx) {
        const Scalar* src = cols.row((c * kKernel + ky) * kKernel + kx).data();
        const Index dx = kx - 1;
        const Index x_begin = std::max<Index>(0, -dx);
        const Index x_end = std::min<Index>(width, width - dx);
        for (Index y = 0; y < height; ++y) {
          const Index iy = y + ky - 1;
          if (iy < 0 || iy >= height) continue;
          Scalar* out = dst + iy * width + dx;
          const Scalar* in = src + y * width;
          for (Index x = x_begin; x < x_end; ++x) out[x] += in[x];
        }
      }
    }
  }
}

void check_conv_shapes(const Shape& in, const Shape& w) {
  require_rank(in, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (w[2] != kKernel || w[3] != kKernel) {
    throw ShapeError("conv2d: kernel must be 3x3, got " + shape_string(w));
  }
  if (in[1] != w[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(in[1]) +
                     " do not match weight " + shape_string(w));
  }
}

template <typename Scalar>
void check_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
}

}  // namespace

template <typename Scalar>
void BatchNormState<Scalar>::validate() const {
  const Index c = gamma.size();
  if (gamma.rank() != 1 || beta.shape() != gamma.shape() ||
      running_mean.shape() != gamma.shape() || running_var.shape() != gamma.shape()) {
    throw ShapeError("batchnorm state: all per-channel tensors must have length " +
                     std::to_string(c));
  }
  if (!(epsilon > 0)) throw std::invalid_argument("batchnorm state: epsilon must be > 0");
  if (!(momentum > 0 && momentum < 1)) {
    throw std::invalid_argument("batchnorm state: momentum must lie in (0, 1)");
  }
  if ((running_var.values().array() < Scalar(0)).any()) {
    throw std::invalid_argument("batchnorm state: negative running variance");
  }
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight) {
  check_conv_shapes(input.shape(), weight.shape());
  const Index n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index cout = weight.dim(0);
  const Index plane = h * w;

  Tensor<Scalar> out({n, cout, h, w});
  ConstMatMap<Scalar> kernel(weight.data(), cout, cin * kKernel * kKernel);
  RowMatrix<Scalar> cols;
  for (Index i = 0; i < n; ++i) {
    im2col(input.data() + i * cin * plane, cin, h, w, cols);
    MatMap<Scalar> dst(out.data() + i * cout * plane, cout, plane);
    dst.noalias() = kernel * cols;
  }
  return out;
}

template <typename Scalar>
Conv2dGrads<Scalar> conv2d_backward(const Tensor<Scalar>& input,
                                    const Tensor<Scalar>& weight,
                                    const Tensor<Scalar>& grad_output,
                                    bool want_input_grad) {
  check_conv_shapes(input.shape(), weight.shape());
  const Index n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index cout = weight.dim(0);
  const Index plane = h * w;
  const Index k = cin * kKernel * kKernel;
  if (grad_output.shape() != Shape{n, cout, h, w}) {
    throw ShapeError("conv2d_backward: grad shape " + shape_string(grad_output.shape()));
  }

  Conv2dGrads<Scalar> grads;
  grads.weight = Tensor<Scalar>(weight.shape());
  if (want_input_grad) grads.input = Tensor<Scalar>(input.shape());

  MatMap<Scalar> dw(grads.weight.data(), cout, k);
  ConstMatMap<Scalar> kernel(weight.data(), cout, k);
  RowMatrix<Scalar> cols;
  RowMatrix<Scalar> dcols;
  for (Index i = 0; i < n; ++i) {
    ConstMatMap<Scalar> dy(grad_output.data() + i * cout * plane, cout, plane);
    im2col(input.data() + i * cin * plane, cin, h, w, cols);
    dw.noalias() += dy * cols.transpose();
    if (want_input_grad) {
      dcols.noalias() = kernel.transpose() * dy;
      col2im_add(dcols, cin, h, w, grads.input.data() + i * cin * plane);
    }
  }
  return grads;
}

template <typename Scalar>
Tensor<Scalar> batchnorm2d(const Tensor<Scalar>& input, BatchNormState<Scalar>& state,
                           bool training, BatchNormCache<Scalar>* cache) {
  if (input.rank() < 2) throw ShapeError("batchnorm2d: input rank must be >= 2");
  const Index channels = input.dim(1);
  if (state.channels() != channels) {
    throw ShapeError("batchnorm2d: input has " + std::to_string(channels) +
                     " channels, state has " + std::to_string(state.channels()));
  }
  const Index outer = input.dim(0);
  const Index inner = input.size() / std::max<Index>(1, outer * channels);
  const Index count = outer * inner;

  Tensor<Scalar> out(input.shape());
  std::vector<Scalar> mean(static_cast<std::size_t>(channels));
  std::vector<Scalar> inv_std(static_cast<std::size_t>(channels));

  auto block = [&](const Tensor<Scalar>& t, Index i, Index c) {
    return Eigen::Map<const typename Tensor<Scalar>::Vector>(
        t.data() + (i * channels + c) * inner, inner);
  };

  using Vec = typename Tensor<Scalar>::Vector;
  if (training) {
    if (count < 1) throw ShapeError("batchnorm2d: empty batch in training mode");
    // Block sums in Scalar, accumulated across blocks in double.
    for (Index c = 0; c < channels; ++c) {
      double sum = 0.0;
      for (Index i = 0; i < outer; ++i) sum += static_cast<double>(block(input, i, c).sum());
      const double mu = sum / static_cast<double>(count);
      const auto mu_s = static_cast<Scalar>(mu);
      double sq = 0.0;
      for (Index i = 0; i < outer; ++i) {
        sq += static_cast<double>((block(input, i, c).array() - mu_s).square().sum());
      }
      const double var = sq / static_cast<double>(count);
      const auto ci = static_cast<std::size_t>(c);
      mean[ci] = mu_s;
      inv_std[ci] = static_cast<Scalar>(1.0 / std::sqrt(var + static_cast<double>(state.epsilon)));

      const double unbiased =
          count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
      const Scalar m = state.momentum;
      state.running_mean[c] = (Scalar(1) - m) * state.running_mean[c] + m * mu_s;
      state.running_var[c] =
          (Scalar(1) - m) * state.running_var[c] + m * static_cast<Scalar>(unbiased);
    }
  } else {
    for (Index c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      mean[ci] = state.running_mean[c];
      inv_std[ci] = Scalar(1) / std::sqrt(state.running_var[c] + state.epsilon);
    }
  }

  if (cache) {
    cache->normalized = Tensor<Scalar>(input.shape());
    cache->inv_std = inv_std;
  }
  for (Index i = 0; i < outer; ++i) {
    for (Index c = 0; c < channels; ++c) {
      const auto ci = static_cast<std::size_t>(c);
      const Index off = (i * channels + c) * inner;
      auto y = Eigen::Map<Vec>(out.data() + off, inner).array();
      y = (block(input, i, c).array() - mean[ci]) * inv_std[ci];
      if (cache) Eigen::Map<Vec>(cache->normalized.data() + off, inner) = y.matrix();
      y = y * state.gamma[c] + state.beta[c];
    }
  }
  return out;
}

template <typename Scalar>
BatchNormGrads<Scalar> batchnorm2d_backward(const BatchNormCache<Scalar>& cache,
                                            const Tensor<Scalar>& gamma,
                                            const Tensor<Scalar>& grad_output) {
  const Tensor<Scalar>& xhat = cache.normalized;
  check_same_shape(xhat, grad_output, "batchnorm2d_backward");
  const Index channels = xhat.dim(1);
  if (gamma.size() != channels || static_cast<Index>(cache.inv_std.size()) != channels) {
    throw ShapeError("batchnorm2d_backward: channel mismatch");
  }
  const Index outer = xhat.dim(0);
  const Index inner = xhat.size() / std::max<Index>(1, outer * channels);
  const double count = static_cast<double>(outer * inner);

  using Vec = typename Tensor<Scalar>::Vector;
  BatchNormGrads<Scalar> grads{Tensor<Scalar>(xhat.shape()), Tensor<Scalar>({channels}),
                               Tensor<Scalar>({channels})};
  for (Index c = 0; c < channels; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (Index i = 0; i < outer; ++i) {
      const Index off = (i * channels + c) * inner;
      Eigen::Map<const Vec> dy(grad_output.data() + off, inner);
      Eigen::Map<const Vec> xh(xhat.data() + off, inner);
      sum_dy += static_cast<double>(dy.sum());
      sum_dy_xhat += static_cast<double>(dy.dot(xh));
    }
    grads.gamma[c] = static_cast<Scalar>(sum_dy_xhat);
    grads.beta[c] = static_cast<Scalar>(sum_dy);

    // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
    const Scalar k = gamma[c] * cache.inv_std[static_cast<std::size_t>(c)];
    const Scalar mean_dy = static_cast<Scalar>(sum_dy / count);
    const Scalar mean_dy_xhat = static_cast<Scalar>(sum_dy_xhat / count);
    for (Index i = 0; i < outer; ++i) {
      const Index off = (i * channels + c) * inner;
      Eigen::Map<const Vec> dy(grad_output.data() + off, inner);
      Eigen::Map<const Vec> xh(xhat.data() + off, inner);
      Eigen::Map<Vec>(grads.input.data() + off, inner).array() =
          k * (dy.array() - mean_dy - xh.array() * mean_dy_xhat);
    }
  }
  return grads;
}

template <typename Scalar>
Tensor<Scalar> maxpool2d(const Tensor<Scalar>& input, MaxPoolCache* cache) {
  require_rank(input.shape(), 4, "maxpool2d input");
  const Index n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2d: spatial dims must be even, got " +
                     shape_string(input.shape()));
  }
  const Index oh = h / 2, ow = w / 2;
  Tensor<Scalar> out({n, c, oh, ow});
  if (cache) {
    cache->input_shape = input.shape();
    cache->argmax.assign(static_cast<std::size_t>(out.size()), 0);
  }
  const Index planes = n * c;
  for (Index p = 0; p < planes; ++p) {
    const Scalar* src = input.data() + p * h * w;
    Scalar* dst = out.data() + p * oh * ow;
    for (Index y = 0; y < oh; ++y) {
      for (Index x = 0; x < ow; ++x) {
        const Index base = 2 * y * w + 2 * x;
        const Index cand[4] = {base, base + 1, base + w, base + w + 1};
        Index best = cand[0];
        for (int j = 1; j < 4; ++j) {
          if (src[cand[j]] > src[best]) best = cand[j];
        }
        dst[y * ow + x] = src[best];
        if (cache) {
          cache->argmax[static_cast<std::size_t>(p * oh * ow + y * ow + x)] =
              static_cast<std::int32_t>(best);
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> maxpool2d_backward(const MaxPoolCache& cache,
                                  const Tensor<Scalar>& grad_output) {
  const Shape& in = cache.input_shape;
  require_rank(in, 4, "maxpool2d_backward");
  if (grad_output.shape() != Shape{in[0], in[1], in[2] / 2, in[3] / 2} ||
      static_cast<Index>(cache.argmax.size()) != grad_output.size()) {
    throw ShapeError("maxpool2d_backward: grad shape " + shape_string(grad_output.shape()));
  }
  Tensor<Scalar> grad(in);
  const Index out_plane = (in[2] / 2) * (in[3] / 2);
  const Index in_plane = in[2] * in[3];
  const Index planes = in[0] * in[1];
  for (Index p = 0; p < planes; ++p) {
    Scalar* dst = grad.data() + p * in_plane;
    for (Index j = 0; j < out_plane; ++j) {
      const Index o = p * out_plane + j;
      dst[cache.argmax[static_cast<std::size_t>(o)]] += grad_output[o];
    }
  }
  return grad;
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& input, const Tensor<Scalar>& weight) {
  require_rank(input.shape(), 2, "linear input");
  require_rank(weight.shape(), 2, "linear weight");
  if (input.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_string(input.shape()) +
                     " incompatible with weight " + shape_string(weight.shape()));
  }
  const Index n = input.dim(0), din = input.dim(1), dout = weight.dim(0);
  Tensor<Scalar> out({n, dout});
  out.matrix(n, dout).noalias() =
      input.matrix(n, din) * weight.matrix(dout, din).transpose();
  return out;
}

template <typename Scalar>
LinearGrads<Scalar> linear_backward(const Tensor<Scalar>& input,
                                    const Tensor<Scalar>& weight,
                                    const Tensor<Scalar>& grad_output,
                                    bool want_input_grad) {
  const Index n = input.dim(0), din = input.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din || grad_output.shape() != Shape{n, dout}) {
    throw ShapeError("linear_backward: inconsistent shapes");
  }
  LinearGrads<Scalar> grads;
  grads.weight = Tensor<Scalar>(weight.shape());
  grads.weight.matrix(dout, din).noalias() =
      grad_output.matrix(n, dout).transpose() * input.matrix(n, din);
  if (want_input_grad) {
    grads.input = Tensor<Scalar>(input.shape());
    grads.input.matrix(n, din).noalias() =
        grad_output.matrix(n, dout) * weight.matrix(dout, din);
  }
  return grads;
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& input) {
  Tensor<Scalar> out(input.shape());
  // exp(-x) may overflow to +inf for very negative x, which still yields 0.
  out.values().array() = Scalar(1) / (Scalar(1) + (-input.values().array()).exp());
  return out;
}

template <typename Scalar>
Tensor<Scalar> sigmoid_backward(const Tensor<Scalar>& output,
                                const Tensor<Scalar>& grad_output) {
  check_same_shape(output, grad_output, "sigmoid_backward");
  Tensor<Scalar> grad(output.shape());
  const auto y = output.values().array();
  grad.values().array() = grad_output.values().array() * y * (Scalar(1) - y);
  return grad;
}

template <typename Scalar>
Scalar mse_loss(const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  check_same_shape(pred, target, "mse_loss");
  if (pred.size() == 0) throw ShapeError("mse_loss: empty input");
  const double sq = (pred.values().template cast<double>() -
                     target.values().template cast<double>())
                        .squaredNorm();
  return static_cast<Scalar>(sq / static_cast<double>(pred.size()));
}

template <typename Scalar>
Tensor<Scalar> mse_loss_backward(const Tensor<Scalar>& pred,
                                 const Tensor<Scalar>& target) {
  check_same_shape(pred, target, "mse_loss_backward");
  Tensor<Scalar> grad(pred.shape());
  grad.values() = (pred.values() - target.values()) *
                  (Scalar(2) / static_cast<Scalar>(pred.size()));
  return grad;
}

template <typename Scalar>
Tensor<Scalar> sgd_step(const Tensor<Scalar>& param, const Tensor<Scalar>& grad,
                        Scalar eta) {
  check_same_shape(param, grad, "sgd_step");
  if (!(eta >= 0)) throw std::invalid_argument("sgd_step: eta must be >= 0");
  Tensor<Scalar> out(param.shape());
  out.values() = param.values() - eta * grad.values();
  return out;
}

#define HETFED_INSTANTIATE_LAYERS(S)                                                   \
  template struct BatchNormState<S>;                                                   \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&);                       \
  template Conv2dGrads<S> conv2d_backward(const Tensor<S>&, const Tensor<S>&,          \
                                          const Tensor<S>&, bool);                     \
  template Tensor<S> batchnorm2d(const Tensor<S>&, BatchNormState<S>&, bool,           \
                                 BatchNormCache<S>*);                                  \
  template BatchNormGrads<S> batchnorm2d_backward(const BatchNormCache<S>&,            \
                                                  const Tensor<S>&, const Tensor<S>&); \
  template Tensor<S> maxpool2d(const Tensor<S>&, MaxPoolCache*);                       \
  template Tensor<S> maxpool2d_backward(const MaxPoolCache&, const Tensor<S>&);        \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&);                       \
  template LinearGrads<S> linear_backward(const Tensor<S>&, const Tensor<S>&,          \
                                          const Tensor<S>&, bool);                     \
  template Tensor<S> sigmoid(const Tensor<S>&);                                        \
  template Tensor<S> sigmoid_backward(const Tensor<S>&, const Tensor<S>&);             \
  template S mse_loss(const Tensor<S>&, const Tensor<S>&);                             \
  template Tensor<S> mse_loss_backward(const Tensor<S>&, const Tensor<S>&);            \
  template Tensor<S> sgd_step(const Tensor<S>&, const Tensor<S>&, S);

HETFED_INSTANTIATE_LAYERS(float)
HETFED_INSTANTIATE_LAYERS(double)

#undef HETFED_INSTANTIATE_LAYERS

}  // namespace hetfed
