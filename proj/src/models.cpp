#include "hetfed/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace hetfed {

std::string_view to_string(ModelKind kind) {
  return kind == ModelKind::cnn ? "cnn" : "snn";
}

const std::vector<SchemaEntry>& param_schema() {
  static const std::vector<SchemaEntry> schema = {
      {"conv1.w", {kChannels, 1, 3, 3}, true},
      {"bn1.gamma", {kChannels}, true},
      {"bn1.beta", {kChannels}, true},
      {"bn1.running_mean", {kChannels}, false},
      {"bn1.running_var", {kChannels}, false},
      {"conv2.w", {kChannels, kChannels, 3, 3}, true},
      {"bn2.gamma", {kChannels}, true},
      {"bn2.beta", {kChannels}, true},
      {"bn2.running_mean", {kChannels}, false},
      {"bn2.running_var", {kChannels}, false},
      {"fc1.w", {kHidden, kFlatFeatures}, true},
      {"fc2.w", {kClasses, kHidden}, true},
  };
  return schema;
}

// -- ParamSet -------------------------------------------------------------------

template <typename Scalar>
ParamSet<Scalar> ParamSet<Scalar>::zeros() {
  ParamSet p;
  p.conv1_w = Tensor<Scalar>({kChannels, 1, 3, 3});
  p.conv2_w = Tensor<Scalar>({kChannels, kChannels, 3, 3});
  p.fc1_w = Tensor<Scalar>({kHidden, kFlatFeatures});
  p.fc2_w = Tensor<Scalar>({kClasses, kHidden});
  return p;
}

template <typename Scalar>
ParamSet<Scalar> ParamSet<Scalar>::initialize(Rng& rng) {
  ParamSet p = zeros();
  auto fill = [&rng](Tensor<Scalar>& w, Index fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Index i = 0; i < w.size(); ++i) {
      w[i] = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * bound);
    }
  };
  fill(p.conv1_w, 1 * 9);
  fill(p.conv2_w, kChannels * 9);
  fill(p.fc1_w, kFlatFeatures);
  fill(p.fc2_w, kHidden);
  return p;
}

template <typename Scalar>
void ParamSet<Scalar>::validate() const {
  const auto& schema = param_schema();
  std::size_t i = 0;
  for_each([&](std::string_view name, const Tensor<Scalar>& t, bool) {
    if (t.shape() != schema[i].shape) {
      throw ShapeError("param set: " + std::string(name) + " has shape " +
                       shape_string(t.shape()) + ", schema requires " +
                       shape_string(schema[i].shape));
    }
    ++i;
  });
  bn1.validate();
  bn2.validate();
}

template <typename Scalar>
void ParamSet<Scalar>::clear_grads() {
  for_each([](std::string_view, Tensor<Scalar>& t, bool) { t.clear_grad(); });
}

template <typename Scalar>
template <typename Other>
ParamSet<Other> ParamSet<Scalar>::cast() const {
  ParamSet<Other> out;
  auto bn = [](const BatchNormState<Scalar>& s) {
    BatchNormState<Other> o;
    o.gamma = s.gamma.template cast<Other>();
    o.beta = s.beta.template cast<Other>();
    o.running_mean = s.running_mean.template cast<Other>();
    o.running_var = s.running_var.template cast<Other>();
    o.momentum = static_cast<Other>(s.momentum);
    o.epsilon = static_cast<Other>(s.epsilon);
    return o;
  };
  out.conv1_w = conv1_w.template cast<Other>();
  out.bn1 = bn(bn1);
  out.conv2_w = conv2_w.template cast<Other>();
  out.bn2 = bn(bn2);
  out.fc1_w = fc1_w.template cast<Other>();
  out.fc2_w = fc2_w.template cast<Other>();
  return out;
}

template struct ParamSet<float>;
template struct ParamSet<double>;
template ParamSet<double> ParamSet<float>::cast<double>() const;
template ParamSet<float> ParamSet<double>::cast<float>() const;

// -- forward / backward -----------------------------------------------------------

namespace {

template <typename Scalar>
struct ActivationCache {
  Tensor<Scalar> output;
  Tensor<Scalar> membrane;  // SNN only
};

template <typename Scalar>
struct Trace {
  BatchNormCache<Scalar> bn1, bn2;
  ActivationCache<Scalar> act1, act2, act3, act4;
  MaxPoolCache pool1, pool2;
  Tensor<Scalar> pooled1;  // conv2 input
  Tensor<Scalar> flat;     // fc1 input
};

// Applies the nonlinearity of `kind` and leaves the result in slot.output.
template <typename Scalar>
const Tensor<Scalar>& activate(ModelKind kind, const Tensor<Scalar>& x, Index t_steps,
                               const ModelOptions& options, ActivationCache<Scalar>& slot,
                               bool keep_state) {
  if (kind == ModelKind::cnn) {
    slot.output = sigmoid(x);
  } else if (keep_state) {
    IFSequenceCache<Scalar> cache;
    if_forward_sequence(x, t_steps, options.neuron, &cache);
    slot.output = std::move(cache.spikes);
    slot.membrane = std::move(cache.membrane);
  } else {
    slot.output = if_forward_sequence(x, t_steps, options.neuron);
  }
  return slot.output;
}

template <typename Scalar>
Tensor<Scalar> activation_backward(ModelKind kind, const ActivationCache<Scalar>& slot,
                                   const Tensor<Scalar>& grad, Index t_steps,
                                   const ModelOptions& options) {
  if (kind == ModelKind::cnn) return sigmoid_backward(slot.output, grad);
  IFSequenceCache<Scalar> cache{slot.membrane, slot.output};
  return if_backward_sequence(cache, grad, t_steps, options.neuron);
}

Shape display_shape(ModelKind kind, const Shape& frames_shape, Index t_steps) {
  if (kind == ModelKind::cnn) return frames_shape;
  Shape s{frames_shape[0] / t_steps, t_steps};
  s.insert(s.end(), frames_shape.begin() + 1, frames_shape.end());
  return s;
}

// Runs the layer stack over frames [F, 1, 32, 32] (F = N for the CNN and T * N,
// time-major, for the SNN) and returns the last activation [F, 10].
template <typename Scalar>
Tensor<Scalar> run_stack(ParamSet<Scalar>& p, ModelKind kind, const Tensor<Scalar>& frames,
                         Index t_steps, bool training, const ModelOptions& options,
                         Trace<Scalar>* trace, LayerShapes* shapes) {
  const bool keep = trace != nullptr;
  Trace<Scalar> local;
  Trace<Scalar>& tr = keep ? *trace : local;
  auto record = [&](const char* name, const Tensor<Scalar>& t) {
    if (shapes) shapes->rows.emplace_back(name, display_shape(kind, t.shape(), t_steps));
  };
  const char* act_name = kind == ModelKind::cnn ? "Sigmoid" : "IFNode";
  const Index frames_n = frames.dim(0);

  record("Input", frames);
  Tensor<Scalar> x = conv2d(frames, p.conv1_w);
  record("Conv2d", x);
  x = batchnorm2d(x, p.bn1, training, keep ? &tr.bn1 : nullptr);
  record("BatchNorm2d", x);
  const Tensor<Scalar>& s1 = activate(kind, x, t_steps, options, tr.act1, keep);
  record(act_name, s1);
  Tensor<Scalar> pooled1 = maxpool2d(s1, keep ? &tr.pool1 : nullptr);
  if (!keep) tr.act1.output = Tensor<Scalar>();
  record("MaxPool2d", pooled1);

  x = conv2d(pooled1, p.conv2_w);
  if (keep) tr.pooled1 = std::move(pooled1);
  record("Conv2d", x);
  x = batchnorm2d(x, p.bn2, training, keep ? &tr.bn2 : nullptr);
  record("BatchNorm2d", x);
  const Tensor<Scalar>& s2 = activate(kind, x, t_steps, options, tr.act2, keep);
  record(act_name, s2);
  Tensor<Scalar> flat = maxpool2d(s2, keep ? &tr.pool2 : nullptr);
  record("MaxPool2d", flat);
  flat = std::move(flat).reshaped({frames_n, kFlatFeatures});

  x = linear(flat, p.fc1_w);
  if (keep) tr.flat = std::move(flat);
  record("Linear", x);
  const Tensor<Scalar>& s3 = activate(kind, x, t_steps, options, tr.act3, keep);
  record(act_name, s3);
  x = linear(s3, p.fc2_w);
  record("Linear", x);
  const Tensor<Scalar>& s4 = activate(kind, x, t_steps, options, tr.act4, keep);
  record(act_name, s4);
  return s4;
}

template <typename Scalar>
Tensor<Scalar> frames_from_spikes(const Tensor<Scalar>& spikes, const ModelOptions& options) {
  if (spikes.rank() != 5 || spikes.dim(2) != 1 || spikes.dim(3) != kImageSide ||
      spikes.dim(4) != kImageSide) {
    throw ShapeError("snn_forward: expected spikes [T, N, 1, 32, 32], got " +
                     shape_string(spikes.shape()));
  }
  if (spikes.dim(0) != options.t_steps) {
    throw ShapeError("snn_forward: spike train has T=" + std::to_string(spikes.dim(0)) +
                     ", model expects T=" + std::to_string(options.t_steps));
  }
  return spikes.reshaped({spikes.dim(0) * spikes.dim(1), 1, kImageSide, kImageSide});
}

template <typename Scalar>
void check_images(const Tensor<Scalar>& images) {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != kImageSide ||
      images.dim(3) != kImageSide) {
    throw ShapeError("cnn_forward: expected images [N, 1, 32, 32], got " +
                     shape_string(images.shape()));
  }
}

template <typename Scalar>
Tensor<Scalar> rates_from_frames(const Tensor<Scalar>& out, Index t_steps) {
  const Index n = out.dim(0) / t_steps;
  return rate_decode(out.reshaped({t_steps, n, kClasses}));
}

// Forward in training mode with a trace, then the loss and its gradient.
template <typename Scalar>
Scalar forward_loss(ParamSet<Scalar>& params, ModelKind kind, const Tensor<Scalar>& input,
                    std::span<const int> labels, const ModelOptions& options,
                    Trace<Scalar>* trace, Tensor<Scalar>* grad_out, Tensor<Scalar>& frames) {
  Index t_steps = 1;
  if (kind == ModelKind::cnn) {
    check_images(input);
    frames = input;
  } else {
    frames = frames_from_spikes(input, options);
    t_steps = options.t_steps;
  }
  const Index n = frames.dim(0) / t_steps;
  if (n < 1) throw std::invalid_argument("training batch is empty");
  if (static_cast<Index>(labels.size()) != n) {
    throw ShapeError("labels: " + std::to_string(labels.size()) + " for a batch of " +
                     std::to_string(n));
  }
  Tensor<Scalar> out = run_stack(params, kind, frames, t_steps, true, options, trace, nullptr);
  Tensor<Scalar> pred = kind == ModelKind::cnn ? out : rates_from_frames(out, t_steps);
  const Tensor<Scalar> target = one_hot<Scalar>(labels);
  const Scalar loss = mse_loss(pred, target);
  if (grad_out) *grad_out = mse_loss_backward(pred, target);
  return loss;
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> cnn_forward(ParamSet<Scalar>& params, const Tensor<Scalar>& images,
                           bool training, LayerShapes* shapes) {
  check_images(images);
  return run_stack<Scalar>(params, ModelKind::cnn, images, 1, training, ModelOptions{},
                           nullptr, shapes);
}

template <typename Scalar>
Tensor<Scalar> snn_forward(ParamSet<Scalar>& params, const Tensor<Scalar>& spikes,
                           bool training, const ModelOptions& options, LayerShapes* shapes) {
  const Tensor<Scalar> frames = frames_from_spikes(spikes, options);
  const Tensor<Scalar> out =
      run_stack<Scalar>(params, ModelKind::snn, frames, options.t_steps, training, options,
                        nullptr, shapes);
  return rates_from_frames(out, options.t_steps);
}

template <typename Scalar>
Tensor<Scalar> one_hot(std::span<const int> labels) {
  Tensor<Scalar> t({static_cast<Index>(labels.size()), kClasses});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= kClasses) {
      throw std::invalid_argument("one_hot: label " + std::to_string(labels[i]) +
                                  " outside 0..9");
    }
    t.at(static_cast<Index>(i), labels[i]) = Scalar(1);
  }
  return t;
}

template <typename Scalar>
Scalar compute_gradients(ParamSet<Scalar>& params, ModelKind kind, const Tensor<Scalar>& input,
                         std::span<const int> labels, const ModelOptions& options) {
  Trace<Scalar> tr;
  Tensor<Scalar> frames;
  Tensor<Scalar> grad_pred;
  const Scalar loss =
      forward_loss(params, kind, input, labels, options, &tr, &grad_pred, frames);
  const Index t_steps = kind == ModelKind::cnn ? 1 : options.t_steps;
  const Index f = frames.dim(0);

  // d(last activation) [F, 10]; the SNN readout averages over T.
  Tensor<Scalar> grad({f, kClasses});
  if (kind == ModelKind::cnn) {
    grad = grad_pred;
  } else {
    const Index n = f / t_steps;
    for (Index t = 0; t < t_steps; ++t) {
      grad.values().segment(t * n * kClasses, n * kClasses) =
          grad_pred.values() / static_cast<Scalar>(t_steps);
    }
  }

  grad = activation_backward(kind, tr.act4, grad, t_steps, options);
  auto fc2 = linear_backward(tr.act3.output, params.fc2_w, grad);
  params.fc2_w.set_grad(std::move(fc2.weight.values()));

  grad = activation_backward(kind, tr.act3, fc2.input, t_steps, options);
  auto fc1 = linear_backward(tr.flat, params.fc1_w, grad);
  params.fc1_w.set_grad(std::move(fc1.weight.values()));

  grad = maxpool2d_backward(tr.pool2, std::move(fc1.input).reshaped({f, kChannels, 8, 8}));
  grad = activation_backward(kind, tr.act2, grad, t_steps, options);
  auto bn2 = batchnorm2d_backward(tr.bn2, params.bn2.gamma, grad);
  params.bn2.gamma.set_grad(std::move(bn2.gamma.values()));
  params.bn2.beta.set_grad(std::move(bn2.beta.values()));
  auto conv2 = conv2d_backward(tr.pooled1, params.conv2_w, bn2.input);
  params.conv2_w.set_grad(std::move(conv2.weight.values()));

  grad = maxpool2d_backward(tr.pool1, conv2.input);
  grad = activation_backward(kind, tr.act1, grad, t_steps, options);
  auto bn1 = batchnorm2d_backward(tr.bn1, params.bn1.gamma, grad);
  params.bn1.gamma.set_grad(std::move(bn1.gamma.values()));
  params.bn1.beta.set_grad(std::move(bn1.beta.values()));
  auto conv1 = conv2d_backward(frames, params.conv1_w, bn1.input, false);
  params.conv1_w.set_grad(std::move(conv1.weight.values()));
  return loss;
}

template <typename Scalar>
Scalar training_loss(ParamSet<Scalar> params, ModelKind kind, const Tensor<Scalar>& input,
                     std::span<const int> labels, const ModelOptions& options) {
  Tensor<Scalar> frames;
  return forward_loss<Scalar>(params, kind, input, labels, options, nullptr, nullptr, frames);
}

template <typename Scalar>
void apply_sgd(ParamSet<Scalar>& params, Scalar eta) {
  params.for_each([eta](std::string_view name, Tensor<Scalar>& t, bool trainable) {
    if (!trainable) return;
    if (!t.has_grad()) {
      throw std::logic_error("apply_sgd: " + std::string(name) + " has no gradient");
    }
    Tensor<Scalar> updated = sgd_step(t, Tensor<Scalar>(t.shape(), t.grad()), eta);
    t.values() = std::move(updated.values());
  });
}

float train_batch(ParamSetF& params, ModelKind kind, const Batch& batch, float eta, Rng& rng,
                  const ModelOptions& options) {
  if (batch.labels.empty() || batch.images.size() == 0) {
    throw std::invalid_argument("train_batch: empty batch");
  }
  float loss = 0.0f;
  if (kind == ModelKind::cnn) {
    loss = compute_gradients(params, kind, batch.images, batch.labels, options);
  } else {
    const SpikeTrain spikes = poisson_encode_batch(batch.images, options.t_steps, rng);
    loss = compute_gradients(params, kind, spikes.data(), batch.labels, options);
  }
  apply_sgd(params, eta);
  params.clear_grads();
  return loss;
}

template <typename Scalar>
int argmax(std::span<const Scalar> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

std::vector<int> predict(const ParamSetF& params, ModelKind kind, const TensorF& images,
                         Rng& rng, const ModelOptions& options) {
  check_images(images);
  ParamSetF p = params;  // eval-mode forward never writes, but takes mutable state
  const Index n = images.dim(0);
  const Index chunk = kind == ModelKind::cnn ? 256 : 32;
  const Index frame = kImageSide * kImageSide;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index begin = 0; begin < n; begin += chunk) {
    const Index count = std::min(chunk, n - begin);
    TensorF part({count, 1, kImageSide, kImageSide},
                 images.values().segment(begin * frame, count * frame));
    TensorF scores = kind == ModelKind::cnn
                         ? cnn_forward(p, part, false)
                         : snn_forward(p, poisson_encode_batch(part, options.t_steps, rng).data(),
                                       false, options);
    for (Index i = 0; i < count; ++i) {
      out.push_back(argmax(std::span<const float>(scores.data() + i * kClasses,
                                                  static_cast<std::size_t>(kClasses))));
    }
  }
  return out;
}

double evaluate(const ParamSetF& params, ModelKind kind, const TensorF& images,
                std::span<const int> labels, Rng& rng, const ModelOptions& options) {
  if (labels.empty()) throw std::invalid_argument("evaluate: empty test set");
  if (images.rank() < 1 || images.dim(0) != static_cast<Index>(labels.size())) {
    throw ShapeError("evaluate: image count does not match label count");
  }
  const std::vector<int> predicted = predict(params, kind, images, rng, options);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// -- serialization -----------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'H', 'F', 'P', 'S'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff),
                         static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) {
    throw FormatError("param set: unexpected end of data");
  }
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) |
         (static_cast<std::uint32_t>(bytes[3]) << 24);
}

}  // namespace

void write_paramset(std::ostream& out, const ParamSetF& params) {
  params.validate();
  out.write(kMagic, 4);
  put_u32(out, kParamSetVersion);
  put_u32(out, static_cast<std::uint32_t>(param_schema().size()));
  params.for_each([&out](std::string_view name, const TensorF& t, bool) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (Index i = 0; i < t.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(t[i]));
  });
  if (!out) throw FormatError("param set: write failed");
}

ParamSetF read_paramset(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("param set: bad magic");
  }
  const std::uint32_t version = get_u32(in);
  if (version != kParamSetVersion) {
    throw FormatError("param set: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = get_u32(in);
  const auto& schema = param_schema();
  if (count != schema.size()) {
    throw FormatError("param set: " + std::to_string(count) + " records, schema has " +
                      std::to_string(schema.size()));
  }
  ParamSetF p = ParamSetF::zeros();
  std::size_t i = 0;
  p.for_each([&](std::string_view expected, TensorF& t, bool) {
    const std::uint32_t len = get_u32(in);
    if (len > 256) throw FormatError("param set: implausible name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("param set: unexpected end of data");
    if (name != expected) {
      throw FormatError("param set: record " + std::to_string(i) + " is '" + name +
                        "', expected '" + std::string(expected) + "'");
    }
    const std::uint32_t rank = get_u32(in);
    Shape shape;
    for (std::uint32_t d = 0; d < rank && d < 8; ++d) shape.push_back(get_u32(in));
    if (shape != schema[i].shape) {
      throw FormatError("param set: " + name + " has shape " + shape_string(shape));
    }
    for (Index k = 0; k < t.size(); ++k) t[k] = std::bit_cast<float>(get_u32(in));
    ++i;
  });
  p.validate();
  return p;
}

#define HETFED_INSTANTIATE_MODELS(S)                                                    \
  template Tensor<S> cnn_forward(ParamSet<S>&, const Tensor<S>&, bool, LayerShapes*);   \
  template Tensor<S> snn_forward(ParamSet<S>&, const Tensor<S>&, bool,                  \
                                 const ModelOptions&, LayerShapes*);                    \
  template Tensor<S> one_hot(std::span<const int>);                                     \
  template S compute_gradients(ParamSet<S>&, ModelKind, const Tensor<S>&,               \
                               std::span<const int>, const ModelOptions&);              \
  template S training_loss(ParamSet<S>, ModelKind, const Tensor<S>&, std::span<const int>, \
                           const ModelOptions&);                                        \
  template void apply_sgd(ParamSet<S>&, S);                                             \
  template int argmax(std::span<const S>);

HETFED_INSTANTIATE_MODELS(float)
HETFED_INSTANTIATE_MODELS(double)

#undef HETFED_INSTANTIATE_MODELS

}  // namespace hetfed
