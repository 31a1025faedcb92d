#pragma once

#include "hetfed/layers.hpp"
#include "hetfed/rng.hpp"
#include "hetfed/spiking.hpp"
#include "hetfed/tensor.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hetfed {

inline constexpr Index kImageSide = 32;
inline constexpr Index kChannels = 32;
inline constexpr Index kHidden = 512;
inline constexpr Index kClasses = 10;
inline constexpr Index kFlatFeatures = kChannels * 8 * 8;  // 2048

enum class ModelKind { cnn, snn };

std::string_view to_string(ModelKind kind);

/// Options that only matter for the spiking network.
struct ModelOptions {
  Index t_steps = 20;
  IFConfig neuron{};
};

/// The parameter schema shared by both client networks. A ParamSet trained by
/// either kind loads into the other unchanged.
template <typename Scalar>
struct ParamSet {
  Tensor<Scalar> conv1_w;  // [32, 1, 3, 3]
  BatchNormState<Scalar> bn1{kChannels};
  Tensor<Scalar> conv2_w;  // [32, 32, 3, 3]
  BatchNormState<Scalar> bn2{kChannels};
  Tensor<Scalar> fc1_w;  // [512, 2048]
  Tensor<Scalar> fc2_w;  // [10, 512]

  /// All weights zero, batch-norm at its identity initialization.
  static ParamSet zeros();

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, gamma 1, beta 0,
  /// running mean 0, running variance 1.
  static ParamSet initialize(Rng& rng);

  /// Visits every tensor in schema order as f(name, tensor, trainable).
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  /// Throws ShapeError when any tensor deviates from the schema.
  void validate() const;

  void clear_grads();

  template <typename Other>
  ParamSet<Other> cast() const;

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    std::vector<const Tensor<Scalar>*> lhs;
    std::vector<const Tensor<Scalar>*> rhs;
    a.for_each([&](std::string_view, const Tensor<Scalar>& t, bool) { lhs.push_back(&t); });
    b.for_each([&](std::string_view, const Tensor<Scalar>& t, bool) { rhs.push_back(&t); });
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      if (!(*lhs[i] == *rhs[i])) return false;
    }
    return true;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& p, F& f) {
    f("conv1.w", p.conv1_w, true);
    f("bn1.gamma", p.bn1.gamma, true);
    f("bn1.beta", p.bn1.beta, true);
    f("bn1.running_mean", p.bn1.running_mean, false);
    f("bn1.running_var", p.bn1.running_var, false);
    f("conv2.w", p.conv2_w, true);
    f("bn2.gamma", p.bn2.gamma, true);
    f("bn2.beta", p.bn2.beta, true);
    f("bn2.running_mean", p.bn2.running_mean, false);
    f("bn2.running_var", p.bn2.running_var, false);
    f("fc1.w", p.fc1_w, true);
    f("fc2.w", p.fc2_w, true);
  }
};

using ParamSetF = ParamSet<float>;

/// Names and shapes of the schema, in visiting order.
struct SchemaEntry {
  std::string_view name;
  Shape shape;
  bool trainable;
};
const std::vector<SchemaEntry>& param_schema();

/// Intermediate activation shapes recorded by a forward pass, one per layer.
struct LayerShapes {
  std::vector<std::pair<std::string, Shape>> rows;
};

/// CNN forward pass. `images` is [N, 1, 32, 32]; output is [N, 10] in (0, 1).
/// Training mode uses batch statistics and updates the running statistics.
template <typename Scalar>
Tensor<Scalar> cnn_forward(ParamSet<Scalar>& params, const Tensor<Scalar>& images,
                           bool training, LayerShapes* shapes = nullptr);

/// SNN forward pass. `spikes` is time-major [T, N, 1, 32, 32]; output is the
/// firing rate of the last IF layer, [N, 10], in multiples of 1/T. Batch norm
/// pools statistics over batch and time together.
template <typename Scalar>
Tensor<Scalar> snn_forward(ParamSet<Scalar>& params, const Tensor<Scalar>& spikes,
                           bool training, const ModelOptions& options,
                           LayerShapes* shapes = nullptr);

/// One-hot targets [N, 10]. Throws std::invalid_argument for labels outside 0..9.
template <typename Scalar>
Tensor<Scalar> one_hot(std::span<const int> labels);

/// Training-mode forward, MSE loss against one-hot targets, and full backward.
/// Gradients are written into the grad buffer of every trainable tensor of
/// `params`; running statistics are updated. `input` is images [N, 1, 32, 32]
/// for the CNN and time-major spikes [T, N, 1, 32, 32] for the SNN.
template <typename Scalar>
Scalar compute_gradients(ParamSet<Scalar>& params, ModelKind kind,
                         const Tensor<Scalar>& input, std::span<const int> labels,
                         const ModelOptions& options);

/// Loss of a training-mode forward pass on a copy of `params` (batch
/// statistics, no gradient); the scalar whose derivative compute_gradients
/// returns. Used by finite-difference checks.
template <typename Scalar>
Scalar training_loss(ParamSet<Scalar> params, ModelKind kind, const Tensor<Scalar>& input,
                     std::span<const int> labels, const ModelOptions& options);

/// Applies param <- param - eta * grad to every trainable tensor.
template <typename Scalar>
void apply_sgd(ParamSet<Scalar>& params, Scalar eta);

struct Batch {
  TensorF images;           // [N, 1, 32, 32] in [0, 1]
  std::vector<int> labels;  // N entries in 0..9
};

/// One local SGD step. For the SNN the images are Poisson-encoded from `rng`
/// first. Returns the batch loss measured before the update.
float train_batch(ParamSetF& params, ModelKind kind, const Batch& batch, float eta,
                  Rng& rng, const ModelOptions& options = {});

/// Predicted class per image: argmax of the CNN output (eval mode) or of the
/// decoded SNN rates, lowest index on ties. SNN inputs are encoded image by
/// image from `rng`.
std::vector<int> predict(const ParamSetF& params, ModelKind kind, const TensorF& images,
                         Rng& rng, const ModelOptions& options = {});

/// Fraction of correctly classified images.
double evaluate(const ParamSetF& params, ModelKind kind, const TensorF& images,
                std::span<const int> labels, Rng& rng, const ModelOptions& options = {});

/// Index of the maximum, lowest index on ties.
template <typename Scalar>
int argmax(std::span<const Scalar> values);

// -- ParamSet container ---------------------------------------------------------
//
// Little-endian layout:
//   "HFPS" | u32 version | u32 record count |
//   per record: u32 name length | name bytes | u32 rank | u32 dims[rank] |
//               float32 values[prod(dims)]

inline constexpr std::uint32_t kParamSetVersion = 1;

void write_paramset(std::ostream& out, const ParamSetF& params);
ParamSetF read_paramset(std::istream& in);

/// Thrown for malformed or incompatible ParamSet / checkpoint files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace hetfed
