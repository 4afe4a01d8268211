#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ensforge/params.hpp"
#include "ensforge/tensor.hpp"

namespace ensforge {

struct NetConfig {
  int input_size = 64;     // square, divisible by 2^depth
  int base_channels = 8;   // channels of the first encoder stage; doubled per stage
  int depth = 2;           // number of pool/unpool stages
  double dropout_rate = 0.25;
  std::uint64_t init_seed = 0;

  /// Throws ConfigError on an impossible size/depth/rate combination.
  void validate() const;
  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

struct PredictMode {
  enum class Kind { deterministic, stochastic };
  Kind kind = Kind::deterministic;
  std::uint64_t dropout_seed = 0;  // only read in stochastic mode

  static PredictMode deterministic() { return {}; }
  static PredictMode stochastic(std::uint64_t seed) { return {Kind::stochastic, seed}; }
  bool is_stochastic() const noexcept { return kind == Kind::stochastic; }
};

/// Inverted spatial-dropout multiplier for one channel of one encoder stage:
/// 0 with probability `rate`, otherwise 1/(1-rate).
double dropout_scale(double rate, std::uint64_t seed, int stage, int channel) noexcept;

template <class T>
struct LossAndGrad {
  double loss = 0.0;  // mean binary cross-entropy over every pixel of the batch
  BasicParamSet<T> grads;
};

/// Micro U-Net on a per-image standardised input: per stage two 3x3 zero-padded convolutions with ReLU,
/// 2x2 max-pool down, nearest 2x up with skip concatenation, 1x1 logistic head.
/// Spatial dropout follows the second convolution of every encoder stage.
///
/// A RefNet holds only the architecture; weights travel separately as
/// ParamSets, so one RefNet can serve any number of concurrent forward passes.
class RefNet {
 public:
  explicit RefNet(NetConfig config);

  const NetConfig& config() const noexcept { return config_; }
  std::uint64_t fingerprint() const noexcept { return fingerprint_; }

  /// He-uniform fan-in initialisation from the config's init_seed; zero
  /// biases and a zero head.
  template <class T>
  BasicParamSet<T> init_params() const;

  /// Returns an HxW probability map with every value strictly inside (0,1).
  template <class T>
  BasicTensor<T> forward(const BasicParamSet<T>& params, const BasicTensor<T>& image, PredictMode mode) const;

  /// Pre-squash logits; same shape as forward().
  template <class T>
  BasicTensor<T> logits(const BasicParamSet<T>& params, const BasicTensor<T>& image, PredictMode mode) const;

  /// Mean pixelwise BCE and its gradient. `modes` is either empty
  /// (deterministic everywhere) or one entry per image.
  template <class T>
  LossAndGrad<T> loss_and_grad(const BasicParamSet<T>& params, std::span<const BasicTensor<T>> images,
                               std::span<const BasicTensor<T>> masks,
                               std::span<const PredictMode> modes = {}) const;

  /// Loss only (no gradient); same conventions as loss_and_grad.
  template <class T>
  double loss(const BasicParamSet<T>& params, std::span<const BasicTensor<T>> images,
              std::span<const BasicTensor<T>> masks, std::span<const PredictMode> modes = {}) const;

  /// Throws CombinabilityError if `params` was not built for this architecture.
  template <class T>
  void check_params(const BasicParamSet<T>& params) const;

 private:
  NetConfig config_;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> layout_;
  std::uint64_t fingerprint_ = 0;
};

/// Momentum SGD: v <- momentum*v + g ; p <- p - lr*v.
template <class T>
void sgd_step(BasicParamSet<T>& params, const BasicParamSet<T>& grads, BasicParamSet<T>& velocity, double lr,
              double momentum);

/// Squashed probabilities are clamped to [kProbFloor, 1 - kProbFloor].
inline constexpr double kProbFloor = 1e-6;
/// Inputs are standardised per image; flat images divide by this instead of 0.
inline constexpr double kInputStdFloor = 1e-3;

}  // namespace ensforge
