#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "tdaens/nn/dropout_mask.hpp"
#include "tdaens/nn/lora.hpp"
#include "tdaens/nn/model_spec.hpp"
#include "tdaens/tensor.hpp"

namespace tdaens {

namespace detail {
class Tape;
}

enum class Mode {
  Train,       // dropout draws a fresh per-element pattern keyed by ForwardOptions::train_key
  Eval,        // dropout is the identity
  MaskedEval,  // dropout applies ForwardOptions::mask per unit
};

struct ForwardOptions {
  Mode mode = Mode::Eval;
  const DropoutMask* mask = nullptr;
  std::span<const LoraAdapter> adapters = {};
  std::uint64_t train_key = 0;
};

/// Which parameters gradients are taken with respect to.
enum class GradSpace {
  None,         // forward only
  Full,         // every base-model parameter, in ParamVector layout
  AdapterOnly,  // adapter parameters only, in flatten_adapters() layout
};

/// A recorded forward pass. Holds pointers into `params` and the adapters in
/// `opts`; it must not outlive them.
class ForwardTrace {
 public:
  ForwardTrace(const ModelSpec& spec, const ParamVector& params, const Tensor2& inputs, const ForwardOptions& opts,
               GradSpace space);
  ForwardTrace(ForwardTrace&&) noexcept;
  ForwardTrace& operator=(ForwardTrace&&) noexcept;
  ~ForwardTrace();

  const Tensor2& logits() const { return logits_; }
  std::size_t grad_dim() const { return grad_dim_; }

  /// Gradient of sum(seed .* logits); `grad` is accumulated into.
  void backward(const Tensor2& seed, std::span<double> grad) const;
  std::vector<double> backward(const Tensor2& seed) const;

  /// Logit tangent along a parameter-space direction (gradient layout).
  Tensor2 jvp(std::span<const double> tangent) const;

 private:
  std::unique_ptr<detail::Tape> tape_;
  int out_ = -1;
  Tensor2 logits_;
  std::size_t grad_dim_ = 0;
};

/// Output logits for a batch. For TinyTransformer the batch holds token ids
/// (one sequence per row) and the result has one row per position.
Tensor2 forward(const ModelSpec& spec, const ParamVector& params, const Tensor2& batch, const ForwardOptions& opts = {});

/// Scalar model-output functions on logits, evaluated per output row.
enum class OutputFnKind {
  Loss,           // cross-entropy
  LogLikelihood,  // log p_correct
  Margin,         // log p_correct - log(1 - p_correct)
};

struct OutputValue {
  double value = 0.0;  // mean over rows
  Tensor2 dlogits;     // d value / d logits
};

OutputValue evaluate_output(const Tensor2& logits, std::span<const int> targets, OutputFnKind kind);

/// Row-wise probability of the target class.
std::vector<double> correct_class_probability(const Tensor2& logits, std::span<const int> targets);

/// Gradient of the chosen output function of one sample (one input row and
/// its targets) with respect to the parameters selected by `space`.
std::vector<double> per_sample_grad(const ModelSpec& spec, const ParamVector& params, const Tensor2& sample,
                                    std::span<const int> targets, OutputFnKind output_fn, const ForwardOptions& opts = {},
                                    GradSpace space = GradSpace::Full);

}  // namespace tdaens
