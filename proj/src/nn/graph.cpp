#include "tdaens/nn/graph.hpp"

#include <cmath>
#include <string>

#include "tape.hpp"
#include "tdaens/errors.hpp"
#include "tdaens/rng.hpp"

namespace tdaens {

namespace {

constexpr double kLayerNormEps = 1e-5;

// Builds the tape for one batch. Gradient offsets follow either the base
// ParamVector layout or the adapter layout depending on `space`.
class GraphBuilder {
 public:
  GraphBuilder(detail::Tape& tape, const ModelSpec& spec, const ParamVector& params, const ForwardOptions& opts,
               GradSpace space)
      : tape_(tape), spec_(spec), params_(params), opts_(opts), space_(space) {
    if (params.size() != params.layout.total) throw ShapeError("parameter vector does not match its layout");
    if ((opts.mode == Mode::MaskedEval) != (opts.mask != nullptr))
      throw MaskError("a dropout mask must be supplied exactly when mode is MaskedEval");
    std::size_t offset = 0;
    for (const auto& a : opts.adapters) {
      const LayerSpec* l = spec.try_layer(a.target_layer);
      if (l == nullptr || l->kind != LayerKind::Linear)
        throw NameError("adapter target '" + a.target_layer + "' is not a Linear layer");
      if (a.A.rows != a.rank || a.A.cols != l->in_dim || a.B.rows != l->out_dim || a.B.cols != a.rank ||
          (!a.bias_delta.empty() && a.bias_delta.size() != l->out_dim))
        throw ShapeError("adapter for '" + a.target_layer + "' has the wrong shape");
      adapter_offsets_.push_back(offset);
      offset += a.param_count();
    }
    grad_dim_ = space == GradSpace::Full ? params.size() : space == GradSpace::AdapterOnly ? offset : 0;
  }

  std::size_t grad_dim() const { return grad_dim_; }

  int build(const Tensor2& batch) {
    return spec_.arch == Arch::Mlp ? build_sequential(batch) : build_transformer(batch);
  }

 private:
  long base_offset(const ParamEntry& e) const { return space_ == GradSpace::Full ? static_cast<long>(e.offset) : -1; }

  int base_param(const std::string& layer, const char* name) {
    const ParamEntry& e = params_.layout.find(layer, name);
    return tape_.param(params_.ptr(e), e.rows, e.cols, base_offset(e));
  }

  int linear(const LayerSpec& l, int x) {
    const int w = base_param(l.name, "W");
    int bias = base_param(l.name, "b");
    int y = tape_.matmul_t(x, w);
    for (std::size_t i = 0; i < opts_.adapters.size(); ++i) {
      const LoraAdapter& a = opts_.adapters[i];
      if (a.target_layer != l.name) continue;
      const bool train = space_ == GradSpace::AdapterOnly;
      long off = static_cast<long>(adapter_offsets_[i]);
      const int A = tape_.param(a.A.data.data(), a.A.rows, a.A.cols, train ? off : -1);
      off += static_cast<long>(a.A.size());
      const int B = tape_.param(a.B.data.data(), a.B.rows, a.B.cols, train ? off : -1);
      off += static_cast<long>(a.B.size());
      const int low = tape_.matmul_t(tape_.matmul_t(x, A), B);
      y = tape_.add(y, tape_.scale(low, a.scaling()));
      if (!a.bias_delta.empty()) {
        const int bd = tape_.param(a.bias_delta.data(), 1, a.bias_delta.size(), train ? off : -1);
        bias = tape_.add(bias, bd);
      }
    }
    return tape_.add_bias(y, bias);
  }

  int dropout(const LayerSpec& l, int x) {
    const auto& n = tape_.node(x);
    switch (opts_.mode) {
      case Mode::Eval:
        return x;
      case Mode::Train: {
        if (l.dropout_rate == 0.0) return x;
        const double keep = 1.0 / (1.0 - l.dropout_rate);
        const std::uint64_t layer_key = hash_key({opts_.train_key, hash_string(l.name)});
        DoubleVec m(n.rows * n.cols);
        for (std::size_t i = 0; i < m.size(); ++i)
          m[i] = uniform01(hash_key({layer_key, i})) >= l.dropout_rate ? keep : 0.0;
        return tape_.mult(x, std::move(m));
      }
      case Mode::MaskedEval: {
        const auto it = opts_.mask->bits.find(l.name);
        if (it == opts_.mask->bits.end()) throw MaskError("mask has no entry for dropout layer '" + l.name + "'");
        if (it->second.size() != n.cols)
          throw MaskError("mask for '" + l.name + "' has " + std::to_string(it->second.size()) + " bits, layer width is " +
                          std::to_string(n.cols));
        const double keep = opts_.mask->keep_scale();
        DoubleVec m(n.rows * n.cols);
        for (std::size_t r = 0; r < n.rows; ++r)
          for (std::size_t c = 0; c < n.cols; ++c) m[r * n.cols + c] = it->second[c] ? keep : 0.0;
        return tape_.mult(x, std::move(m));
      }
    }
    return x;
  }

  int layer_norm(const LayerSpec& l, int x) {
    return tape_.layer_norm(x, base_param(l.name, "gamma"), base_param(l.name, "beta"), kLayerNormEps);
  }

  int apply(const LayerSpec& l, int x) {
    switch (l.kind) {
      case LayerKind::Linear: return linear(l, x);
      case LayerKind::ReLU: return tape_.relu(x);
      case LayerKind::Dropout: return dropout(l, x);
      case LayerKind::Softmax: return tape_.softmax(x);
      case LayerKind::LayerNorm: return layer_norm(l, x);
      default: throw ArgumentError("layer kind " + std::string(to_string(l.kind)) + " cannot be applied sequentially");
    }
  }

  int build_sequential(const Tensor2& batch) {
    if (batch.cols != spec_.input_dim)
      throw ShapeError("input has " + std::to_string(batch.cols) + " columns, model expects " +
                       std::to_string(spec_.input_dim));
    int x = tape_.constant(batch);
    for (const auto& l : spec_.layers) x = apply(l, x);
    return x;
  }

  int build_transformer(const Tensor2& batch) {
    const std::size_t seq = batch.cols;
    if (seq == 0 || seq > spec_.context_len)
      throw ShapeError("sequence length " + std::to_string(seq) + " outside [1, context_len]");
    std::vector<int> tokens(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const double t = batch.data[i];
      if (t != std::floor(t) || t < 0 || t >= static_cast<double>(spec_.vocab_size))
        throw ShapeError("token ids must be integers in [0, vocab_size)");
      tokens[i] = static_cast<int>(t);
    }
    const LayerSpec& emb = spec_.layer("embed");
    int x = tape_.embedding(std::move(tokens), seq, base_param(emb.name, "tok"), base_param(emb.name, "pos"));
    for (std::size_t i = 0; i < spec_.n_layers; ++i) {
      const std::string p = "layer" + std::to_string(i) + ".";
      const int h = layer_norm(spec_.layer(p + "ln1"), x);
      const int q = linear(spec_.layer(p + "Wq"), h);
      const int k = linear(spec_.layer(p + "Wk"), h);
      const int v = linear(spec_.layer(p + "Wv"), h);
      const int att = tape_.attention(q, k, v, spec_.layer(p + "attn").heads, seq);
      int o = linear(spec_.layer(p + "Wo"), att);
      o = dropout(spec_.layer(p + "drop1"), o);
      x = tape_.add(x, o);
      const int h2 = layer_norm(spec_.layer(p + "ln2"), x);
      int f = linear(spec_.layer(p + "ff1"), h2);
      f = tape_.relu(f);
      f = linear(spec_.layer(p + "ff2"), f);
      f = dropout(spec_.layer(p + "drop2"), f);
      x = tape_.add(x, f);
    }
    x = layer_norm(spec_.layer("ln_f"), x);
    return linear(spec_.layer("head"), x);
  }

  detail::Tape& tape_;
  const ModelSpec& spec_;
  const ParamVector& params_;
  const ForwardOptions& opts_;
  GradSpace space_;
  std::vector<std::size_t> adapter_offsets_;
  std::size_t grad_dim_ = 0;
};

}  // namespace

ForwardTrace::ForwardTrace(const ModelSpec& spec, const ParamVector& params, const Tensor2& inputs,
                           const ForwardOptions& opts, GradSpace space)
    : tape_(std::make_unique<detail::Tape>()) {
  GraphBuilder builder(*tape_, spec, params, opts, space);
  out_ = builder.build(inputs);
  grad_dim_ = builder.grad_dim();
  logits_ = tape_->value_tensor(out_);
}

ForwardTrace::ForwardTrace(ForwardTrace&&) noexcept = default;
ForwardTrace& ForwardTrace::operator=(ForwardTrace&&) noexcept = default;
ForwardTrace::~ForwardTrace() = default;

void ForwardTrace::backward(const Tensor2& seed, std::span<double> grad) const {
  if (grad.size() != grad_dim_) throw ShapeError("gradient buffer has the wrong length");
  tape_->backward(out_, seed, grad);
}

std::vector<double> ForwardTrace::backward(const Tensor2& seed) const {
  std::vector<double> g(grad_dim_, 0.0);
  backward(seed, g);
  if (!all_finite(g)) throw NumericError("non-finite gradient");
  return g;
}

Tensor2 ForwardTrace::jvp(std::span<const double> tangent) const {
  if (tangent.size() != grad_dim_) throw ShapeError("tangent has the wrong length");
  return tape_->jvp(out_, tangent);
}

Tensor2 forward(const ModelSpec& spec, const ParamVector& params, const Tensor2& batch, const ForwardOptions& opts) {
  return ForwardTrace(spec, params, batch, opts, GradSpace::None).logits();
}

OutputValue evaluate_output(const Tensor2& logits, std::span<const int> targets, OutputFnKind kind) {
  if (targets.size() != logits.rows) throw ShapeError("one target per logit row required");
  if (logits.cols < 2) throw ArgumentError("output functions need at least two classes");
  OutputValue out{0.0, Tensor2(logits.rows, logits.cols)};
  const double inv_rows = 1.0 / static_cast<double>(logits.rows);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const auto z = logits.row(r);
    const int y = targets[r];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols) throw ShapeError("target out of range");
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    auto d = out.dlogits.row(r);
    switch (kind) {
      case OutputFnKind::Loss:
      case OutputFnKind::LogLikelihood: {
        const double sign = kind == OutputFnKind::Loss ? 1.0 : -1.0;
        out.value += sign * (lse - z[y]);
        for (std::size_t c = 0; c < z.size(); ++c)
          d[c] = sign * (std::exp(z[c] - lse) - (static_cast<int>(c) == y ? 1.0 : 0.0)) * inv_rows;
        break;
      }
      case OutputFnKind::Margin: {
        // log p_y - log(1 - p_y) = z_y - logsumexp_{c != y} z_c
        double mo = -INFINITY;
        for (std::size_t c = 0; c < z.size(); ++c)
          if (static_cast<int>(c) != y) mo = std::max(mo, z[c]);
        double so = 0.0;
        for (std::size_t c = 0; c < z.size(); ++c)
          if (static_cast<int>(c) != y) so += std::exp(z[c] - mo);
        const double lse_other = mo + std::log(so);
        out.value += z[y] - lse_other;
        for (std::size_t c = 0; c < z.size(); ++c)
          d[c] = (static_cast<int>(c) == y ? 1.0 : -std::exp(z[c] - lse_other)) * inv_rows;
        break;
      }
    }
  }
  out.value *= inv_rows;
  if (!std::isfinite(out.value)) throw NumericError("non-finite model output");
  return out;
}

std::vector<double> correct_class_probability(const Tensor2& logits, std::span<const int> targets) {
  if (targets.size() != logits.rows) throw ShapeError("one target per logit row required");
  std::vector<double> p(logits.rows);
  for (std::size_t r = 0; r < logits.rows; ++r) {
    const auto z = logits.row(r);
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - mx);
    p[r] = std::exp(z[static_cast<std::size_t>(targets[r])] - mx) / sum;
  }
  return p;
}

std::vector<double> per_sample_grad(const ModelSpec& spec, const ParamVector& params, const Tensor2& sample,
                                    std::span<const int> targets, OutputFnKind output_fn, const ForwardOptions& opts,
                                    GradSpace space) {
  if (sample.rows != 1) throw ShapeError("per_sample_grad takes exactly one input row");
  ForwardTrace trace(spec, params, sample, opts, space);
  return trace.backward(evaluate_output(trace.logits(), targets, output_fn).dlogits);
}

}  // namespace tdaens
