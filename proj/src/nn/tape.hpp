#pragma once

// Reverse-mode (and forward-tangent) evaluation tape over the fixed op
// vocabulary the models use. Internal to the library.

#include <cstddef>
#include <span>
#include <vector>

#include "tdaens/tensor.hpp"

namespace tdaens::detail {

enum class Op { Param, Const, MatMulT, AddBias, Add, Scale, Relu, Mult, LayerNorm, Embedding, Attention, Softmax };

struct Node {
  Op op = Op::Const;
  std::size_t rows = 0;
  std::size_t cols = 0;
  DoubleVec value;    // unused by Param nodes
  const double* ext = nullptr;  // Param: borrowed storage
  long grad_offset = -1;        // Param: slot in the gradient vector, -1 when frozen
  int a = -1, b = -1, c = -1;
  bool active = false;          // depends on at least one non-frozen parameter
  double scalar = 0.0;
  DoubleVec aux;      // Mult: multipliers; LayerNorm: 1/sigma per row; Attention: probabilities
  DoubleVec aux2;     // LayerNorm: normalized input
  std::vector<int> tokens;      // Embedding
  std::size_t heads = 0;
  std::size_t seq = 0;
};

class Tape {
 public:
  int param(const double* data, std::size_t rows, std::size_t cols, long grad_offset);
  int constant(Tensor2 t);

  int matmul_t(int x, int w);  // x W^T
  int add_bias(int y, int b);  // broadcast a 1 x cols row over y
  int add(int a, int b);
  int scale(int a, double s);
  int relu(int x);
  int mult(int x, DoubleVec multipliers);
  int layer_norm(int x, int gamma, int beta, double eps);
  int embedding(std::vector<int> tokens, std::size_t seq, int tok, int pos);
  int attention(int q, int k, int v, std::size_t heads, std::size_t seq);
  int softmax(int x);

  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  ConstMatMap value(int id) const;
  Tensor2 value_tensor(int id) const;

  /// Accumulates d<seed, out>/d(params) into `grad` at each parameter's offset.
  void backward(int out, const Tensor2& seed, std::span<double> grad) const;

  /// Directional derivative of `out` along `tangent` (laid out like the gradient).
  Tensor2 jvp(int out, std::span<const double> tangent) const;

 private:
  int push(Node n);
  bool active(int id) const { return id >= 0 && nodes_[static_cast<std::size_t>(id)].active; }

  std::vector<Node> nodes_;
};

}  // namespace tdaens::detail
