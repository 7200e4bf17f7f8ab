#include "tape.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "tdaens/errors.hpp"

namespace tdaens::detail {

namespace {

using Eigen::Index;

MatMap as_mat(DoubleVec& v, std::size_t rows, std::size_t cols) {
  return MatMap(v.data(), static_cast<Index>(rows), static_cast<Index>(cols));
}

ConstMatMap as_mat(const DoubleVec& v, std::size_t rows, std::size_t cols) {
  return ConstMatMap(v.data(), static_cast<Index>(rows), static_cast<Index>(cols));
}

const char* op_name(Op op) {
  switch (op) {
    case Op::MatMulT: return "linear";
    case Op::AddBias: return "bias";
    case Op::Add: return "add";
    case Op::Scale: return "scale";
    case Op::Relu: return "relu";
    case Op::Mult: return "dropout";
    case Op::LayerNorm: return "layer_norm";
    case Op::Embedding: return "embedding";
    case Op::Attention: return "attention";
    case Op::Softmax: return "softmax";
    default: return "value";
  }
}

}  // namespace

int Tape::push(Node n) {
  if (n.op != Op::Param && !all_finite(n.value))
    throw NumericError(std::string("non-finite activation produced by ") + op_name(n.op));
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size() - 1);
}

ConstMatMap Tape::value(int id) const {
  const Node& n = node(id);
  const double* p = n.op == Op::Param ? n.ext : n.value.data();
  return ConstMatMap(p, static_cast<Index>(n.rows), static_cast<Index>(n.cols));
}

Tensor2 Tape::value_tensor(int id) const {
  const Node& n = node(id);
  Tensor2 t(n.rows, n.cols);
  t.mat() = value(id);
  return t;
}

int Tape::param(const double* data, std::size_t rows, std::size_t cols, long grad_offset) {
  Node n;
  n.op = Op::Param;
  n.rows = rows;
  n.cols = cols;
  n.ext = data;
  n.grad_offset = grad_offset;
  n.active = grad_offset >= 0;
  return push(std::move(n));
}

int Tape::constant(Tensor2 t) {
  Node n;
  n.op = Op::Const;
  n.rows = t.rows;
  n.cols = t.cols;
  n.value = std::move(t.data);
  return push(std::move(n));
}

int Tape::matmul_t(int x, int w) {
  const Node& nx = node(x);
  const Node& nw = node(w);
  if (nx.cols != nw.cols)
    throw ShapeError("linear: input width " + std::to_string(nx.cols) + " != weight width " + std::to_string(nw.cols));
  Node n;
  n.op = Op::MatMulT;
  n.rows = nx.rows;
  n.cols = nw.rows;
  n.a = x;
  n.b = w;
  n.active = active(x) || active(w);
  n.value.resize(n.rows * n.cols);
  as_mat(n.value, n.rows, n.cols).noalias() = value(x) * value(w).transpose();
  return push(std::move(n));
}

int Tape::add_bias(int y, int b) {
  const Node& ny = node(y);
  const Node& nb = node(b);
  if (nb.rows != 1 || nb.cols != ny.cols) throw ShapeError("bias width mismatch");
  Node n;
  n.op = Op::AddBias;
  n.rows = ny.rows;
  n.cols = ny.cols;
  n.a = y;
  n.b = b;
  n.active = active(y) || active(b);
  n.value.resize(n.rows * n.cols);
  as_mat(n.value, n.rows, n.cols) = value(y).rowwise() + value(b).row(0);
  return push(std::move(n));
}

int Tape::add(int a, int b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.rows != nb.rows || na.cols != nb.cols) throw ShapeError("add: shape mismatch");
  Node n;
  n.op = Op::Add;
  n.rows = na.rows;
  n.cols = na.cols;
  n.a = a;
  n.b = b;
  n.active = active(a) || active(b);
  n.value.resize(n.rows * n.cols);
  as_mat(n.value, n.rows, n.cols) = value(a) + value(b);
  return push(std::move(n));
}

int Tape::scale(int a, double s) {
  const Node& na = node(a);
  Node n;
  n.op = Op::Scale;
  n.rows = na.rows;
  n.cols = na.cols;
  n.a = a;
  n.scalar = s;
  n.active = active(a);
  n.value.resize(n.rows * n.cols);
  as_mat(n.value, n.rows, n.cols) = value(a) * s;
  return push(std::move(n));
}

int Tape::relu(int x) {
  const Node& nx = node(x);
  Node n;
  n.op = Op::Relu;
  n.rows = nx.rows;
  n.cols = nx.cols;
  n.a = x;
  n.active = active(x);
  n.value.resize(n.rows * n.cols);
  as_mat(n.value, n.rows, n.cols) = value(x).cwiseMax(0.0);
  return push(std::move(n));
}

int Tape::mult(int x, DoubleVec multipliers) {
  const Node& nx = node(x);
  if (multipliers.size() != nx.rows * nx.cols) throw ShapeError("dropout multiplier size mismatch");
  Node n;
  n.op = Op::Mult;
  n.rows = nx.rows;
  n.cols = nx.cols;
  n.a = x;
  n.active = active(x);
  n.aux = std::move(multipliers);
  n.value.resize(n.rows * n.cols);
  as_mat(n.value, n.rows, n.cols) = value(x).cwiseProduct(as_mat(n.aux, n.rows, n.cols));
  return push(std::move(n));
}

int Tape::layer_norm(int x, int gamma, int beta, double eps) {
  const Node& nx = node(x);
  if (node(gamma).cols != nx.cols || node(beta).cols != nx.cols) throw ShapeError("layer_norm width mismatch");
  Node n;
  n.op = Op::LayerNorm;
  n.rows = nx.rows;
  n.cols = nx.cols;
  n.a = x;
  n.b = gamma;
  n.c = beta;
  n.active = active(x) || active(gamma) || active(beta);
  n.value.resize(n.rows * n.cols);
  n.aux.resize(n.rows);
  n.aux2.resize(n.rows * n.cols);
  auto xv = value(x);
  auto g = value(gamma).row(0);
  auto bt = value(beta).row(0);
  auto xhat = as_mat(n.aux2, n.rows, n.cols);
  auto out = as_mat(n.value, n.rows, n.cols);
  const double d = static_cast<double>(n.cols);
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).sum() / d;
    const double var = (xv.row(r).array() - mean).square().sum() / d;
    const double inv_sigma = 1.0 / std::sqrt(var + eps);
    n.aux[static_cast<std::size_t>(r)] = inv_sigma;
    xhat.row(r) = (xv.row(r).array() - mean) * inv_sigma;
    out.row(r) = xhat.row(r).cwiseProduct(g) + bt;
  }
  return push(std::move(n));
}

int Tape::embedding(std::vector<int> tokens, std::size_t seq, int tok, int pos) {
  const Node& nt = node(tok);
  const Node& np = node(pos);
  if (seq == 0 || tokens.size() % seq != 0) throw ShapeError("embedding: token count not a multiple of sequence length");
  if (seq > np.rows) throw ShapeError("sequence longer than the positional table");
  Node n;
  n.op = Op::Embedding;
  n.rows = tokens.size();
  n.cols = nt.cols;
  n.a = tok;
  n.b = pos;
  n.seq = seq;
  n.active = active(tok) || active(pos);
  n.value.resize(n.rows * n.cols);
  auto out = as_mat(n.value, n.rows, n.cols);
  auto tv = value(tok);
  auto pv = value(pos);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    const int t = tokens[r];
    if (t < 0 || static_cast<std::size_t>(t) >= nt.rows) throw ShapeError("token id out of vocabulary range");
    out.row(static_cast<Index>(r)) = tv.row(t) + pv.row(static_cast<Index>(r % seq));
  }
  n.tokens = std::move(tokens);
  return push(std::move(n));
}

int Tape::attention(int q, int k, int v, std::size_t heads, std::size_t seq) {
  const Node& nq = node(q);
  if (node(k).rows != nq.rows || node(v).rows != nq.rows || node(k).cols != nq.cols || node(v).cols != nq.cols)
    throw ShapeError("attention: q/k/v shape mismatch");
  if (heads == 0 || nq.cols % heads != 0) throw ShapeError("attention: width not divisible by heads");
  if (seq == 0 || nq.rows % seq != 0) throw ShapeError("attention: rows not a multiple of sequence length");
  Node n;
  n.op = Op::Attention;
  n.rows = nq.rows;
  n.cols = nq.cols;
  n.a = q;
  n.b = k;
  n.c = v;
  n.heads = heads;
  n.seq = seq;
  n.active = active(q) || active(k) || active(v);
  const std::size_t groups = n.rows / seq;
  const std::size_t dh = n.cols / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  n.value.assign(n.rows * n.cols, 0.0);
  n.aux.assign(groups * heads * seq * seq, 0.0);
  auto qv = value(q);
  auto kv = value(k);
  auto vv = value(v);
  auto out = as_mat(n.value, n.rows, n.cols);
  const auto S = static_cast<Index>(seq);
  const auto Dh = static_cast<Index>(dh);
  for (std::size_t g = 0; g < groups; ++g) {
    const auto r0 = static_cast<Index>(g * seq);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Index>(h * dh);
      MatMap P(n.aux.data() + (g * heads + h) * seq * seq, S, S);
      P.noalias() = qv.block(r0, c0, S, Dh) * kv.block(r0, c0, S, Dh).transpose() * scale;
      for (Index i = 0; i < S; ++i) {
        const double mx = P.row(i).head(i + 1).maxCoeff();
        double sum = 0.0;
        for (Index j = 0; j <= i; ++j) {
          P(i, j) = std::exp(P(i, j) - mx);
          sum += P(i, j);
        }
        for (Index j = 0; j <= i; ++j) P(i, j) /= sum;
        for (Index j = i + 1; j < S; ++j) P(i, j) = 0.0;
      }
      out.block(r0, c0, S, Dh).noalias() = P * vv.block(r0, c0, S, Dh);
    }
  }
  return push(std::move(n));
}

int Tape::softmax(int x) {
  const Node& nx = node(x);
  Node n;
  n.op = Op::Softmax;
  n.rows = nx.rows;
  n.cols = nx.cols;
  n.a = x;
  n.active = active(x);
  n.value.resize(n.rows * n.cols);
  auto xv = value(x);
  auto out = as_mat(n.value, n.rows, n.cols);
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mx = xv.row(r).maxCoeff();
    out.row(r) = (xv.row(r).array() - mx).exp();
    out.row(r) /= out.row(r).sum();
  }
  return push(std::move(n));
}

void Tape::backward(int out, const Tensor2& seed, std::span<double> grad) const {
  const Node& no = node(out);
  if (seed.rows != no.rows || seed.cols != no.cols) throw ShapeError("backward: seed shape mismatch");
  if (!no.active) return;
  std::vector<DoubleVec> grads(nodes_.size());
  grads[static_cast<std::size_t>(out)] = seed.data;

  auto grad_of = [&](int id) -> MatMap {
    auto& g = grads[static_cast<std::size_t>(id)];
    const Node& n = node(id);
    if (g.empty()) g.assign(n.rows * n.cols, 0.0);
    return as_mat(g, n.rows, n.cols);
  };

  for (int id = out; id >= 0; --id) {
    const Node& n = node(id);
    auto& gv = grads[static_cast<std::size_t>(id)];
    if (gv.empty() || !n.active) continue;
    ConstMatMap dy = as_mat(std::as_const(gv), n.rows, n.cols);
    switch (n.op) {
      case Op::Param: {
        auto* dst = grad.data() + n.grad_offset;
        for (std::size_t i = 0; i < gv.size(); ++i) dst[i] += gv[i];
        break;
      }
      case Op::Const:
        break;
      case Op::MatMulT:
        if (active(n.a)) grad_of(n.a).noalias() += dy * value(n.b);
        if (active(n.b)) grad_of(n.b).noalias() += dy.transpose() * value(n.a);
        break;
      case Op::AddBias:
        if (active(n.a)) grad_of(n.a) += dy;
        if (active(n.b)) grad_of(n.b).row(0) += dy.colwise().sum();
        break;
      case Op::Add:
        if (active(n.a)) grad_of(n.a) += dy;
        if (active(n.b)) grad_of(n.b) += dy;
        break;
      case Op::Scale:
        grad_of(n.a) += dy * n.scalar;
        break;
      case Op::Relu: {
        auto y = as_mat(n.value, n.rows, n.cols);
        grad_of(n.a) += (y.array() > 0.0).select(dy, 0.0);
        break;
      }
      case Op::Mult:
        grad_of(n.a) += dy.cwiseProduct(as_mat(n.aux, n.rows, n.cols));
        break;
      case Op::LayerNorm: {
        auto xhat = as_mat(n.aux2, n.rows, n.cols);
        auto gamma = value(n.b).row(0);
        if (active(n.b)) grad_of(n.b).row(0) += dy.cwiseProduct(xhat).colwise().sum();
        if (active(n.c)) grad_of(n.c).row(0) += dy.colwise().sum();
        if (active(n.a)) {
          auto dx = grad_of(n.a);
          const double d = static_cast<double>(n.cols);
          for (Index r = 0; r < dy.rows(); ++r) {
            Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(gamma);
            const double m1 = dxhat.sum() / d;
            const double m2 = dxhat.dot(xhat.row(r)) / d;
            dx.row(r) += n.aux[static_cast<std::size_t>(r)] * (dxhat.array() - m1 - xhat.row(r).array() * m2).matrix();
          }
        }
        break;
      }
      case Op::Embedding: {
        if (active(n.a)) {
          auto dt = grad_of(n.a);
          for (std::size_t r = 0; r < n.rows; ++r) dt.row(n.tokens[r]) += dy.row(static_cast<Index>(r));
        }
        if (active(n.b)) {
          auto dp = grad_of(n.b);
          for (std::size_t r = 0; r < n.rows; ++r) dp.row(static_cast<Index>(r % n.seq)) += dy.row(static_cast<Index>(r));
        }
        break;
      }
      case Op::Attention: {
        const std::size_t groups = n.rows / n.seq;
        const std::size_t dh = n.cols / n.heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        const auto S = static_cast<Index>(n.seq);
        const auto Dh = static_cast<Index>(dh);
        auto qv = value(n.a);
        auto kv = value(n.b);
        auto vv = value(n.c);
        const bool aq = active(n.a), ak = active(n.b), av = active(n.c);
        for (std::size_t g = 0; g < groups; ++g) {
          const auto r0 = static_cast<Index>(g * n.seq);
          for (std::size_t h = 0; h < n.heads; ++h) {
            const auto c0 = static_cast<Index>(h * dh);
            ConstMatMap P(n.aux.data() + (g * n.heads + h) * n.seq * n.seq, S, S);
            auto dO = dy.block(r0, c0, S, Dh);
            if (av) grad_of(n.c).block(r0, c0, S, Dh).noalias() += P.transpose() * dO;
            if (aq || ak) {
              RowMatrix dP = dO * vv.block(r0, c0, S, Dh).transpose();
              Eigen::VectorXd rs = dP.cwiseProduct(P).rowwise().sum();
              RowMatrix dS = P.cwiseProduct(dP.colwise() - rs) * scale;
              if (aq) grad_of(n.a).block(r0, c0, S, Dh).noalias() += dS * kv.block(r0, c0, S, Dh);
              if (ak) grad_of(n.b).block(r0, c0, S, Dh).noalias() += dS.transpose() * qv.block(r0, c0, S, Dh);
            }
          }
        }
        break;
      }
      case Op::Softmax: {
        auto y = as_mat(n.value, n.rows, n.cols);
        Eigen::VectorXd rs = dy.cwiseProduct(y).rowwise().sum();
        grad_of(n.a) += y.cwiseProduct(dy.colwise() - rs);
        break;
      }
    }
    if (id != out) {
      gv.clear();
      gv.shrink_to_fit();
    }
  }
}

Tensor2 Tape::jvp(int out, std::span<const double> tangent) const {
  std::vector<DoubleVec> tan(nodes_.size());
  auto has = [&](int id) { return id >= 0 && !tan[static_cast<std::size_t>(id)].empty(); };
  auto t_of = [&](int id) -> ConstMatMap {
    const Node& n = node(id);
    return as_mat(std::as_const(tan[static_cast<std::size_t>(id)]), n.rows, n.cols);
  };

  for (int id = 0; id <= out; ++id) {
    const Node& n = node(id);
    if (!n.active) continue;
    auto& tv = tan[static_cast<std::size_t>(id)];
    if (n.op == Op::Param) {
      if (static_cast<std::size_t>(n.grad_offset) + n.rows * n.cols > tangent.size())
        throw ShapeError("jvp: tangent shorter than gradient layout");
      tv.assign(tangent.begin() + n.grad_offset, tangent.begin() + n.grad_offset + static_cast<long>(n.rows * n.cols));
      continue;
    }
    tv.assign(n.rows * n.cols, 0.0);
    auto t = as_mat(tv, n.rows, n.cols);
    switch (n.op) {
      case Op::MatMulT:
        if (has(n.a)) t.noalias() += t_of(n.a) * value(n.b).transpose();
        if (has(n.b)) t.noalias() += value(n.a) * t_of(n.b).transpose();
        break;
      case Op::AddBias:
        if (has(n.a)) t += t_of(n.a);
        if (has(n.b)) t.rowwise() += t_of(n.b).row(0);
        break;
      case Op::Add:
        if (has(n.a)) t += t_of(n.a);
        if (has(n.b)) t += t_of(n.b);
        break;
      case Op::Scale:
        if (has(n.a)) t = t_of(n.a) * n.scalar;
        break;
      case Op::Relu:
        if (has(n.a)) t = (as_mat(n.value, n.rows, n.cols).array() > 0.0).select(t_of(n.a), 0.0);
        break;
      case Op::Mult:
        if (has(n.a)) t = t_of(n.a).cwiseProduct(as_mat(n.aux, n.rows, n.cols));
        break;
      case Op::LayerNorm: {
        auto xhat = as_mat(n.aux2, n.rows, n.cols);
        auto gamma = value(n.b).row(0);
        if (has(n.a)) {
          auto tx = t_of(n.a);
          const double d = static_cast<double>(n.cols);
          for (Index r = 0; r < t.rows(); ++r) {
            const double m1 = tx.row(r).sum() / d;
            const double m2 = tx.row(r).dot(xhat.row(r)) / d;
            Eigen::RowVectorXd txhat =
                n.aux[static_cast<std::size_t>(r)] * (tx.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
            t.row(r) += txhat.cwiseProduct(gamma);
          }
        }
        if (has(n.b)) t.array() += xhat.array().rowwise() * t_of(n.b).row(0).array();
        if (has(n.c)) t.rowwise() += t_of(n.c).row(0);
        break;
      }
      case Op::Embedding:
        for (std::size_t r = 0; r < n.rows; ++r) {
          if (has(n.a)) t.row(static_cast<Index>(r)) += t_of(n.a).row(n.tokens[r]);
          if (has(n.b)) t.row(static_cast<Index>(r)) += t_of(n.b).row(static_cast<Index>(r % n.seq));
        }
        break;
      case Op::Attention: {
        const std::size_t groups = n.rows / n.seq;
        const std::size_t dh = n.cols / n.heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        const auto S = static_cast<Index>(n.seq);
        const auto Dh = static_cast<Index>(dh);
        auto qv = value(n.a);
        auto kv = value(n.b);
        auto vv = value(n.c);
        for (std::size_t g = 0; g < groups; ++g) {
          const auto r0 = static_cast<Index>(g * n.seq);
          for (std::size_t h = 0; h < n.heads; ++h) {
            const auto c0 = static_cast<Index>(h * dh);
            ConstMatMap P(n.aux.data() + (g * n.heads + h) * n.seq * n.seq, S, S);
            RowMatrix tS = RowMatrix::Zero(S, S);
            if (has(n.a)) tS.noalias() += t_of(n.a).block(r0, c0, S, Dh) * kv.block(r0, c0, S, Dh).transpose();
            if (has(n.b)) tS.noalias() += qv.block(r0, c0, S, Dh) * t_of(n.b).block(r0, c0, S, Dh).transpose();
            tS *= scale;
            Eigen::VectorXd rs = P.cwiseProduct(tS).rowwise().sum();
            RowMatrix tP = P.cwiseProduct(tS.colwise() - rs);
            auto tO = t.block(r0, c0, S, Dh);
            tO.noalias() += tP * vv.block(r0, c0, S, Dh);
            if (has(n.c)) tO.noalias() += P * t_of(n.c).block(r0, c0, S, Dh);
          }
        }
        break;
      }
      case Op::Softmax:
        if (has(n.a)) {
          auto y = as_mat(n.value, n.rows, n.cols);
          Eigen::VectorXd rs = t_of(n.a).cwiseProduct(y).rowwise().sum();
          t = y.cwiseProduct(t_of(n.a).colwise() - rs);
        }
        break;
      case Op::Param:
      case Op::Const:
        break;
    }
  }
  Tensor2 result(node(out).rows, node(out).cols);
  if (has(out)) result.data = tan[static_cast<std::size_t>(out)];
  return result;
}

}  // namespace tdaens::detail
