#include "tdaens/tda.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "gauss_newton.hpp"
#include "tdaens/cg.hpp"
#include "tdaens/errors.hpp"
#include "tdaens/parallel.hpp"
#include "tdaens/rng.hpp"

namespace tdaens {

namespace {

constexpr std::size_t kMaxChunkRows = 256;                  // forward-only batches
constexpr std::size_t kChunkBudget = std::size_t{1} << 27;  // doubles held by one gradient chunk (1 GiB)
constexpr std::size_t kProjBlock = 64;

std::size_t chunk_rows(std::size_t p) { return std::max<std::size_t>(1, kChunkBudget / std::max<std::size_t>(p, 1)); }

// Gradients of rows [begin, end) of `data` into g (end - begin rows).
void grads_into(const ModelView& m, const Dataset& data, std::size_t begin, std::size_t end, OutputFnKind fn,
                std::size_t jobs, Tensor2& g) {
  const std::size_t p = m.grad_dim();
  g = Tensor2(end - begin, p);
  const ForwardOptions opts = m.options();
  parallel_for(end - begin, jobs, [&](std::size_t k) {
    const std::size_t i = begin + k;
    const auto grad =
        per_sample_grad(*m.spec, *m.params, data.sample_input(i), data.sample_targets(i), fn, opts, m.space);
    if (grad.size() != p) throw ShapeError("gradient dimension mismatch");
    std::copy(grad.begin(), grad.end(), g.row(k).begin());
  });
}

void count_backward(CostLedger* ledger, std::size_t n) {
  if (ledger) record_pass(*ledger, Phase::Serve, PassKind::Backward, n);
}

std::vector<double> row_norms(const Tensor2& g) {
  std::vector<double> n(g.rows);
  for (std::size_t r = 0; r < g.rows; ++r) n[r] = norm2(g.row(r));
  return n;
}

}  // namespace

ForwardOptions ModelView::options() const {
  ForwardOptions o;
  o.mode = mask ? Mode::MaskedEval : Mode::Eval;
  o.mask = mask;
  o.adapters = adapters;
  return o;
}

std::size_t ModelView::grad_dim() const {
  switch (space) {
    case GradSpace::Full: return params->size();
    case GradSpace::AdapterOnly: return adapter_param_count(adapters);
    case GradSpace::None: return 0;
  }
  return 0;
}

Tensor2 per_sample_grads(const ModelView& model, const Dataset& data, OutputFnKind output_fn, std::size_t jobs,
                         CostLedger* ledger) {
  Tensor2 g;
  grads_into(model, data, 0, data.size(), output_fn, jobs, g);
  count_backward(ledger, data.size());
  return g;
}

double projection_entry(std::uint64_t seed, std::size_t i, std::size_t c, std::size_t k) {
  double z0, z1;
  standard_normal_pair(hash_key({seed, i, c / 2}), z0, z1);
  return (c % 2 == 0 ? z0 : z1) / std::sqrt(static_cast<double>(k));
}

namespace {

// Projects the per-sample gradients of several datasets as one concatenated
// row set, so the projection is generated once for all of them.
std::vector<Tensor2> project_sets(const ModelView& model, std::span<const Dataset* const> sets, OutputFnKind output_fn,
                                  const ProjectionConfig& proj, std::uint64_t projection_seed, std::size_t jobs,
                                  CostLedger* ledger) {
  const std::size_t p = model.grad_dim();
  const std::size_t k = proj.kind == ProjectionKind::Identity ? p : proj.dim;
  if (k == 0) throw ArgumentError("projection dimension must be >= 1");
  std::vector<std::pair<std::size_t, std::size_t>> rows;  // (set, sample)
  std::vector<Tensor2> outs;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    for (std::size_t i = 0; i < sets[s]->size(); ++i) rows.emplace_back(s, i);
    outs.emplace_back(sets[s]->size(), k);
  }
  const std::size_t n = rows.size();
  const std::size_t per_chunk = chunk_rows(p);
  const double scale = 1.0 / std::sqrt(static_cast<double>(k));
  const ForwardOptions opts = model.options();
  RowMatrix block, proj_rows;
  Tensor2 g;
  for (std::size_t r0 = 0; r0 < n; r0 += per_chunk) {
    const std::size_t r1 = std::min(n, r0 + per_chunk);
    g = Tensor2(r1 - r0, p);
    parallel_for(r1 - r0, jobs, [&](std::size_t t) {
      const auto [s, i] = rows[r0 + t];
      const Dataset& d = *sets[s];
      const auto grad =
          per_sample_grad(*model.spec, *model.params, d.sample_input(i), d.sample_targets(i), output_fn, opts, model.space);
      if (grad.size() != p) throw ShapeError("gradient dimension mismatch");
      std::copy(grad.begin(), grad.end(), g.row(t).begin());
    });
    proj_rows.resize(static_cast<Eigen::Index>(r1 - r0), static_cast<Eigen::Index>(k));
    if (proj.kind == ProjectionKind::Identity) {
      proj_rows = g.mat();
    } else {
      for (std::size_t c0 = 0; c0 < k; c0 += kProjBlock) {
        const std::size_t w = std::min(k, c0 + kProjBlock) - c0;
        block.resize(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(w));
        const std::size_t row_tasks = (p + 1023) / 1024;
        parallel_for(row_tasks, jobs, [&](std::size_t t) {
          const std::size_t i1 = std::min(p, (t + 1) * 1024);
          for (std::size_t i = t * 1024; i < i1; ++i)
            for (std::size_t c = c0; c < c0 + w; c += 2) {
              double z0, z1;
              standard_normal_pair(hash_key({projection_seed, i, c / 2}), z0, z1);
              const auto ri = static_cast<Eigen::Index>(i);
              block(ri, static_cast<Eigen::Index>(c - c0)) = z0 * scale;
              if (c + 1 < c0 + w) block(ri, static_cast<Eigen::Index>(c + 1 - c0)) = z1 * scale;
            }
        });
        proj_rows.middleCols(static_cast<Eigen::Index>(c0), static_cast<Eigen::Index>(w)).noalias() = g.mat() * block;
      }
    }
    for (std::size_t t = 0; t < r1 - r0; ++t) {
      const auto [s, i] = rows[r0 + t];
      std::copy_n(proj_rows.row(static_cast<Eigen::Index>(t)).data(), k, outs[s].row(i).begin());
    }
  }
  for (const auto& o : outs)
    if (!o.all_finite()) throw NumericError("non-finite projected gradient");
  count_backward(ledger, n);
  return outs;
}

}  // namespace

Tensor2 project_grads(const ModelView& model, const Dataset& data, OutputFnKind output_fn,
                      const ProjectionConfig& proj, std::uint64_t projection_seed, std::size_t jobs,
                      CostLedger* ledger) {
  const Dataset* sets[] = {&data};
  return std::move(project_sets(model, sets, output_fn, proj, projection_seed, jobs, ledger)[0]);
}

std::pair<Tensor2, Tensor2> project_train_test(const ModelView& model, const Dataset& train, const Dataset& test,
                                               OutputFnKind output_fn, const ProjectionConfig& proj,
                                               std::uint64_t projection_seed, std::size_t jobs, CostLedger* ledger) {
  const Dataset* sets[] = {&train, &test};
  auto outs = project_sets(model, sets, output_fn, proj, projection_seed, jobs, ledger);
  return {std::move(outs[0]), std::move(outs[1])};
}

std::vector<double> compute_q(const ModelView& model, const Dataset& data, std::size_t jobs, CostLedger* ledger) {
  const std::size_t n = data.size();
  const std::size_t tps = data.targets_per_sample();
  std::vector<double> q(n);
  const std::size_t chunks = (n + kMaxChunkRows - 1) / kMaxChunkRows;
  const ForwardOptions opts = model.options();
  parallel_for(chunks, jobs, [&](std::size_t c) {
    const std::size_t b = c * kMaxChunkRows, e = std::min(n, b + kMaxChunkRows);
    const Dataset part = data.slice(b, e);
    const auto p = correct_class_probability(forward(*model.spec, *model.params, part.inputs, opts), part.targets);
    for (std::size_t i = 0; i < e - b; ++i) {
      double s = 0.0;
      for (std::size_t t = 0; t < tps; ++t) s += p[i * tps + t];
      q[b + i] = std::clamp(1.0 - s / static_cast<double>(tps), 0.0, 1.0);
    }
  });
  if (ledger) record_pass(*ledger, Phase::Serve, PassKind::Forward, n);
  return q;
}

double default_lambda(const Tensor2& Phi, double lambda_rel) {
  double tr = 0.0;
  for (double v : Phi.data) tr += v * v;
  return lambda_rel * tr / static_cast<double>(std::max<std::size_t>(Phi.cols, 1));
}

FeaturePack build_feature_pack(const ModelView& model, const Dataset& train, const Dataset& test,
                               const TrakConfig& config, std::uint64_t projection_seed, std::size_t jobs,
                               CostLedger* ledger) {
  FeaturePack pack;
  pack.projection_seed = projection_seed;
  std::tie(pack.Phi, pack.phi_test) =
      project_train_test(model, train, test, config.output_fn, config.projection, projection_seed, jobs, ledger);
  pack.proj_dim = pack.Phi.cols;
  pack.Q = compute_q(model, train, jobs, ledger);
  pack.lambda = config.lambda ? *config.lambda : default_lambda(pack.Phi, config.lambda_rel);
  if (pack.lambda < 0) throw ConfigError("lambda must be >= 0");
  return pack;
}

Tensor2 trak_term(const FeaturePack& pack) {
  const std::size_t k = pack.Phi.cols;
  if (pack.phi_test.cols != k) throw ShapeError("Phi and phi_test projection dimensions differ");
  const auto Phi = pack.Phi.mat();
  RowMatrix gram = Phi.transpose() * Phi;
  gram.diagonal().array() += pack.lambda;
  Eigen::LLT<RowMatrix> llt(gram);
  if (llt.info() != Eigen::Success)
    throw NumericError("Gram matrix Phi'Phi + lambda I is not positive definite (lambda = " +
                       std::to_string(pack.lambda) + "); use a larger lambda");
  const RowMatrix X = llt.solve(pack.phi_test.mat().transpose());  // k x n_test
  Tensor2 term(pack.Phi.rows, pack.phi_test.rows);
  term.mat().noalias() = Phi * X;
  if (!term.all_finite()) throw NumericError("non-finite TRAK term; use a larger lambda");
  return term;
}

AttributionMatrix trak_combine(std::span<const std::vector<double>> q_vectors, std::span<const Tensor2> terms) {
  if (q_vectors.empty() || terms.empty()) throw ArgumentError("TRAK aggregation needs at least one unit");
  const std::size_t n = terms[0].rows, m = terms[0].cols;
  for (const auto& t : terms)
    if (t.rows != n || t.cols != m) throw ShapeError("TRAK terms differ in shape");
  for (const auto& q : q_vectors)
    if (q.size() != n) throw ShapeError("Q length differs from n_train");
  std::vector<double> qbar(n, 0.0);
  for (const auto& q : q_vectors)
    for (std::size_t j = 0; j < n; ++j) qbar[j] += q[j];
  for (double& v : qbar) v /= static_cast<double>(q_vectors.size());
  AttributionMatrix out;
  out.method = Method::Trak;
  out.scores = Tensor2(n, m);
  for (const auto& t : terms)
    for (std::size_t i = 0; i < t.size(); ++i) out.scores.data[i] += t.data[i];
  const double inv = 1.0 / static_cast<double>(terms.size());
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < m; ++c) out.scores(j, c) = qbar[j] * (out.scores(j, c) * inv);
  return out;
}

AttributionMatrix trak_aggregate(std::span<const FeaturePack> packs) {
  std::vector<std::vector<double>> qs;
  std::vector<Tensor2> terms;
  for (const auto& p : packs) {
    qs.push_back(p.Q);
    terms.push_back(trak_term(p));
  }
  return trak_combine(qs, terms);
}

AttributionMatrix trak_single(const FeaturePack& pack) { return trak_aggregate(std::span<const FeaturePack>(&pack, 1)); }

AttributionMatrix influence_cg(const ModelView& model, const Dataset& train, const Dataset& test,
                               const InfluenceConfig& config, std::size_t jobs, CostLedger* ledger) {
  if (config.damping < 0) throw ConfigError("damping must be >= 0");
  const std::size_t nte = test.size(), ntr = train.size();
  const Tensor2 g_test = per_sample_grads(model, test, config.output_fn, jobs, ledger);
  const std::size_t p = g_test.cols;

  const ForwardTrace trace(*model.spec, *model.params, train.inputs, model.options(), model.space);
  const detail::GaussNewton gn(trace, config.damping);
  std::vector<std::size_t> applications(nte, 0);
  std::vector<char> converged(nte, 0);
  RowMatrix V(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(nte));
  parallel_for(nte, jobs, [&](std::size_t t) {
    std::size_t calls = 0;
    LinearOperator H = [&](std::span<const double> v, std::span<double> out) {
      ++calls;
      gn.apply(v, out);
    };
    const CgResult r = conjugate_gradient(H, g_test.row(t), config.max_iters, config.tol);
    applications[t] = calls;
    converged[t] = r.converged ? 1 : 0;
    for (std::size_t i = 0; i < p; ++i) V(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = r.x[i];
  });

  AttributionMatrix out;
  out.method = Method::InfluenceCg;
  out.scores = Tensor2(ntr, nte);
  const std::size_t rows = chunk_rows(p);
  Tensor2 g;
  for (std::size_t r0 = 0; r0 < ntr; r0 += rows) {
    const std::size_t r1 = std::min(ntr, r0 + rows);
    grads_into(model, train, r0, r1, config.output_fn, jobs, g);
    out.scores.mat().middleRows(static_cast<Eigen::Index>(r0), static_cast<Eigen::Index>(r1 - r0)).noalias() =
        g.mat() * V;
  }
  count_backward(ledger, ntr);
  std::uint64_t not_converged = 0, total_calls = 0;
  for (std::size_t t = 0; t < nte; ++t) {
    not_converged += converged[t] ? 0 : 1;
    total_calls += applications[t];
  }
  if (not_converged) out.flags["cg_not_converged"] = not_converged;
  if (ledger) ledger->serve_hvp += total_calls * ntr;
  if (!out.scores.all_finite()) throw NumericError("non-finite influence scores");
  return out;
}

AttributionMatrix grad_dot_from(const Tensor2& g_train, const Tensor2& g_test) {
  if (g_train.cols != g_test.cols) throw ShapeError("gradient dimensions differ");
  AttributionMatrix out;
  out.method = Method::GradDot;
  out.scores = Tensor2(g_train.rows, g_test.rows);
  out.scores.mat().noalias() = g_train.mat() * g_test.mat().transpose();
  return out;
}

AttributionMatrix grad_cos_from(const Tensor2& g_train, const Tensor2& g_test) {
  AttributionMatrix out = grad_dot_from(g_train, g_test);
  out.method = Method::GradCos;
  const auto ntr = row_norms(g_train), nte = row_norms(g_test);
  std::uint64_t zero = 0;
  for (std::size_t j = 0; j < out.scores.rows; ++j)
    for (std::size_t t = 0; t < out.scores.cols; ++t) {
      double& s = out.scores(j, t);
      if (ntr[j] == 0.0 || nte[t] == 0.0) {
        s = 0.0;
        ++zero;
      } else {
        s = std::clamp(s / (ntr[j] * nte[t]), -1.0, 1.0);
      }
    }
  if (zero) out.flags["zero_norm_gradient_entries"] = zero;
  return out;
}

namespace {

AttributionMatrix chunked_kernel(const ModelView& model, const Dataset& train, const Dataset& test, OutputFnKind fn,
                                 std::size_t jobs, CostLedger* ledger, bool cosine) {
  const Tensor2 g_test = per_sample_grads(model, test, fn, jobs, ledger);
  const std::size_t ntr = train.size();
  AttributionMatrix out;
  out.method = cosine ? Method::GradCos : Method::GradDot;
  out.scores = Tensor2(ntr, test.size());
  const std::size_t rows = chunk_rows(g_test.cols);
  Tensor2 g;
  for (std::size_t r0 = 0; r0 < ntr; r0 += rows) {
    const std::size_t r1 = std::min(ntr, r0 + rows);
    grads_into(model, train, r0, r1, fn, jobs, g);
    const AttributionMatrix part = cosine ? grad_cos_from(g, g_test) : grad_dot_from(g, g_test);
    std::copy(part.scores.data.begin(), part.scores.data.end(), out.scores.row(r0).begin());
    for (const auto& [k, v] : part.flags) out.flags[k] += v;
  }
  count_backward(ledger, ntr);
  if (!out.scores.all_finite()) throw NumericError("non-finite gradient scores");
  return out;
}

}  // namespace

AttributionMatrix grad_dot(const ModelView& model, const Dataset& train, const Dataset& test, OutputFnKind output_fn,
                           std::size_t jobs, CostLedger* ledger) {
  return chunked_kernel(model, train, test, output_fn, jobs, ledger, false);
}

AttributionMatrix grad_cos(const ModelView& model, const Dataset& train, const Dataset& test, OutputFnKind output_fn,
                           std::size_t jobs, CostLedger* ledger) {
  return chunked_kernel(model, train, test, output_fn, jobs, ledger, true);
}

}  // namespace tdaens
