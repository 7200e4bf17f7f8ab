#include "tdaens/persist.hpp"

#include "tdaens/artifact.hpp"
#include "tdaens/errors.hpp"

namespace tdaens {

namespace {

ArtifactFile load_kind(const std::filesystem::path& path, const std::string& kind,
                       const std::optional<std::string>& expect_digest) {
  ArtifactFile f = load_artifact(path);
  if (f.kind != kind) throw FormatError(path.string() + ": expected a " + kind + " artifact, found " + f.kind);
  if (expect_digest) {
    const std::string got = f.header.value("config_digest", std::string());
    if (got != *expect_digest)
      throw ConfigError(path.string() + ": config digest " + got + " does not match expected " + *expect_digest);
  }
  return f;
}

void append(std::vector<double>& out, std::span<const double> v) { out.insert(out.end(), v.begin(), v.end()); }

void need(const ArtifactFile& f, std::size_t count) {
  if (f.payload.size() != count) throw CorruptionError("artifact payload does not match its declared shapes");
}

}  // namespace

std::string to_string(OutputFnKind k) {
  switch (k) {
    case OutputFnKind::Loss: return "loss";
    case OutputFnKind::LogLikelihood: return "log_likelihood";
    case OutputFnKind::Margin: return "margin";
  }
  return "?";
}

OutputFnKind parse_output_fn(const std::string& s) {
  for (auto k : {OutputFnKind::Loss, OutputFnKind::LogLikelihood, OutputFnKind::Margin})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown output function '" + s + "'");
}

void save_params(const std::filesystem::path& path, const ParamVector& params, const std::string& config_digest,
                 nlohmann::json extra) {
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& e : params.layout.entries) layout.push_back({e.layer, e.name, e.rows, e.cols, e.offset});
  extra["layout"] = layout;
  extra["config_digest"] = config_digest;
  save_artifact(path, "params", std::move(extra), params.data);
}

ParamVector load_params(const std::filesystem::path& path, const std::optional<std::string>& expect_digest,
                        nlohmann::json* header) {
  const ArtifactFile f = load_kind(path, "params", expect_digest);
  ParamVector pv;
  for (const auto& e : f.header.at("layout")) {
    pv.layout.append(e[0].get<std::string>(), e[1].get<std::string>(), e[2].get<std::size_t>(), e[3].get<std::size_t>());
    if (pv.layout.entries.back().offset != e[4].get<std::size_t>()) throw CorruptionError("parameter layout offsets are inconsistent");
  }
  need(f, pv.layout.total);
  pv.data.assign(f.payload.begin(), f.payload.end());
  if (header) *header = f.header;
  return pv;
}

void save_adapters(const std::filesystem::path& path, const std::vector<LoraAdapter>& adapters,
                   const std::string& config_digest) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& a : adapters)
    list.push_back({{"target", a.target_layer},
                    {"rank", a.rank},
                    {"alpha", a.alpha},
                    {"in", a.A.cols},
                    {"out", a.B.rows},
                    {"bias", !a.bias_delta.empty()}});
  save_artifact(path, "adapters", {{"adapters", list}, {"config_digest", config_digest}}, flatten_adapters(adapters));
}

std::vector<LoraAdapter> load_adapters(const std::filesystem::path& path,
                                       const std::optional<std::string>& expect_digest) {
  const ArtifactFile f = load_kind(path, "adapters", expect_digest);
  std::vector<LoraAdapter> out;
  for (const auto& j : f.header.at("adapters")) {
    LoraAdapter a;
    a.target_layer = j.at("target").get<std::string>();
    a.rank = j.at("rank").get<std::size_t>();
    a.alpha = j.at("alpha").get<double>();
    const auto in = j.at("in").get<std::size_t>(), o = j.at("out").get<std::size_t>();
    a.A = Tensor2(a.rank, in);
    a.B = Tensor2(o, a.rank);
    if (j.at("bias").get<bool>()) a.bias_delta.assign(o, 0.0);
    out.push_back(std::move(a));
  }
  need(f, adapter_param_count(out));
  unflatten_adapters(f.payload, out);
  return out;
}

void save_feature_pack(const std::filesystem::path& path, const FeaturePack& p, const std::string& config_digest) {
  std::vector<double> payload;
  append(payload, p.Phi.data);
  append(payload, p.phi_test.data);
  append(payload, p.Q);
  payload.push_back(p.lambda);
  save_artifact(path, "feature_pack",
                {{"member_id", p.member_id},
                 {"unit_index", p.unit_index},
                 {"projection_seed", p.projection_seed},
                 {"proj_dim", p.proj_dim},
                 {"n_train", p.Phi.rows},
                 {"n_test", p.phi_test.rows},
                 {"k", p.Phi.cols},
                 {"config_digest", config_digest}},
                payload);
}

FeaturePack load_feature_pack(const std::filesystem::path& path, const std::optional<std::string>& expect_digest) {
  const ArtifactFile f = load_kind(path, "feature_pack", expect_digest);
  FeaturePack p;
  p.member_id = f.header.at("member_id").get<std::uint64_t>();
  p.unit_index = f.header.at("unit_index").get<std::uint64_t>();
  p.projection_seed = f.header.at("projection_seed").get<std::uint64_t>();
  p.proj_dim = f.header.at("proj_dim").get<std::size_t>();
  const auto ntr = f.header.at("n_train").get<std::size_t>(), nte = f.header.at("n_test").get<std::size_t>(),
             k = f.header.at("k").get<std::size_t>();
  need(f, ntr * k + nte * k + ntr + 1);
  auto it = f.payload.begin();
  p.Phi = Tensor2(ntr, k);
  std::copy_n(it, ntr * k, p.Phi.data.begin());
  it += static_cast<long>(ntr * k);
  p.phi_test = Tensor2(nte, k);
  std::copy_n(it, nte * k, p.phi_test.data.begin());
  it += static_cast<long>(nte * k);
  p.Q.assign(it, it + static_cast<long>(ntr));
  p.lambda = f.payload.back();
  return p;
}

std::string encode_attribution(const AttributionMatrix& m) {
  return encode_artifact("attribution",
                         {{"n_train", m.scores.rows},
                          {"n_test", m.scores.cols},
                          {"method", to_string(m.method)},
                          {"config_digest", m.config_digest},
                          {"data_digest", m.data_digest},
                          {"flags", m.flags}},
                         m.scores.data);
}

void save_attribution(const std::filesystem::path& path, const AttributionMatrix& m) {
  write_text_file(path, encode_attribution(m));
}

AttributionMatrix load_attribution(const std::filesystem::path& path, const std::optional<std::string>& expect_digest) {
  const ArtifactFile f = load_kind(path, "attribution", expect_digest);
  AttributionMatrix m;
  const auto ntr = f.header.at("n_train").get<std::size_t>(), nte = f.header.at("n_test").get<std::size_t>();
  need(f, ntr * nte);
  m.scores = Tensor2(ntr, nte);
  std::copy(f.payload.begin(), f.payload.end(), m.scores.data.begin());
  m.method = parse_method(f.header.at("method").get<std::string>());
  m.config_digest = f.header.at("config_digest").get<std::string>();
  m.data_digest = f.header.value("data_digest", std::string());
  m.flags = f.header.at("flags").get<std::map<std::string, std::uint64_t>>();
  return m;
}

void save_ground_truth(const std::filesystem::path& path, const LdsGroundTruth& gt) {
  save_artifact(path, "lds_ground_truth",
                {{"m", gt.m},
                 {"alpha", gt.alpha},
                 {"seed", gt.seed},
                 {"output_fn", to_string(gt.output_fn)},
                 {"n_test", gt.outputs.cols},
                 {"subsets", gt.subsets},
                 {"config_digest", gt.config_digest},
                 {"data_digest", gt.data_digest}},
                gt.outputs.data);
}

LdsGroundTruth load_ground_truth(const std::filesystem::path& path, const std::optional<std::string>& expect_digest) {
  const ArtifactFile f = load_kind(path, "lds_ground_truth", expect_digest);
  LdsGroundTruth gt;
  gt.m = f.header.at("m").get<std::size_t>();
  gt.alpha = f.header.at("alpha").get<double>();
  gt.seed = f.header.at("seed").get<std::uint64_t>();
  gt.output_fn = parse_output_fn(f.header.at("output_fn").get<std::string>());
  gt.subsets = f.header.at("subsets").get<std::vector<std::vector<std::size_t>>>();
  gt.config_digest = f.header.at("config_digest").get<std::string>();
  gt.data_digest = f.header.value("data_digest", std::string());
  const auto nte = f.header.at("n_test").get<std::size_t>();
  if (gt.subsets.size() != gt.m) throw CorruptionError("ground truth subset count does not match m");
  need(f, gt.m * nte);
  gt.outputs = Tensor2(gt.m, nte);
  std::copy(f.payload.begin(), f.payload.end(), gt.outputs.data.begin());
  return gt;
}

}  // namespace tdaens
