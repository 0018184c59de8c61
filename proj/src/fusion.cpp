#include "protofuse/fusion.hpp"

#include <cmath>
#include <map>
#include <tuple>
#include <numbers>

#include "protofuse/errors.hpp"

namespace protofuse {

const char* to_string(EncodingMode m) {
  switch (m) {
    case EncodingMode::kNone: return "none";
    case EncodingMode::kOneHot: return "onehot";
    case EncodingMode::kLearnable: return "learnable";
  }
  return "?";
}

const char* to_string(FusionBackend b) {
  return b == FusionBackend::kTransformer ? "transformer" : "ot";
}

EncodingMode parse_encoding_mode(const std::string& s) {
  if (s == "none") return EncodingMode::kNone;
  if (s == "onehot") return EncodingMode::kOneHot;
  if (s == "learnable") return EncodingMode::kLearnable;
  throw ArgumentError("unknown encoding mode '" + s + "' (none|onehot|learnable)");
}

FusionBackend parse_fusion_backend(const std::string& s) {
  if (s == "transformer") return FusionBackend::kTransformer;
  if (s == "ot") return FusionBackend::kOt;
  throw ArgumentError("unknown fusion backend '" + s + "' (transformer|ot)");
}

PostMode parse_post_mode(const std::string& s) {
  if (s == "per-prototype") return PostMode::kPerPrototype;
  if (s == "shared") return PostMode::kShared;
  throw ArgumentError("unknown post-FFN mode '" + s + "' (per-prototype|shared)");
}

ModalPooling parse_modal_pooling(const std::string& s) {
  if (s == "mean") return ModalPooling::kMean;
  if (s == "sum") return ModalPooling::kSum;
  throw ArgumentError("unknown modal pooling '" + s + "' (mean|sum)");
}

double activate(Activation act, double x) {
  switch (act) {
    case Activation::kSelu: {
      constexpr double kAlpha = 1.6732632423543772848170429916717;
      constexpr double kScale = 1.0507009873554804934193349852946;
      return kScale * (x > 0.0 ? x : kAlpha * std::expm1(x));
    }
    case Activation::kGelu:
      return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
  }
  return x;
}

std::vector<double> Linear::apply(std::span<const double> x) const {
  if (x.size() != in_dim()) {
    throw ArgumentError("linear layer expects width " + std::to_string(in_dim()) +
                        ", got " + std::to_string(x.size()));
  }
  std::vector<double> y = bias;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    auto wrow = weight.row(i);
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += xi * wrow[j];
  }
  return y;
}

Matrix Linear::apply(const Matrix& x) const {
  Matrix out(x.rows(), out_dim());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto y = apply(x.row(r));
    std::copy(y.begin(), y.end(), out.row(r).begin());
  }
  return out;
}

std::vector<double> Perceptron::apply(std::span<const double> x) const {
  auto h = hidden.apply(x);
  for (double& v : h) v = activate(activation, v);
  return output.apply(h);
}

std::size_t FusionShape::encoding_dim() const noexcept {
  switch (encoding) {
    case EncodingMode::kNone: return 0;
    case EncodingMode::kOneHot: return total_tokens();
    case EncodingMode::kLearnable: return learnable_dim;
  }
  return 0;
}

void FusionShape::validate() const {
  if (histo_tokens == 0) throw ArgumentError("fusion: need at least one histology token");
  if (pathway_sizes.empty()) throw ArgumentError("fusion: need at least one pathway token");
  if (histo_dim == 0 || model_dim == 0 || pre_hidden == 0 || post_hidden == 0 ||
      out_dim == 0) {
    throw ArgumentError("fusion: all layer widths must be positive");
  }
  for (std::size_t s : pathway_sizes)
    if (s == 0) throw ArgumentError("fusion: empty pathway");
  if (encoding == EncodingMode::kLearnable && learnable_dim == 0)
    throw ArgumentError("fusion: learnable encoding needs a positive width");
}

namespace {

Matrix scaled_uniform(std::size_t rows, std::size_t cols, std::size_t fan_in,
                      SeededRng& rng) {
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.uniform(-bound, bound);
  return m;
}

Linear make_linear(std::size_t in, std::size_t out, SeededRng& rng) {
  return Linear{scaled_uniform(in, out, in, rng), std::vector<double>(out, 0.0)};
}

Perceptron make_perceptron(std::size_t in, std::size_t hidden, std::size_t out,
                           Activation act, SeededRng& rng) {
  Perceptron p;
  p.hidden = make_linear(in, hidden, rng);
  p.output = make_linear(hidden, out, rng);
  p.activation = act;
  return p;
}

// σ(Q Kᵀ / √d') V for tokens x; returns (output, attention).
std::pair<Matrix, Matrix> self_attention(const Matrix& x, const AttentionWeights& w) {
  const Matrix q = matmul(x, w.query);
  const Matrix k = matmul(x, w.key);
  const Matrix v = matmul(x, w.value);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix attn = row_softmax(scaled(matmul_bt(q, k), scale));
  Matrix out = matmul(attn, v);
  if (!all_finite(out)) throw NumericalError("attention produced non-finite values");
  return {std::move(out), std::move(attn)};
}

void check_attention_shapes(const Matrix& pathway, const Matrix& histo,
                            const AttentionWeights& w) {
  const std::size_t d = pathway.cols();
  if (histo.cols() != d)
    throw ArgumentError("fusion: pathway and histology tokens differ in width");
  for (const Matrix* m : {&w.query, &w.key, &w.value}) {
    if (m->rows() != d || m->cols() != d) {
      throw ArgumentError("fusion: attention weights must be " + std::to_string(d) +
                          "x" + std::to_string(d));
    }
  }
  if (pathway.rows() == 0 || histo.rows() == 0)
    throw ArgumentError("fusion: empty token set");
}

}  // namespace

FusionWeights init_weights(const FusionShape& shape, std::uint64_t seed) {
  shape.validate();
  SeededRng rng(seed);
  FusionWeights w;
  w.shape = shape;
  w.seed = seed;

  w.histo_pre = make_linear(shape.histo_dim, shape.model_dim, rng);
  for (std::size_t size : shape.pathway_sizes) {
    w.pathway_pre.push_back(make_perceptron(size, shape.pre_hidden, shape.model_dim,
                                            Activation::kSelu, rng));
  }

  w.encoding.mode = shape.encoding;
  switch (shape.encoding) {
    case EncodingMode::kNone:
      w.encoding.table = Matrix(shape.total_tokens(), 0);
      break;
    case EncodingMode::kOneHot:
      w.encoding.table = Matrix::identity(shape.total_tokens());
      break;
    case EncodingMode::kLearnable:
      w.encoding.table = scaled_uniform(shape.total_tokens(), shape.learnable_dim, 1, rng);
      break;
  }

  const std::size_t dp = shape.token_dim();
  w.attention.query = scaled_uniform(dp, dp, dp, rng);
  w.attention.key = scaled_uniform(dp, dp, dp, rng);
  w.attention.value = scaled_uniform(dp, dp, dp, rng);

  const std::size_t n_post =
      shape.post == PostMode::kPerPrototype ? shape.total_tokens() : 1;
  for (std::size_t t = 0; t < n_post; ++t) {
    w.post.push_back(
        make_perceptron(dp, shape.post_hidden, shape.out_dim, Activation::kGelu, rng));
  }
  w.norm.gain.assign(shape.out_dim, 1.0);
  w.norm.bias.assign(shape.out_dim, 0.0);
  return w;
}

TokenPair match_dimensions(const SlideSummary& slide, const PathwaySummary& path,
                           const FusionWeights& w) {
  if (slide.count() != w.shape.histo_tokens || slide.dim() != w.histo_pre.in_dim()) {
    throw ArgumentError("slide summary is " + std::to_string(slide.count()) + "x" +
                        std::to_string(slide.dim()) + ", weights expect " +
                        std::to_string(w.shape.histo_tokens) + "x" +
                        std::to_string(w.histo_pre.in_dim()));
  }
  if (path.count() != w.pathway_pre.size()) {
    throw ArgumentError("pathway summary has " + std::to_string(path.count()) +
                        " tokens, weights expect " +
                        std::to_string(w.pathway_pre.size()));
  }
  TokenPair out;
  out.histo = w.histo_pre.apply(slide.rows);
  out.pathway = Matrix(path.count(), w.histo_pre.out_dim());
  for (std::size_t c = 0; c < path.count(); ++c) {
    const auto& net = w.pathway_pre[c];
    if (path.tokens[c].size() != net.hidden.in_dim()) {
      throw ArgumentError("pathway token " + std::to_string(c) + " has length " +
                          std::to_string(path.tokens[c].size()) + ", expected " +
                          std::to_string(net.hidden.in_dim()));
    }
    const auto y = net.apply(path.tokens[c]);
    if (y.size() != out.pathway.cols())
      throw ArgumentError("pathway projection width differs from histology projection");
    std::copy(y.begin(), y.end(), out.pathway.row(c).begin());
  }
  return out;
}

TokenPair attach_encodings(const TokenPair& tokens, const PrototypeEncoding& enc) {
  if (enc.mode == EncodingMode::kNone || enc.dim() == 0) return tokens;
  const std::size_t cg = tokens.pathway.rows();
  const std::size_t ch = tokens.histo.rows();
  if (enc.table.rows() != cg + ch) {
    throw ArgumentError("encoding table has " + std::to_string(enc.table.rows()) +
                        " rows for " + std::to_string(cg + ch) + " tokens");
  }
  return TokenPair{hstack(tokens.histo, slice_rows(enc.table, cg, cg + ch)),
                   hstack(tokens.pathway, slice_rows(enc.table, 0, cg))};
}

FusedTokens fuse_transformer(const Matrix& pathway, const Matrix& histo,
                             const AttentionWeights& w) {
  check_attention_shapes(pathway, histo, w);
  const std::size_t cg = pathway.rows();
  auto [out, attn] = self_attention(vstack(pathway, histo), w);

  FusedTokens ft;
  ft.backend = FusionBackend::kTransformer;
  ft.pathway_post = slice_rows(out, 0, cg);
  ft.histo_post = slice_rows(out, cg, out.rows());
  ft.attention = std::move(attn);
  return ft;
}

FusedTokens fuse_ot(const Matrix& pathway, const Matrix& histo,
                    const AttentionWeights& w, const SinkhornConfig& cfg) {
  check_attention_shapes(pathway, histo, w);
  const Matrix cost = transport_cost(pathway, histo, cfg.cost);
  TransportPlan tp = sinkhorn(cost, uniform_mass(pathway.rows()),
                              uniform_mass(histo.rows()), cfg);

  // h → g alignment: T̂ Z_h; g → h alignment: T̂ᵀ Z_g.
  const Matrix aligned_pathway = matmul(tp.plan, histo);
  const Matrix aligned_histo = matmul_at(tp.plan, pathway);

  FusedTokens ft;
  ft.backend = FusionBackend::kOt;
  std::tie(ft.pathway_post, ft.pathway_self_attention) =
      self_attention(aligned_pathway, w);
  std::tie(ft.histo_post, ft.histo_self_attention) = self_attention(aligned_histo, w);
  ft.plan = std::move(tp.plan);
  ft.plan_residual = tp.residual;
  return ft;
}

EquivalenceReport check_ot_attention_equivalence(const Matrix& pathway, const Matrix& histo,
                         const Matrix& query_weight, const Matrix& key_weight,
                         double tol, double solver_tol) {
  const std::size_t d = pathway.cols();
  if (histo.cols() != d || query_weight.rows() != d || query_weight.cols() != d ||
      key_weight.rows() != d || key_weight.cols() != d) {
    throw ArgumentError("check_ot_attention_equivalence: inconsistent shapes");
  }
  // Queries W_Q z_g, keys W z_h: logits = Z_g W_Qᵀ W Z_hᵀ.
  const Matrix logits = matmul_bt(matmul_bt(pathway, query_weight),
                                  matmul_bt(histo, key_weight));
  const double eps = std::sqrt(static_cast<double>(d));
  const std::size_t cg = pathway.rows();

  const TransportPlan tp =
      sinkhorn_constrained(scaled(logits, -1.0), uniform_mass(cg),
                           uniform_mass(histo.rows()), eps, MarginalConstraint::kRows,
                           1000, solver_tol);
  const Matrix attention = row_softmax(scaled(logits, 1.0 / eps));

  EquivalenceReport report;
  report.max_abs_dev = max_abs_diff(scaled(tp.plan, static_cast<double>(cg)), attention);
  report.solver_residual = tp.residual;
  report.pass = report.max_abs_dev < tol;
  return report;
}

Matrix layer_norm(const Matrix& x, const LayerNormParams& p) {
  if (p.gain.size() != x.cols() || p.bias.size() != x.cols())
    throw ArgumentError("layer_norm: parameter width mismatch");
  Matrix out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + p.eps);
    for (std::size_t c = 0; c < x.cols(); ++c)
      out(r, c) = (row[c] - mean) * inv * p.gain[c] + p.bias[c];
  }
  return out;
}

std::vector<double> patient_embedding(const FusedTokens& ft, const FusionWeights& w,
                                      ModalPooling pooling) {
  const std::size_t cg = ft.pathway_post.rows();
  const std::size_t ch = ft.histo_post.rows();
  const std::size_t out_dim = w.shape.out_dim;
  if (w.post.empty()) throw ArgumentError("patient_embedding: no post-FFN weights");
  if (w.post.size() != 1 && w.post.size() != cg + ch)
    throw ArgumentError("patient_embedding: post-FFN count does not match tokens");

  auto pooled = [&](const Matrix& tokens, std::size_t offset) {
    Matrix hidden(tokens.rows(), out_dim);
    for (std::size_t r = 0; r < tokens.rows(); ++r) {
      const auto y = w.post_for(offset + r).apply(tokens.row(r));
      std::copy(y.begin(), y.end(), hidden.row(r).begin());
    }
    const Matrix normed = layer_norm(hidden, w.norm);
    std::vector<double> acc = column_sums(normed);
    if (pooling == ModalPooling::kMean)
      for (double& v : acc) v /= static_cast<double>(tokens.rows());
    return acc;
  };

  std::vector<double> out = pooled(ft.pathway_post, 0);
  const auto histo_side = pooled(ft.histo_post, cg);
  out.insert(out.end(), histo_side.begin(), histo_side.end());
  if (!all_finite(out)) throw NumericalError("patient embedding is not finite");
  return out;
}

ForwardResult forward(const SlideSummary& slide, const PathwaySummary& path,
                      const FusionWeights& w, const FusionOptions& opts) {
  ForwardResult r;
  r.pre = attach_encodings(match_dimensions(slide, path, w), w.encoding);
  r.fused = opts.backend == FusionBackend::kTransformer
                ? fuse_transformer(r.pre.pathway, r.pre.histo, w.attention)
                : fuse_ot(r.pre.pathway, r.pre.histo, w.attention, opts.ot);
  r.embedding = patient_embedding(r.fused, w, opts.pooling);
  return r;
}

namespace {

Matrix as_row(const std::vector<double>& v) { return Matrix(1, v.size(), v); }

void push_linear(std::vector<NamedTensor>& out, const std::string& prefix,
                 const Linear& l) {
  out.push_back({prefix + ".weight", l.weight});
  out.push_back({prefix + ".bias", as_row(l.bias)});
}

void push_perceptron(std::vector<NamedTensor>& out, const std::string& prefix,
                     const Perceptron& p) {
  push_linear(out, prefix + ".hidden", p.hidden);
  push_linear(out, prefix + ".output", p.output);
}

}  // namespace

std::vector<NamedTensor> named_tensors(const FusionWeights& w) {
  std::vector<NamedTensor> out;
  push_linear(out, "histo_pre", w.histo_pre);
  for (std::size_t c = 0; c < w.pathway_pre.size(); ++c)
    push_perceptron(out, "pathway_pre." + std::to_string(c), w.pathway_pre[c]);
  out.push_back({"encoding.table", w.encoding.table});
  out.push_back({"attention.query", w.attention.query});
  out.push_back({"attention.key", w.attention.key});
  out.push_back({"attention.value", w.attention.value});
  for (std::size_t t = 0; t < w.post.size(); ++t)
    push_perceptron(out, "post." + std::to_string(t), w.post[t]);
  out.push_back({"norm.gain", as_row(w.norm.gain)});
  out.push_back({"norm.bias", as_row(w.norm.bias)});
  return out;
}

FusionWeights weights_from_tensors(const FusionShape& shape, std::uint64_t seed,
                                   const std::vector<NamedTensor>& tensors) {
  // Start from a correctly shaped network and overwrite every tensor.
  FusionWeights w = init_weights(shape, seed);
  std::map<std::string, const Matrix*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.value;

  auto take = [&](const std::string& name, Matrix& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint is missing tensor " + name);
    if (it->second->rows() != dst.rows() || it->second->cols() != dst.cols()) {
      throw DataError("checkpoint tensor " + name + " is " +
                      std::to_string(it->second->rows()) + "x" +
                      std::to_string(it->second->cols()) + ", expected " +
                      std::to_string(dst.rows()) + "x" + std::to_string(dst.cols()));
    }
    dst = *it->second;
  };
  auto take_vec = [&](const std::string& name, std::vector<double>& dst) {
    Matrix m = as_row(dst);
    take(name, m);
    dst.assign(m.data().begin(), m.data().end());
  };
  auto take_linear = [&](const std::string& prefix, Linear& l) {
    take(prefix + ".weight", l.weight);
    take_vec(prefix + ".bias", l.bias);
  };
  auto take_perceptron = [&](const std::string& prefix, Perceptron& p) {
    take_linear(prefix + ".hidden", p.hidden);
    take_linear(prefix + ".output", p.output);
  };

  take_linear("histo_pre", w.histo_pre);
  for (std::size_t c = 0; c < w.pathway_pre.size(); ++c)
    take_perceptron("pathway_pre." + std::to_string(c), w.pathway_pre[c]);
  take("encoding.table", w.encoding.table);
  take("attention.query", w.attention.query);
  take("attention.key", w.attention.key);
  take("attention.value", w.attention.value);
  for (std::size_t t = 0; t < w.post.size(); ++t)
    take_perceptron("post." + std::to_string(t), w.post[t]);
  take_vec("norm.gain", w.norm.gain);
  take_vec("norm.bias", w.norm.bias);
  if (by_name.size() != named_tensors(w).size())
    throw DataError("checkpoint contains unexpected tensors");
  return w;
}

}  // namespace protofuse
