#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "protofuse/numerics.hpp"
#include "protofuse/pathway_tokenizer.hpp"
#include "protofuse/slide_aggregation.hpp"
#include "protofuse/transport.hpp"

namespace protofuse {

enum class EncodingMode { kNone, kOneHot, kLearnable };
enum class PostMode { kPerPrototype, kShared };
enum class FusionBackend { kTransformer, kOt };
/// How post-FFN tokens are pooled within a modality.
enum class ModalPooling { kMean, kSum };
enum class Activation { kSelu, kGelu };

const char* to_string(EncodingMode m);
const char* to_string(FusionBackend b);
EncodingMode parse_encoding_mode(const std::string& s);
FusionBackend parse_fusion_backend(const std::string& s);
PostMode parse_post_mode(const std::string& s);
ModalPooling parse_modal_pooling(const std::string& s);

double activate(Activation act, double x);

/// y = x W + b with W stored in × out.
struct Linear {
  Matrix weight;
  std::vector<double> bias;

  std::size_t in_dim() const noexcept { return weight.rows(); }
  std::size_t out_dim() const noexcept { return weight.cols(); }
  std::vector<double> apply(std::span<const double> x) const;
  Matrix apply(const Matrix& x) const;
};

/// One hidden layer: output(act(hidden(x))).
struct Perceptron {
  Linear hidden;
  Linear output;
  Activation activation = Activation::kSelu;

  std::vector<double> apply(std::span<const double> x) const;
};

/// Shape configuration of the fusion network. The pathway sizes and the
/// histology summary width come from the data; the rest are model choices.
struct FusionShape {
  std::size_t histo_tokens = 16;
  std::size_t histo_dim = 0;
  std::vector<std::size_t> pathway_sizes;
  std::size_t model_dim = 32;
  std::size_t pre_hidden = 64;
  std::size_t post_hidden = 32;
  std::size_t out_dim = 32;
  EncodingMode encoding = EncodingMode::kLearnable;
  std::size_t learnable_dim = 32;
  PostMode post = PostMode::kPerPrototype;

  std::size_t pathway_tokens() const noexcept { return pathway_sizes.size(); }
  std::size_t total_tokens() const noexcept { return pathway_tokens() + histo_tokens; }
  std::size_t encoding_dim() const noexcept;
  /// width of the tokens entering attention: model_dim + encoding_dim()
  std::size_t token_dim() const noexcept { return model_dim + encoding_dim(); }
  void validate() const;
};

/// Per-prototype encoding table. Rows 0..C_g-1 belong to the pathway tokens,
/// rows C_g..C_g+C_h-1 to the histology tokens.
struct PrototypeEncoding {
  EncodingMode mode = EncodingMode::kNone;
  Matrix table;

  std::size_t dim() const noexcept { return table.cols(); }
};

struct AttentionWeights {
  Matrix query;
  Matrix key;
  Matrix value;
};

struct LayerNormParams {
  std::vector<double> gain;
  std::vector<double> bias;
  double eps = 1e-5;
};

struct FusionWeights {
  FusionShape shape;
  std::uint64_t seed = 0;
  Linear histo_pre;
  std::vector<Perceptron> pathway_pre;
  PrototypeEncoding encoding;
  AttentionWeights attention;
  /// one per token (per-prototype mode) or a single shared network
  std::vector<Perceptron> post;
  LayerNormParams norm;

  const Perceptron& post_for(std::size_t token) const {
    return post.size() == 1 ? post.front() : post.at(token);
  }
};

/// Deterministic initialisation. Every weight matrix is drawn from
/// U(-√(3/fan_in), √(3/fan_in)) so entries have standard deviation
/// 1/√fan_in; biases start at zero, layer-norm gain at one. A learnable
/// encoding table is drawn like a matrix with fan_in 1.
FusionWeights init_weights(const FusionShape& shape, std::uint64_t seed);

struct TokenPair {
  Matrix histo;    // C_h × d
  Matrix pathway;  // C_g × d
};

TokenPair match_dimensions(const SlideSummary& slide, const PathwaySummary& path,
                           const FusionWeights& w);

/// Appends e_c to every token; identity when the encoding mode is kNone.
TokenPair attach_encodings(const TokenPair& tokens, const PrototypeEncoding& enc);

struct FusedTokens {
  FusionBackend backend = FusionBackend::kTransformer;
  Matrix pathway_post;  // C_g × d'
  Matrix histo_post;    // C_h × d'
  /// transformer: full (C_g + C_h)² attention, pathway rows first
  Matrix attention;
  /// OT: C_g × C_h transport plan and the two intra-modal attention maps
  Matrix plan;
  Matrix pathway_self_attention;
  Matrix histo_self_attention;
  double plan_residual = 0.0;

  std::size_t token_count() const noexcept {
    return pathway_post.rows() + histo_post.rows();
  }
};

/// Single-head attention over the stacked [pathway; histology] tokens with
/// scaling 1/√d', d' being the token width.
FusedTokens fuse_transformer(const Matrix& pathway, const Matrix& histo,
                             const AttentionWeights& w);

/// Entropic OT between uniform measures on the two token sets, cross-alignment
/// with the plan (T̂ Z_h for pathways, T̂ᵀ Z_g for histology), then
/// self-attention within each modality.
FusedTokens fuse_ot(const Matrix& pathway, const Matrix& histo,
                    const AttentionWeights& w, const SinkhornConfig& cfg);

struct EquivalenceReport {
  double max_abs_dev = 0.0;
  double solver_residual = 0.0;
  bool pass = false;
};

/// Numerical check of the OT / cross-attention equivalence: solves the
/// row-constrained entropic OT with cost -Z_g W_Qᵀ W Z_hᵀ and ε = √d, then
/// compares C_g · T̂ with the row softmax of Z_g W_Qᵀ W Z_hᵀ / √d.
EquivalenceReport check_ot_attention_equivalence(const Matrix& pathway, const Matrix& histo,
                         const Matrix& query_weight, const Matrix& key_weight,
                         double tol, double solver_tol = 1e-12);

/// Row-wise layer normalisation followed by gain and bias.
Matrix layer_norm(const Matrix& x, const LayerNormParams& p);

/// [pool_g LN(f_c(z_c,g)), pool_h LN(f_c(z_c,h))], length 2 · out_dim.
std::vector<double> patient_embedding(const FusedTokens& ft, const FusionWeights& w,
                                      ModalPooling pooling = ModalPooling::kMean);

struct FusionOptions {
  FusionBackend backend = FusionBackend::kTransformer;
  SinkhornConfig ot = [] {
    SinkhornConfig c;
    c.cost = CostKind::kNegDot;
    return c;
  }();
  ModalPooling pooling = ModalPooling::kMean;
};

struct ForwardResult {
  TokenPair pre;
  FusedTokens fused;
  std::vector<double> embedding;
};

/// match_dimensions → attach_encodings → fuse → patient_embedding
ForwardResult forward(const SlideSummary& slide, const PathwaySummary& path,
                      const FusionWeights& w, const FusionOptions& opts);

/// Flat (name, matrix) view of every parameter, for checkpoints. Vectors are
/// stored as 1 × n matrices.
struct NamedTensor {
  std::string name;
  Matrix value;
};
std::vector<NamedTensor> named_tensors(const FusionWeights& w);
/// Inverse of named_tensors for a given shape; every tensor must be present
/// with the expected dimensions.
FusionWeights weights_from_tensors(const FusionShape& shape, std::uint64_t seed,
                                   const std::vector<NamedTensor>& tensors);

}  // namespace protofuse
