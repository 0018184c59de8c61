#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "protofuse/fusion.hpp"
#include "protofuse/io.hpp"
#include "protofuse/pathway_tokenizer.hpp"
#include "protofuse/prototype_bank.hpp"
#include "protofuse/slide_aggregation.hpp"
#include "protofuse/survival.hpp"
#include "protofuse/synthetic.hpp"

namespace protofuse {

enum class LossKind { kCox, kNll };
LossKind parse_loss_kind(const std::string& s);
const char* to_string(LossKind k);

struct PipelineConfig {
  fs::path embeddings_dir;
  fs::path expression_csv;
  fs::path survival_csv;
  fs::path gmt;
  fs::path output_dir;
  /// bank CSV to read (run) or write (build-prototypes)
  fs::path bank_path;
  bool build_prototypes = false;

  std::size_t prototypes = 16;
  AggregationBackend aggregation = AggregationBackend::kGmm;
  FusionBackend fusion = FusionBackend::kTransformer;
  EncodingMode encoding = EncodingMode::kLearnable;
  PostMode post = PostMode::kPerPrototype;
  ModalPooling pooling = ModalPooling::kMean;
  std::size_t model_dim = 32;
  std::size_t learnable_dim = 32;
  std::size_t out_dim = 32;
  std::size_t pre_hidden = 64;
  std::size_t post_hidden = 32;

  LossKind loss = LossKind::kCox;
  std::size_t nll_bins = 4;
  TrainConfig train;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  /// 0 or 1: single split; k >= 2: seeded k-fold
  std::size_t folds = 0;
  EventConvention event_convention = EventConvention::kEventObserved;
  bool log2_expression = false;
  MissingGenePolicy gmt_policy = MissingGenePolicy::kDropMissing;
  GmmConfig gmm;
  int kmeans_max_iters = 100;
  double kmeans_tol = 1e-6;
  /// Sinkhorn settings shared by OT aggregation and OT fusion
  std::optional<double> ot_epsilon;
  int ot_max_iters = 1000;
  double ot_tol = 1e-6;
  /// patients (in id order) whose posteriors, summaries and attention maps
  /// are written; the full set would be N_h rows per patient
  std::size_t export_limit = 8;
  /// 0: PROTOFUSE_THREADS or the hardware count
  std::size_t threads = 0;

  void validate() const;
  /// Checks that the input files exist.
  void validate_paths(bool need_bank) const;
  FusionShape fusion_shape(std::size_t histo_dim,
                           const std::vector<std::size_t>& pathway_sizes) const;
};

struct PatientInput {
  std::string patient_id;
  /// patches of all the patient's slides, stacked in slide-id order
  PatchEmbeddingSet patches;
  std::vector<PatchOrigin> origins;
  std::vector<double> expression;
  SurvivalRecord survival;
};

struct SkippedPatient {
  std::string patient_id;
  std::string reason;
};

struct Cohort {
  std::vector<PatientInput> patients;
  PathwayCollection pathways;
  std::vector<SkippedPatient> skipped;
};

/// Reads all four inputs. Patients come from the survival file; those
/// lacking slides or expression are listed in skipped. Throws DataError when
/// nobody is left.
Cohort load_cohort(const PipelineConfig& cfg);
Cohort cohort_from_synthetic(const SyntheticCohort& synth);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};
/// One seeded train/test split, or cfg.folds folds. Indices ascending.
std::vector<Split> make_splits(std::size_t n, const PipelineConfig& cfg);

/// K-means on the pooled training patches.
PrototypeBank build_bank(const Cohort& cohort, const std::vector<std::size_t>& train,
                         const PipelineConfig& cfg, KMeansTrace* trace = nullptr);

struct TokenAccounting {
  double mean_patches = 0.0;
  std::size_t min_patches = 0;
  std::size_t max_patches = 0;
  std::size_t prototypes = 0;
  /// mean N_h / C_h
  double reduction_ratio = 0.0;
  std::size_t pathway_tokens = 0;
  std::size_t fusion_tokens = 0;
};

struct PatientExport {
  std::size_t patient = 0;
  SlideSummary summary;
  ForwardResult forward;
  Matrix posteriors;
  std::vector<std::size_t> assignment;
};

struct RunResult {
  nlohmann::ordered_json metrics;
  /// held-out (or out-of-fold) risk per cohort patient
  std::vector<double> risk;
  /// "train"/"test" per patient for a single split, "fold<k>" for k-fold
  std::vector<std::string> split_label;
  std::optional<double> c_index;
  TokenAccounting tokens;
  FusionWeights weights;
  std::vector<PrototypeBank> banks;
  std::vector<PatientExport> exports;
};

/// Full pipeline on an in-memory cohort. When bank is given it is used for
/// every split instead of fitting K-means on the training patches.
RunResult run_pipeline(const Cohort& cohort, const PipelineConfig& cfg,
                       const std::optional<PrototypeBank>& bank = std::nullopt);

void write_run_outputs(const Cohort& cohort, const PipelineConfig& cfg,
                       const RunResult& result);

/// CLI verbs. Both log progress through spdlog.
PrototypeBank cmd_build_prototypes(const PipelineConfig& cfg);
RunResult cmd_run(const PipelineConfig& cfg);

/// Worker count: cfg value, else PROTOFUSE_THREADS, else hardware; the
/// environment variable also caps an explicit setting.
std::size_t worker_count(std::size_t requested);

}  // namespace protofuse
