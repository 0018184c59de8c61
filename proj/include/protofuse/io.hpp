#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "protofuse/fusion.hpp"
#include "protofuse/numerics.hpp"
#include "protofuse/pathway_tokenizer.hpp"
#include "protofuse/prototype_bank.hpp"
#include "protofuse/slide_aggregation.hpp"
#include "protofuse/survival.hpp"

namespace protofuse {

namespace fs = std::filesystem;

/// Shortest decimal that reads back to the same double.
std::string format_double(double v);
/// Strict full-field parse; throws ParseError on junk or overflow.
double parse_double(const std::string& field, std::size_t line);

/// Plain comma-separated table. No quoting: fields may not contain commas.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  /// 1-based file line of each row, for error messages
  std::vector<std::size_t> lines;
};

CsvTable read_csv(const fs::path& path);
void write_text_file(const fs::path& path, const std::string& contents);

// prototype bank: proto_id,dim_0,...
void write_bank_csv(const fs::path& path, const PrototypeBank& bank);
PrototypeBank read_bank_csv(const fs::path& path);

// per-slide embeddings: patch_id,dim_0,...
void write_embeddings_csv(const fs::path& path, const Matrix& embeddings);
/// slide_id is the file stem
PatchEmbeddingSet read_embeddings_csv(const fs::path& path);

/// Patient id of a slide: the part before the first underscore.
std::string patient_of_slide(const std::string& slide_id);

struct PatientSlides {
  std::string patient_id;
  std::vector<PatchEmbeddingSet> slides;
};
/// Every *.csv under dir, grouped by patient, patients and slides sorted by id.
std::vector<PatientSlides> read_embeddings_dir(const fs::path& dir);

// expression: patient_id,<gene>,...
struct ExpressionTable {
  std::vector<std::string> patients;
  std::vector<std::string> genes;
  Matrix values;
};
void write_expression_csv(const fs::path& path, const std::vector<std::string>& patients,
                          const std::vector<std::string>& genes, const Matrix& values);
ExpressionTable read_expression_csv(const fs::path& path);

// survival: patient_id,time_days,event
enum class EventConvention {
  /// event = 1 means the death was observed
  kEventObserved,
  /// event = 1 means the patient was censored
  kCensored,
};
EventConvention parse_event_convention(const std::string& s);
const char* to_string(EventConvention c);
void write_survival_csv(const fs::path& path, const std::vector<SurvivalRecord>& records);
std::vector<SurvivalRecord> read_survival_csv(
    const fs::path& path, EventConvention convention = EventConvention::kEventObserved);

void write_gmt(const fs::path& path,
               const std::vector<std::pair<std::string, std::vector<std::string>>>& pathways);

// slide summary, long format: slide_id,proto_id,field,dim,value
// field is pi/mu/sigma for GMM summaries and agg otherwise.
void write_summary_csv(const fs::path& path, const std::string& slide_id,
                       const SlideSummary& summary);
SlideSummary read_summary_csv(const fs::path& path);

/// One row per patch: origin slide and the patch's row in that slide's file.
struct PatchOrigin {
  std::string slide_id;
  std::size_t patch_id = 0;
};
// posteriors: slide_id,patch_id,proto_id,q
void write_posteriors_csv(const fs::path& path, const std::vector<PatchOrigin>& origins,
                          const Matrix& posteriors);
Matrix read_posteriors_csv(const fs::path& path);
// hard assignments: slide_id,patch_id,proto_id
void write_assignments_csv(const fs::path& path, const std::vector<PatchOrigin>& origins,
                           const std::vector<std::size_t>& assignment);
std::vector<std::size_t> read_assignments_csv(const fs::path& path);

// dense matrix, long format: row_id,col_id,value
void write_matrix_csv(const fs::path& path, const Matrix& m);
Matrix read_matrix_csv(const fs::path& path);

/// Checkpoint directory: manifest.json (shape, seed, tensor names and
/// shapes) and tensors.csv (tensor,row,col,value).
void write_checkpoint(const fs::path& dir, const FusionWeights& w);
FusionWeights read_checkpoint(const fs::path& dir);

}  // namespace protofuse
