#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "protofuse/numerics.hpp"
#include "protofuse/pathway_tokenizer.hpp"
#include "protofuse/slide_aggregation.hpp"
#include "protofuse/survival.hpp"

namespace protofuse {

/// Planted-truth cohort parameters.
///
/// Patches come from isotropic Gaussians (sd cluster_sigma) around clusters
/// placed on scaled coordinate axes so that every pair of cluster centres is
/// separation × cluster_sigma apart. Each patient gets a tumour fraction
/// π* ~ U(0, 1); exactly round(π* · N_h) patches come from the tumour cluster
/// and the rest are spread uniformly over the others. Survival times are
/// exponential with rate base_rate · exp(hazard_coefficient · π*), censored by
/// an independent exponential whose rate is solved so that the expected
/// censored fraction equals censoring_rate.
struct SyntheticCohortSpec {
  std::size_t n_patients = 500;
  std::size_t min_patches = 1000;
  std::size_t max_patches = 1000;
  std::size_t dim = 16;
  std::size_t clusters = 8;
  double separation = 20.0;
  double cluster_sigma = 1.0;
  std::size_t tumor_cluster = 0;
  double hazard_coefficient = 3.0;
  double censoring_rate = 0.3;
  double base_rate = 1.0 / 365.0;
  std::size_t n_genes = 2000;
  std::size_t n_pathways = 50;
  std::size_t min_pathway_size = 31;
  std::size_t max_pathway_size = 199;
  /// pathway whose genes shift by expression_signal · π*
  std::size_t signal_pathway = 0;
  double expression_signal = 2.0;
  double expression_noise = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticPatient {
  std::string patient_id;
  PatchEmbeddingSet patches;
  std::vector<double> expression;
  SurvivalRecord survival;
  double tumor_fraction = 0.0;
  std::size_t tumor_patches = 0;
};

struct SyntheticPathway {
  std::string name;
  std::vector<std::string> genes;
};

struct SyntheticCohort {
  SyntheticCohortSpec spec;
  Matrix cluster_centres;
  std::vector<std::string> gene_names;
  std::vector<SyntheticPathway> pathways;
  std::vector<SyntheticPatient> patients;
  double censoring_hazard = 0.0;

  GeneIndex gene_index() const { return GeneIndex(gene_names); }
  PathwayCollection pathway_collection() const;
};

SyntheticCohort generate_cohort(const SyntheticCohortSpec& spec);

/// Writes the CLI input set: embeddings/<patient>_S1.csv, expression.csv,
/// survival.csv (event = 1 for an observed death) and pathways.gmt.
void write_cohort(const SyntheticCohort& cohort, const std::filesystem::path& dir);

}  // namespace protofuse
