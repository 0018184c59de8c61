#include "protofuse/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>
#include <set>

#include "protofuse/errors.hpp"
#include "protofuse/io.hpp"

namespace protofuse {

void SyntheticCohortSpec::validate() const {
  if (n_patients < 2) throw ArgumentError("synthetic cohort needs at least two patients");
  if (min_patches == 0 || max_patches < min_patches)
    throw ArgumentError("synthetic cohort: bad patches-per-slide range");
  if (clusters < 2 || clusters > dim)
    throw ArgumentError("synthetic cohort: need 2 <= clusters <= dim");
  if (tumor_cluster >= clusters) throw ArgumentError("synthetic cohort: bad tumour cluster");
  if (!(separation > 0.0) || !(cluster_sigma > 0.0))
    throw ArgumentError("synthetic cohort: separation and sigma must be positive");
  if (!(censoring_rate >= 0.0 && censoring_rate < 1.0))
    throw ArgumentError("synthetic cohort: censoring rate must lie in [0, 1)");
  if (!(base_rate > 0.0)) throw ArgumentError("synthetic cohort: base rate must be positive");
  if (n_pathways == 0 || signal_pathway >= n_pathways)
    throw ArgumentError("synthetic cohort: bad pathway configuration");
  if (min_pathway_size == 0 || max_pathway_size < min_pathway_size ||
      max_pathway_size > n_genes) {
    throw ArgumentError("synthetic cohort: pathway sizes must fit in the gene universe");
  }
}

PathwayCollection SyntheticCohort::pathway_collection() const {
  const GeneIndex index = gene_index();
  PathwayCollection pc;
  pc.gene_count = index.size();
  for (const auto& p : pathways) {
    PathwayDefinition def{p.name, {}};
    for (const auto& g : p.genes) def.members.push_back(*index.find(g));
    std::sort(def.members.begin(), def.members.end());
    pc.pathways.push_back(std::move(def));
  }
  return pc;
}

namespace {

// Rate c of an exponential censoring time such that the mean probability of
// censoring, mean_i c / (c + λ_i), equals target. Monotone in c: bisect in
// log space.
double solve_censoring_hazard(const std::vector<double>& hazards, double target) {
  if (target <= 0.0) return 0.0;
  auto censored = [&](double c) {
    double acc = 0.0;
    for (double h : hazards) acc += c / (c + h);
    return acc / static_cast<double>(hazards.size());
  };
  double lo = std::log(1e-12), hi = std::log(1e12);
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (censored(std::exp(mid)) < target ? lo : hi) = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

}  // namespace

SyntheticCohort generate_cohort(const SyntheticCohortSpec& spec) {
  spec.validate();
  SeededRng rng(spec.seed);
  SeededRng gene_rng = rng.derive(1);

  SyntheticCohort cohort;
  cohort.spec = spec;

  const double axis = spec.separation * spec.cluster_sigma / std::sqrt(2.0);
  cohort.cluster_centres = Matrix(spec.clusters, spec.dim);
  for (std::size_t k = 0; k < spec.clusters; ++k) cohort.cluster_centres(k, k) = axis;

  for (std::size_t g = 0; g < spec.n_genes; ++g)
    cohort.gene_names.push_back(fmt::format("G{:05d}", g));
  for (std::size_t p = 0; p < spec.n_pathways; ++p) {
    const std::size_t size =
        spec.min_pathway_size +
        gene_rng.below(spec.max_pathway_size - spec.min_pathway_size + 1);
    std::vector<std::size_t> genes(spec.n_genes);
    std::iota(genes.begin(), genes.end(), std::size_t{0});
    gene_rng.shuffle(genes);
    genes.resize(size);
    std::sort(genes.begin(), genes.end());
    SyntheticPathway sp{fmt::format("SYNTH_PATHWAY_{:02d}", p), {}};
    for (std::size_t g : genes) sp.genes.push_back(cohort.gene_names[g]);
    cohort.pathways.push_back(std::move(sp));
  }
  std::vector<double> gene_baseline(spec.n_genes);
  for (double& b : gene_baseline) b = gene_rng.uniform(2.0, 8.0);
  std::vector<bool> signal_gene(spec.n_genes, false);
  for (const auto& g : cohort.pathways[spec.signal_pathway].genes)
    signal_gene[std::stoul(g.substr(1))] = true;

  std::vector<std::size_t> background;
  for (std::size_t k = 0; k < spec.clusters; ++k)
    if (k != spec.tumor_cluster) background.push_back(k);

  std::vector<double> hazards;
  for (std::size_t n = 0; n < spec.n_patients; ++n) {
    SeededRng prng = rng.derive(1000 + n);
    SyntheticPatient pt;
    pt.patient_id = fmt::format("P{:05d}", n);
    pt.tumor_fraction = prng.uniform();

    const std::size_t n_patches =
        spec.min_patches + prng.below(spec.max_patches - spec.min_patches + 1);
    pt.tumor_patches = static_cast<std::size_t>(
        std::llround(pt.tumor_fraction * static_cast<double>(n_patches)));
    std::vector<std::size_t> labels(n_patches);
    for (std::size_t i = 0; i < n_patches; ++i) {
      labels[i] = i < pt.tumor_patches ? spec.tumor_cluster
                                       : background[prng.below(background.size())];
    }
    prng.shuffle(labels);
    pt.patches.slide_id = pt.patient_id + "_S1";
    pt.patches.embeddings = Matrix(n_patches, spec.dim);
    for (std::size_t i = 0; i < n_patches; ++i) {
      auto row = pt.patches.embeddings.row(i);
      auto centre = cohort.cluster_centres.row(labels[i]);
      for (std::size_t j = 0; j < spec.dim; ++j)
        row[j] = centre[j] + spec.cluster_sigma * prng.normal();
    }

    pt.expression.resize(spec.n_genes);
    for (std::size_t g = 0; g < spec.n_genes; ++g) {
      pt.expression[g] = gene_baseline[g] + spec.expression_noise * prng.normal() +
                         (signal_gene[g] ? spec.expression_signal * pt.tumor_fraction : 0.0);
    }

    const double hazard =
        spec.base_rate * std::exp(spec.hazard_coefficient * pt.tumor_fraction);
    hazards.push_back(hazard);
    pt.survival.patient_id = pt.patient_id;
    pt.survival.time = prng.exponential(hazard);
    pt.survival.event = true;
    cohort.patients.push_back(std::move(pt));
  }

  cohort.censoring_hazard = solve_censoring_hazard(hazards, spec.censoring_rate);
  if (cohort.censoring_hazard > 0.0) {
    SeededRng crng = rng.derive(2);
    for (auto& pt : cohort.patients) {
      const double c = crng.exponential(cohort.censoring_hazard);
      if (c < pt.survival.time) {
        pt.survival.time = c;
        pt.survival.event = false;
      }
    }
  }
  return cohort;
}

void write_cohort(const SyntheticCohort& cohort, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "embeddings");
  std::vector<std::string> ids;
  Matrix expression(cohort.patients.size(), cohort.gene_names.size());
  std::vector<SurvivalRecord> survival;
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    const auto& pt = cohort.patients[i];
    write_embeddings_csv(dir / "embeddings" / (pt.patches.slide_id + ".csv"),
                         pt.patches.embeddings);
    ids.push_back(pt.patient_id);
    std::copy(pt.expression.begin(), pt.expression.end(), expression.row(i).begin());
    survival.push_back(pt.survival);
  }
  write_expression_csv(dir / "expression.csv", ids, cohort.gene_names, expression);
  write_survival_csv(dir / "survival.csv", survival);
  std::vector<std::pair<std::string, std::vector<std::string>>> gmt;
  for (const auto& p : cohort.pathways) gmt.emplace_back(p.name, p.genes);
  write_gmt(dir / "pathways.gmt", gmt);
}

}  // namespace protofuse
