// End-to-end acceptance checks, one line per criterion. Exits non-zero if any
// criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "protofuse/errors.hpp"
#include "protofuse/pipeline.hpp"
#include "protofuse/synthetic.hpp"
#include "protofuse/verification.hpp"

using namespace protofuse;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const std::string& name, bool pass, const std::string& detail) {
  std::printf("criterion %2d %s  %s: %s\n", id, pass ? "PASS" : "FAIL", name.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// criterion 6's cohort
SyntheticCohortSpec planted_spec() {
  SyntheticCohortSpec s;
  s.n_patients = 500;
  s.min_patches = s.max_patches = 1000;
  s.separation = 20.0;
  s.hazard_coefficient = 3.0;
  s.censoring_rate = 0.3;
  s.seed = 0;
  return s;
}

std::string c_or_null(const std::optional<double>& c) {
  return c ? fmt::format("{:.4f}", *c) : "undefined";
}

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  VerifyOptions vopt;

  // 1-5: numerical oracles
  {
    const CheckResult r = check_equivalence_sweep(vopt);
    report(1, "OT-attention equivalence", r.pass && r.seconds < 10.0 && r.instances == 200,
           fmt::format("max |C_g T - softmax| = {:.3e} (< 1e-8) over {} instances, {}, {:.2f}s (< 10s)",
                       r.max_deviation, r.instances, r.detail, r.seconds));
  }
  {
    const CheckResult r = check_em_monotonicity(vopt);
    report(2, "EM monotonicity", r.pass && r.instances == 100,
           fmt::format("largest log-likelihood decrease {:.3e} (<= 1e-9) over {} sets x 5 iterations",
                       r.max_deviation, r.instances));
  }
  {
    const CheckResult r = check_sinkhorn_marginals(vopt);
    report(3, "Sinkhorn marginals", r.pass, fmt::format("{} plans; {}", r.instances, r.detail));
  }
  {
    const CheckResult r = check_cox_gradient(vopt);
    report(4, "Cox gradient", r.pass && r.instances == 50,
           fmt::format("max relative error {:.3e} (< 1e-5) vs central differences h=1e-6, {} instances",
                       r.max_deviation, r.instances));
  }
  {
    const CheckResult r = check_cindex_oracle(vopt);
    report(5, "C-index oracle", r.pass && r.instances == 1000,
           fmt::format("{} instances: {}", r.instances, r.detail));
  }

  // 6-7, 9: planted-truth cohort in memory
  const SyntheticCohort synth = generate_cohort(planted_spec());
  const Cohort cohort = cohort_from_synthetic(synth);
  PipelineConfig base;
  base.threads = 1;

  {
    const auto split = make_splits(cohort.patients.size(), base).front();
    std::vector<double> truth;
    std::vector<SurvivalRecord> recs;
    for (std::size_t i : split.test) {
      truth.push_back(synth.patients[i].tumor_fraction);
      recs.push_back(synth.patients[i].survival);
    }
    const double ceiling = concordance_index(truth, recs);

    const auto t0 = Clock::now();
    const RunResult gmm = run_pipeline(cohort, base);
    const double seconds = since(t0);
    PipelineConfig hc_cfg = base;
    hc_cfg.aggregation = AggregationBackend::kHc;
    const RunResult hc = run_pipeline(cohort, hc_cfg);
    const bool pass = gmm.c_index && *gmm.c_index >= 0.80 && hc.c_index &&
                      *hc.c_index >= 0.70 && seconds < 120.0;
    report(6, "planted-truth end-to-end", pass,
           fmt::format("gmm+transformer C = {} (>= 0.80), hc C = {} (>= 0.70), {:.1f}s single-threaded "
                       "(< 120s); C-index of the true tumour fraction on the same test split = {:.4f}",
                       c_or_null(gmm.c_index), c_or_null(hc.c_index), seconds, ceiling));
  }
  {
    double worst = 0.0;
    std::string per_seed;
    bool defined = true;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      PipelineConfig cfg = base;
      cfg.seed = seed;
      const PrototypeBank bank =
          build_bank(cohort, make_splits(cohort.patients.size(), cfg).front().train, cfg);
      cfg.fusion = FusionBackend::kTransformer;
      const RunResult tr = run_pipeline(cohort, cfg, bank);
      cfg.fusion = FusionBackend::kOt;
      const RunResult ot = run_pipeline(cohort, cfg, bank);
      if (!tr.c_index || !ot.c_index) {
        defined = false;
        continue;
      }
      const double diff = std::fabs(*tr.c_index - *ot.c_index);
      worst = std::max(worst, diff);
      per_seed += fmt::format("{}seed {}: {:.4f}/{:.4f}", per_seed.empty() ? "" : "; ", seed,
                              *tr.c_index, *ot.c_index);
    }
    report(7, "fusion parity", defined && worst <= 0.05,
           fmt::format("max |C(transformer) - C(OT)| = {:.4f} (<= 0.05); {}", worst, per_seed));
  }

  // 8: token accounting at N_h = 5000
  {
    SyntheticCohortSpec spec = planted_spec();
    spec.n_patients = 20;
    spec.min_patches = spec.max_patches = 5000;
    const Cohort small = cohort_from_synthetic(generate_cohort(spec));
    PipelineConfig cfg = base;
    cfg.prototypes = 16;
    cfg.train.epochs = 5;
    cfg.train.batch = 8;
    const RunResult r = run_pipeline(small, cfg);
    const auto& ta = r.metrics["token_accounting"];
    const double ratio = ta["reduction_ratio"].get<double>();
    const auto tokens = ta["fusion_tokens"].get<std::size_t>();
    const auto pathways = ta["pathway_tokens"].get<std::size_t>();
    report(8, "compression accounting", ratio == 312.5 && tokens == 66 && pathways == 50,
           fmt::format("N_h/C_h = {} (312.5), fusion tokens = {} (66) with C_g = {}", ratio, tokens,
                       pathways));
  }

  // 9: batch-size contract
  {
    bool rejected = false;
    std::string why;
    PipelineConfig cox1 = base;
    cox1.train.batch = 1;
    try {
      run_pipeline(cohort, cox1);
    } catch (const ArgumentError& e) {
      rejected = true;
      why = e.what();
    }
    std::string nll;
    bool nll_ok = true;
    for (std::size_t b : {1u, 16u}) {
      PipelineConfig cfg = base;
      cfg.loss = LossKind::kNll;
      cfg.train.batch = b;
      try {
        const RunResult r = run_pipeline(cohort, cfg);
        nll += fmt::format("; NLL B={} completed, C = {}", b, c_or_null(r.c_index));
        nll_ok = nll_ok && r.c_index.has_value();
      } catch (const std::exception& e) {
        nll_ok = false;
        nll += fmt::format("; NLL B={} failed: {}", b, e.what());
      }
    }
    report(9, "batch-size contract", rejected && nll_ok,
           fmt::format("Cox B=1 {}{}", rejected ? "rejected (" + why + ")" : "accepted", nll));
  }

  // 10: determinism through the file-based command
  {
    const fs::path root = fs::temp_directory_path() / "protofuse_acceptance";
    fs::remove_all(root);
    write_cohort(synth, root / "cohort");
    PipelineConfig cfg;
    cfg.embeddings_dir = root / "cohort" / "embeddings";
    cfg.expression_csv = root / "cohort" / "expression.csv";
    cfg.survival_csv = root / "cohort" / "survival.csv";
    cfg.gmt = root / "cohort" / "pathways.gmt";
    cfg.build_prototypes = true;
    std::vector<std::string> outputs;
    for (std::size_t threads : {1u, 1u, 3u}) {
      cfg.threads = threads;
      cfg.output_dir = root / fmt::format("run{}", outputs.size());
      cmd_run(cfg);
      outputs.push_back(slurp(cfg.output_dir / "metrics.json"));
    }
    const bool same = !outputs[0].empty() && outputs[0] == outputs[1];
    report(10, "determinism", same,
           fmt::format("two identical runs: metrics.json {} ({} bytes); 3-thread run {}",
                       same ? "byte-identical" : "DIFFERS", outputs[0].size(),
                       outputs[2] == outputs[0] ? "also identical" : "differs"));
    fs::remove_all(root);
  }

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
