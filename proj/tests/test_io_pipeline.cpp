#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <doctest.h>

#include "protofuse/errors.hpp"
#include "protofuse/io.hpp"
#include "protofuse/pipeline.hpp"
#include "protofuse/synthetic.hpp"

using namespace protofuse;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("protofuse_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Matrix random_matrix(std::size_t r, std::size_t c, SeededRng& rng) {
  Matrix m(r, c);
  for (double& v : m.data()) v = rng.normal(0.0, 1e3) / 7.0;
  return m;
}

SyntheticCohortSpec small_spec() {
  SyntheticCohortSpec s;
  s.n_patients = 40;
  s.min_patches = 60;
  s.max_patches = 90;
  s.dim = 6;
  s.clusters = 4;
  s.n_genes = 200;
  s.n_pathways = 5;
  s.min_pathway_size = 10;
  s.max_pathway_size = 30;
  s.seed = 11;
  return s;
}

PipelineConfig small_config() {
  PipelineConfig cfg;
  cfg.prototypes = 4;
  cfg.model_dim = 8;
  cfg.learnable_dim = 4;
  cfg.out_dim = 6;
  cfg.pre_hidden = 8;
  cfg.post_hidden = 6;
  cfg.train.epochs = 20;
  cfg.train.batch = 16;
  cfg.threads = 1;
  return cfg;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PROTOFUSE_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// ---------------------------------------------------------------------------
// file formats

TEST_CASE("doubles round-trip through text") {
  SeededRng rng(70);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.normal() * std::pow(10.0, rng.uniform(-300, 300));
    CHECK(parse_double(format_double(v), 1) == v);
  }
  CHECK(parse_double(format_double(0.1), 1) == 0.1);
  CHECK_THROWS_AS(parse_double("1.5x", 4), ParseError);
  CHECK_THROWS_AS(parse_double("", 4), ParseError);
}

TEST_CASE("bank and embeddings round-trip") {
  const fs::path dir = scratch("io_bank");
  SeededRng rng(71);
  const PrototypeBank bank{random_matrix(5, 3, rng), 9};
  write_bank_csv(dir / "bank.csv", bank);
  CHECK(read_bank_csv(dir / "bank.csv").centroids == bank.centroids);

  const Matrix emb = random_matrix(7, 4, rng);
  fs::create_directories(dir / "emb");
  write_embeddings_csv(dir / "emb" / "P1_S1.csv", emb);
  const PatchEmbeddingSet back = read_embeddings_csv(dir / "emb" / "P1_S1.csv");
  CHECK(back.embeddings == emb);
  CHECK(back.slide_id == "P1_S1");

  write_embeddings_csv(dir / "emb" / "P1_S2.csv", emb);
  write_embeddings_csv(dir / "emb" / "P2_S1.csv", emb);
  const auto grouped = read_embeddings_dir(dir / "emb");
  REQUIRE(grouped.size() == 2);
  CHECK(grouped[0].patient_id == "P1");
  CHECK(grouped[0].slides.size() == 2);
  CHECK(patient_of_slide("TCGA-AB_slide_1") == "TCGA-AB");

  std::ofstream(dir / "bad.csv") << "patch_id,dim_0\n0,1.0\n1\n";
  CHECK_THROWS_AS(read_embeddings_csv(dir / "bad.csv"), ParseError);
  fs::remove_all(dir);
}

TEST_CASE("expression and survival round-trip") {
  const fs::path dir = scratch("io_tables");
  SeededRng rng(72);
  const Matrix values = random_matrix(3, 4, rng);
  const std::vector<std::string> pats{"A", "B", "C"}, genes{"g1", "g2", "g3", "g4"};
  write_expression_csv(dir / "x.csv", pats, genes, values);
  const ExpressionTable t = read_expression_csv(dir / "x.csv");
  CHECK(t.patients == pats);
  CHECK(t.genes == genes);
  CHECK(t.values == values);

  const std::vector<SurvivalRecord> recs{{"A", 12.5, true}, {"B", 300.0, false}};
  write_survival_csv(dir / "s.csv", recs);
  const auto back = read_survival_csv(dir / "s.csv");
  REQUIRE(back.size() == 2);
  CHECK(back[0].time == 12.5);
  CHECK(back[0].event);
  CHECK_FALSE(back[1].event);
  const auto flipped = read_survival_csv(dir / "s.csv", EventConvention::kCensored);
  CHECK_FALSE(flipped[0].event);
  CHECK(flipped[1].event);

  std::ofstream(dir / "neg.csv") << "patient_id,time_days,event\nA,-1,1\n";
  CHECK_THROWS_AS(read_survival_csv(dir / "neg.csv"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("summary, posterior, assignment and matrix files round-trip") {
  const fs::path dir = scratch("io_outputs");
  SeededRng rng(73);
  const PatchEmbeddingSet s{"P1_S1", random_matrix(12, 3, rng)};
  const PrototypeBank bank{random_matrix(3, 3, rng), 0};
  for (auto backend : {AggregationBackend::kGmm, AggregationBackend::kOt, AggregationBackend::kHc}) {
    AggregationOptions opts;
    opts.backend = backend;
    const SlideSummary sum = aggregate(s, bank, opts);
    write_summary_csv(dir / "sum.csv", s.slide_id, sum);
    const SlideSummary back = read_summary_csv(dir / "sum.csv");
    CHECK(back.backend == (backend == AggregationBackend::kGmm ? AggregationBackend::kGmm : back.backend));
    CHECK(back.rows == sum.rows);
    if (backend == AggregationBackend::kGmm) {
      CHECK(back.pi == sum.pi);
      CHECK(back.sigma == sum.sigma);
    }
  }

  std::vector<PatchOrigin> origins;
  for (std::size_t i = 0; i < 12; ++i) origins.push_back({"P1_S1", i});
  const Matrix post = gmm_posteriors(s, bank, GmmConfig{});
  write_posteriors_csv(dir / "q.csv", origins, post);
  CHECK(read_posteriors_csv(dir / "q.csv") == post);
  const auto assign = assignment_map(s, bank);
  write_assignments_csv(dir / "a.csv", origins, assign);
  CHECK(read_assignments_csv(dir / "a.csv") == assign);

  const Matrix m = random_matrix(4, 5, rng);
  write_matrix_csv(dir / "m.csv", m);
  CHECK(read_matrix_csv(dir / "m.csv") == m);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint round-trip") {
  const fs::path dir = scratch("io_ckpt");
  FusionShape shape;
  shape.histo_tokens = 3;
  shape.histo_dim = 4;
  shape.pathway_sizes = {3, 6};
  shape.model_dim = 5;
  shape.learnable_dim = 2;
  const FusionWeights w = init_weights(shape, 17);
  write_checkpoint(dir, w);
  const FusionWeights back = read_checkpoint(dir);
  CHECK(back.seed == 17);
  const auto a = named_tensors(w), b = named_tensors(back);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(a[i].value == b[i].value);
  }
  fs::remove_all(dir);
}

TEST_CASE("gmt written by the generator loads back") {
  const fs::path dir = scratch("io_gmt");
  const SyntheticCohort c = generate_cohort(small_spec());
  write_cohort(c, dir);
  const PathwayCollection pc = load_gmt(dir / "pathways.gmt", c.gene_index(), MissingGenePolicy::kStrict);
  CHECK(pc.sizes() == c.pathway_collection().sizes());
  const ExpressionTable x = read_expression_csv(dir / "expression.csv");
  CHECK(x.values.rows() == c.patients.size());
  CHECK(x.values(3, 7) == c.patients[3].expression[7]);
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// pipeline

TEST_CASE("gmm recovers the planted tumour fraction at wide separation") {
  SyntheticCohortSpec spec = small_spec();
  spec.separation = 50.0;
  spec.n_patients = 30;
  spec.min_patches = spec.max_patches = 400;
  const SyntheticCohort c = generate_cohort(spec);
  const PrototypeBank bank{c.cluster_centres, 0};
  for (const auto& p : c.patients) {
    const SlideSummary s = aggregate_gmm(p.patches, bank, GmmConfig{});
    CHECK(std::fabs(s.pi[spec.tumor_cluster] - p.tumor_fraction) < 0.02);
  }
}

TEST_CASE("pipeline runs are deterministic across thread counts") {
  const Cohort cohort = cohort_from_synthetic(generate_cohort(small_spec()));
  PipelineConfig cfg = small_config();
  const RunResult a = run_pipeline(cohort, cfg);
  const RunResult b = run_pipeline(cohort, cfg);
  cfg.threads = 3;
  const RunResult c = run_pipeline(cohort, cfg);
  CHECK(a.metrics.dump() == b.metrics.dump());
  CHECK(a.risk == c.risk);
  CHECK(a.tokens.fusion_tokens == 4 + 5);
  CHECK(a.metrics.contains("c_index"));
}

TEST_CASE("pipeline backends and losses all complete") {
  const Cohort cohort = cohort_from_synthetic(generate_cohort(small_spec()));
  PipelineConfig cfg = small_config();
  cfg.aggregation = AggregationBackend::kOt;
  // balanced OT over uneven cluster proportions needs ~2400 iterations here
  CHECK_THROWS_AS(run_pipeline(cohort, cfg), ConvergenceError);
  cfg.ot_max_iters = 5000;
  for (auto agg : {AggregationBackend::kGmm, AggregationBackend::kOt, AggregationBackend::kHc})
    for (auto fusion : {FusionBackend::kTransformer, FusionBackend::kOt}) {
      cfg.aggregation = agg;
      cfg.fusion = fusion;
      const RunResult r = run_pipeline(cohort, cfg);
      CHECK(r.risk.size() == cohort.patients.size());
      CHECK(r.weights.shape.histo_tokens == 4);
    }
  cfg.loss = LossKind::kNll;
  cfg.train.batch = 1;
  CHECK(run_pipeline(cohort, cfg).risk.size() == cohort.patients.size());
  cfg.loss = LossKind::kCox;
  CHECK_THROWS_AS(run_pipeline(cohort, cfg), ArgumentError);
}

TEST_CASE("k-fold assigns every patient to exactly one test fold") {
  PipelineConfig cfg;
  cfg.folds = 5;
  const auto splits = make_splits(23, cfg);
  REQUIRE(splits.size() == 5);
  std::vector<int> seen(23, 0);
  for (const auto& s : splits) {
    CHECK(s.train.size() + s.test.size() == 23);
    for (std::size_t i : s.test) ++seen[i];
  }
  for (int v : seen) CHECK(v == 1);
  PipelineConfig single;
  const auto one = make_splits(100, single);
  CHECK(one.front().train.size() == 80);
}

TEST_CASE("bank building needs enough patches") {
  const Cohort cohort = cohort_from_synthetic(generate_cohort(small_spec()));
  PipelineConfig cfg = small_config();
  cfg.prototypes = 100000;
  CHECK_THROWS_AS(build_bank(cohort, {0, 1}, cfg), DataError);
}

TEST_CASE("file-based run writes loadable artefacts and skips incomplete patients") {
  const fs::path root = scratch("pipeline_files");
  const SyntheticCohort synth = generate_cohort(small_spec());
  write_cohort(synth, root / "in");
  fs::remove(root / "in" / "embeddings" / (synth.patients[5].patient_id + "_S1.csv"));

  PipelineConfig cfg = small_config();
  cfg.embeddings_dir = root / "in" / "embeddings";
  cfg.expression_csv = root / "in" / "expression.csv";
  cfg.survival_csv = root / "in" / "survival.csv";
  cfg.gmt = root / "in" / "pathways.gmt";
  cfg.bank_path = root / "bank.csv";
  cmd_build_prototypes(cfg);
  const std::string bank_bytes = slurp(cfg.bank_path);
  cmd_build_prototypes(cfg);
  CHECK(slurp(cfg.bank_path) == bank_bytes);
  CHECK(read_bank_csv(cfg.bank_path).count() == 4);

  cfg.output_dir = root / "out";
  const RunResult r = cmd_run(cfg);
  CHECK(r.metrics["n_skipped"].get<std::size_t>() == 1);
  CHECK(slurp(cfg.output_dir / "skipped_patients.csv").find(synth.patients[5].patient_id) != std::string::npos);
  const auto parsed = nlohmann::json::parse(slurp(cfg.output_dir / "metrics.json"));
  CHECK(parsed["n_patients"].get<std::size_t>() == 39);
  CHECK(read_bank_csv(cfg.output_dir / "prototype_bank.csv").centroids == read_bank_csv(cfg.bank_path).centroids);
  const FusionWeights w = read_checkpoint(cfg.output_dir / "weights");
  CHECK(named_tensors(w).front().value == named_tensors(r.weights).front().value);
  // held-out patients only
  CHECK(read_csv(cfg.output_dir / "risk_scores.csv").rows.size() == r.metrics["n_test"].get<std::size_t>());
  fs::remove_all(root);
}

TEST_CASE("error categories map to exit codes") {
  CHECK(ArgumentError("x").code() == ExitCode::kArgument);
  CHECK(DataError("x").code() == ExitCode::kData);
  CHECK(ParseError("x", 2).code() == ExitCode::kData);
  CHECK(ConvergenceError("x", 1e-3).code() == ExitCode::kConvergence);
  CHECK(static_cast<int>(ExitCode::kVerification) == 5);
}

// ---------------------------------------------------------------------------
// command line

TEST_CASE("cli exit codes") {
  const fs::path root = scratch("cli");
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 2);
  CHECK(run_cli("run") == 2);
  CHECK(run_cli("run --out x --aggregation mean") == 2);
  CHECK(run_cli("run --out " + (root / "o").string() + " --embeddings /nonexistent --expression /nonexistent "
                "--survival /nonexistent --gmt /nonexistent --build-prototypes") == 3);

  const std::string gen = "generate --out " + (root / "c").string() +
                          " --patients 30 --min-patches 40 --max-patches 40 --dim 4 --clusters 3"
                          " --genes 400 --pathways 4";
  CHECK(run_cli(gen) == 0);
  const std::string inputs = " --embeddings " + (root / "c" / "embeddings").string() +
                             " --expression " + (root / "c" / "expression.csv").string() +
                             " --survival " + (root / "c" / "survival.csv").string() +
                             " --gmt " + (root / "c" / "pathways.gmt").string();
  CHECK(run_cli("build-prototypes --prototypes 3 --bank " + (root / "bank.csv").string() + inputs) == 0);
  CHECK(run_cli("run --prototypes 3 --epochs 5 --batch 8 --threads 1 --bank " + (root / "bank.csv").string() +
                " --out " + (root / "run").string() + inputs) == 0);
  CHECK(fs::exists(root / "run" / "metrics.json"));
  CHECK(run_cli("run --aggregation ot --ot-max-iters 1 --bank " + (root / "bank.csv").string() +
                " --prototypes 3 --out " + (root / "run4").string() + inputs) == 4);
  CHECK(run_cli("run --batch 1 --bank " + (root / "bank.csv").string() + " --out " +
                (root / "run1").string() + inputs) == 2);

  const std::string quick =
      " --equivalence-instances 5 --em-instances 5 --cox-instances 5 --cindex-instances 20";
  CHECK(run_cli("verify" + quick) == 0);
  CHECK(run_cli("verify --sabotage cox-grad" + quick) == 5);
  fs::remove_all(root);
}
