// protofuse command line: build-prototypes, run, verify, generate.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "protofuse/errors.hpp"
#include "protofuse/pipeline.hpp"
#include "protofuse/synthetic.hpp"
#include "protofuse/verification.hpp"

using namespace protofuse;

namespace {

// String-valued choices, parsed into PipelineConfig after CLI11 is done.
struct Choices {
  std::string aggregation = "gmm";
  std::string fusion = "transformer";
  std::string encoding = "learnable";
  std::string post = "per-prototype";
  std::string pooling = "mean";
  std::string loss = "cox";
  std::string event_convention = "event";
  std::string gmt_policy = "drop-missing";
};

void add_pipeline_options(CLI::App* cmd, PipelineConfig& cfg, Choices& ch) {
  cmd->add_option("--embeddings", cfg.embeddings_dir, "directory of <slide_id>.csv patch embeddings");
  cmd->add_option("--expression", cfg.expression_csv, "expression CSV (patient_id,<genes>...)");
  cmd->add_option("--survival", cfg.survival_csv, "survival CSV (patient_id,time_days,event)");
  cmd->add_option("--gmt", cfg.gmt, "pathway GMT file");
  cmd->add_option("--bank", cfg.bank_path, "prototype bank CSV");
  cmd->add_option("--prototypes", cfg.prototypes, "number of histology prototypes C_h")
      ->capture_default_str();
  cmd->add_option("--seed", cfg.seed, "random seed")->capture_default_str();
  cmd->add_option("--train-fraction", cfg.train_fraction, "share of patients used for training")
      ->capture_default_str();
  cmd->add_option("--folds", cfg.folds, "seeded k-fold instead of a single split (k >= 2)");
  cmd->add_option("--event-convention", ch.event_convention,
                  "meaning of event=1: event (death observed) or censor")
      ->check(CLI::IsMember({"event", "censor"}))
      ->capture_default_str();
  cmd->add_flag("--log2-expression", cfg.log2_expression, "apply log2(x+1) to expression values");
  cmd->add_option("--gmt-policy", ch.gmt_policy, "genes missing from the expression file")
      ->check(CLI::IsMember({"strict", "drop-missing"}))
      ->capture_default_str();
  cmd->add_option("--kmeans-iters", cfg.kmeans_max_iters, "Lloyd iteration cap")->capture_default_str();
  cmd->add_option("--threads", cfg.threads, "worker threads (0: PROTOFUSE_THREADS or all cores)");
}

void add_run_options(CLI::App* cmd, PipelineConfig& cfg, Choices& ch) {
  cmd->add_option("--out", cfg.output_dir, "output directory")->required();
  cmd->add_flag("--build-prototypes", cfg.build_prototypes,
                "fit the bank on the training split instead of reading --bank");
  cmd->add_option("--aggregation", ch.aggregation, "slide aggregation backend")
      ->check(CLI::IsMember({"gmm", "ot", "hc"}))
      ->capture_default_str();
  cmd->add_option("--fusion", ch.fusion, "fusion backend")
      ->check(CLI::IsMember({"transformer", "ot"}))
      ->capture_default_str();
  cmd->add_option("--encoding", ch.encoding, "prototype encoding")
      ->check(CLI::IsMember({"none", "onehot", "learnable"}))
      ->capture_default_str();
  cmd->add_option("--post", ch.post, "post-fusion feed-forward networks")
      ->check(CLI::IsMember({"per-prototype", "shared"}))
      ->capture_default_str();
  cmd->add_option("--pooling", ch.pooling, "token pooling within a modality")
      ->check(CLI::IsMember({"mean", "sum"}))
      ->capture_default_str();
  cmd->add_option("--model-dim", cfg.model_dim, "token width d")->capture_default_str();
  cmd->add_option("--encoding-dim", cfg.learnable_dim, "learnable encoding width d_e")
      ->capture_default_str();
  cmd->add_option("--out-dim", cfg.out_dim, "post-FFN output width d_out")->capture_default_str();
  cmd->add_option("--pre-hidden", cfg.pre_hidden, "pathway MLP hidden width")->capture_default_str();
  cmd->add_option("--post-hidden", cfg.post_hidden, "post-FFN hidden width")->capture_default_str();
  cmd->add_option("--em-iters", cfg.gmm.em_iters, "EM iterations per slide")->capture_default_str();
  cmd->add_option("--ot-epsilon", cfg.ot_epsilon,
                  "Sinkhorn entropic weight (default: 0.1 x mean shifted cost)");
  cmd->add_option("--ot-max-iters", cfg.ot_max_iters, "Sinkhorn iteration cap")->capture_default_str();
  cmd->add_option("--ot-tol", cfg.ot_tol, "Sinkhorn marginal tolerance")->capture_default_str();
  cmd->add_option("--loss", ch.loss, "survival loss")
      ->check(CLI::IsMember({"cox", "nll"}))
      ->capture_default_str();
  cmd->add_option("--nll-bins", cfg.nll_bins, "time bins for the NLL loss")->capture_default_str();
  cmd->add_option("--batch", cfg.train.batch, "mini-batch size")->capture_default_str();
  cmd->add_option("--lr", cfg.train.lr, "learning rate")->capture_default_str();
  cmd->add_option("--epochs", cfg.train.epochs, "training epochs")->capture_default_str();
  cmd->add_option("--export-limit", cfg.export_limit,
                  "patients whose posteriors and attention maps are written")
      ->capture_default_str();
}

void apply_choices(PipelineConfig& cfg, const Choices& ch) {
  cfg.aggregation = parse_aggregation_backend(ch.aggregation);
  cfg.fusion = parse_fusion_backend(ch.fusion);
  cfg.encoding = parse_encoding_mode(ch.encoding);
  cfg.post = parse_post_mode(ch.post);
  cfg.pooling = parse_modal_pooling(ch.pooling);
  cfg.loss = parse_loss_kind(ch.loss);
  cfg.event_convention = parse_event_convention(ch.event_convention);
  cfg.gmt_policy = ch.gmt_policy == "strict" ? MissingGenePolicy::kStrict
                                             : MissingGenePolicy::kDropMissing;
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("protofuse");
  spdlog::set_default_logger(logger);

  CLI::App app{"Prototype-based multimodal survival pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML/INI file supplying any flag; command-line flags win");
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off")->capture_default_str();

  PipelineConfig build_cfg, run_cfg;
  Choices build_ch, run_ch;
  auto* build = app.add_subcommand("build-prototypes", "fit the K-means prototype bank");
  add_pipeline_options(build, build_cfg, build_ch);
  build->get_option("--bank")->required();

  auto* run = app.add_subcommand("run", "aggregate, fuse, train the risk head and evaluate");
  add_pipeline_options(run, run_cfg, run_ch);
  add_run_options(run, run_cfg, run_ch);

  VerifyOptions vopt;
  std::string sabotage = "none";
  auto* verify = app.add_subcommand("verify", "run the numerical oracle checks");
  verify->add_option("--seed", vopt.seed, "sweep seed")->capture_default_str();
  verify->add_option("--sabotage", sabotage, "inject a fault: cox-grad")
      ->check(CLI::IsMember({"none", "cox-grad"}));
  verify->add_option("--equivalence-instances", vopt.equivalence_instances)->capture_default_str();
  verify->add_option("--em-instances", vopt.em_instances)->capture_default_str();
  verify->add_option("--cox-instances", vopt.cox_instances)->capture_default_str();
  verify->add_option("--cindex-instances", vopt.cindex_instances)->capture_default_str();

  SyntheticCohortSpec spec;
  std::string gen_out;
  auto* gen = app.add_subcommand("generate", "write a planted-truth synthetic cohort");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--patients", spec.n_patients)->capture_default_str();
  gen->add_option("--min-patches", spec.min_patches)->capture_default_str();
  gen->add_option("--max-patches", spec.max_patches)->capture_default_str();
  gen->add_option("--dim", spec.dim)->capture_default_str();
  gen->add_option("--clusters", spec.clusters)->capture_default_str();
  gen->add_option("--separation", spec.separation, "centre distance in units of sigma")
      ->capture_default_str();
  gen->add_option("--sigma", spec.cluster_sigma)->capture_default_str();
  gen->add_option("--hazard-coefficient", spec.hazard_coefficient)->capture_default_str();
  gen->add_option("--censoring", spec.censoring_rate)->capture_default_str();
  gen->add_option("--genes", spec.n_genes)->capture_default_str();
  gen->add_option("--pathways", spec.n_pathways)->capture_default_str();
  gen->add_option("--seed", spec.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kArgument);
  }

  try {
    spdlog::set_level(spdlog::level::from_str(log_level));
    if (build->parsed()) {
      apply_choices(build_cfg, build_ch);
      cmd_build_prototypes(build_cfg);
    } else if (run->parsed()) {
      apply_choices(run_cfg, run_ch);
      const RunResult res = cmd_run(run_cfg);
      std::cout << res.metrics.dump(2) << "\n";
    } else if (verify->parsed()) {
      vopt.sabotage = parse_sabotage(sabotage);
      bool ok = true;
      for (const auto& r : run_verification(vopt)) {
        std::cout << format_check(r) << "\n";
        ok = ok && r.pass;
      }
      std::cout << (ok ? "all checks passed" : "verification FAILED") << "\n";
      if (!ok) return static_cast<int>(ExitCode::kVerification);
    } else if (gen->parsed()) {
      const SyntheticCohort cohort = generate_cohort(spec);
      write_cohort(cohort, gen_out);
      spdlog::info("wrote {} patients to {}", cohort.patients.size(), gen_out);
    }
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(ExitCode::kData);
  }
  return 0;
}
