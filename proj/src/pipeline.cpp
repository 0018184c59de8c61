#include "protofuse/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <map>
#include <mutex>
#include <thread>

#include <spdlog/spdlog.h>

#include "protofuse/errors.hpp"

namespace protofuse {

LossKind parse_loss_kind(const std::string& s) {
  if (s == "cox") return LossKind::kCox;
  if (s == "nll") return LossKind::kNll;
  throw ArgumentError("unknown loss '" + s + "' (cox|nll)");
}

const char* to_string(LossKind k) { return k == LossKind::kCox ? "cox" : "nll"; }

void PipelineConfig::validate() const {
  if (prototypes == 0) throw ArgumentError("--prototypes must be positive");
  if (model_dim == 0 || out_dim == 0 || pre_hidden == 0 || post_hidden == 0)
    throw ArgumentError("layer widths must be positive");
  if (encoding == EncodingMode::kLearnable && learnable_dim == 0)
    throw ArgumentError("--encoding-dim must be positive for learnable encodings");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ArgumentError("--train-fraction must lie in (0, 1)");
  if (!(train.lr > 0.0) || !std::isfinite(train.lr))
    throw ArgumentError("--lr must be positive");
  if (train.epochs < 0) throw ArgumentError("--epochs must be non-negative");
  if (loss == LossKind::kCox && train.batch < 2)
    throw ArgumentError("Cox training needs --batch >= 2: one patient has no risk set");
  if (train.batch < 1) throw ArgumentError("--batch must be positive");
  if (nll_bins == 0) throw ArgumentError("--nll-bins must be positive");
  if (gmm.em_iters < 0) throw ArgumentError("--em-iters must be non-negative");
  if (kmeans_max_iters < 1) throw ArgumentError("--kmeans-iters must be positive");
  if (ot_epsilon && !(*ot_epsilon > 0.0)) throw ArgumentError("--ot-epsilon must be positive");
  if (ot_max_iters < 1) throw ArgumentError("--ot-max-iters must be positive");
  if (!(ot_tol > 0.0)) throw ArgumentError("--ot-tol must be positive");
}

void PipelineConfig::validate_paths(bool need_bank) const {
  auto require = [](const fs::path& p, const char* what, bool dir) {
    if (p.empty()) throw ArgumentError(std::string("missing ") + what);
    if (dir ? !fs::is_directory(p) : !fs::is_regular_file(p))
      throw DataError(std::string(what) + " not found: " + p.string());
  };
  require(embeddings_dir, "embeddings directory", true);
  require(expression_csv, "expression CSV", false);
  require(survival_csv, "survival CSV", false);
  require(gmt, "GMT file", false);
  if (need_bank) require(bank_path, "prototype bank", false);
}

FusionShape PipelineConfig::fusion_shape(std::size_t histo_dim,
                                         const std::vector<std::size_t>& pathway_sizes) const {
  FusionShape s;
  s.histo_tokens = prototypes;
  s.histo_dim = histo_dim;
  s.pathway_sizes = pathway_sizes;
  s.model_dim = model_dim;
  s.pre_hidden = pre_hidden;
  s.post_hidden = post_hidden;
  s.out_dim = out_dim;
  s.encoding = encoding;
  s.learnable_dim = learnable_dim;
  s.post = post;
  return s;
}

std::size_t worker_count(std::size_t requested) {
  std::size_t n = requested;
  std::size_t cap = 0;
  if (const char* env = std::getenv("PROTOFUSE_THREADS")) {
    char* end = nullptr;
    const unsigned long v = std::strtoul(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) cap = v;
    else spdlog::warn("ignoring PROTOFUSE_THREADS='{}'", env);
  }
  if (n == 0) n = cap ? cap : std::max(1u, std::thread::hardware_concurrency());
  if (cap) n = std::min(n, cap);
  return std::max<std::size_t>(n, 1);
}

namespace {

// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index writes
// only its own output slot, so the result does not depend on scheduling.
// The first exception (lowest index) is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

constexpr std::uint64_t kStreamWeights = 1;
constexpr std::uint64_t kStreamSplit = 2;
constexpr std::uint64_t kStreamKMeans = 3;
constexpr std::uint64_t kStreamTrain = 4;

}  // namespace

Cohort load_cohort(const PipelineConfig& cfg) {
  const auto survival = read_survival_csv(cfg.survival_csv, cfg.event_convention);
  const auto slides = read_embeddings_dir(cfg.embeddings_dir);
  ExpressionTable expr = read_expression_csv(cfg.expression_csv);
  if (cfg.log2_expression) {
    for (double& v : expr.values.data()) {
      if (!(v > -1.0)) throw DataError("log2(x+1) needs expression values > -1");
      v = std::log2(v + 1.0);
    }
  }
  const GeneIndex genes(expr.genes);

  Cohort cohort;
  cohort.pathways = load_gmt(cfg.gmt, genes, cfg.gmt_policy);

  std::map<std::string, std::size_t> slide_of, expr_of;
  for (std::size_t i = 0; i < slides.size(); ++i) slide_of[slides[i].patient_id] = i;
  for (std::size_t i = 0; i < expr.patients.size(); ++i) {
    if (!expr_of.emplace(expr.patients[i], i).second)
      throw DataError("expression file lists patient " + expr.patients[i] + " twice");
  }

  std::map<std::string, const SurvivalRecord*> by_id;
  for (const auto& r : survival) {
    if (!by_id.emplace(r.patient_id, &r).second)
      throw DataError("survival file lists patient " + r.patient_id + " twice");
  }

  std::size_t dim = 0;
  for (const auto& [pid, rec] : by_id) {
    auto s = slide_of.find(pid);
    auto e = expr_of.find(pid);
    if (s == slide_of.end() || e == expr_of.end()) {
      std::string reason = s == slide_of.end() ? "no slide embeddings" : "";
      if (e == expr_of.end()) reason += reason.empty() ? "no expression profile" : "; no expression profile";
      cohort.skipped.push_back({pid, reason});
      continue;
    }
    auto row = expr.values.row(e->second);
    if (!std::all_of(row.begin(), row.end(), [](double v) { return std::isfinite(v); })) {
      cohort.skipped.push_back({pid, "non-finite expression value"});
      continue;
    }
    PatientInput p;
    p.patient_id = pid;
    p.survival = *rec;
    p.expression.assign(row.begin(), row.end());
    p.patches.slide_id = pid;
    for (const auto& slide : slides[s->second].slides) {
      if (dim == 0) dim = slide.dim();
      if (slide.dim() != dim) {
        throw DataError("slide " + slide.slide_id + " has embedding dimension " +
                        std::to_string(slide.dim()) + ", expected " + std::to_string(dim));
      }
      p.patches.embeddings = p.patches.embeddings.empty()
                                 ? slide.embeddings
                                 : vstack(p.patches.embeddings, slide.embeddings);
      for (std::size_t i = 0; i < slide.count(); ++i) p.origins.push_back({slide.slide_id, i});
    }
    cohort.patients.push_back(std::move(p));
  }
  for (const auto& [pid, _] : slide_of)
    if (!by_id.count(pid)) spdlog::debug("slides for {} have no survival record", pid);

  for (const auto& sk : cohort.skipped) spdlog::warn("skipping patient {}: {}", sk.patient_id, sk.reason);
  if (cohort.patients.empty()) throw DataError("every patient was skipped");
  spdlog::info("loaded {} patients ({} skipped), {} pathways over {} genes",
               cohort.patients.size(), cohort.skipped.size(), cohort.pathways.count(),
               genes.size());
  return cohort;
}

Cohort cohort_from_synthetic(const SyntheticCohort& synth) {
  Cohort c;
  c.pathways = synth.pathway_collection();
  for (const auto& p : synth.patients) {
    PatientInput in;
    in.patient_id = p.patient_id;
    in.patches = p.patches;
    in.patches.slide_id = p.patient_id;
    for (std::size_t i = 0; i < p.patches.count(); ++i)
      in.origins.push_back({p.patches.slide_id, i});
    in.expression = p.expression;
    in.survival = p.survival;
    c.patients.push_back(std::move(in));
  }
  return c;
}

std::vector<Split> make_splits(std::size_t n, const PipelineConfig& cfg) {
  if (n < 2) throw DataError("need at least two patients to split");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  SeededRng rng(mix_seed(cfg.seed, kStreamSplit));
  rng.shuffle(order);

  std::vector<Split> out;
  if (cfg.folds >= 2) {
    if (cfg.folds > n) throw ArgumentError("more folds than patients");
    for (std::size_t k = 0; k < cfg.folds; ++k) {
      Split s;
      for (std::size_t i = 0; i < n; ++i) (i % cfg.folds == k ? s.test : s.train).push_back(order[i]);
      out.push_back(std::move(s));
    }
  } else {
    auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n)));
    n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
    Split s;
    s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
    out.push_back(std::move(s));
  }
  for (auto& s : out) {
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.test.begin(), s.test.end());
  }
  return out;
}

PrototypeBank build_bank(const Cohort& cohort, const std::vector<std::size_t>& train,
                         const PipelineConfig& cfg, KMeansTrace* trace) {
  std::size_t total = 0;
  for (std::size_t i : train) total += cohort.patients[i].patches.count();
  if (train.empty()) throw DataError("no training patients for the prototype bank");
  const std::size_t dim = cohort.patients[train.front()].patches.dim();
  if (total < cfg.prototypes) {
    throw DataError("only " + std::to_string(total) + " training patches for " +
                    std::to_string(cfg.prototypes) + " prototypes");
  }
  Matrix pooled(total, dim);
  std::size_t r = 0;
  for (std::size_t i : train) {
    const Matrix& m = cohort.patients[i].patches.embeddings;
    std::copy(m.data().begin(), m.data().end(), pooled.data().begin() + static_cast<std::ptrdiff_t>(r * dim));
    r += m.rows();
  }
  KMeansConfig kc;
  kc.count = cfg.prototypes;
  kc.max_iters = cfg.kmeans_max_iters;
  kc.tol = cfg.kmeans_tol;
  SeededRng rng(mix_seed(cfg.seed, kStreamKMeans));
  KMeansTrace local;
  PrototypeBank bank = fit_kmeans(pooled, kc, rng, trace ? trace : &local);
  bank.source_seed = cfg.seed;
  const KMeansTrace& t = trace ? *trace : local;
  spdlog::info("k-means: pooled N = {} patches, C_h = {}, WCSS = {:.6g} after {} iterations{}",
               total, cfg.prototypes, t.wcss.empty() ? 0.0 : t.wcss.back(), t.iterations,
               t.converged ? "" : " (not converged)");
  return bank;
}

namespace {

Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& idx) {
  Matrix out(idx.size(), m.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto src = m.row(idx[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

// z-score columns with training statistics; constant columns are only centred
void standardize(Matrix& x, const std::vector<std::size_t>& train) {
  for (std::size_t j = 0; j < x.cols(); ++j) {
    CompensatedSum s;
    for (std::size_t i : train) s.add(x(i, j));
    const double mean = s.value() / static_cast<double>(train.size());
    CompensatedSum v;
    for (std::size_t i : train) v.add((x(i, j) - mean) * (x(i, j) - mean));
    const double sd = std::sqrt(v.value() / static_cast<double>(train.size()));
    const double scale = sd > 1e-12 ? 1.0 / sd : 1.0;
    for (std::size_t i = 0; i < x.rows(); ++i) x(i, j) = (x(i, j) - mean) * scale;
  }
}

nlohmann::ordered_json km_json(std::span<const SurvivalRecord> recs) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& p : km_curve(recs)) arr.push_back({p.time, p.survival});
  return arr;
}

TokenAccounting account_tokens(const Cohort& cohort, const FusionShape& shape) {
  TokenAccounting t;
  t.prototypes = shape.histo_tokens;
  t.pathway_tokens = shape.pathway_tokens();
  t.fusion_tokens = shape.total_tokens();
  t.min_patches = cohort.patients.front().patches.count();
  CompensatedSum total;
  for (const auto& p : cohort.patients) {
    total.add(static_cast<double>(p.patches.count()));
    t.min_patches = std::min(t.min_patches, p.patches.count());
    t.max_patches = std::max(t.max_patches, p.patches.count());
  }
  t.mean_patches = total.value() / static_cast<double>(cohort.patients.size());
  t.reduction_ratio = t.mean_patches / static_cast<double>(t.prototypes);
  return t;
}

struct SplitOutcome {
  std::vector<double> risk;  // for the split's test patients, in test order
  double final_loss = 0.0;
  std::size_t increases = 0;
};

SplitOutcome train_and_score(const Matrix& emb, const Cohort& cohort, const Split& split,
                             const PipelineConfig& cfg, std::size_t fold) {
  Matrix x = emb;
  standardize(x, split.train);
  const Matrix x_train = take_rows(x, split.train);
  const Matrix x_test = take_rows(x, split.test);
  std::vector<SurvivalRecord> rec_train;
  for (std::size_t i : split.train) rec_train.push_back(cohort.patients[i].survival);

  SeededRng rng(mix_seed(mix_seed(cfg.seed, kStreamTrain), fold));
  TrainTrace trace;
  SplitOutcome out;
  if (cfg.loss == LossKind::kCox) {
    const CoxHead head = fit_cox_head(x_train, rec_train, cfg.train, rng, &trace);
    out.risk = head.risks(x_test);
  } else {
    const DiscreteBins bins = make_quantile_bins(rec_train, cfg.nll_bins);
    const NllHead head = fit_nll_head(x_train, rec_train, bins, cfg.train, rng, &trace);
    out.risk = head.risks(x_test);
  }
  out.final_loss = trace.loss.empty() ? 0.0 : trace.loss.back();
  out.increases = trace.increases;
  if (!all_finite(out.risk)) throw NumericalError("risk head produced non-finite scores");
  return out;
}

std::optional<double> safe_cindex(std::span<const double> risk,
                                  std::span<const SurvivalRecord> recs) {
  try {
    return concordance_index(risk, recs);
  } catch (const UndefinedMetricError& e) {
    spdlog::warn("{}", e.what());
    return std::nullopt;
  }
}

}  // namespace

RunResult run_pipeline(const Cohort& cohort, const PipelineConfig& cfg,
                       const std::optional<PrototypeBank>& bank) {
  cfg.validate();
  const std::size_t n = cohort.patients.size();
  if (n < 2) throw DataError("need at least two patients");
  const std::size_t dim = cohort.patients.front().patches.dim();
  for (const auto& p : cohort.patients) {
    if (p.patches.dim() != dim) throw DataError("patients differ in embedding dimension");
    if (p.expression.size() != cohort.pathways.gene_count)
      throw DataError("expression profile of " + p.patient_id + " does not match the gene index");
  }
  if (bank && bank->dim() != dim) {
    throw DataError("prototype bank has dimension " + std::to_string(bank->dim()) +
                    " but embeddings have " + std::to_string(dim));
  }
  PipelineConfig eff = cfg;
  if (bank) eff.prototypes = bank->count();

  const auto splits = make_splits(n, eff);
  const FusionShape shape =
      eff.fusion_shape(summary_dim(eff.aggregation, dim), cohort.pathways.sizes());
  shape.validate();

  RunResult res;
  res.weights = init_weights(shape, mix_seed(eff.seed, kStreamWeights));
  res.tokens = account_tokens(cohort, shape);
  spdlog::info("token accounting: mean N_h = {} patches -> C_h = {} prototypes ({}x reduction); "
               "fusion processes C_g + C_h = {} + {} = {} tokens",
               res.tokens.mean_patches, res.tokens.prototypes, res.tokens.reduction_ratio,
               res.tokens.pathway_tokens, res.tokens.prototypes, res.tokens.fusion_tokens);

  AggregationOptions agg;
  agg.backend = eff.aggregation;
  agg.gmm = eff.gmm;
  agg.ot.epsilon = eff.ot_epsilon;
  agg.ot.max_iters = eff.ot_max_iters;
  agg.ot.marginal_tol = eff.ot_tol;
  FusionOptions fopt;
  fopt.backend = eff.fusion;
  fopt.ot.epsilon = eff.ot_epsilon;
  fopt.ot.max_iters = eff.ot_max_iters;
  fopt.ot.marginal_tol = eff.ot_tol;
  fopt.pooling = eff.pooling;

  const std::size_t workers = worker_count(eff.threads);
  const std::size_t n_export = std::min(eff.export_limit, n);
  res.risk.assign(n, 0.0);
  res.split_label.assign(n, "");
  std::vector<std::size_t> test_all;
  nlohmann::ordered_json fold_json = nlohmann::ordered_json::array();
  double loss_sum = 0.0;
  std::size_t increases = 0;

  for (std::size_t f = 0; f < splits.size(); ++f) {
    const Split& split = splits[f];
    PrototypeBank fold_bank = bank ? *bank : build_bank(cohort, split.train, eff);
    res.banks.push_back(fold_bank);

    Matrix emb(n, 2 * shape.out_dim);
    const bool keep = f + 1 == splits.size();
    std::vector<PatientExport> exports(keep ? n_export : 0);
    parallel_for(n, workers, [&](std::size_t i) {
      const PatientInput& p = cohort.patients[i];
      SlideSummary summary = aggregate(p.patches, fold_bank, agg);
      const PathwaySummary tokens = tokenize(p.expression, cohort.pathways);
      ForwardResult fr = forward(summary, tokens, res.weights, fopt);
      if (!all_finite(fr.embedding)) throw NumericalError("non-finite embedding for " + p.patient_id);
      std::copy(fr.embedding.begin(), fr.embedding.end(), emb.row(i).begin());
      if (i < exports.size()) {
        PatientExport& ex = exports[i];
        ex.patient = i;
        if (eff.aggregation == AggregationBackend::kGmm)
          ex.posteriors = gmm_posteriors(p.patches, fold_bank, eff.gmm);
        ex.assignment = assignment_map(p.patches, fold_bank);
        ex.summary = std::move(summary);
        ex.forward = std::move(fr);
      }
    });
    if (keep) res.exports = std::move(exports);

    const SplitOutcome out = train_and_score(emb, cohort, split, eff, f);
    loss_sum += out.final_loss;
    increases += out.increases;
    std::vector<SurvivalRecord> rec_test;
    for (std::size_t k = 0; k < split.test.size(); ++k) {
      const std::size_t i = split.test[k];
      res.risk[i] = out.risk[k];
      rec_test.push_back(cohort.patients[i].survival);
      test_all.push_back(i);
    }
    if (splits.size() == 1) {
      for (std::size_t i : split.train) res.split_label[i] = "train";
      for (std::size_t i : split.test) res.split_label[i] = "test";
    } else {
      for (std::size_t i : split.test) res.split_label[i] = "fold" + std::to_string(f);
      const auto ci = safe_cindex(out.risk, rec_test);
      nlohmann::ordered_json fj;
      fj["fold"] = f;
      fj["n_test"] = split.test.size();
      fj["c_index"] = ci ? nlohmann::ordered_json(*ci) : nlohmann::ordered_json(nullptr);
      fold_json.push_back(std::move(fj));
    }
  }

  std::sort(test_all.begin(), test_all.end());
  std::vector<double> risk_test;
  std::vector<SurvivalRecord> rec_test;
  for (std::size_t i : test_all) {
    risk_test.push_back(res.risk[i]);
    rec_test.push_back(cohort.patients[i].survival);
  }

  auto& m = res.metrics;
  if (splits.size() == 1) {
    res.c_index = safe_cindex(risk_test, rec_test);
  } else {
    CompensatedSum s;
    std::size_t defined = 0;
    for (const auto& fj : fold_json) {
      if (!fj["c_index"].is_null()) {
        s.add(fj["c_index"].get<double>());
        ++defined;
      }
    }
    if (defined) res.c_index = s.value() / static_cast<double>(defined);
  }
  m["c_index"] = res.c_index ? nlohmann::ordered_json(*res.c_index) : nlohmann::ordered_json(nullptr);

  m["logrank_chi_sq"] = nullptr;
  m["logrank_p"] = nullptr;
  m["km_high"] = nlohmann::ordered_json::array();
  m["km_low"] = nlohmann::ordered_json::array();
  try {
    const RiskGroups groups = stratify_median(risk_test);
    std::vector<SurvivalRecord> high, low;
    for (std::size_t k : groups.high) high.push_back(rec_test[k]);
    for (std::size_t k : groups.low) low.push_back(rec_test[k]);
    m["km_high"] = km_json(high);
    m["km_low"] = km_json(low);
    const LogRankResult lr = logrank_test(high, low);
    m["logrank_chi_sq"] = lr.chi_sq;
    m["logrank_p"] = lr.p;
    m["median_risk"] = groups.median;
  } catch (const Error& e) {
    spdlog::warn("risk stratification skipped: {}", e.what());
  }

  m["n_patients"] = n;
  m["n_test"] = test_all.size();
  m["n_skipped"] = cohort.skipped.size();
  std::size_t events = 0;
  for (const auto& r : rec_test) events += r.event ? 1 : 0;
  m["test_events"] = events;
  if (!fold_json.empty()) m["folds"] = fold_json;
  m["token_accounting"] = {
      {"mean_patches_per_patient", res.tokens.mean_patches},
      {"min_patches_per_patient", res.tokens.min_patches},
      {"max_patches_per_patient", res.tokens.max_patches},
      {"prototypes", res.tokens.prototypes},
      {"reduction_ratio", res.tokens.reduction_ratio},
      {"pathway_tokens", res.tokens.pathway_tokens},
      {"fusion_tokens", res.tokens.fusion_tokens},
  };
  m["training"] = {
      {"loss", to_string(eff.loss)},
      {"batch", eff.train.batch},
      {"epochs", eff.train.epochs},
      {"lr", eff.train.lr},
      {"mean_final_loss", loss_sum / static_cast<double>(splits.size())},
      {"loss_increases", increases},
  };
  m["config"] = {
      {"seed", eff.seed},
      {"aggregation", to_string(eff.aggregation)},
      {"fusion", to_string(eff.fusion)},
      {"encoding", to_string(eff.encoding)},
      {"prototypes", eff.prototypes},
      {"train_fraction", eff.train_fraction},
      {"folds", splits.size() == 1 ? 0 : splits.size()},
  };
  if (res.c_index) spdlog::info("held-out C-index {:.4f} on {} patients", *res.c_index, test_all.size());
  return res;
}

void write_run_outputs(const Cohort& cohort, const PipelineConfig& cfg, const RunResult& res) {
  const fs::path out = cfg.output_dir;
  if (out.empty()) throw ArgumentError("missing output directory");
  fs::create_directories(out);
  write_text_file(out / "metrics.json", res.metrics.dump(2) + "\n");

  std::string risk = "patient_id,split,risk\n";
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    if (res.split_label[i] == "train") continue;
    risk += cohort.patients[i].patient_id + "," + res.split_label[i] + "," +
            format_double(res.risk[i]) + "\n";
  }
  write_text_file(out / "risk_scores.csv", risk);

  std::string skipped = "patient_id,reason\n";
  for (const auto& s : cohort.skipped) skipped += s.patient_id + "," + s.reason + "\n";
  write_text_file(out / "skipped_patients.csv", skipped);

  write_checkpoint(out / "weights", res.weights);
  if (!res.banks.empty()) write_bank_csv(out / "prototype_bank.csv", res.banks.back());

  for (const auto& ex : res.exports) {
    const PatientInput& p = cohort.patients[ex.patient];
    const std::string& id = p.patient_id;
    write_summary_csv(out / "summaries" / (id + ".csv"), id, ex.summary);
    if (!ex.posteriors.empty())
      write_posteriors_csv(out / "posteriors" / (id + ".csv"), p.origins, ex.posteriors);
    write_assignments_csv(out / "assignments" / (id + ".csv"), p.origins, ex.assignment);
    if (!ex.summary.plan.empty())
      write_matrix_csv(out / "aggregation_plans" / (id + ".csv"), ex.summary.plan);
    const FusedTokens& ft = ex.forward.fused;
    if (ft.backend == FusionBackend::kTransformer) {
      write_matrix_csv(out / "attention" / (id + "_attention.csv"), ft.attention);
    } else {
      write_matrix_csv(out / "attention" / (id + "_plan.csv"), ft.plan);
      write_matrix_csv(out / "attention" / (id + "_pathway_self.csv"), ft.pathway_self_attention);
      write_matrix_csv(out / "attention" / (id + "_histo_self.csv"), ft.histo_self_attention);
    }
  }
  spdlog::info("wrote outputs to {}", out.string());
}

PrototypeBank cmd_build_prototypes(const PipelineConfig& cfg) {
  cfg.validate();
  cfg.validate_paths(false);
  if (cfg.bank_path.empty()) throw ArgumentError("missing --bank output path");
  const Cohort cohort = load_cohort(cfg);
  const auto splits = make_splits(cohort.patients.size(), cfg);
  if (splits.size() > 1) spdlog::warn("--folds given: the bank is fitted on the first fold's training patients");
  PrototypeBank bank = build_bank(cohort, splits.front().train, cfg);
  write_bank_csv(cfg.bank_path, bank);
  spdlog::info("wrote {} prototypes to {}", bank.count(), cfg.bank_path.string());
  return bank;
}

RunResult cmd_run(const PipelineConfig& cfg) {
  cfg.validate();
  const bool use_bank = !cfg.build_prototypes;
  cfg.validate_paths(use_bank);
  const Cohort cohort = load_cohort(cfg);
  std::optional<PrototypeBank> bank;
  if (use_bank) {
    bank = read_bank_csv(cfg.bank_path);
    if (bank->count() != cfg.prototypes)
      spdlog::info("using the bank's {} prototypes", bank->count());
  }
  RunResult res = run_pipeline(cohort, cfg, bank);
  write_run_outputs(cohort, cfg, res);
  return res;
}

}  // namespace protofuse
