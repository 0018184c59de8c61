#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace protofuse {

struct CheckResult {
  std::string name;
  bool pass = false;
  double max_deviation = 0.0;
  double threshold = 0.0;
  std::size_t instances = 0;
  double seconds = 0.0;
  std::string detail;
};

enum class Sabotage { kNone, kCoxGradient };
Sabotage parse_sabotage(const std::string& s);

struct VerifyOptions {
  std::uint64_t seed = 7;
  std::size_t equivalence_instances = 200;
  std::size_t em_instances = 100;
  std::size_t sinkhorn_instances = 60;
  std::size_t cox_instances = 50;
  std::size_t cindex_instances = 1000;
  Sabotage sabotage = Sabotage::kNone;
};

/// |C_g T̂ - softmax cross-attention| over random instances with
/// C_g, C_h, d in 1..8; threshold 1e-8, solver residual 1e-12.
CheckResult check_equivalence_sweep(const VerifyOptions& opt);
/// GMM log-likelihood over 5 EM iterations never drops by more than 1e-9.
CheckResult check_em_monotonicity(const VerifyOptions& opt);
/// Aggregation and fusion plans meet both marginals within 1e-6, and the
/// log-domain solver matches the dense reference within 1e-10 when m·k <= 64.
CheckResult check_sinkhorn_marginals(const VerifyOptions& opt);
/// Analytic Cox gradient vs central differences (h = 1e-6) of the reference
/// loss, max relative error 1e-5.
CheckResult check_cox_gradient(const VerifyOptions& opt);
/// concordance_index == brute force, bit for bit.
CheckResult check_cindex_oracle(const VerifyOptions& opt);

std::vector<CheckResult> run_verification(const VerifyOptions& opt);

/// "PASS name  max_dev=... threshold=... (n instances, s)"
std::string format_check(const CheckResult& r);

}  // namespace protofuse
