#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "rhoflow/model.hpp"

namespace rhoflow {

struct TrainConfig {
    int k_profiles = 4;
    Index rff_dim = 100;
    Index rank = 0;           // factor columns per profile; 0 means full (= rff_dim)
    double bandwidth = 0.0;   // 0 selects the median heuristic
    Index bandwidth_sample = 2048;
    std::uint64_t seed = 1;
    double learning_rate = 1e-2;
    int epochs = 200;
    int batch = 0;       // drivers per gradient step; 0 = all drivers
    int truncation = 0;  // BPTT window in steps; 0 = full backpropagation
    double epsilon = 1e-12;
    int restarts = 1;
    int threads = 1;  // 0 = hardware concurrency
    bool deterministic = true;
    double init_noise = 0.3;  // Frobenius mass of factor-init noise relative to the seed state
    LikelihoodTarget likelihood_target = LikelihoodTarget::kPrediction;
    InitState init_state = InitState::kContextMixture;
    bool check_constraints = false;  // revalidate realized profiles after every step
    bool run_grad_check = false;     // audit the fitted model's gradients (costly)
    double grad_check_step = 1e-5;
    double grad_check_tolerance = 1e-4;
};

/// Same shape as the trainable parameters.
struct Gradients {
    std::vector<Matrix> profiles;  // d loss / d B_k
    std::vector<Vector> betas;
    double alpha_raw = 0.0;
    double eta_raw = 0.0;

    bool all_finite() const;
};

struct LossInfo {
    double total_nll = 0.0;
    Index observations = 0;

    double per_observation() const {
        return observations > 0 ? total_nll / static_cast<double>(observations) : 0.0;
    }
};

struct EpochRecord {
    int restart = 0;
    int epoch = 0;
    double nll_per_obs = 0.0;
    double wall_ms = 0.0;
};

struct GradCheckGroup {
    std::string name;
    bool skipped = false;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;
    double step = 0.0;
    double tolerance = 0.0;
    double max_rel_err = 0.0;  // over checked groups
    bool passed = false;
    bool step_size_suspect = false;  // step too coarse for the tolerance regime
};

struct GradCheckOptions {
    bool check_profiles = true;
    bool check_betas = true;
    bool check_alpha = true;
    bool check_eta = true;
    bool inject_fault = false;  // harness self-test: corrupt one analytic group
};

struct TrainReport {
    std::vector<EpochRecord> epochs;   // all restarts, epoch-major
    std::vector<double> restart_final;  // final nll/obs per restart (NaN if aborted)
    int best_restart = -1;
    double final_nll_per_obs = 0.0;
    double wall_ms_total = 0.0;
    std::optional<GradCheckReport> grad_check;  // present when the config asked for it
    std::vector<std::string> diagnostics;
};

struct FitResult {
    ModelParams params;
    TrainReport report;
};

struct SelectKRow {
    int k = 0;
    double mean_nll = 0.0;
    double std_nll = 0.0;
    std::vector<double> restart_nll;
    std::vector<Vector> spectra;  // top-4 eigenvalues per profile of the best restart
};

/// Total negative log-likelihood of the dataset under fixed parameters.
LossInfo loss(const ModelParams& params, const Dataset& dataset);

/// Exact reverse-mode gradient of `loss` through the full temporal recursion
/// (optionally truncated to windows of `truncation` steps).
Gradients gradient(const ModelParams& params, const Dataset& dataset, int truncation = 0);

/// Trains `config.restarts` independent initializations with Adam and keeps
/// the restart with the lowest final per-observation NLL (ties favor the
/// earlier seed). `fixed_map`, when given, is used verbatim instead of
/// sampling a fresh feature map (profiles are only comparable across models
/// sharing one map). Per-epoch records stream to `epoch_csv` when non-null.
FitResult fit(const TrainConfig& config, const Dataset& dataset,
              const RFFMap* fixed_map = nullptr, std::ostream* epoch_csv = nullptr);

/// `fit` continuing from explicit initial parameters (single restart).
FitResult fit_from(const ModelParams& init, const TrainConfig& config, const Dataset& dataset,
                   std::ostream* epoch_csv = nullptr);

/// Central-finite-difference verification of the reverse-mode gradient,
/// reported per parameter group. Failures are reported, never thrown.
GradCheckReport grad_check(const ModelParams& params, const Dataset& dataset, double step,
                           double tolerance, const GradCheckOptions& options = {});

/// Fits every candidate K under identical settings and seeds.
std::vector<SelectKRow> select_k(const TrainConfig& base, const Dataset& dataset,
                                 const std::vector<int>& candidates,
                                 const RFFMap* fixed_map = nullptr);

}  // namespace rhoflow
