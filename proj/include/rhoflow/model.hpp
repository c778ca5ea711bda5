#pragma once

#include <span>
#include <vector>

#include "rhoflow/density.hpp"
#include "rhoflow/rff.hpp"
#include "rhoflow/types.hpp"

namespace rhoflow {

/// Which state the per-step likelihood is evaluated against: the predicted
/// state (default) or the state after the observation update.
enum class LikelihoodTarget { kPrediction, kPostUpdate };

/// How a driver's state is initialized at the first observation.
enum class InitState { kContextMixture, kMaximallyMixed };

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// The full trainable parameter set: K profile factors, per-profile context
/// coefficients, and the raw persistence/update scalars. alpha and eta live
/// on sigmoid scale; raw values past +-40 saturate exactly to 1 / 0 in
/// double precision, which is how the alpha = 1 boundary is expressed.
struct ModelParams {
    RFFMap rff;
    std::vector<ProfileFactor> profiles;
    std::vector<Vector> betas;  // K vectors of length q
    double alpha_raw = 0.0;
    double eta_raw = 0.0;
    Normalization context_norm;
    LikelihoodTarget likelihood_target = LikelihoodTarget::kPrediction;
    InitState init_state = InitState::kContextMixture;
    double epsilon = 1e-12;  // likelihood floor inside the log

    Index num_profiles() const { return static_cast<Index>(profiles.size()); }
    Index dim() const { return rff.dim_out; }
    Index context_dim() const { return context_norm.dim(); }
    double alpha() const { return sigmoid(alpha_raw); }
    double eta() const { return sigmoid(eta_raw); }

    std::vector<DensityMatrix> realized_profiles() const;
};

struct DriverState {
    DensityMatrix rho;
    std::string driver_id;
    Index t = 0;
};

struct StepRecord {
    Vector pi;              // K activation weights, sum 1
    double likelihood = 0;  // in [0, 1]
    double log_likelihood = 0;
};

struct ForwardResult {
    std::vector<StepRecord> steps;
    DriverState final_state;
    double nll = 0.0;
};

/// Numerically stabilized softmax (max subtraction).
Vector softmax(const Vector& logits);

/// Activation weights pi_k = softmax_k(beta_k . c_std) for a standardized
/// context.
Vector activation(std::span<const Vector> betas, const Vector& c_std);
Vector activation(const ModelParams& params, const ContextVector& c);

/// (1 - alpha) * prev + alpha * mixture.
DensityMatrix predict_state(const DensityMatrix& prev, const DensityMatrix& mixture,
                            double alpha);
DensityMatrix predict_state(const ModelParams& params, const DriverState& prev,
                            const ContextVector& c);

/// Born-rule score phi^T rho phi of a unit feature vector; in [0, 1] for any
/// valid density matrix.
double likelihood(const DensityMatrix& rho, const Vector& phi);

/// (1 - eta) * rho_pred + eta * phi phi^T.
DensityMatrix update_state(const DensityMatrix& rho_pred, const Vector& phi, double eta);
DensityMatrix update_state(const ModelParams& params, const DensityMatrix& rho_pred,
                           const Vector& phi);

/// State at the driver's first observation, per params.init_state.
DensityMatrix initial_state(const ModelParams& params,
                            std::span<const DensityMatrix> profiles, const Vector& c_std);

/// Sequential predict / evaluate / update pass over one trajectory.
/// NLL is -sum_t log(max(p_t, 0) + epsilon).
ForwardResult forward_driver(const ModelParams& params, const Trajectory& trajectory);

}  // namespace rhoflow
