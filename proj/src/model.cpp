#include "rhoflow/model.hpp"

#include <cmath>
#include <string>

namespace rhoflow {

namespace {

constexpr double kUnitNormTol = 1e-12;

}  // namespace

std::vector<DensityMatrix> ModelParams::realized_profiles() const {
    std::vector<DensityMatrix> out;
    out.reserve(profiles.size());
    for (const auto& factor : profiles) out.push_back(realize(factor));
    return out;
}

Vector softmax(const Vector& logits) {
    const double shift = logits.maxCoeff();
    Vector e = (logits.array() - shift).exp();
    return e / e.sum();
}

Vector activation(std::span<const Vector> betas, const Vector& c_std) {
    if (betas.empty()) throw InvalidArgument("activation: no profiles");
    if (!c_std.allFinite()) throw InvalidArgument("activation: context has NaN or Inf");
    Vector logits(static_cast<Index>(betas.size()));
    for (std::size_t k = 0; k < betas.size(); ++k)
        logits(static_cast<Index>(k)) = betas[k].dot(c_std);
    return softmax(logits);
}

Vector activation(const ModelParams& params, const ContextVector& c) {
    if (!c.finite()) throw InvalidArgument("activation: context has NaN or Inf");
    return activation(params.betas, params.context_norm.apply(Vector(c.vec())));
}

DensityMatrix predict_state(const DensityMatrix& prev, const DensityMatrix& mixture,
                            double alpha) {
    return DensityMatrix{(1.0 - alpha) * prev.m + alpha * mixture.m};
}

DensityMatrix predict_state(const ModelParams& params, const DriverState& prev,
                            const ContextVector& c) {
    const Vector pi = activation(params, c);
    const auto rhos = params.realized_profiles();
    return predict_state(prev.rho, mix(pi, rhos), params.alpha());
}

double likelihood(const DensityMatrix& rho, const Vector& phi) {
    if (std::abs(phi.norm() - 1.0) > kUnitNormTol)
        throw InvalidArgument("likelihood: feature vector is not unit norm");
    if (phi.size() != rho.dim())
        throw InvalidArgument("likelihood: dimension mismatch");
    return phi.dot(rho.m * phi);
}

DensityMatrix update_state(const DensityMatrix& rho_pred, const Vector& phi, double eta) {
    if (std::abs(phi.norm() - 1.0) > kUnitNormTol)
        throw InvalidArgument("update_state: feature vector is not unit norm");
    return DensityMatrix{(1.0 - eta) * rho_pred.m + eta * (phi * phi.transpose())};
}

DensityMatrix update_state(const ModelParams& params, const DensityMatrix& rho_pred,
                           const Vector& phi) {
    return update_state(rho_pred, phi, params.eta());
}

DensityMatrix initial_state(const ModelParams& params,
                            std::span<const DensityMatrix> profiles, const Vector& c_std) {
    if (params.init_state == InitState::kMaximallyMixed)
        return maximally_mixed(params.dim());
    const Vector pi = activation(params.betas, c_std);
    return mix(pi, profiles);
}

ForwardResult forward_driver(const ModelParams& params, const Trajectory& trajectory) {
    const Index steps = trajectory.size();
    if (steps == 0) throw InvalidArgument("forward_driver: empty trajectory");
    if (trajectory.c.size() != trajectory.x.size())
        throw InvalidArgument("forward_driver: behavior/context length mismatch");

    const auto rhos = params.realized_profiles();
    const double alpha = params.alpha();
    const double eta = params.eta();

    ForwardResult result;
    result.steps.reserve(static_cast<std::size_t>(steps));
    result.nll = 0.0;

    DensityMatrix state;
    for (Index t = 0; t < steps; ++t) {
        try {
            const Vector c_std =
                params.context_norm.apply(Vector(trajectory.c[static_cast<std::size_t>(t)].vec()));
            const Vector pi = activation(params.betas, c_std);
            if (t == 0) state = initial_state(params, rhos, c_std);

            const DensityMatrix pred = predict_state(state, mix(pi, rhos), alpha);
            const Vector phi =
                embed_normalized(params.rff, trajectory.x[static_cast<std::size_t>(t)]);
            const DensityMatrix next = update_state(pred, phi, eta);

            const double p = params.likelihood_target == LikelihoodTarget::kPrediction
                                 ? likelihood(pred, phi)
                                 : likelihood(next, phi);
            const double log_p = std::log(std::max(p, 0.0) + params.epsilon);

            result.steps.push_back(StepRecord{pi, p, log_p});
            result.nll -= log_p;
            state = next;
        } catch (const std::exception& e) {
            throw NumericalError("forward_driver: driver '" + trajectory.driver_id +
                                 "' step " + std::to_string(t) + ": " + e.what());
        }
    }

    result.final_state = DriverState{std::move(state), trajectory.driver_id, steps - 1};
    return result;
}

}  // namespace rhoflow
