#include "rhoflow/analysis.hpp"

#include <algorithm>
#include <cmath>

namespace rhoflow {

namespace {

Vector axis_points(const GridAxis& axis) {
    Vector v(axis.n);
    if (axis.n == 1) {
        v(0) = axis.lo;
        return v;
    }
    for (Index i = 0; i < axis.n; ++i)
        v(i) = axis.lo +
               (axis.hi - axis.lo) * static_cast<double>(i) / static_cast<double>(axis.n - 1);
    return v;
}

}  // namespace

SpectralReport spectral_report(const ModelParams& params, Index top_m, double rank_threshold) {
    SpectralReport report;
    report.top_m = std::min(top_m, params.dim());
    report.rank_threshold = rank_threshold;
    for (Index k = 0; k < params.num_profiles(); ++k) {
        const DensityMatrix rho = realize(params.profiles[static_cast<std::size_t>(k)]);
        const SpectralDecomposition full = spectral(rho, rho.dim());
        SpectralRow row;
        row.profile = k;
        row.eigenvalues = full.eigenvalues.head(report.top_m);
        row.effective_rank =
            (full.eigenvalues.array() >= rank_threshold).count();
        report.rows.push_back(std::move(row));
    }
    return report;
}

ContextReport context_report(const ModelParams& params) {
    const Index k_profiles = params.num_profiles();
    const Index q = params.context_dim();
    ContextReport report;
    report.norm = params.context_norm;
    report.beta_raw.resize(k_profiles, q);
    for (Index k = 0; k < k_profiles; ++k)
        report.beta_raw.row(k) = params.betas[static_cast<std::size_t>(k)].transpose();
    report.beta_canonical = report.beta_raw.rowwise() - report.beta_raw.colwise().mean();
    report.argmax_context.resize(static_cast<std::size_t>(k_profiles));
    for (Index k = 0; k < k_profiles; ++k) {
        Index arg = 0;
        report.beta_canonical.row(k).cwiseAbs().maxCoeff(&arg);
        report.argmax_context[static_cast<std::size_t>(k)] = arg;
    }
    return report;
}

ActivationGridReport activation_grid(const ModelParams& params, Index profile,
                                     std::span<const Index> modes, const GridSpec& spec) {
    if (profile < 0 || profile >= params.num_profiles())
        throw InvalidArgument("activation_grid: profile index out of range");
    if (modes.empty()) throw InvalidArgument("activation_grid: no modes requested");
    for (const auto& axis : spec.axes)
        if (axis.n < 1) throw InvalidArgument("activation_grid: axis needs at least one point");
    Index max_mode = 0;
    for (Index m : modes) {
        if (m < 0 || m >= params.dim())
            throw InvalidArgument("activation_grid: mode index exceeds the stored spectrum");
        max_mode = std::max(max_mode, m);
    }

    const DensityMatrix rho = realize(params.profiles[static_cast<std::size_t>(profile)]);
    const SpectralDecomposition decomp = spectral(rho, max_mode + 1);

    ActivationGridReport report;
    report.spec = spec;
    report.profile = profile;
    report.modes.assign(modes.begin(), modes.end());
    report.mode_eigenvalues.resize(static_cast<Index>(modes.size()));
    for (std::size_t i = 0; i < modes.size(); ++i)
        report.mode_eigenvalues(static_cast<Index>(i)) = decomp.eigenvalues(modes[i]);

    const Vector a0 = axis_points(spec.axes[0]);
    const Vector a1 = axis_points(spec.axes[1]);
    const Vector a2 = axis_points(spec.axes[2]);
    const Index n0 = a0.size(), n1 = a1.size(), n2 = a2.size();
    const Index total = n0 * n1 * n2;

    report.values.assign(modes.size(), std::vector<double>(static_cast<std::size_t>(total)));
    report.marginals.assign(modes.size(), {});
    for (std::size_t m = 0; m < modes.size(); ++m) {
        report.marginals[m][0].assign(static_cast<std::size_t>(n0), 0.0);
        report.marginals[m][1].assign(static_cast<std::size_t>(n1), 0.0);
        report.marginals[m][2].assign(static_cast<std::size_t>(n2), 0.0);
    }

    Index flat = 0;
    for (Index i = 0; i < n0; ++i)
        for (Index j = 0; j < n1; ++j)
            for (Index k = 0; k < n2; ++k, ++flat) {
                const BehavioralVector x{a0(i), a1(j), a2(k)};
                const Vector phi = embed_normalized(params.rff, x);
                for (std::size_t m = 0; m < modes.size(); ++m) {
                    const double dot = phi.dot(decomp.eigenvectors.col(modes[m]));
                    const double g = dot * dot;
                    report.values[m][static_cast<std::size_t>(flat)] = g;
                    report.marginals[m][0][static_cast<std::size_t>(i)] += g;
                    report.marginals[m][1][static_cast<std::size_t>(j)] += g;
                    report.marginals[m][2][static_cast<std::size_t>(k)] += g;
                }
            }

    for (std::size_t m = 0; m < modes.size(); ++m) {
        for (auto& v : report.marginals[m][0]) v /= static_cast<double>(n1 * n2);
        for (auto& v : report.marginals[m][1]) v /= static_cast<double>(n0 * n2);
        for (auto& v : report.marginals[m][2]) v /= static_cast<double>(n0 * n1);
    }
    return report;
}

DistanceReport distance_report(const ModelParams& params) {
    const auto rhos = params.realized_profiles();
    const Index k_profiles = params.num_profiles();
    DistanceReport report;
    report.distances = Matrix::Zero(k_profiles, k_profiles);
    for (Index i = 0; i < k_profiles; ++i)
        for (Index j = i + 1; j < k_profiles; ++j) {
            const double d = frobenius_distance(rhos[static_cast<std::size_t>(i)],
                                                rhos[static_cast<std::size_t>(j)]);
            report.distances(i, j) = d;
            report.distances(j, i) = d;
        }
    return report;
}

std::vector<TraceRecord> state_trace(const ModelParams& params, const Trajectory& trajectory) {
    if (trajectory.size() == 0) throw InvalidArgument("state_trace: empty trajectory");
    const auto rhos = params.realized_profiles();
    const double alpha = params.alpha();
    const double eta = params.eta();

    std::vector<TraceRecord> records;
    records.reserve(static_cast<std::size_t>(trajectory.size()));
    DensityMatrix state;
    for (Index t = 0; t < trajectory.size(); ++t) {
        const Vector c_std =
            params.context_norm.apply(Vector(trajectory.c[static_cast<std::size_t>(t)].vec()));
        const Vector pi = activation(params.betas, c_std);
        if (t == 0) state = initial_state(params, rhos, c_std);
        const DensityMatrix pred = predict_state(state, mix(pi, rhos), alpha);
        const Vector phi = embed_normalized(params.rff, trajectory.x[static_cast<std::size_t>(t)]);
        state = update_state(pred, phi, eta);

        TraceRecord rec;
        rec.pi = pi;
        rec.likelihood = params.likelihood_target == LikelihoodTarget::kPrediction
                             ? likelihood(pred, phi)
                             : likelihood(state, phi);
        rec.top_eigenvalue = spectral(state, 1).eigenvalues(0);
        rec.dist_to_profiles.resize(params.num_profiles());
        for (Index k = 0; k < params.num_profiles(); ++k)
            rec.dist_to_profiles(k) =
                frobenius_distance(state, rhos[static_cast<std::size_t>(k)]);
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace rhoflow
