#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "rhoflow/model.hpp"

namespace rhoflow {

struct SpectralRow {
    Index profile = 0;
    Vector eigenvalues;      // top_m, nonincreasing
    Index effective_rank = 0;  // eigenvalues >= threshold, over the full spectrum
};

struct SpectralReport {
    std::vector<SpectralRow> rows;
    Index top_m = 4;
    double rank_threshold = 0.01;
};

SpectralReport spectral_report(const ModelParams& params, Index top_m = 4,
                               double rank_threshold = 0.01);

/// Context coefficients in standardized units. The canonical table subtracts
/// the across-profile mean per context variable, which removes the softmax
/// shift degeneracy.
struct ContextReport {
    Matrix beta_raw;        // K x q as stored
    Matrix beta_canonical;  // K x q, column means removed
    Normalization norm;
    std::array<std::string, 4> labels{"d_ped", "d_stop", "density", "v_avg"};
    std::vector<Index> argmax_context;  // per profile, by |canonical coefficient|
};

ContextReport context_report(const ModelParams& params);

struct GridAxis {
    double lo = 0.0;
    double hi = 1.0;
    Index n = 41;
};

/// Physical-unit evaluation grid over (delta_v, accel, headway).
struct GridSpec {
    std::array<GridAxis, 3> axes;
};

/// Per-mode activation field g_m(x) = (phi(x) . v_m)^2 over the grid, with
/// per-axis marginals (means over the two collapsed axes). Values flattened
/// delta_v-major, headway-fastest.
struct ActivationGridReport {
    GridSpec spec;
    Index profile = 0;
    std::vector<Index> modes;
    Vector mode_eigenvalues;
    std::vector<std::vector<double>> values;                  // per mode
    std::vector<std::array<std::vector<double>, 3>> marginals;  // per mode, per axis
};

ActivationGridReport activation_grid(const ModelParams& params, Index profile,
                                     std::span<const Index> modes, const GridSpec& spec);

struct DistanceReport {
    Matrix distances;  // K x K, symmetric, zero diagonal
};

DistanceReport distance_report(const ModelParams& params);

struct TraceRecord {
    Vector pi;
    double likelihood = 0.0;
    double top_eigenvalue = 0.0;
    Vector dist_to_profiles;  // Frobenius distance of rho_i(t) to each profile
};

/// Instruments the forward pass of one trajectory.
std::vector<TraceRecord> state_trace(const ModelParams& params, const Trajectory& trajectory);

}  // namespace rhoflow
