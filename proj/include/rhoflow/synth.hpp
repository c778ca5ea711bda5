#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "rhoflow/model.hpp"

namespace rhoflow {

/// Candidate grid over standardized behavior space; draws are mapped back to
/// physical units through the planted feature map's input normalization.
struct BehaviorGrid {
    Eigen::Vector3d lo{-2.5, -2.5, -2.5};
    Eigen::Vector3d hi{2.5, 2.5, 2.5};
    std::array<Index, 3> n{9, 9, 9};

    Index size() const { return n[0] * n[1] * n[2]; }
};

/// Piecewise-constant context schedule: driver i starts at regime
/// (i mod R) and advances one regime every block_len steps.
struct RegimeSchedule {
    std::vector<ContextVector> regimes;
    Index block_len = 50;
};

struct SynthConfig {
    Index drivers = 200;
    Index steps = 100;
    std::uint64_t seed = 7;
    double dt = 0.1;
    RegimeSchedule schedule;
    BehaviorGrid grid;
};

struct GroundTruth {
    ModelParams params;
    SynthConfig config;
};

struct SynthResult {
    Dataset data;
    std::vector<Matrix> activations;          // per driver, K x T
    std::vector<std::vector<Index>> choices;  // per driver, chosen grid cell per step
};

/// Physical-unit context sequences for every driver; deterministic in config.
std::vector<std::vector<ContextVector>> sample_contexts(const SynthConfig& config);

/// Physical coordinates of every grid cell, indexed i0-major (delta_v slow,
/// headway fast), as used by `choices`.
std::vector<BehavioralVector> grid_points(const BehaviorGrid& grid,
                                          const Normalization& input_norm);

/// Generates trajectories by running the state recursion and drawing each
/// behavioral vector from the grid with probability proportional to its
/// quadratic score under the predicted state.
SynthResult sample_behavior(const GroundTruth& truth);

/// Canonical preprocessed CSV (see ingest); bit-stable given the dataset.
void emit_csv(const Dataset& dataset, const std::string& path);

/// JSON sidecar with the planted parameters, config, and per-step activations.
void emit_sidecar(const GroundTruth& truth, const SynthResult& result,
                  const std::string& path);

/// Planted two-profile fixture: one rank-1 profile, one rank-2 profile,
/// opposing density/speed context activation.
GroundTruth make_two_profile_truth(Index dim = 32, std::uint64_t seed = 7);

/// Planted four-profile fixture: three rank-1 regimes plus one rank-2
/// regime, each tied to its own context regime.
GroundTruth make_four_profile_truth(Index dim = 32, std::uint64_t seed = 7);

}  // namespace rhoflow
