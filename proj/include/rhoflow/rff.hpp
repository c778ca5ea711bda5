#pragma once

#include <cstdint>
#include <span>

#include "rhoflow/types.hpp"

namespace rhoflow {

/// Frozen random cosine projection phi_j(x) = cos(w_j . x + b_j). Sampled once
/// from (seed, bandwidth) and shared by every driver and timestep of a model;
/// inputs are standardized with `input_norm` before projection.
struct RFFMap {
    Index dim_in = 0;
    Index dim_out = 0;
    double bandwidth = 1.0;
    std::uint64_t seed = 0;
    Matrix weights;          // dim_out x dim_in, rows w_j ~ N(0, bandwidth^-2 I)
    Vector offsets;          // dim_out, b_j in [0, 2*pi)
    Normalization input_norm;  // applied to x before w_j . x + b_j
};

/// Samples a fresh map. Weight rows are iid Gaussian with standard deviation
/// 1/bandwidth per entry; offsets are iid uniform on [0, 2*pi). Deterministic
/// in all four arguments. The returned map standardizes with the identity.
RFFMap build_rff_map(Index dim_in, Index dim_out, double bandwidth, std::uint64_t seed);

/// Raw cosine features of a (standardized) input; every entry in [-1, 1].
Vector embed(const RFFMap& map, const Vector& x);
Vector embed(const RFFMap& map, const BehavioralVector& x);

/// Unit-norm features phi(x) / ||phi(x)||.
Vector embed_normalized(const RFFMap& map, const Vector& x);
Vector embed_normalized(const RFFMap& map, const BehavioralVector& x);

/// Monte-Carlo kernel value (2/D) sum_j phi_j(x) phi_j(y); converges to the
/// Gaussian RBF kernel of the standardized inputs as D grows.
double kernel_estimate(const RFFMap& map, const Vector& x, const Vector& y);
double kernel_estimate(const RFFMap& map, const BehavioralVector& x, const BehavioralVector& y);

/// exp(-||x - y||^2 / (2 sigma^2)), the target of kernel_estimate.
double rbf_kernel(const Vector& x, const Vector& y, double sigma);

/// Per-dimension mean/std over the sample; zero-variance dimensions get unit
/// scale so standardization stays invertible.
Normalization fit_normalization(std::span<const BehavioralVector> sample);

/// Median pairwise distance among at most `max_sample` standardized vectors.
double median_heuristic_bandwidth(std::span<const BehavioralVector> sample,
                                  const Normalization& norm,
                                  Index max_sample = 2048,
                                  std::uint64_t seed = 0);

}  // namespace rhoflow
