#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "rhoflow/errors.hpp"

namespace rhoflow {

using Scalar = double;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Observed longitudinal driving action: relative speed to the leader (m/s),
/// signed acceleration (m/s^2), and headway distance (m).
struct BehavioralVector {
    double delta_v = 0.0;
    double accel = 0.0;
    double headway = 0.0;

    Eigen::Vector3d vec() const { return {delta_v, accel, headway}; }

    bool finite() const {
        return std::isfinite(delta_v) && std::isfinite(accel) && std::isfinite(headway);
    }
};

/// Environment descriptor: distance to nearest pedestrian (m), distance to
/// nearest stop control (m), surrounding-agent count, and mean observed
/// speed in the perception zones (m/s).
struct ContextVector {
    double d_ped = 0.0;
    double d_stop = 0.0;
    double density = 0.0;
    double v_avg = 0.0;

    Eigen::Vector4d vec() const { return {d_ped, d_stop, density, v_avg}; }

    bool finite() const {
        return std::isfinite(d_ped) && std::isfinite(d_stop) && std::isfinite(density) &&
               std::isfinite(v_avg);
    }
};

/// Per-dimension affine standardization x -> (x - mean) / scale.
struct Normalization {
    Vector mean;
    Vector scale;

    static Normalization identity(Index n) {
        Normalization norm;
        norm.mean = Vector::Zero(n);
        norm.scale = Vector::Ones(n);
        return norm;
    }

    Vector apply(const Vector& x) const {
        return (x - mean).cwiseQuotient(scale);
    }

    Vector invert(const Vector& z) const {
        return z.cwiseProduct(scale) + mean;
    }

    Index dim() const { return mean.size(); }
};

/// One driver's chronologically ordered observations at fixed sampling
/// interval dt.
struct Trajectory {
    std::string driver_id;
    double t0 = 0.0;
    double dt = 0.1;
    std::vector<BehavioralVector> x;
    std::vector<ContextVector> c;

    Index size() const { return static_cast<Index>(x.size()); }
};

struct DatasetInfo {
    std::string source;
    long rows_in = 0;
    long rows_rejected = 0;
    long records_no_leader = 0;
    long segments_retained = 0;
    long segments_dropped = 0;
    long observations_dropped = 0;
    std::vector<std::string> warnings;
};

struct Dataset {
    std::vector<Trajectory> drivers;
    DatasetInfo info;

    Index total_observations() const {
        Index n = 0;
        for (const auto& d : drivers) n += d.size();
        return n;
    }
};

}  // namespace rhoflow
