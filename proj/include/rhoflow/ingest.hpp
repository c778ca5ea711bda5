#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rhoflow/types.hpp"

namespace rhoflow {

/// Column-name mapping for raw trajectory files.
struct CsvSchemaConfig {
    std::string driver_id = "driver_id";
    std::string time_s = "time_s";
    std::string pos_m = "pos_m";
    std::string speed_mps = "speed_mps";
    std::string lane = "lane";        // optional column
    std::string leader_id = "leader_id";  // optional column
};

struct IngestConfig {
    CsvSchemaConfig schema;
    double dt = 0.1;            // expected sampling interval (s)
    double smooth_std = 0.3;    // Gaussian smoothing std (s); 0 disables
    Index min_len = 50;         // minimum retained segment length (steps)
    double max_gap = 0.15;      // split segments at timestamp gaps above this (s)
    double r_density = 50.0;    // omni-directional density radius (m)
    double front_range = 100.0;       // same-lane forward perception range (m)
    double lateral_range = 30.0;      // adjacent-lane perception band (m)
    double object_horizon = 200.0;    // d_ped / d_stop cap when nothing is annotated (m)
    double vehicle_length = 0.0;      // subtracted from center-to-center spacing (m)
    bool delta_v_leader_minus_ego = true;  // sign convention for relative speed
};

/// One driver's raw samples, time-ordered at fixed dt.
struct RawTrajectory {
    std::string driver_id;
    std::vector<double> t;
    std::vector<double> pos;
    std::vector<double> speed;
    std::vector<std::string> lane;
    std::vector<std::string> leader;
    bool smoothed = false;

    Index size() const { return static_cast<Index>(t.size()); }
};

struct ParseResult {
    std::vector<RawTrajectory> trajectories;  // in order of first appearance
    long rows = 0;
    long rejected = 0;
    std::vector<std::string> warnings;
};

/// Annotated static object (pedestrian or stop control) on the corridor.
struct StaticObject {
    std::string kind;  // "ped" | "stop"
    double pos = 0.0;
};

struct PreprocessSummary {
    long rows_in = 0;
    long rows_rejected = 0;
    long drivers_in = 0;
    long segments_retained = 0;
    long segments_dropped = 0;
    long observations_dropped = 0;
    long records_no_leader = 0;
    long observations_out = 0;
    Matrix column_ranges;  // 7 x 2 min/max of the canonical numeric columns
    std::vector<std::string> warnings;
};

/// Streams the raw file into per-driver trajectories. Malformed rows are
/// counted and skipped with their line numbers in the warnings.
ParseResult parse_raw_csv(const std::string& path, const CsvSchemaConfig& schema);

/// Discrete Gaussian smoothing, kernel truncated at +-3 std and renormalized
/// at the edges. std_steps <= 0 returns the input unchanged.
std::vector<double> smooth_series(const std::vector<double>& x, double std_steps);

/// Smooths position and speed in place; trajectories shorter than the kernel
/// support pass through with a warning.
void smooth_trajectory(RawTrajectory& traj, double std_s, double dt,
                       std::vector<std::string>* warnings);

struct FilterResult {
    std::vector<RawTrajectory> segments;
    long segments_retained = 0;
    long segments_dropped = 0;
    long observations_dropped = 0;
};

/// Splits at timestamp gaps larger than max_gap and drops segments shorter
/// than min_len.
FilterResult filter_continuous(const std::vector<RawTrajectory>& trajectories, Index min_len,
                               double max_gap);

/// Full raw pipeline: parse, split, smooth, derive behavior and context,
/// enforce continuity of the derived car-following segments.
Dataset preprocess(const std::string& path, const IngestConfig& config,
                   const std::vector<StaticObject>& objects, PreprocessSummary* summary);

/// Sidecar object table: header `kind,pos_m`.
std::vector<StaticObject> parse_objects_csv(const std::string& path);

/// Canonical preprocessed CSV, the direct-ingest fast path. Columns:
/// driver_id,time_s,delta_v,accel,headway,d_ped,d_stop,density,v_avg.
Dataset load_preprocessed_csv(const std::string& path);
void save_preprocessed_csv(const Dataset& dataset, const std::string& path);

/// Per-axis [lo_pct, hi_pct] percentiles of the behavioral columns, 3 x 2.
Matrix behavioral_percentiles(const Dataset& dataset, double lo_pct, double hi_pct);

}  // namespace rhoflow
