#include "rhoflow/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <unordered_map>

#include "rhoflow/io_util.hpp"

namespace rhoflow {

namespace {

constexpr double kTimeTol = 1e-6;

std::optional<long> lane_number(const std::string& lane) {
    if (lane.empty()) return std::nullopt;
    long v{};
    const auto res = std::from_chars(lane.data(), lane.data() + lane.size(), v);
    if (res.ec != std::errc{} || res.ptr != lane.data() + lane.size()) return std::nullopt;
    return v;
}

// Index of a header column, or -1.
int find_column(const std::vector<std::string>& header, const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
    return -1;
}

}  // namespace

ParseResult parse_raw_csv(const std::string& path, const CsvSchemaConfig& schema) {
    std::ifstream in(path);
    if (!in) throw DataError("parse_raw_csv: cannot open " + path);

    std::string line;
    if (!std::getline(in, line)) throw DataError("parse_raw_csv: empty file " + path);
    const auto header = split_csv(line);

    const int c_driver = find_column(header, schema.driver_id);
    const int c_time = find_column(header, schema.time_s);
    const int c_pos = find_column(header, schema.pos_m);
    const int c_speed = find_column(header, schema.speed_mps);
    const int c_lane = find_column(header, schema.lane);
    const int c_leader = find_column(header, schema.leader_id);
    if (c_driver < 0 || c_time < 0 || c_pos < 0 || c_speed < 0)
        throw DataError("parse_raw_csv: required columns missing (need " + schema.driver_id +
                        ", " + schema.time_s + ", " + schema.pos_m + ", " + schema.speed_mps +
                        ")");

    ParseResult result;
    std::unordered_map<std::string, std::size_t> index;
    long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ++result.rows;
        const auto fields = split_csv(line);
        const auto need = static_cast<std::size_t>(std::max({c_driver, c_time, c_pos, c_speed}));
        if (fields.size() <= need) {
            ++result.rejected;
            result.warnings.push_back("line " + std::to_string(line_no) + ": too few fields");
            continue;
        }
        const auto t = parse_double(fields[static_cast<std::size_t>(c_time)]);
        const auto pos = parse_double(fields[static_cast<std::size_t>(c_pos)]);
        const auto speed = parse_double(fields[static_cast<std::size_t>(c_speed)]);
        if (!t || !pos || !speed || !std::isfinite(*t) || !std::isfinite(*pos) ||
            !std::isfinite(*speed)) {
            ++result.rejected;
            result.warnings.push_back("line " + std::to_string(line_no) +
                                      ": unparseable numeric field");
            continue;
        }
        const std::string& driver = fields[static_cast<std::size_t>(c_driver)];
        auto [it, inserted] = index.try_emplace(driver, result.trajectories.size());
        if (inserted) {
            RawTrajectory traj;
            traj.driver_id = driver;
            result.trajectories.push_back(std::move(traj));
        }
        RawTrajectory& traj = result.trajectories[it->second];
        traj.t.push_back(*t);
        traj.pos.push_back(*pos);
        traj.speed.push_back(*speed);
        traj.lane.push_back(
            c_lane >= 0 && fields.size() > static_cast<std::size_t>(c_lane)
                ? fields[static_cast<std::size_t>(c_lane)]
                : std::string{});
        traj.leader.push_back(
            c_leader >= 0 && fields.size() > static_cast<std::size_t>(c_leader)
                ? fields[static_cast<std::size_t>(c_leader)]
                : std::string{});
    }

    // Time-order each driver, keeping parallel arrays aligned.
    for (auto& traj : result.trajectories) {
        const Index n = traj.size();
        std::vector<Index> order(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](Index a, Index b) { return traj.t[static_cast<std::size_t>(a)] <
                                                        traj.t[static_cast<std::size_t>(b)]; });
        RawTrajectory sorted;
        sorted.driver_id = traj.driver_id;
        for (Index i : order) {
            const auto s = static_cast<std::size_t>(i);
            sorted.t.push_back(traj.t[s]);
            sorted.pos.push_back(traj.pos[s]);
            sorted.speed.push_back(traj.speed[s]);
            sorted.lane.push_back(traj.lane[s]);
            sorted.leader.push_back(traj.leader[s]);
        }
        traj = std::move(sorted);
    }
    return result;
}

std::vector<double> smooth_series(const std::vector<double>& x, double std_steps) {
    if (std_steps <= 0.0 || x.size() < 2) return x;
    const long half = std::max(1L, std::lround(std::ceil(3.0 * std_steps)));
    std::vector<double> kernel(static_cast<std::size_t>(2 * half + 1));
    for (long i = -half; i <= half; ++i)
        kernel[static_cast<std::size_t>(i + half)] =
            std::exp(-0.5 * (static_cast<double>(i) / std_steps) *
                     (static_cast<double>(i) / std_steps));

    const long n = static_cast<long>(x.size());
    std::vector<double> out(x.size());
    for (long i = 0; i < n; ++i) {
        double acc = 0.0, wsum = 0.0;
        for (long j = -half; j <= half; ++j) {
            const long idx = i + j;
            if (idx < 0 || idx >= n) continue;  // edge handling: renormalize
            const double w = kernel[static_cast<std::size_t>(j + half)];
            acc += w * x[static_cast<std::size_t>(idx)];
            wsum += w;
        }
        out[static_cast<std::size_t>(i)] = acc / wsum;
    }
    return out;
}

void smooth_trajectory(RawTrajectory& traj, double std_s, double dt,
                       std::vector<std::string>* warnings) {
    if (std_s <= 0.0) return;
    const double std_steps = std_s / dt;
    const long support = 2 * std::max(1L, std::lround(std::ceil(3.0 * std_steps))) + 1;
    if (traj.size() < support) {
        if (warnings)
            warnings->push_back("driver " + traj.driver_id +
                                ": shorter than smoothing kernel support, passed through");
        return;
    }
    traj.pos = smooth_series(traj.pos, std_steps);
    traj.speed = smooth_series(traj.speed, std_steps);
    traj.smoothed = true;
}

FilterResult filter_continuous(const std::vector<RawTrajectory>& trajectories, Index min_len,
                               double max_gap) {
    FilterResult result;
    for (const auto& traj : trajectories) {
        const Index n = traj.size();
        Index start = 0;
        auto flush = [&](Index end) {  // [start, end)
            const Index len = end - start;
            if (len >= min_len) {
                RawTrajectory seg;
                seg.driver_id = traj.driver_id;
                seg.smoothed = traj.smoothed;
                const auto s = static_cast<std::size_t>(start);
                const auto e = static_cast<std::size_t>(end);
                seg.t.assign(traj.t.begin() + s, traj.t.begin() + e);
                seg.pos.assign(traj.pos.begin() + s, traj.pos.begin() + e);
                seg.speed.assign(traj.speed.begin() + s, traj.speed.begin() + e);
                seg.lane.assign(traj.lane.begin() + s, traj.lane.begin() + e);
                seg.leader.assign(traj.leader.begin() + s, traj.leader.begin() + e);
                result.segments.push_back(std::move(seg));
                ++result.segments_retained;
            } else {
                ++result.segments_dropped;
                result.observations_dropped += len;
            }
            start = end;
        };
        for (Index i = 1; i < n; ++i) {
            const double gap =
                traj.t[static_cast<std::size_t>(i)] - traj.t[static_cast<std::size_t>(i - 1)];
            if (gap > max_gap + kTimeTol) flush(i);
        }
        flush(n);
    }
    return result;
}

namespace {

// Cross-driver lookup of who is where at each time step.
struct TimeSlice {
    std::vector<std::size_t> segment;  // index into segments
    std::vector<Index> offset;         // record index within the segment
};

struct TimeTable {
    double dt;
    std::map<long, TimeSlice> slices;

    long step_of(double t) const { return std::lround(t / dt); }
};

TimeTable build_time_table(const std::vector<RawTrajectory>& segments, double dt) {
    TimeTable table;
    table.dt = dt;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        for (Index i = 0; i < segments[s].size(); ++i) {
            const long step = table.step_of(segments[s].t[static_cast<std::size_t>(i)]);
            auto& slice = table.slices[step];
            slice.segment.push_back(s);
            slice.offset.push_back(i);
        }
    }
    return table;
}

// Central-difference acceleration from (smoothed) speed; one-sided at edges.
std::vector<double> differentiate(const std::vector<double>& v, double dt) {
    const long n = static_cast<long>(v.size());
    std::vector<double> a(v.size(), 0.0);
    if (n < 2) return a;
    for (long i = 0; i < n; ++i) {
        if (i == 0)
            a[0] = (v[1] - v[0]) / dt;
        else if (i == n - 1)
            a[static_cast<std::size_t>(n - 1)] =
                (v[static_cast<std::size_t>(n - 1)] - v[static_cast<std::size_t>(n - 2)]) / dt;
        else
            a[static_cast<std::size_t>(i)] = (v[static_cast<std::size_t>(i + 1)] -
                                              v[static_cast<std::size_t>(i - 1)]) /
                                             (2.0 * dt);
    }
    return a;
}

}  // namespace

std::vector<StaticObject> parse_objects_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("parse_objects_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("parse_objects_csv: empty file " + path);
    const auto header = split_csv(line);
    const int c_kind = find_column(header, "kind");
    const int c_pos = find_column(header, "pos_m");
    if (c_kind < 0 || c_pos < 0)
        throw DataError("parse_objects_csv: need columns kind,pos_m in " + path);
    std::vector<StaticObject> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() <= static_cast<std::size_t>(std::max(c_kind, c_pos))) continue;
        const auto pos = parse_double(fields[static_cast<std::size_t>(c_pos)]);
        if (!pos) continue;
        out.push_back(StaticObject{fields[static_cast<std::size_t>(c_kind)], *pos});
    }
    return out;
}

Dataset preprocess(const std::string& path, const IngestConfig& config,
                   const std::vector<StaticObject>& objects, PreprocessSummary* summary) {
    ParseResult parsed = parse_raw_csv(path, config.schema);

    PreprocessSummary local;
    PreprocessSummary& sum = summary ? *summary : local;
    sum.rows_in = parsed.rows;
    sum.rows_rejected = parsed.rejected;
    sum.drivers_in = static_cast<long>(parsed.trajectories.size());
    sum.warnings = parsed.warnings;

    // Split at gaps before smoothing so the kernel never bridges a hole.
    FilterResult split = filter_continuous(parsed.trajectories, 2, config.max_gap);
    sum.observations_dropped += split.observations_dropped;
    for (auto& seg : split.segments)
        smooth_trajectory(seg, config.smooth_std, config.dt, &sum.warnings);

    const auto& segments = split.segments;
    const TimeTable table = build_time_table(segments, config.dt);
    std::unordered_map<std::string, std::size_t> first_segment_of;
    for (std::size_t s = 0; s < segments.size(); ++s)
        first_segment_of.try_emplace(segments[s].driver_id, s);

    bool warned_lanes = false;
    if (objects.empty())
        sum.warnings.push_back("no object annotations: d_ped and d_stop capped at horizon");

    std::vector<Trajectory> derived;
    long no_leader = 0;
    for (std::size_t s = 0; s < segments.size(); ++s) {
        const RawTrajectory& seg = segments[s];
        const auto accel = differentiate(seg.speed, config.dt);

        // Derive per record; records without a leader break the segment.
        Trajectory current;
        auto open_segment = [&](Index i) {
            current = Trajectory{};
            current.driver_id = seg.driver_id;
            current.t0 = seg.t[static_cast<std::size_t>(i)];
            current.dt = config.dt;
        };
        auto close_segment = [&]() {
            if (current.size() >= config.min_len) {
                derived.push_back(std::move(current));
                ++sum.segments_retained;
            } else if (current.size() > 0) {
                ++sum.segments_dropped;
                sum.observations_dropped += current.size();
            }
            current = Trajectory{};
        };

        for (Index i = 0; i < seg.size(); ++i) {
            const auto si = static_cast<std::size_t>(i);
            const long step = table.step_of(seg.t[si]);
            const auto slice_it = table.slices.find(step);

            // Leader: explicit id column, else nearest ahead in the same lane.
            double leader_pos = 0.0, leader_speed = 0.0;
            bool have_leader = false;
            const std::string& leader_id = seg.leader[si];
            if (slice_it != table.slices.end()) {
                const TimeSlice& slice = slice_it->second;
                if (!leader_id.empty()) {
                    for (std::size_t j = 0; j < slice.segment.size(); ++j) {
                        const RawTrajectory& other = segments[slice.segment[j]];
                        if (other.driver_id != leader_id) continue;
                        const auto oj = static_cast<std::size_t>(slice.offset[j]);
                        leader_pos = other.pos[oj];
                        leader_speed = other.speed[oj];
                        have_leader = true;
                        break;
                    }
                } else {
                    double best = std::numeric_limits<double>::infinity();
                    for (std::size_t j = 0; j < slice.segment.size(); ++j) {
                        const RawTrajectory& other = segments[slice.segment[j]];
                        if (other.driver_id == seg.driver_id) continue;
                        const auto oj = static_cast<std::size_t>(slice.offset[j]);
                        if (other.lane[oj] != seg.lane[si]) continue;
                        const double gap = other.pos[oj] - seg.pos[si];
                        if (gap > 0.0 && gap < best) {
                            best = gap;
                            leader_pos = other.pos[oj];
                            leader_speed = other.speed[oj];
                            have_leader = true;
                        }
                    }
                }
            }
            if (!have_leader) {
                ++no_leader;
                close_segment();
                continue;
            }

            BehavioralVector x;
            const double dv = leader_speed - seg.speed[si];
            x.delta_v = config.delta_v_leader_minus_ego ? dv : -dv;
            x.accel = accel[si];
            x.headway = leader_pos - seg.pos[si] - config.vehicle_length;
            if (x.headway < 0.0) x.headway = 0.0;

            // Context from the same time slice.
            ContextVector c;
            c.density = 0.0;
            double v_sum = 0.0;
            long v_count = 0;
            const auto ego_lane = lane_number(seg.lane[si]);
            if (slice_it != table.slices.end()) {
                const TimeSlice& slice = slice_it->second;
                for (std::size_t j = 0; j < slice.segment.size(); ++j) {
                    const RawTrajectory& other = segments[slice.segment[j]];
                    if (other.driver_id == seg.driver_id) continue;
                    const auto oj = static_cast<std::size_t>(slice.offset[j]);
                    const double rel = other.pos[oj] - seg.pos[si];
                    if (std::abs(rel) <= config.r_density) c.density += 1.0;

                    const bool same_lane = other.lane[oj] == seg.lane[si];
                    const auto other_lane = lane_number(other.lane[oj]);
                    bool adjacent = false;
                    if (ego_lane && other_lane) {
                        adjacent = std::abs(*ego_lane - *other_lane) == 1;
                    } else if (!same_lane && !warned_lanes && !other.lane[oj].empty()) {
                        sum.warnings.push_back(
                            "non-numeric lane ids: lateral zones use same-lane only");
                        warned_lanes = true;
                    }
                    const bool in_front_zone = same_lane && rel > 0.0 && rel <= config.front_range;
                    const bool in_lateral_zone = adjacent && std::abs(rel) <= config.lateral_range;
                    if (in_front_zone || in_lateral_zone) {
                        v_sum += other.speed[oj];
                        ++v_count;
                    }
                }
            }
            c.v_avg = v_count > 0 ? v_sum / static_cast<double>(v_count) : seg.speed[si];

            c.d_ped = config.object_horizon;
            c.d_stop = config.object_horizon;
            for (const auto& obj : objects) {
                const double d = std::abs(obj.pos - seg.pos[si]);
                if (obj.kind == "ped")
                    c.d_ped = std::min(c.d_ped, d);
                else if (obj.kind == "stop")
                    c.d_stop = std::min(c.d_stop, d);
            }

            if (current.size() == 0) open_segment(i);
            current.x.push_back(x);
            current.c.push_back(c);
        }
        close_segment();
    }
    sum.records_no_leader = no_leader;

    Dataset dataset;
    dataset.drivers = std::move(derived);
    dataset.info.source = path;
    dataset.info.rows_in = sum.rows_in;
    dataset.info.rows_rejected = sum.rows_rejected;
    dataset.info.records_no_leader = no_leader;
    dataset.info.segments_retained = sum.segments_retained;
    dataset.info.segments_dropped = sum.segments_dropped;
    dataset.info.observations_dropped = sum.observations_dropped;
    dataset.info.warnings = sum.warnings;
    sum.observations_out = dataset.total_observations();

    sum.column_ranges.resize(7, 2);
    sum.column_ranges.col(0).setConstant(std::numeric_limits<double>::infinity());
    sum.column_ranges.col(1).setConstant(-std::numeric_limits<double>::infinity());
    for (const auto& drv : dataset.drivers) {
        for (Index i = 0; i < drv.size(); ++i) {
            const auto& x = drv.x[static_cast<std::size_t>(i)];
            const auto& c = drv.c[static_cast<std::size_t>(i)];
            const double vals[7] = {x.delta_v, x.accel,   x.headway, c.d_ped,
                                    c.d_stop,  c.density, c.v_avg};
            for (int j = 0; j < 7; ++j) {
                sum.column_ranges(j, 0) = std::min(sum.column_ranges(j, 0), vals[j]);
                sum.column_ranges(j, 1) = std::max(sum.column_ranges(j, 1), vals[j]);
            }
        }
    }
    return dataset;
}

Dataset load_preprocessed_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("load_preprocessed_csv: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError("load_preprocessed_csv: empty file " + path);
    const auto header = split_csv(line);
    const std::vector<std::string> expected = {"driver_id", "time_s", "delta_v",
                                               "accel",     "headway", "d_ped",
                                               "d_stop",    "density", "v_avg"};
    if (header != expected)
        throw DataError("load_preprocessed_csv: header does not match the canonical schema");

    Dataset dataset;
    dataset.info.source = path;
    std::unordered_map<std::string, std::size_t> index;
    std::vector<std::vector<double>> times;
    long line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != 9)
            throw DataError("load_preprocessed_csv: line " + std::to_string(line_no) +
                            ": expected 9 fields");
        double v[8];
        for (int i = 0; i < 8; ++i) {
            const auto parsed = parse_double(fields[static_cast<std::size_t>(i + 1)]);
            if (!parsed || !std::isfinite(*parsed))
                throw DataError("load_preprocessed_csv: line " + std::to_string(line_no) +
                                ": bad numeric value");
            v[i] = *parsed;
        }
        auto [it, inserted] = index.try_emplace(fields[0], dataset.drivers.size());
        if (inserted) {
            Trajectory traj;
            traj.driver_id = fields[0];
            traj.t0 = v[0];
            dataset.drivers.push_back(std::move(traj));
            times.emplace_back();
        }
        Trajectory& traj = dataset.drivers[it->second];
        times[it->second].push_back(v[0]);
        traj.x.push_back(BehavioralVector{v[1], v[2], v[3]});
        traj.c.push_back(ContextVector{v[4], v[5], v[6], v[7]});
    }

    // Fixed-dt check per driver.
    for (std::size_t d = 0; d < dataset.drivers.size(); ++d) {
        const auto& t = times[d];
        if (t.size() >= 2) {
            const double dt = t[1] - t[0];
            if (dt <= 0.0)
                throw DataError("load_preprocessed_csv: non-increasing timestamps for driver " +
                                dataset.drivers[d].driver_id);
            for (std::size_t i = 2; i < t.size(); ++i) {
                if (std::abs((t[i] - t[i - 1]) - dt) > kTimeTol)
                    throw DataError(
                        "load_preprocessed_csv: irregular sampling interval for driver " +
                        dataset.drivers[d].driver_id);
            }
            dataset.drivers[d].dt = dt;
        }
    }
    return dataset;
}

void save_preprocessed_csv(const Dataset& dataset, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("save_preprocessed_csv: cannot open " + path);
    out << "driver_id,time_s,delta_v,accel,headway,d_ped,d_stop,density,v_avg\n";
    for (const auto& drv : dataset.drivers) {
        for (Index i = 0; i < drv.size(); ++i) {
            const auto& x = drv.x[static_cast<std::size_t>(i)];
            const auto& c = drv.c[static_cast<std::size_t>(i)];
            out << drv.driver_id << ',' << fmt_double(drv.t0 + static_cast<double>(i) * drv.dt)
                << ',' << fmt_double(x.delta_v) << ',' << fmt_double(x.accel) << ','
                << fmt_double(x.headway) << ',' << fmt_double(c.d_ped) << ','
                << fmt_double(c.d_stop) << ',' << fmt_double(c.density) << ','
                << fmt_double(c.v_avg) << '\n';
        }
    }
}

Matrix behavioral_percentiles(const Dataset& dataset, double lo_pct, double hi_pct) {
    std::vector<double> axis[3];
    for (const auto& drv : dataset.drivers)
        for (const auto& x : drv.x) {
            axis[0].push_back(x.delta_v);
            axis[1].push_back(x.accel);
            axis[2].push_back(x.headway);
        }
    Matrix out(3, 2);
    for (int a = 0; a < 3; ++a) {
        if (axis[a].empty()) throw InvalidArgument("behavioral_percentiles: empty dataset");
        std::sort(axis[a].begin(), axis[a].end());
        const auto pick = [&](double pct) {
            const double idx = pct / 100.0 * static_cast<double>(axis[a].size() - 1);
            return axis[a][static_cast<std::size_t>(std::lround(idx))];
        };
        out(a, 0) = pick(lo_pct);
        out(a, 1) = pick(hi_pct);
    }
    return out;
}

}  // namespace rhoflow
