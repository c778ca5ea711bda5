#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rhoflow/ingest.hpp"
#include "rhoflow/synth.hpp"

using namespace rhoflow;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("rhoflow_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return text;
}

}  // namespace

TEST_CASE("parse_raw_csv basics") {
    TempDir tmp("parse");
    SUBCASE("well-formed rows parse into ordered records") {
        write_file(tmp.file("a.csv"),
                   "driver_id,time_s,pos_m,speed_mps,lane,leader_id\n"
                   "a,0.0,10,5,1,\n"
                   "a,0.1,10.5,5,1,\n"
                   "a,0.2,11,5,1,\n");
        const ParseResult result = parse_raw_csv(tmp.file("a.csv"), CsvSchemaConfig{});
        CHECK(result.rows == 3);
        CHECK(result.rejected == 0);
        REQUIRE(result.trajectories.size() == 1);
        CHECK(result.trajectories[0].size() == 3);
    }
    SUBCASE("a malformed numeric field rejects only that row") {
        write_file(tmp.file("b.csv"),
                   "driver_id,time_s,pos_m,speed_mps,lane,leader_id\n"
                   "a,0.0,10,5,1,\n"
                   "a,0.1,10.5,not_a_number,1,\n"
                   "a,0.2,11,5,1,\n");
        const ParseResult result = parse_raw_csv(tmp.file("b.csv"), CsvSchemaConfig{});
        CHECK(result.rows == 3);
        CHECK(result.rejected == 1);
        CHECK(result.trajectories[0].size() == 2);
    }
    SUBCASE("interleaved drivers come out as separate ordered streams") {
        write_file(tmp.file("c.csv"),
                   "driver_id,time_s,pos_m,speed_mps,lane,leader_id\n"
                   "a,0.1,10,5,1,\n"
                   "b,0.0,40,6,1,\n"
                   "a,0.0,9.5,5,1,\n"
                   "b,0.1,40.6,6,1,\n");
        const ParseResult result = parse_raw_csv(tmp.file("c.csv"), CsvSchemaConfig{});
        REQUIRE(result.trajectories.size() == 2);
        CHECK(result.trajectories[0].driver_id == "a");
        CHECK(result.trajectories[0].t == std::vector<double>{0.0, 0.1});
        CHECK(result.trajectories[1].t == std::vector<double>{0.0, 0.1});
    }
    SUBCASE("missing required columns fail loudly") {
        write_file(tmp.file("d.csv"), "driver_id,time_s,pos_m\na,0,1\n");
        CHECK_THROWS_AS(parse_raw_csv(tmp.file("d.csv"), CsvSchemaConfig{}), DataError);
    }
    SUBCASE("non-finite numerics are rejected rows") {
        write_file(tmp.file("e.csv"),
                   "driver_id,time_s,pos_m,speed_mps,lane,leader_id\n"
                   "a,0.0,10,inf,1,\n"
                   "a,0.1,10.5,nan,1,\n"
                   "a,0.2,11,5,1,\n");
        const ParseResult result = parse_raw_csv(tmp.file("e.csv"), CsvSchemaConfig{});
        CHECK(result.rejected == 2);
        CHECK(result.trajectories[0].size() == 1);
    }
}

TEST_CASE("smooth_series") {
    SUBCASE("constant series is unchanged") {
        const std::vector<double> x(50, 3.25);
        const auto y = smooth_series(x, 3.0);
        for (double v : y) CHECK(v == doctest::Approx(3.25).epsilon(1e-9));
    }
    SUBCASE("zero std is the identity") {
        const std::vector<double> x = {1, 2, 3, 4};
        CHECK(smooth_series(x, 0.0) == x);
    }
    SUBCASE("impulse matches a direct renormalized convolution") {
        std::vector<double> x(21, 0.0);
        x[10] = 1.0;
        const double std_steps = 2.0;
        const auto y = smooth_series(x, std_steps);

        const long half = 6;  // ceil(3 * 2)
        for (long i = 0; i < 21; ++i) {
            double acc = 0.0, wsum = 0.0;
            for (long j = -half; j <= half; ++j) {
                const long idx = i + j;
                if (idx < 0 || idx >= 21) continue;
                const double w = std::exp(-0.5 * (j / std_steps) * (j / std_steps));
                acc += w * x[static_cast<std::size_t>(idx)];
                wsum += w;
            }
            CHECK(y[static_cast<std::size_t>(i)] ==
                  doctest::Approx(acc / wsum).epsilon(1e-12));
        }
        // The impulse peak spreads but stays centered.
        CHECK(y[10] > y[9]);
        CHECK(y[9] == doctest::Approx(y[11]).epsilon(1e-12));
    }
    SUBCASE("interior mass of a constant segment is preserved") {
        const std::vector<double> x(400, 7.0);
        const auto y = smooth_series(x, 3.0);
        double raw = 0.0, smoothed = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            raw += x[i];
            smoothed += y[i];
        }
        CHECK(std::abs(smoothed - raw) / raw <= 1e-6);
    }
}

TEST_CASE("smooth_trajectory warns when the kernel does not fit") {
    RawTrajectory traj;
    traj.driver_id = "short";
    for (int i = 0; i < 5; ++i) {
        traj.t.push_back(0.1 * i);
        traj.pos.push_back(1.0 * i);
        traj.speed.push_back(10.0);
        traj.lane.emplace_back("1");
        traj.leader.emplace_back();
    }
    std::vector<std::string> warnings;
    smooth_trajectory(traj, 0.3, 0.1, &warnings);
    CHECK_FALSE(traj.smoothed);
    REQUIRE(warnings.size() == 1);
}

TEST_CASE("filter_continuous") {
    auto make = [](std::vector<double> times) {
        RawTrajectory traj;
        traj.driver_id = "x";
        for (double t : times) {
            traj.t.push_back(t);
            traj.pos.push_back(t);
            traj.speed.push_back(1.0);
            traj.lane.emplace_back("1");
            traj.leader.emplace_back();
        }
        return traj;
    };

    SUBCASE("an unbroken trajectory is retained whole") {
        std::vector<double> times;
        for (int i = 0; i < 100; ++i) times.push_back(0.1 * i);
        const FilterResult result = filter_continuous({make(times)}, 50, 0.15);
        CHECK(result.segments_retained == 1);
        CHECK(result.segments_dropped == 0);
        CHECK(result.segments[0].size() == 100);
    }
    SUBCASE("a gap splits into two segments") {
        std::vector<double> times;
        for (int i = 0; i < 60; ++i) times.push_back(0.1 * i);
        for (int i = 0; i < 60; ++i) times.push_back(6.5 + 0.1 * i);  // 0.6 s hole
        const FilterResult result = filter_continuous({make(times)}, 50, 0.15);
        CHECK(result.segments.size() == 2);
    }
    SUBCASE("short segments are dropped and counted") {
        std::vector<double> times;
        for (int i = 0; i < 10; ++i) times.push_back(0.1 * i);
        const FilterResult result = filter_continuous({make(times)}, 50, 0.15);
        CHECK(result.segments.empty());
        CHECK(result.segments_dropped == 1);
        CHECK(result.observations_dropped == 10);
    }
    SUBCASE("observation counts are conserved") {
        std::vector<double> times;
        for (int i = 0; i < 30; ++i) times.push_back(0.1 * i);
        for (int i = 0; i < 7; ++i) times.push_back(10.0 + 0.1 * i);
        const FilterResult result = filter_continuous({make(times)}, 10, 0.15);
        long retained = 0;
        for (const auto& seg : result.segments) retained += seg.size();
        CHECK(retained + result.observations_dropped == 37);
    }
}

namespace {

// Two-car platoon, constant speeds, explicit leader ids.
std::string platoon_csv(double leader_speed, double follower_speed, double gap, int steps) {
    std::string text = "driver_id,time_s,pos_m,speed_mps,lane,leader_id\n";
    for (int i = 0; i < steps; ++i) {
        const double t = 0.1 * i;
        text += "lead," + std::to_string(t) + "," +
                std::to_string(100.0 + gap + leader_speed * t) + "," +
                std::to_string(leader_speed) + ",1,\n";
        text += "ego," + std::to_string(t) + "," + std::to_string(100.0 + follower_speed * t) +
                "," + std::to_string(follower_speed) + ",1,lead\n";
    }
    return text;
}

}  // namespace

TEST_CASE("preprocess derives behavior for a platoon") {
    TempDir tmp("derive");
    IngestConfig config;
    config.min_len = 5;
    config.smooth_std = 0.0;

    SUBCASE("equal speeds give zero relative speed and the raw gap") {
        write_file(tmp.file("p.csv"), platoon_csv(10.0, 10.0, 20.0, 20));
        PreprocessSummary summary;
        const Dataset data = preprocess(tmp.file("p.csv"), config, {}, &summary);
        REQUIRE(data.drivers.size() == 1);  // only ego has a leader
        CHECK(data.drivers[0].driver_id == "ego");
        for (const auto& x : data.drivers[0].x) {
            CHECK(x.delta_v == doctest::Approx(0.0).epsilon(1e-12));
            CHECK(x.headway == doctest::Approx(20.0).epsilon(1e-9));
            CHECK(x.accel == doctest::Approx(0.0).epsilon(1e-9));
        }
        CHECK(summary.records_no_leader == 20);  // every lead record
    }
    SUBCASE("a faster leader gives positive delta_v under the default convention") {
        write_file(tmp.file("q.csv"), platoon_csv(12.0, 10.0, 15.0, 20));
        const Dataset data = preprocess(tmp.file("q.csv"), config, {}, nullptr);
        REQUIRE(data.drivers.size() == 1);
        CHECK(data.drivers[0].x[5].delta_v == doctest::Approx(2.0).epsilon(1e-9));

        IngestConfig flipped = config;
        flipped.delta_v_leader_minus_ego = false;
        const Dataset data2 = preprocess(tmp.file("q.csv"), flipped, {}, nullptr);
        CHECK(data2.drivers[0].x[5].delta_v == doctest::Approx(-2.0).epsilon(1e-9));
    }
    SUBCASE("missing object annotations cap the distances at the horizon") {
        write_file(tmp.file("r.csv"), platoon_csv(10.0, 10.0, 20.0, 10));
        const Dataset data = preprocess(tmp.file("r.csv"), config, {}, nullptr);
        for (const auto& c : data.drivers[0].c) {
            CHECK(c.d_ped == config.object_horizon);
            CHECK(c.d_stop == config.object_horizon);
        }
    }
    SUBCASE("annotated objects give longitudinal distances") {
        write_file(tmp.file("s.csv"), platoon_csv(10.0, 10.0, 20.0, 10));
        const std::vector<StaticObject> objects = {{"ped", 150.0}, {"stop", 90.0}};
        const Dataset data = preprocess(tmp.file("s.csv"), config, objects, nullptr);
        // Ego starts at 100 m and moves at 10 m/s.
        CHECK(data.drivers[0].c[0].d_ped == doctest::Approx(50.0).epsilon(1e-9));
        CHECK(data.drivers[0].c[0].d_stop == doctest::Approx(10.0).epsilon(1e-9));
        CHECK(data.drivers[0].c[5].d_ped == doctest::Approx(45.0).epsilon(1e-6));
    }
}

TEST_CASE("preprocess derives context from neighbors") {
    TempDir tmp("context");
    IngestConfig config;
    config.min_len = 2;
    config.smooth_std = 0.0;

    // ego at 100 in lane 1 with leader; neighbors at known offsets.
    std::string text = "driver_id,time_s,pos_m,speed_mps,lane,leader_id\n";
    for (int i = 0; i < 3; ++i) {
        const double t = 0.1 * i;
        const std::string ts = std::to_string(t);
        text += "ego," + ts + "," + std::to_string(100.0) + ",10,1,lead\n";
        text += "lead," + ts + "," + std::to_string(120.0) + ",12,1,\n";      // front zone
        text += "adj," + ts + "," + std::to_string(110.0) + ",14,2,\n";       // lateral zone
        text += "far," + ts + "," + std::to_string(500.0) + ",30,1,\n";       // out of range
    }
    write_file(tmp.file("n.csv"), text);
    const Dataset data = preprocess(tmp.file("n.csv"), config, {}, nullptr);
    const Trajectory* ego = nullptr;
    for (const auto& drv : data.drivers)
        if (drv.driver_id == "ego") ego = &drv;
    REQUIRE(ego != nullptr);
    const ContextVector& c = ego->c[1];
    CHECK(c.density == 2.0);                                // lead and adj within 50 m
    CHECK(c.v_avg == doctest::Approx((12.0 + 14.0) / 2.0));  // front + adjacent zone speeds
}

TEST_CASE("preprocess falls back to ego speed with no neighbors in range") {
    TempDir tmp("fallback");
    IngestConfig config;
    config.min_len = 2;
    config.smooth_std = 0.0;
    config.r_density = 50.0;

    std::string text = "driver_id,time_s,pos_m,speed_mps,lane,leader_id\n";
    for (int i = 0; i < 3; ++i) {
        const double t = 0.1 * i;
        text += "ego," + std::to_string(t) + ",100,10,1,lead\n";
        text += "lead," + std::to_string(t) + ",300,12,1,\n";  // leader beyond all zones
    }
    write_file(tmp.file("f.csv"), text);
    const Dataset data = preprocess(tmp.file("f.csv"), config, {}, nullptr);
    REQUIRE(data.drivers.size() == 1);
    CHECK(data.drivers[0].c[0].density == 0.0);
    CHECK(data.drivers[0].c[0].v_avg == doctest::Approx(10.0));
}

TEST_CASE("canonical CSV round-trips the synth output bit-exactly") {
    TempDir tmp("roundtrip");
    GroundTruth truth = make_two_profile_truth(8, 3);
    truth.config.drivers = 3;
    truth.config.steps = 20;
    const SynthResult result = sample_behavior(truth);

    const std::string path = tmp.file("synth.csv");
    emit_csv(result.data, path);
    const Dataset loaded = load_preprocessed_csv(path);

    REQUIRE(loaded.drivers.size() == result.data.drivers.size());
    for (std::size_t d = 0; d < loaded.drivers.size(); ++d) {
        const auto& a = result.data.drivers[d];
        const auto& b = loaded.drivers[d];
        CHECK(a.driver_id == b.driver_id);
        REQUIRE(a.size() == b.size());
        for (Index t = 0; t < a.size(); ++t) {
            const auto st = static_cast<std::size_t>(t);
            CHECK(a.x[st].delta_v == b.x[st].delta_v);
            CHECK(a.x[st].accel == b.x[st].accel);
            CHECK(a.x[st].headway == b.x[st].headway);
            CHECK(a.c[st].d_ped == b.c[st].d_ped);
            CHECK(a.c[st].d_stop == b.c[st].d_stop);
            CHECK(a.c[st].density == b.c[st].density);
            CHECK(a.c[st].v_avg == b.c[st].v_avg);
        }
    }

    // Emit is byte-stable.
    emit_csv(loaded, tmp.file("again.csv"));
    CHECK(read_file(path) == read_file(tmp.file("again.csv")));
}

TEST_CASE("load_preprocessed_csv validates its contract") {
    TempDir tmp("canon");
    SUBCASE("wrong header") {
        write_file(tmp.file("bad.csv"), "driver,delta_v\nx,1\n");
        CHECK_THROWS_AS(load_preprocessed_csv(tmp.file("bad.csv")), DataError);
    }
    SUBCASE("non-numeric value") {
        write_file(tmp.file("nan.csv"),
                   "driver_id,time_s,delta_v,accel,headway,d_ped,d_stop,density,v_avg\n"
                   "a,0.0,oops,0,20,50,50,3,10\n");
        CHECK_THROWS_AS(load_preprocessed_csv(tmp.file("nan.csv")), DataError);
    }
    SUBCASE("irregular sampling interval") {
        write_file(tmp.file("gap.csv"),
                   "driver_id,time_s,delta_v,accel,headway,d_ped,d_stop,density,v_avg\n"
                   "a,0.0,0,0,20,50,50,3,10\n"
                   "a,0.1,0,0,20,50,50,3,10\n"
                   "a,0.5,0,0,20,50,50,3,10\n");
        CHECK_THROWS_AS(load_preprocessed_csv(tmp.file("gap.csv")), DataError);
    }
}

TEST_CASE("behavioral_percentiles brackets the data") {
    GroundTruth truth = make_two_profile_truth(8, 4);
    truth.config.drivers = 5;
    truth.config.steps = 40;
    const Dataset data = sample_behavior(truth).data;
    const Matrix ranges = behavioral_percentiles(data, 1.0, 99.0);
    CHECK(ranges.rows() == 3);
    for (int a = 0; a < 3; ++a) CHECK(ranges(a, 0) <= ranges(a, 1));
    CHECK_THROWS_AS(behavioral_percentiles(Dataset{}, 1.0, 99.0), InvalidArgument);
}
