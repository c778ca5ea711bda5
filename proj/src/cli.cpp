#include "rhoflow/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "rhoflow/analysis.hpp"
#include "rhoflow/ingest.hpp"
#include "rhoflow/io_util.hpp"
#include "rhoflow/model_io.hpp"
#include "rhoflow/rng.hpp"
#include "rhoflow/synth.hpp"
#include "rhoflow/train.hpp"

namespace rhoflow {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

int g_log_level = 1;  // 0 quiet, 1 info, 2 debug

void log_info(const std::string& msg) {
    if (g_log_level >= 1) std::cerr << "[rhoflow] " << msg << '\n';
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << text;
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(buf.str())));
    return hex;
}

// Resolved run configuration plus input hashes are persisted before any
// computation starts.
void write_provenance(const std::string& out_dir, const std::string& command,
                      const json& resolved, const std::vector<std::string>& inputs) {
    fs::create_directories(out_dir);
    json run;
    run["command"] = command;
    run["config"] = resolved;
    write_json(out_dir + "/run_config.json", run);
    json in_hashes = json::object();
    for (const auto& path : inputs) in_hashes[path] = hash_file(path);
    write_json(out_dir + "/inputs.json", in_hashes);
}

std::string resolved_hash(const json& resolved) {
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(resolved.dump())));
    return hex;
}

// Merge helper: config-file values become defaults, flags override.
template <typename T>
void merge(const json* section, const char* key, T& value) {
    if (section && section->contains(key)) value = section->at(key).get<T>();
}

json load_config_file(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i + 1 < args.size(); ++i) {
        if (args[i] == "--config") {
            std::ifstream in(args[i + 1]);
            if (!in) throw DataError("cannot open config file " + args[i + 1]);
            json j;
            try {
                in >> j;
            } catch (const json::exception& e) {
                throw DataError("config file " + args[i + 1] + ": " + e.what());
            }
            return j;
        }
    }
    return json::object();
}

const json* section_of(const json& config, const char* name) {
    if (config.contains(name) && config.at(name).is_object()) return &config.at(name);
    return nullptr;
}

// --------------------------------------------------------------------------
// Report serializers (versioned machine-readable JSON).

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

json vector_json(const Vector& v) {
    json out = json::array();
    for (Index i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

json spectral_json(const SpectralReport& report) {
    json j;
    j["report_version"] = 1;
    j["report"] = "spectral";
    j["top_m"] = report.top_m;
    j["rank_threshold"] = report.rank_threshold;
    json rows = json::array();
    for (const auto& row : report.rows)
        rows.push_back({{"profile", row.profile},
                        {"eigenvalues", vector_json(row.eigenvalues)},
                        {"effective_rank", row.effective_rank}});
    j["profiles"] = std::move(rows);
    return j;
}

json context_json(const ContextReport& report) {
    json j;
    j["report_version"] = 1;
    j["report"] = "context";
    j["labels"] = report.labels;
    j["beta_standardized"] = matrix_json(report.beta_raw);
    j["beta_canonical"] = matrix_json(report.beta_canonical);
    j["context_mean"] = vector_json(report.norm.mean);
    j["context_scale"] = vector_json(report.norm.scale);
    j["argmax_context"] = report.argmax_context;
    return j;
}

json distance_json(const DistanceReport& report) {
    json j;
    j["report_version"] = 1;
    j["report"] = "distance";
    j["frobenius"] = matrix_json(report.distances);
    return j;
}

json grid_json(const ActivationGridReport& report) {
    json j;
    j["profile"] = report.profile;
    j["modes"] = report.modes;
    j["mode_eigenvalues"] = vector_json(report.mode_eigenvalues);
    json axes = json::array();
    const char* names[3] = {"delta_v", "accel", "headway"};
    for (int a = 0; a < 3; ++a)
        axes.push_back({{"name", names[a]},
                        {"lo", report.spec.axes[static_cast<std::size_t>(a)].lo},
                        {"hi", report.spec.axes[static_cast<std::size_t>(a)].hi},
                        {"n", report.spec.axes[static_cast<std::size_t>(a)].n}});
    j["axes"] = std::move(axes);
    j["marginal_reduction"] = "mean";
    json marginals = json::array();
    for (std::size_t m = 0; m < report.modes.size(); ++m)
        marginals.push_back({{"mode", report.modes[m]},
                             {"delta_v", report.marginals[m][0]},
                             {"accel", report.marginals[m][1]},
                             {"headway", report.marginals[m][2]}});
    j["marginals"] = std::move(marginals);
    json values = json::array();
    for (std::size_t m = 0; m < report.modes.size(); ++m)
        values.push_back({{"mode", report.modes[m]}, {"g", report.values[m]}});
    j["values"] = std::move(values);
    return j;
}

json grad_check_json(const GradCheckReport& report);

json train_report_json(const TrainReport& report) {
    json j;
    j["report_version"] = 1;
    j["report"] = "train";
    json epochs = json::array();
    for (const auto& rec : report.epochs)
        epochs.push_back({{"restart", rec.restart},
                          {"epoch", rec.epoch},
                          {"nll_per_obs", rec.nll_per_obs},
                          {"wall_ms", rec.wall_ms}});
    j["epochs"] = std::move(epochs);
    json finals = json::array();
    for (double v : report.restart_final)
        finals.push_back(std::isfinite(v) ? json(v) : json(nullptr));
    j["restart_final"] = std::move(finals);
    j["best_restart"] = report.best_restart;
    j["final_nll_per_obs"] = report.final_nll_per_obs;
    j["wall_ms_total"] = report.wall_ms_total;
    j["grad_check"] = report.grad_check ? grad_check_json(*report.grad_check) : json(nullptr);
    j["diagnostics"] = report.diagnostics;
    return j;
}

json grad_check_json(const GradCheckReport& report) {
    json j;
    j["report_version"] = 1;
    j["report"] = "grad_check";
    j["step"] = report.step;
    j["tolerance"] = report.tolerance;
    j["max_rel_err"] = report.max_rel_err;
    j["passed"] = report.passed;
    j["step_size_suspect"] = report.step_size_suspect;
    json groups = json::array();
    for (const auto& g : report.groups)
        groups.push_back({{"name", g.name},
                          {"skipped", g.skipped},
                          {"max_rel_err", g.max_rel_err},
                          {"max_abs_err", g.max_abs_err}});
    j["groups"] = std::move(groups);
    return j;
}

json select_k_json(const std::vector<SelectKRow>& rows) {
    json j;
    j["report_version"] = 1;
    j["report"] = "select_k";
    json table = json::array();
    for (const auto& row : rows) {
        json spectra = json::array();
        for (const auto& s : row.spectra) spectra.push_back(vector_json(s));
        table.push_back({{"k", row.k},
                         {"mean_nll_per_obs", row.mean_nll},
                         {"std_nll_per_obs", row.std_nll},
                         {"restart_nll_per_obs", row.restart_nll},
                         {"spectra", std::move(spectra)}});
    }
    j["candidates"] = std::move(table);
    return j;
}

json summary_json(const PreprocessSummary& sum) {
    json j;
    j["report_version"] = 1;
    j["report"] = "preprocess_summary";
    j["rows_in"] = sum.rows_in;
    j["rows_rejected"] = sum.rows_rejected;
    j["drivers_in"] = sum.drivers_in;
    j["segments_retained"] = sum.segments_retained;
    j["segments_dropped"] = sum.segments_dropped;
    j["observations_dropped"] = sum.observations_dropped;
    j["records_no_leader"] = sum.records_no_leader;
    j["observations_out"] = sum.observations_out;
    if (sum.column_ranges.size() > 0) {
        const char* names[7] = {"delta_v", "accel",   "headway", "d_ped",
                                "d_stop",  "density", "v_avg"};
        json ranges = json::object();
        for (int i = 0; i < 7; ++i)
            ranges[names[i]] = {sum.column_ranges(i, 0), sum.column_ranges(i, 1)};
        j["column_ranges"] = std::move(ranges);
    }
    j["warnings"] = sum.warnings;
    return j;
}

// --------------------------------------------------------------------------
// Subcommands.

struct PreprocessOpts {
    std::string input, out, objects;
    bool fast_path = false;
    IngestConfig ingest;
    std::string delta_v_sign = "leader_minus_ego";
};

int cmd_preprocess(PreprocessOpts& opt) {
    opt.ingest.delta_v_leader_minus_ego = opt.delta_v_sign != "ego_minus_leader";

    json resolved{{"input", opt.input},
                  {"out", opt.out},
                  {"objects", opt.objects},
                  {"fast_path", opt.fast_path},
                  {"smooth_std", opt.ingest.smooth_std},
                  {"min_len", opt.ingest.min_len},
                  {"max_gap", opt.ingest.max_gap},
                  {"r_density", opt.ingest.r_density},
                  {"front_range", opt.ingest.front_range},
                  {"lateral_range", opt.ingest.lateral_range},
                  {"object_horizon", opt.ingest.object_horizon},
                  {"vehicle_length", opt.ingest.vehicle_length},
                  {"delta_v_sign", opt.delta_v_sign},
                  {"dt", opt.ingest.dt},
                  {"columns",
                   {{"driver_id", opt.ingest.schema.driver_id},
                    {"time_s", opt.ingest.schema.time_s},
                    {"pos_m", opt.ingest.schema.pos_m},
                    {"speed_mps", opt.ingest.schema.speed_mps},
                    {"lane", opt.ingest.schema.lane},
                    {"leader_id", opt.ingest.schema.leader_id}}}};
    std::vector<std::string> inputs{opt.input};
    if (!opt.objects.empty()) inputs.push_back(opt.objects);
    write_provenance(opt.out, "preprocess", resolved, inputs);

    PreprocessSummary summary;
    Dataset dataset;
    if (opt.fast_path) {
        dataset = load_preprocessed_csv(opt.input);
        summary.rows_in = dataset.total_observations();
        summary.drivers_in = static_cast<long>(dataset.drivers.size());
        summary.segments_retained = static_cast<long>(dataset.drivers.size());
        summary.observations_out = dataset.total_observations();
    } else {
        std::vector<StaticObject> objects;
        if (!opt.objects.empty()) objects = parse_objects_csv(opt.objects);
        dataset = preprocess(opt.input, opt.ingest, objects, &summary);
    }
    save_preprocessed_csv(dataset, opt.out + "/preprocessed.csv");
    write_json(opt.out + "/preprocess_summary.json", summary_json(summary));
    log_info("preprocess: " + std::to_string(summary.observations_out) + " observations from " +
             std::to_string(dataset.drivers.size()) + " trajectories");
    return 0;
}

struct SynthOpts {
    std::string out;
    Index drivers = 200, steps = 100, dim = 32;
    std::uint64_t seed = 7;
    Index block_len = 0;  // 0 keeps the fixture default
    std::string fixture = "two_profile";
};

int cmd_synth(SynthOpts& opt) {
    json resolved{{"out", opt.out},       {"drivers", opt.drivers}, {"steps", opt.steps},
                  {"dim", opt.dim},       {"seed", opt.seed},       {"fixture", opt.fixture},
                  {"block_len", opt.block_len}};
    write_provenance(opt.out, "synth", resolved, {});

    GroundTruth truth;
    if (opt.fixture == "two_profile")
        truth = make_two_profile_truth(opt.dim, opt.seed);
    else if (opt.fixture == "four_profile")
        truth = make_four_profile_truth(opt.dim, opt.seed);
    else
        throw InvalidArgument("unknown fixture '" + opt.fixture +
                              "' (expected two_profile or four_profile)");
    truth.config.drivers = opt.drivers;
    truth.config.steps = opt.steps;
    if (opt.block_len > 0) truth.config.schedule.block_len = opt.block_len;

    if (opt.drivers <= 0) {
        log_info("warning: --drivers 0 produces a header-only dataset");
        Dataset empty;
        emit_csv(empty, opt.out + "/synth.csv");
        SynthResult none;
        emit_sidecar(truth, none, opt.out + "/truth.json");
        return 0;
    }

    SynthResult result = sample_behavior(truth);
    emit_csv(result.data, opt.out + "/synth.csv");
    emit_sidecar(truth, result, opt.out + "/truth.json");
    log_info("synth: wrote " + std::to_string(result.data.total_observations()) +
             " observations for " + std::to_string(opt.drivers) + " drivers");
    return 0;
}

struct TrainOpts {
    std::string input, out, k_spec = "4", rff_from;
    TrainConfig config;
    std::string likelihood_target = "prediction";
    std::string init_state = "context_mixture";
    std::string delta_v_convention = "leader_minus_ego";
};

int cmd_train(TrainOpts& opt) {
    opt.config.likelihood_target = opt.likelihood_target == "post_update"
                                       ? LikelihoodTarget::kPostUpdate
                                       : LikelihoodTarget::kPrediction;
    opt.config.init_state = opt.init_state == "maximally_mixed" ? InitState::kMaximallyMixed
                                                                : InitState::kContextMixture;

    std::vector<int> candidates;
    {
        std::stringstream ss(opt.k_spec);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            if (tok.empty()) continue;
            candidates.push_back(std::stoi(tok));
        }
        if (candidates.empty()) throw InvalidArgument("--k: no candidates given");
    }

    json resolved{{"input", opt.input},
                  {"out", opt.out},
                  {"k", opt.k_spec},
                  {"rff_dim", opt.config.rff_dim},
                  {"rank", opt.config.rank},
                  {"bandwidth", opt.config.bandwidth},
                  {"bandwidth_sample", opt.config.bandwidth_sample},
                  {"seed", opt.config.seed},
                  {"lr", opt.config.learning_rate},
                  {"epochs", opt.config.epochs},
                  {"batch", opt.config.batch},
                  {"truncation", opt.config.truncation},
                  {"epsilon", opt.config.epsilon},
                  {"restarts", opt.config.restarts},
                  {"threads", opt.config.threads},
                  {"deterministic", opt.config.deterministic},
                  {"init_noise", opt.config.init_noise},
                  {"likelihood_target", opt.likelihood_target},
                  {"init_state", opt.init_state},
                  {"delta_v_convention", opt.delta_v_convention},
                  {"rff_from", opt.rff_from},
                  {"grad_check", opt.config.run_grad_check}};
    std::vector<std::string> inputs{opt.input};
    if (!opt.rff_from.empty()) inputs.push_back(opt.rff_from);
    write_provenance(opt.out, "train", resolved, inputs);

    const Dataset dataset = load_preprocessed_csv(opt.input);
    log_info("train: " + std::to_string(dataset.total_observations()) + " observations from " +
             std::to_string(dataset.drivers.size()) + " trajectories");

    RFFMap fixed_map;
    const RFFMap* map_ptr = nullptr;
    if (!opt.rff_from.empty()) {
        fixed_map = load_model(opt.rff_from).params.rff;
        map_ptr = &fixed_map;
        log_info("train: reusing feature map from " + opt.rff_from);
    }

    if (candidates.size() > 1) {
        const auto rows = select_k(opt.config, dataset, candidates, map_ptr);
        write_json(opt.out + "/select_k.json", select_k_json(rows));
        for (const auto& row : rows)
            log_info("select_k: K=" + std::to_string(row.k) +
                     " mean nll/obs=" + fmt_double(row.mean_nll));
        return 0;
    }

    opt.config.k_profiles = candidates.front();
    std::ofstream epochs_csv(opt.out + "/epochs.csv");
    epochs_csv << "epoch,restart,nll_per_obs,wall_ms\n";
    FitResult result = fit(opt.config, dataset, map_ptr, &epochs_csv);
    epochs_csv.close();

    ModelFile model;
    model.params = std::move(result.params);
    model.provenance.seed = opt.config.seed;
    json hashed = resolved;
    hashed.erase("out");  // the output location is not part of the model's identity
    model.provenance.config_hash = resolved_hash(hashed);
    model.provenance.final_nll_per_obs = result.report.final_nll_per_obs;
    model.provenance.delta_v_convention = opt.delta_v_convention;
    model.provenance.behavioral_ranges = behavioral_percentiles(dataset, 1.0, 99.0);
    model.provenance.source = opt.input;
    save_model(model, opt.out + "/model.json");
    write_json(opt.out + "/train_report.json", train_report_json(result.report));
    log_info("train: final nll/obs = " + fmt_double(result.report.final_nll_per_obs) +
             " (best restart " + std::to_string(result.report.best_restart) + ")");
    return 0;
}

struct AnalyzeOpts {
    std::string model, out, input, trace_driver;
    Index top_m = 4;
    double rank_threshold = 0.01;
    Index grid_n = 41;
    Index modes = 2;
    bool trace = false;
};

int cmd_analyze(AnalyzeOpts& opt) {
    json resolved{{"model", opt.model},       {"out", opt.out},
                  {"input", opt.input},       {"top_m", opt.top_m},
                  {"rank_threshold", opt.rank_threshold}, {"grid_n", opt.grid_n},
                  {"modes", opt.modes},       {"trace", opt.trace},
                  {"trace_driver", opt.trace_driver}};
    std::vector<std::string> inputs{opt.model};
    if (!opt.input.empty()) inputs.push_back(opt.input);
    write_provenance(opt.out, "analyze", resolved, inputs);

    if (opt.trace && opt.input.empty())
        throw InvalidArgument("--trace requires --input trajectories");

    const ModelFile model = load_model(opt.model);
    const ModelParams& params = model.params;

    Dataset dataset;
    if (!opt.input.empty()) dataset = load_preprocessed_csv(opt.input);

    write_json(opt.out + "/spectral.json",
               spectral_json(spectral_report(params, opt.top_m, opt.rank_threshold)));
    write_json(opt.out + "/context.json", context_json(context_report(params)));
    write_json(opt.out + "/distance.json", distance_json(distance_report(params)));

    // Grid ranges: model provenance, else dataset percentiles.
    Matrix ranges;
    if (model.provenance.behavioral_ranges.size() > 0) {
        ranges = model.provenance.behavioral_ranges;
    } else if (!dataset.drivers.empty()) {
        ranges = behavioral_percentiles(dataset, 1.0, 99.0);
    } else {
        throw InvalidArgument(
            "activation grid needs stored behavioral ranges or --input trajectories");
    }
    GridSpec spec;
    for (int a = 0; a < 3; ++a)
        spec.axes[static_cast<std::size_t>(a)] = GridAxis{ranges(a, 0), ranges(a, 1), opt.grid_n};

    std::vector<Index> modes(static_cast<std::size_t>(std::min(opt.modes, params.dim())));
    std::iota(modes.begin(), modes.end(), Index{0});
    json grids;
    grids["report_version"] = 1;
    grids["report"] = "activation_grid";
    json per_profile = json::array();
    std::ofstream marg_csv(opt.out + "/activation_marginals.csv");
    marg_csv << "profile,mode,axis,value_at,activation\n";
    for (Index k = 0; k < params.num_profiles(); ++k) {
        const auto grid = activation_grid(params, k, modes, spec);
        per_profile.push_back(grid_json(grid));
        const char* names[3] = {"delta_v", "accel", "headway"};
        for (std::size_t m = 0; m < grid.modes.size(); ++m)
            for (int a = 0; a < 3; ++a) {
                const auto& marg = grid.marginals[m][static_cast<std::size_t>(a)];
                const auto& axis = spec.axes[static_cast<std::size_t>(a)];
                for (std::size_t i = 0; i < marg.size(); ++i) {
                    const double at =
                        axis.n == 1
                            ? axis.lo
                            : axis.lo + (axis.hi - axis.lo) * static_cast<double>(i) /
                                            static_cast<double>(axis.n - 1);
                    marg_csv << k << ',' << grid.modes[m] << ',' << names[a] << ','
                             << fmt_double(at) << ',' << fmt_double(marg[i]) << '\n';
                }
            }
    }
    grids["profiles"] = std::move(per_profile);
    write_json(opt.out + "/activation_grid.json", grids);

    if (opt.trace) {
        const Trajectory* traj = nullptr;
        if (opt.trace_driver.empty()) {
            if (dataset.drivers.empty()) throw DataError("trace: dataset has no trajectories");
            traj = &dataset.drivers.front();
        } else {
            for (const auto& d : dataset.drivers)
                if (d.driver_id == opt.trace_driver) traj = &d;
            if (!traj) throw DataError("trace: driver '" + opt.trace_driver + "' not found");
        }
        const auto records = state_trace(params, *traj);
        std::ofstream trace_csv(opt.out + "/state_trace.csv");
        trace_csv << "step";
        for (Index k = 0; k < params.num_profiles(); ++k) trace_csv << ",pi_" << k;
        trace_csv << ",likelihood,top_eigenvalue";
        for (Index k = 0; k < params.num_profiles(); ++k) trace_csv << ",dist_" << k;
        trace_csv << '\n';
        for (std::size_t t = 0; t < records.size(); ++t) {
            trace_csv << t;
            for (Index k = 0; k < records[t].pi.size(); ++k)
                trace_csv << ',' << fmt_double(records[t].pi(k));
            trace_csv << ',' << fmt_double(records[t].likelihood) << ','
                      << fmt_double(records[t].top_eigenvalue);
            for (Index k = 0; k < records[t].dist_to_profiles.size(); ++k)
                trace_csv << ',' << fmt_double(records[t].dist_to_profiles(k));
            trace_csv << '\n';
        }
        json trace_meta{{"report_version", 1},
                        {"report", "state_trace"},
                        {"driver", traj->driver_id},
                        {"steps", records.size()},
                        {"csv", "state_trace.csv"}};
        write_json(opt.out + "/state_trace.json", trace_meta);
    }
    log_info("analyze: reports written to " + opt.out);
    return 0;
}

struct GradcheckOpts {
    std::string out;
    Index dim = 8;
    int k = 2;
    Index drivers = 3, steps = 10;
    std::uint64_t seed = 11;
    double step = 1e-5, tolerance = 1e-4;
    std::vector<std::string> skip;
    bool inject_fault = false;
};

int cmd_gradcheck(GradcheckOpts& opt) {
    json resolved{{"out", opt.out},     {"dim", opt.dim},
                  {"k", opt.k},         {"drivers", opt.drivers},
                  {"steps", opt.steps}, {"seed", opt.seed},
                  {"step", opt.step},   {"tolerance", opt.tolerance},
                  {"skip", opt.skip},   {"inject_fault", opt.inject_fault}};
    write_provenance(opt.out, "gradcheck", resolved, {});

    // Canonical tiny instance: data sampled from the planted fixture, checked
    // at generic random parameters (gradients vanish near the optimum, which
    // would make the relative-error comparison vacuous).
    GroundTruth truth = make_two_profile_truth(opt.dim, opt.seed);
    truth.config.drivers = opt.drivers;
    truth.config.steps = opt.steps;
    const SynthResult synth = sample_behavior(truth);

    ModelParams params;
    params.rff = truth.params.rff;
    params.context_norm = truth.params.context_norm;
    Rng rng(opt.seed ^ 0x5eedULL);
    for (int k = 0; k < opt.k; ++k) {
        Matrix b(opt.dim, opt.dim);
        for (Index j = 0; j < opt.dim; ++j)
            for (Index i = 0; i < opt.dim; ++i) b(i, j) = rng.gaussian() / std::sqrt(8.0);
        params.profiles.push_back(ProfileFactor{std::move(b)});
        Vector beta(4);
        for (Index i = 0; i < 4; ++i) beta(i) = 0.5 * rng.gaussian();
        params.betas.push_back(std::move(beta));
    }
    params.alpha_raw = 0.3;
    params.eta_raw = -0.2;

    GradCheckOptions options;
    options.inject_fault = opt.inject_fault;
    for (const auto& name : opt.skip) {
        if (name == "profiles")
            options.check_profiles = false;
        else if (name == "betas")
            options.check_betas = false;
        else if (name == "alpha")
            options.check_alpha = false;
        else if (name == "eta")
            options.check_eta = false;
        else
            throw InvalidArgument("--skip: unknown group '" + name + "'");
    }

    const GradCheckReport report =
        grad_check(params, synth.data, opt.step, opt.tolerance, options);
    write_json(opt.out + "/gradcheck.json", grad_check_json(report));
    for (const auto& g : report.groups)
        log_info("gradcheck: " + g.name +
                 (g.skipped ? " skipped" : " max_rel_err=" + fmt_double(g.max_rel_err)));
    log_info(std::string("gradcheck: ") + (report.passed ? "PASS" : "FAIL") +
             " (max_rel_err=" + fmt_double(report.max_rel_err) + ")");
    if (!report.passed) throw NumericalError("gradient check failed");
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run_cli(args);
}

int run_cli(const std::vector<std::string>& args) {
    try {
        const json file_config = load_config_file(args);

        CLI::App app{"density-matrix behavioral profile learner"};
        app.require_subcommand(1);
        std::string config_path, log_level = "info";
        app.add_option("--config", config_path, "JSON config file (flags override)");
        app.add_option("--log-level", log_level, "quiet|info|debug");

        // preprocess ---------------------------------------------------------
        PreprocessOpts pre;
        if (const json* s = section_of(file_config, "preprocess")) {
            merge(s, "input", pre.input);
            merge(s, "out", pre.out);
            merge(s, "objects", pre.objects);
            merge(s, "fast_path", pre.fast_path);
            merge(s, "smooth_std", pre.ingest.smooth_std);
            merge(s, "min_len", pre.ingest.min_len);
            merge(s, "max_gap", pre.ingest.max_gap);
            merge(s, "r_density", pre.ingest.r_density);
            merge(s, "front_range", pre.ingest.front_range);
            merge(s, "lateral_range", pre.ingest.lateral_range);
            merge(s, "object_horizon", pre.ingest.object_horizon);
            merge(s, "vehicle_length", pre.ingest.vehicle_length);
            merge(s, "delta_v_sign", pre.delta_v_sign);
            merge(s, "dt", pre.ingest.dt);
        }
        CLI::App* sub_pre = app.add_subcommand("preprocess", "raw trajectories -> canonical CSV");
        sub_pre->fallthrough();
        sub_pre->add_option("--input", pre.input, "raw trajectory CSV")->required();
        sub_pre->add_option("--out", pre.out, "output directory")->required();
        sub_pre->add_option("--objects", pre.objects, "sidecar object CSV (kind,pos_m)");
        sub_pre->add_flag("--fast-path", pre.fast_path,
                          "input is already canonical preprocessed CSV");
        sub_pre->add_option("--smooth-std", pre.ingest.smooth_std, "Gaussian smoothing std (s)");
        sub_pre->add_option("--min-len", pre.ingest.min_len, "minimum segment length (steps)");
        sub_pre->add_option("--max-gap", pre.ingest.max_gap, "segment split gap (s)");
        sub_pre->add_option("--r-density", pre.ingest.r_density, "density radius (m)");
        sub_pre->add_option("--front-range", pre.ingest.front_range, "front zone range (m)");
        sub_pre->add_option("--lateral-range", pre.ingest.lateral_range,
                            "adjacent-lane band (m)");
        sub_pre->add_option("--object-horizon", pre.ingest.object_horizon,
                            "distance cap for missing annotations (m)");
        sub_pre->add_option("--vehicle-length", pre.ingest.vehicle_length,
                            "headway offset (m)");
        sub_pre->add_option("--delta-v-sign", pre.delta_v_sign,
                            "leader_minus_ego|ego_minus_leader");
        sub_pre->add_option("--dt", pre.ingest.dt, "sampling interval (s)");
        sub_pre->add_option("--col-driver", pre.ingest.schema.driver_id, "driver id column");
        sub_pre->add_option("--col-time", pre.ingest.schema.time_s, "time column");
        sub_pre->add_option("--col-pos", pre.ingest.schema.pos_m, "position column");
        sub_pre->add_option("--col-speed", pre.ingest.schema.speed_mps, "speed column");
        sub_pre->add_option("--col-lane", pre.ingest.schema.lane, "lane column");
        sub_pre->add_option("--col-leader", pre.ingest.schema.leader_id, "leader id column");

        // synth ---------------------------------------------------------------
        SynthOpts syn;
        if (const json* s = section_of(file_config, "synth")) {
            merge(s, "out", syn.out);
            merge(s, "drivers", syn.drivers);
            merge(s, "steps", syn.steps);
            merge(s, "dim", syn.dim);
            merge(s, "seed", syn.seed);
            merge(s, "fixture", syn.fixture);
            merge(s, "block_len", syn.block_len);
        }
        CLI::App* sub_syn = app.add_subcommand("synth", "generate a planted synthetic dataset");
        sub_syn->fallthrough();
        sub_syn->add_option("--out", syn.out, "output directory")->required();
        sub_syn->add_option("--drivers", syn.drivers, "driver count");
        sub_syn->add_option("--steps", syn.steps, "steps per driver");
        sub_syn->add_option("--dim", syn.dim, "feature dimension of the planted model");
        sub_syn->add_option("--seed", syn.seed, "generation seed");
        sub_syn->add_option("--fixture", syn.fixture, "two_profile|four_profile");
        sub_syn->add_option("--block-len", syn.block_len, "context regime block length");

        // train ----------------------------------------------------------------
        TrainOpts tr;
        if (const json* s = section_of(file_config, "train")) {
            merge(s, "input", tr.input);
            merge(s, "out", tr.out);
            merge(s, "k", tr.k_spec);
            merge(s, "rff_dim", tr.config.rff_dim);
            merge(s, "rank", tr.config.rank);
            merge(s, "bandwidth", tr.config.bandwidth);
            merge(s, "bandwidth_sample", tr.config.bandwidth_sample);
            merge(s, "seed", tr.config.seed);
            merge(s, "lr", tr.config.learning_rate);
            merge(s, "epochs", tr.config.epochs);
            merge(s, "batch", tr.config.batch);
            merge(s, "truncation", tr.config.truncation);
            merge(s, "epsilon", tr.config.epsilon);
            merge(s, "restarts", tr.config.restarts);
            merge(s, "threads", tr.config.threads);
            merge(s, "deterministic", tr.config.deterministic);
            merge(s, "init_noise", tr.config.init_noise);
            merge(s, "likelihood_target", tr.likelihood_target);
            merge(s, "init_state", tr.init_state);
            merge(s, "delta_v_convention", tr.delta_v_convention);
            merge(s, "rff_from", tr.rff_from);
            merge(s, "grad_check", tr.config.run_grad_check);
        }
        CLI::App* sub_tr = app.add_subcommand("train", "fit profiles to a canonical CSV");
        sub_tr->fallthrough();
        sub_tr->add_option("--input", tr.input, "preprocessed CSV")->required();
        sub_tr->add_option("--out", tr.out, "output directory")->required();
        sub_tr->add_option("--k", tr.k_spec, "profile count, or comma list for selection");
        sub_tr->add_option("--rff-dim", tr.config.rff_dim, "feature dimension D");
        sub_tr->add_option("--rank", tr.config.rank, "factor rank budget (0 = D)");
        sub_tr->add_option("--bandwidth", tr.config.bandwidth,
                           "kernel bandwidth (0 = median heuristic)");
        sub_tr->add_option("--bandwidth-sample", tr.config.bandwidth_sample,
                           "median heuristic sample cap");
        sub_tr->add_option("--seed", tr.config.seed, "training seed");
        sub_tr->add_option("--lr", tr.config.learning_rate, "learning rate");
        sub_tr->add_option("--epochs", tr.config.epochs, "epochs per restart");
        sub_tr->add_option("--batch", tr.config.batch, "drivers per gradient step (0 = all)");
        sub_tr->add_option("--truncation", tr.config.truncation,
                           "BPTT window in steps (0 = full)");
        sub_tr->add_option("--epsilon", tr.config.epsilon, "likelihood floor");
        sub_tr->add_option("--restarts", tr.config.restarts, "random restarts");
        sub_tr->add_option("--threads", tr.config.threads, "worker threads (0 = auto)");
        sub_tr->add_flag("--deterministic,!--no-deterministic", tr.config.deterministic,
                         "ordered gradient reductions");
        sub_tr->add_option("--init-noise", tr.config.init_noise, "factor init noise mass");
        sub_tr->add_option("--likelihood-target", tr.likelihood_target,
                           "prediction|post_update");
        sub_tr->add_option("--init-state", tr.init_state, "context_mixture|maximally_mixed");
        sub_tr->add_option("--delta-v-convention", tr.delta_v_convention,
                           "recorded sign convention of the input data");
        sub_tr->add_option("--rff-from", tr.rff_from, "reuse the feature map of this model file");
        sub_tr->add_flag("--grad-check", tr.config.run_grad_check,
                         "audit the fitted gradients against finite differences");

        // analyze ---------------------------------------------------------------
        AnalyzeOpts an;
        if (const json* s = section_of(file_config, "analyze")) {
            merge(s, "model", an.model);
            merge(s, "out", an.out);
            merge(s, "input", an.input);
            merge(s, "top_m", an.top_m);
            merge(s, "rank_threshold", an.rank_threshold);
            merge(s, "grid_n", an.grid_n);
            merge(s, "modes", an.modes);
            merge(s, "trace", an.trace);
            merge(s, "trace_driver", an.trace_driver);
        }
        CLI::App* sub_an = app.add_subcommand("analyze", "spectral / context / geometry reports");
        sub_an->fallthrough();
        sub_an->add_option("--model", an.model, "model file")->required();
        sub_an->add_option("--out", an.out, "output directory")->required();
        sub_an->add_option("--input", an.input, "preprocessed CSV (for grids and traces)");
        sub_an->add_option("--top-m", an.top_m, "eigenvalues per profile");
        sub_an->add_option("--rank-threshold", an.rank_threshold, "effective-rank threshold");
        sub_an->add_option("--grid-n", an.grid_n, "grid points per axis");
        sub_an->add_option("--modes", an.modes, "leading modes per profile");
        sub_an->add_flag("--trace", an.trace, "emit a per-step state trace");
        sub_an->add_option("--trace-driver", an.trace_driver, "driver id to trace");

        // gradcheck ---------------------------------------------------------------
        GradcheckOpts gc;
        if (const json* s = section_of(file_config, "gradcheck")) {
            merge(s, "out", gc.out);
            merge(s, "dim", gc.dim);
            merge(s, "k", gc.k);
            merge(s, "drivers", gc.drivers);
            merge(s, "steps", gc.steps);
            merge(s, "seed", gc.seed);
            merge(s, "step", gc.step);
            merge(s, "tolerance", gc.tolerance);
            merge(s, "inject_fault", gc.inject_fault);
        }
        CLI::App* sub_gc = app.add_subcommand("gradcheck", "finite-difference gradient audit");
        sub_gc->fallthrough();
        sub_gc->add_option("--out", gc.out, "output directory")->required();
        sub_gc->add_option("--dim", gc.dim, "feature dimension");
        sub_gc->add_option("--k", gc.k, "profile count");
        sub_gc->add_option("--drivers", gc.drivers, "drivers in the tiny instance");
        sub_gc->add_option("--steps", gc.steps, "steps per driver");
        sub_gc->add_option("--seed", gc.seed, "instance seed");
        sub_gc->add_option("--step", gc.step, "finite-difference step");
        sub_gc->add_option("--tolerance", gc.tolerance, "max relative error to pass");
        sub_gc->add_option("--skip", gc.skip, "groups to skip (profiles|betas|alpha|eta)");
        sub_gc->add_flag("--inject-fault", gc.inject_fault,
                         "negate one analytic group (harness self-test)");

        std::vector<std::string> cli_args(args.rbegin(), args.rend());
        try {
            app.parse(cli_args);
        } catch (const CLI::ParseError& e) {
            const int code = app.exit(e);
            return code == 0 ? 0 : 1;
        }

        g_log_level = log_level == "quiet" ? 0 : (log_level == "debug" ? 2 : 1);

        if (app.got_subcommand(sub_pre)) return cmd_preprocess(pre);
        if (app.got_subcommand(sub_syn)) return cmd_synth(syn);
        if (app.got_subcommand(sub_tr)) return cmd_train(tr);
        if (app.got_subcommand(sub_an)) return cmd_analyze(an);
        if (app.got_subcommand(sub_gc)) return cmd_gradcheck(gc);
        return 1;
    } catch (const InvalidArgument& e) {
        std::cerr << "error (usage): " << e.what() << '\n';
        return 1;
    } catch (const DataError& e) {
        std::cerr << "error (data): " << e.what() << '\n';
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "error (numerical): " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    }
}

}  // namespace rhoflow
