#include "rhoflow/synth.hpp"

#include <json.hpp>

#include <Eigen/Eigenvalues>
#include <cmath>
#include <fstream>

#include "rhoflow/ingest.hpp"
#include "rhoflow/model_io.hpp"
#include "rhoflow/rng.hpp"

namespace rhoflow {

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

// Eigenvectors (ascending) of the candidate grid's feature frame
// sum_g phi_g phi_g^T. Profiles planted along frame eigendirections are
// stationary points of the grid-score likelihood to first order, which makes
// the generator a usable estimation oracle; profiles planted on arbitrary
// directions bias the fit by the frame's anisotropy.
Matrix frame_eigenvectors(const RFFMap& map, const BehaviorGrid& grid) {
    Matrix frame = Matrix::Zero(map.dim_out, map.dim_out);
    for (const auto& point : grid_points(grid, map.input_norm)) {
        const Vector phi = embed_normalized(map, point);
        frame.noalias() += phi * phi.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Matrix> solver(frame);
    return solver.eigenvectors();
}

Vector grid_axis(double lo, double hi, Index n) {
    Vector v(n);
    if (n == 1) {
        v(0) = lo;
        return v;
    }
    for (Index i = 0; i < n; ++i)
        v(i) = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return v;
}

}  // namespace

std::vector<BehavioralVector> grid_points(const BehaviorGrid& grid,
                                          const Normalization& input_norm) {
    const Vector a0 = grid_axis(grid.lo(0), grid.hi(0), grid.n[0]);
    const Vector a1 = grid_axis(grid.lo(1), grid.hi(1), grid.n[1]);
    const Vector a2 = grid_axis(grid.lo(2), grid.hi(2), grid.n[2]);
    std::vector<BehavioralVector> points;
    points.reserve(static_cast<std::size_t>(grid.size()));
    for (Index i = 0; i < grid.n[0]; ++i)
        for (Index j = 0; j < grid.n[1]; ++j)
            for (Index k = 0; k < grid.n[2]; ++k) {
                Vector std_pt(3);
                std_pt << a0(i), a1(j), a2(k);
                const Vector phys = input_norm.invert(std_pt);
                points.push_back(BehavioralVector{phys(0), phys(1), phys(2)});
            }
    return points;
}

std::vector<std::vector<ContextVector>> sample_contexts(const SynthConfig& config) {
    if (config.schedule.regimes.empty())
        throw InvalidArgument("sample_contexts: no regimes configured");
    if (config.schedule.block_len < 1)
        throw InvalidArgument("sample_contexts: block_len must be >= 1");
    const Index n_regimes = static_cast<Index>(config.schedule.regimes.size());
    std::vector<std::vector<ContextVector>> out;
    out.reserve(static_cast<std::size_t>(config.drivers));
    for (Index i = 0; i < config.drivers; ++i) {
        std::vector<ContextVector> seq;
        seq.reserve(static_cast<std::size_t>(config.steps));
        for (Index t = 0; t < config.steps; ++t) {
            const Index regime = (i + t / config.schedule.block_len) % n_regimes;
            seq.push_back(config.schedule.regimes[static_cast<std::size_t>(regime)]);
        }
        out.push_back(std::move(seq));
    }
    return out;
}

SynthResult sample_behavior(const GroundTruth& truth) {
    const ModelParams& params = truth.params;
    const SynthConfig& config = truth.config;
    const Index k_profiles = params.num_profiles();
    const Index dim = params.dim();
    const Index cells = config.grid.size();

    const auto points = grid_points(config.grid, params.rff.input_norm);
    Matrix phi_grid(dim, cells);
    for (Index g = 0; g < cells; ++g)
        phi_grid.col(g) = embed_normalized(params.rff, points[static_cast<std::size_t>(g)]);

    // Per-cell quadratic scores of each planted profile; the state recursion
    // is linear, so scores evolve by the same recursion and no D x D state
    // has to be materialized.
    const auto rhos = params.realized_profiles();
    Matrix w_rho(cells, k_profiles);
    for (Index k = 0; k < k_profiles; ++k)
        w_rho.col(k) =
            phi_grid.cwiseProduct(rhos[static_cast<std::size_t>(k)].m * phi_grid)
                .colwise()
                .sum()
                .transpose();

    const double alpha = params.alpha();
    const double eta = params.eta();
    const auto contexts = sample_contexts(config);
    const Rng master(config.seed);

    SynthResult result;
    result.data.info.source = "synth(seed=" + std::to_string(config.seed) + ")";
    result.data.drivers.reserve(static_cast<std::size_t>(config.drivers));
    result.activations.reserve(static_cast<std::size_t>(config.drivers));
    result.choices.reserve(static_cast<std::size_t>(config.drivers));

    for (Index i = 0; i < config.drivers; ++i) {
        Rng rng = master.fork(static_cast<std::uint64_t>(i));
        const auto& ctx_seq = contexts[static_cast<std::size_t>(i)];

        Trajectory traj;
        char id[32];
        std::snprintf(id, sizeof(id), "synth_%04lld", static_cast<long long>(i));
        traj.driver_id = id;
        traj.dt = config.dt;
        traj.x.reserve(static_cast<std::size_t>(config.steps));
        traj.c = ctx_seq;

        Matrix pis(k_profiles, config.steps);
        std::vector<Index> chosen(static_cast<std::size_t>(config.steps));

        Vector w_state(cells);
        Vector w_pred(cells);
        for (Index t = 0; t < config.steps; ++t) {
            const Vector c_std =
                params.context_norm.apply(Vector(ctx_seq[static_cast<std::size_t>(t)].vec()));
            const Vector pi = activation(params.betas, c_std);
            pis.col(t) = pi;

            if (t == 0) {
                if (params.init_state == InitState::kContextMixture)
                    w_state = w_rho * pi;
                else
                    w_state = Vector::Constant(cells, 1.0 / static_cast<double>(dim));
            }
            w_pred = (1.0 - alpha) * w_state + alpha * (w_rho * pi);

            double total = 0.0;
            for (Index g = 0; g < cells; ++g) total += std::max(w_pred(g), 0.0);
            if (!(total > 0.0))
                throw NumericalError("sample_behavior: all grid weights vanish for driver " +
                                     traj.driver_id + " at step " + std::to_string(t));

            const double u = rng.uniform01() * total;
            double acc = 0.0;
            Index pick = cells - 1;
            for (Index g = 0; g < cells; ++g) {
                acc += std::max(w_pred(g), 0.0);
                if (u < acc) {
                    pick = g;
                    break;
                }
            }
            chosen[static_cast<std::size_t>(t)] = pick;
            traj.x.push_back(points[static_cast<std::size_t>(pick)]);

            const Vector overlap_sq =
                (phi_grid.transpose() * phi_grid.col(pick)).array().square();
            w_state = (1.0 - eta) * w_pred + eta * overlap_sq;
        }

        result.data.drivers.push_back(std::move(traj));
        result.activations.push_back(std::move(pis));
        result.choices.push_back(std::move(chosen));
    }
    return result;
}

void emit_csv(const Dataset& dataset, const std::string& path) {
    save_preprocessed_csv(dataset, path);
}

void emit_sidecar(const GroundTruth& truth, const SynthResult& result,
                  const std::string& path) {
    nlohmann::json j;
    j["format"] = "rhoflow-synth-truth";
    j["version"] = 1;
    j["model"] = params_to_json(truth.params);
    j["config"] = {{"drivers", truth.config.drivers},
                   {"steps", truth.config.steps},
                   {"seed", truth.config.seed},
                   {"dt", truth.config.dt},
                   {"block_len", truth.config.schedule.block_len},
                   {"grid_n", {truth.config.grid.n[0], truth.config.grid.n[1],
                               truth.config.grid.n[2]}},
                   {"grid_lo", {truth.config.grid.lo(0), truth.config.grid.lo(1),
                                truth.config.grid.lo(2)}},
                   {"grid_hi", {truth.config.grid.hi(0), truth.config.grid.hi(1),
                                truth.config.grid.hi(2)}}};
    nlohmann::json regimes = nlohmann::json::array();
    for (const auto& r : truth.config.schedule.regimes)
        regimes.push_back({r.d_ped, r.d_stop, r.density, r.v_avg});
    j["config"]["regimes"] = regimes;

    nlohmann::json activations = nlohmann::json::array();
    for (const auto& pis : result.activations) {
        nlohmann::json per_driver = nlohmann::json::array();
        for (Index t = 0; t < pis.cols(); ++t) {
            nlohmann::json step = nlohmann::json::array();
            for (Index k = 0; k < pis.rows(); ++k) step.push_back(pis(k, t));
            per_driver.push_back(std::move(step));
        }
        activations.push_back(std::move(per_driver));
    }
    j["activations"] = std::move(activations);

    nlohmann::json choices = nlohmann::json::array();
    for (const auto& ch : result.choices) choices.push_back(ch);
    j["choices"] = std::move(choices);

    std::ofstream out(path);
    if (!out) throw DataError("emit_sidecar: cannot open " + path);
    out << j.dump(2) << '\n';
}

GroundTruth make_two_profile_truth(Index dim, std::uint64_t seed) {
    GroundTruth truth;
    SynthConfig& config = truth.config;
    config.seed = seed;
    config.schedule.block_len = 25;
    config.schedule.regimes = {ContextVector{60.0, 80.0, 4.0, 24.0},
                               ContextVector{60.0, 80.0, 22.0, 8.0}};

    ModelParams& params = truth.params;
    params.rff = build_rff_map(3, dim, 0.3, seed);
    params.rff.input_norm.mean = Vector{{0.0, 0.0, 30.0}};
    params.rff.input_norm.scale = Vector{{2.0, 1.0, 10.0}};
    params.context_norm.mean = Vector{{60.0, 80.0, 13.0, 16.0}};
    params.context_norm.scale = Vector{{10.0, 10.0, 9.0, 8.0}};
    params.alpha_raw = logit(0.9);
    params.eta_raw = logit(0.05);

    const Matrix dirs = frame_eigenvectors(params.rff, config.grid);
    const Index step = std::max<Index>(1, dim / 8);
    const Vector v_a = dirs.col(dim - 2);
    const Vector v_b = dirs.col(dim - 2 - step);
    const Vector v_c = dirs.col(dim - 2 - 2 * step);

    params.profiles.push_back(ProfileFactor{v_a});
    Matrix b2(dim, 2);
    b2.col(0) = std::sqrt(0.6) * v_b;
    b2.col(1) = std::sqrt(0.4) * v_c;
    params.profiles.push_back(ProfileFactor{std::move(b2)});

    params.betas.push_back(Vector{{0.0, 0.0, -3.0, 1.5}});
    params.betas.push_back(Vector{{0.0, 0.0, 3.0, -1.5}});
    return truth;
}

GroundTruth make_four_profile_truth(Index dim, std::uint64_t seed) {
    GroundTruth truth;
    SynthConfig& config = truth.config;
    config.seed = seed;
    config.schedule.block_len = 25;
    config.schedule.regimes = {
        ContextVector{60.0, 80.0, 4.0, 24.0}, ContextVector{60.0, 80.0, 22.0, 8.0},
        ContextVector{20.0, 80.0, 13.0, 16.0}, ContextVector{60.0, 40.0, 13.0, 16.0}};

    ModelParams& params = truth.params;
    params.rff = build_rff_map(3, dim, 0.3, seed);
    params.rff.input_norm.mean = Vector{{0.0, 0.0, 30.0}};
    params.rff.input_norm.scale = Vector{{2.0, 1.0, 10.0}};
    params.context_norm.mean = Vector{{60.0, 80.0, 13.0, 16.0}};
    params.context_norm.scale = Vector{{40.0, 40.0, 9.0, 8.0}};
    params.alpha_raw = logit(0.9);
    params.eta_raw = logit(0.05);

    const Matrix dirs = frame_eigenvectors(params.rff, config.grid);
    const Index step = std::max<Index>(1, dim / 12);
    auto dir = [&](Index i) { return Vector(dirs.col(dim - 2 - i * step)); };

    params.profiles.push_back(ProfileFactor{dir(0)});
    params.profiles.push_back(ProfileFactor{dir(1)});
    params.profiles.push_back(ProfileFactor{dir(2)});
    Matrix b3(dim, 2);
    b3.col(0) = std::sqrt(0.7) * dir(3);
    b3.col(1) = std::sqrt(0.3) * dir(4);
    params.profiles.push_back(ProfileFactor{std::move(b3)});

    params.betas.push_back(Vector{{0.0, 0.0, -3.0, 1.5}});
    params.betas.push_back(Vector{{0.0, 0.0, 3.0, -1.5}});
    params.betas.push_back(Vector{{-5.0, 0.0, 0.0, 0.0}});
    params.betas.push_back(Vector{{0.0, -5.0, 0.0, 0.0}});
    return truth;
}

}  // namespace rhoflow
