#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "oracle_reference.hpp"
#include "rhoflow/rng.hpp"
#include "rhoflow/synth.hpp"
#include "rhoflow/train.hpp"

using namespace rhoflow;

namespace {

Matrix random_matrix(Rng& rng, Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index j = 0; j < cols; ++j)
        for (Index i = 0; i < rows; ++i) m(i, j) = rng.gaussian();
    return m;
}

ModelParams random_params(Rng& rng, Index dim, Index k_profiles, Index rank = 0) {
    ModelParams params;
    params.rff = build_rff_map(3, dim, 1.0, rng.next_u64());
    params.context_norm = Normalization::identity(4);
    for (Index k = 0; k < k_profiles; ++k) {
        const Index r = rank > 0 ? rank : dim;
        params.profiles.push_back(ProfileFactor{random_matrix(rng, dim, r)});
        Vector beta(4);
        for (Index i = 0; i < 4; ++i) beta(i) = 0.5 * rng.gaussian();
        params.betas.push_back(std::move(beta));
    }
    params.alpha_raw = 0.4 * rng.gaussian();
    params.eta_raw = 0.4 * rng.gaussian();
    return params;
}

Trajectory random_trajectory(Rng& rng, Index steps, const std::string& id) {
    Trajectory traj;
    traj.driver_id = id;
    for (Index t = 0; t < steps; ++t) {
        traj.x.push_back(BehavioralVector{rng.uniform(-3, 3), rng.uniform(-2, 2),
                                          rng.uniform(5, 60)});
        traj.c.push_back(ContextVector{rng.uniform(0, 100), rng.uniform(0, 100),
                                       rng.uniform(0, 30), rng.uniform(0, 30)});
    }
    return traj;
}

Dataset random_dataset(Rng& rng, Index drivers, Index steps) {
    Dataset data;
    for (Index i = 0; i < drivers; ++i)
        data.drivers.push_back(random_trajectory(rng, steps, "d" + std::to_string(i)));
    return data;
}

Dataset constant_dataset(Index drivers, Index steps) {
    Dataset data;
    for (Index i = 0; i < drivers; ++i) {
        Trajectory traj;
        traj.driver_id = "c" + std::to_string(i);
        for (Index t = 0; t < steps; ++t) {
            traj.x.push_back(BehavioralVector{1.0, 0.2, 25.0});
            traj.c.push_back(ContextVector{40.0, 60.0, 8.0, 12.0});
        }
        data.drivers.push_back(std::move(traj));
    }
    return data;
}

}  // namespace

TEST_CASE("loss closed forms") {
    Rng rng(1);
    SUBCASE("matching pure profile gives near-zero loss") {
        ModelParams params = random_params(rng, 8, 1);
        Dataset data = random_dataset(rng, 1, 1);
        params.profiles[0] = ProfileFactor{embed_normalized(params.rff, data.drivers[0].x[0])};
        const LossInfo info = loss(params, data);
        CHECK(info.observations == 1);
        CHECK(std::abs(info.total_nll) <= 1e-9);
    }
    SUBCASE("maximally mixed profile gives -log(1/D + eps) per observation") {
        const Index dim = 12;
        ModelParams params = random_params(rng, dim, 1);
        params.profiles[0] = ProfileFactor{Matrix::Identity(dim, dim)};
        params.alpha_raw = 40.0;
        const Dataset data = random_dataset(rng, 3, 20);
        const LossInfo info = loss(params, data);
        const double expected = -std::log(1.0 / static_cast<double>(dim) + params.epsilon);
        CHECK(info.per_observation() == doctest::Approx(expected).epsilon(1e-12));
    }
    SUBCASE("loss is the sum of per-driver reference NLLs") {
        ModelParams params = random_params(rng, 6, 2);
        const Dataset data = random_dataset(rng, 4, 7);
        double expected = 0.0;
        for (const auto& traj : data.drivers)
            expected += forward_driver(params, traj).nll;
        const LossInfo info = loss(params, data);
        CHECK(std::abs(info.total_nll - expected) <= 1e-10);
        CHECK(info.observations == 28);
    }
}

TEST_CASE("eta gradient vanishes for single-step trajectories") {
    Rng rng(2);
    ModelParams params = random_params(rng, 6, 2);
    params.alpha_raw = -40.0;
    const Dataset data = random_dataset(rng, 3, 1);
    const Gradients grads = gradient(params, data);
    CHECK(grads.eta_raw == 0.0);
}

TEST_CASE("canonical tiny instance passes the finite-difference audit") {
    Rng rng(3);
    const ModelParams params = random_params(rng, 8, 2);
    const Dataset data = random_dataset(rng, 3, 10);
    const GradCheckReport report = grad_check(params, data, 1e-5, 1e-4);
    for (const auto& group : report.groups) {
        INFO(group.name, " max_rel_err=", group.max_rel_err);
        CHECK_FALSE(group.skipped);
        CHECK(group.max_rel_err < 1e-4);
    }
    CHECK(report.passed);
    CHECK_FALSE(report.step_size_suspect);
}

TEST_CASE("finite-difference audit under the alternative model settings") {
    Rng rng(17);
    ModelParams params = random_params(rng, 6, 2);
    params.likelihood_target = LikelihoodTarget::kPostUpdate;
    params.init_state = InitState::kMaximallyMixed;
    const Dataset data = random_dataset(rng, 2, 8);
    const GradCheckReport report = grad_check(params, data, 1e-5, 1e-4);
    CHECK(report.passed);
}

TEST_CASE("exchangeable profiles receive identical beta gradients") {
    Rng rng(4);
    ModelParams params = random_params(rng, 6, 2);
    params.profiles[1] = params.profiles[0];
    params.betas[0].setZero();
    params.betas[1].setZero();
    const Dataset data = random_dataset(rng, 3, 12);
    const Gradients grads = gradient(params, data);
    CHECK((grads.betas[0] - grads.betas[1]).cwiseAbs().maxCoeff() <= 1e-8);
    CHECK((grads.profiles[0] - grads.profiles[1]).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("grad_check report flags") {
    Rng rng(5);
    const ModelParams params = random_params(rng, 5, 2);
    const Dataset data = random_dataset(rng, 2, 5);

    SUBCASE("skipped groups are marked, not failed") {
        GradCheckOptions options;
        options.check_eta = false;
        const GradCheckReport report = grad_check(params, data, 1e-5, 1e-4, options);
        bool eta_seen = false;
        for (const auto& group : report.groups) {
            if (group.name == "eta_raw") {
                eta_seen = true;
                CHECK(group.skipped);
            }
        }
        CHECK(eta_seen);
        CHECK(report.passed);
    }
    SUBCASE("coarse steps are flagged without throwing") {
        const GradCheckReport report = grad_check(params, data, 1e-1, 1e-4);
        CHECK(report.step_size_suspect);
    }
    SUBCASE("an injected sign flip is caught") {
        GradCheckOptions options;
        options.inject_fault = true;
        const GradCheckReport report = grad_check(params, data, 1e-5, 1e-4, options);
        CHECK_FALSE(report.passed);
    }
    SUBCASE("thresholds are recorded") {
        const GradCheckReport report = grad_check(params, data, 1e-5, 1e-3);
        CHECK(report.step == 1e-5);
        CHECK(report.tolerance == 1e-3);
    }
}

TEST_CASE("full backpropagation equals the explicit full-window setting") {
    Rng rng(6);
    const ModelParams params = random_params(rng, 6, 2);
    const Dataset data = random_dataset(rng, 2, 50);
    const Gradients full = gradient(params, data, 0);
    const Gradients window = gradient(params, data, 50);
    for (std::size_t k = 0; k < full.profiles.size(); ++k)
        CHECK(full.profiles[k] == window.profiles[k]);
    for (std::size_t k = 0; k < full.betas.size(); ++k)
        CHECK(full.betas[k] == window.betas[k]);
    CHECK(full.alpha_raw == window.alpha_raw);
    CHECK(full.eta_raw == window.eta_raw);

    // A genuinely truncated window changes the gradient.
    const Gradients cut = gradient(params, data, 10);
    CHECK(full.alpha_raw != cut.alpha_raw);
}

TEST_CASE("truncated gradients still pass finite differences of the truncated loss") {
    // Truncation is exact for trajectories shorter than the window.
    Rng rng(7);
    const ModelParams params = random_params(rng, 5, 2);
    const Dataset data = random_dataset(rng, 2, 6);
    const Gradients g_full = gradient(params, data, 0);
    const Gradients g_win = gradient(params, data, 100);
    CHECK(g_full.alpha_raw == g_win.alpha_raw);
}

TEST_CASE("descent reduces the loss on a tiny instance for most seeds") {
    int improved = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(100 + seed);
        const Dataset data = random_dataset(rng, 3, 10);
        TrainConfig config;
        config.k_profiles = 2;
        config.rff_dim = 8;
        config.learning_rate = 1e-3;
        config.epochs = 200;
        config.seed = seed;
        config.restarts = 1;
        config.threads = 1;
        const FitResult result = fit(config, data);
        const double initial = result.report.epochs.front().nll_per_obs;
        if (result.report.final_nll_per_obs < initial) ++improved;
    }
    CHECK(improved >= 9);
}

TEST_CASE("constant data drives a single profile to the observation's pure state") {
    const Dataset data = constant_dataset(2, 30);
    TrainConfig config;
    config.k_profiles = 1;
    config.rff_dim = 8;
    config.learning_rate = 1e-2;
    config.epochs = 400;
    config.seed = 3;
    config.restarts = 1;
    config.threads = 1;
    const FitResult result = fit(config, data);
    CHECK(result.report.final_nll_per_obs < 0.01);

    const Vector phi = embed_normalized(result.params.rff, data.drivers[0].x[0]);
    const DensityMatrix fitted = realize(result.params.profiles[0]);
    CHECK(frobenius_distance(fitted, pure_state(phi)) < 0.1);
}

TEST_CASE("a duplicated profile preserves nesting of the solution quality") {
    Rng rng(8);
    GroundTruth truth = make_two_profile_truth(12, 5);
    truth.config.drivers = 16;
    truth.config.steps = 40;
    const Dataset data = sample_behavior(truth).data;

    TrainConfig config;
    config.k_profiles = 3;
    config.rff_dim = 12;
    config.learning_rate = 1e-2;
    config.epochs = 120;
    config.seed = 9;
    config.restarts = 1;
    config.threads = 1;
    const FitResult base = fit(config, data);

    ModelParams warm = base.params;
    warm.profiles.push_back(warm.profiles[0]);
    warm.betas.push_back(warm.betas[0]);

    TrainConfig warm_config = config;
    warm_config.k_profiles = 4;
    warm_config.learning_rate = 2e-3;
    warm_config.epochs = 80;
    const FitResult refined = fit_from(warm, warm_config, data);
    CHECK(refined.report.final_nll_per_obs <=
          base.report.final_nll_per_obs + 1e-4);
}

TEST_CASE("constraint revalidation and the post-fit gradient audit") {
    Rng rng(14);
    const Dataset data = random_dataset(rng, 3, 8);
    TrainConfig config;
    config.k_profiles = 2;
    config.rff_dim = 6;
    config.epochs = 20;
    config.seed = 2;
    config.threads = 1;
    config.check_constraints = true;
    config.run_grad_check = true;
    const FitResult result = fit(config, data);
    REQUIRE(result.report.grad_check.has_value());
    CHECK(result.report.grad_check->passed);
    for (const auto& factor : result.params.profiles)
        CHECK(is_valid_density(realize(factor).m));
}

TEST_CASE("fit is deterministic given seed and config") {
    Rng rng(9);
    const Dataset data = random_dataset(rng, 4, 15);
    TrainConfig config;
    config.k_profiles = 2;
    config.rff_dim = 8;
    config.epochs = 40;
    config.seed = 21;
    config.restarts = 2;
    config.threads = 1;
    config.deterministic = true;

    const FitResult a = fit(config, data);
    const FitResult b = fit(config, data);
    REQUIRE(a.report.epochs.size() == b.report.epochs.size());
    for (std::size_t i = 0; i < a.report.epochs.size(); ++i)
        CHECK(a.report.epochs[i].nll_per_obs == b.report.epochs[i].nll_per_obs);
    CHECK(a.report.final_nll_per_obs == b.report.final_nll_per_obs);
    for (std::size_t k = 0; k < a.params.profiles.size(); ++k)
        CHECK(a.params.profiles[k].b == b.params.profiles[k].b);
    CHECK(a.params.alpha_raw == b.params.alpha_raw);
}

TEST_CASE("batched and full-batch training both run deterministically") {
    Rng rng(10);
    const Dataset data = random_dataset(rng, 6, 10);
    TrainConfig config;
    config.k_profiles = 2;
    config.rff_dim = 6;
    config.epochs = 15;
    config.seed = 4;
    config.batch = 2;
    config.threads = 1;
    const FitResult a = fit(config, data);
    const FitResult b = fit(config, data);
    CHECK(a.report.final_nll_per_obs == b.report.final_nll_per_obs);
}

TEST_CASE("select_k") {
    SUBCASE("constant data with one profile reaches near-zero loss") {
        const Dataset data = constant_dataset(2, 30);
        TrainConfig config;
        config.rff_dim = 8;
        config.epochs = 400;
        config.seed = 3;
        config.restarts = 1;
        config.threads = 1;
        const auto rows = select_k(config, data, {1});
        REQUIRE(rows.size() == 1);
        CHECK(rows[0].k == 1);
        CHECK(rows[0].mean_nll < 0.01);
        CHECK(rows[0].spectra.size() == 1);
    }
    SUBCASE("identical reruns produce identical tables") {
        Rng rng(11);
        const Dataset data = random_dataset(rng, 4, 12);
        TrainConfig config;
        config.rff_dim = 6;
        config.epochs = 25;
        config.seed = 13;
        config.restarts = 2;
        config.threads = 1;
        const auto a = select_k(config, data, {1, 2});
        const auto b = select_k(config, data, {1, 2});
        REQUIRE(a.size() == b.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].mean_nll == b[i].mean_nll);
            CHECK(a[i].restart_nll == b[i].restart_nll);
        }
    }
    SUBCASE("empty candidate list is rejected") {
        const Dataset data = constant_dataset(1, 10);
        CHECK_THROWS_AS(select_k(TrainConfig{}, data, {}), InvalidArgument);
    }
}

TEST_CASE("diverging restarts abort with a numerical failure") {
    // The factor parameterization is scale-invariant, so blowing up the
    // factors alone cannot produce non-finite values; an overflow-scale step
    // does.
    Rng rng(12);
    const Dataset data = random_dataset(rng, 2, 10);
    TrainConfig config;
    config.k_profiles = 1;
    config.rff_dim = 6;
    config.learning_rate = 1e308;
    config.epochs = 5;
    config.restarts = 2;
    config.threads = 1;
    CHECK_THROWS_AS(fit(config, data), NumericalError);
}

TEST_CASE("loss and gradient validate their inputs") {
    Rng rng(13);
    const ModelParams params = random_params(rng, 5, 2);
    CHECK_THROWS_AS(loss(params, Dataset{}), InvalidArgument);
    CHECK_THROWS_AS(gradient(params, Dataset{}), InvalidArgument);
    const Dataset data = random_dataset(rng, 1, 3);
    CHECK_THROWS_AS(grad_check(params, data, 0.0, 1e-4), InvalidArgument);
}
