#include "rhoflow/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <ostream>
#include <span>
#include <thread>

#include "rhoflow/io_util.hpp"
#include "rhoflow/rng.hpp"

namespace rhoflow {

namespace {

constexpr Index kChunkDrivers = 32;    // fixed so reductions are order-stable
constexpr Index kSegmentSteps = 128;   // BPTT checkpoint interval (full mode)

double now_ms() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

double dot_f(const Matrix& a, const Matrix& b) { return a.cwiseProduct(b).sum(); }

// ---------------------------------------------------------------------------
// Embedded dataset: features and standardized contexts are frozen during
// optimization, so they are computed once per fit.

struct EmbeddedDriver {
    std::string id;
    Matrix phi;  // D x T, unit-norm columns
    Matrix ctx;  // q x T, standardized
};

struct EmbeddedDataset {
    std::vector<EmbeddedDriver> drivers;
    Index total_obs = 0;
};

EmbeddedDataset embed_dataset(const Dataset& dataset, const RFFMap& map,
                              const Normalization& ctx_norm) {
    if (dataset.drivers.empty()) throw InvalidArgument("empty dataset");
    EmbeddedDataset out;
    out.drivers.reserve(dataset.drivers.size());
    for (const auto& traj : dataset.drivers) {
        const Index steps = traj.size();
        if (steps == 0) throw InvalidArgument("empty trajectory for driver " + traj.driver_id);
        EmbeddedDriver drv;
        drv.id = traj.driver_id;
        drv.phi.resize(map.dim_out, steps);
        drv.ctx.resize(ctx_norm.dim(), steps);
        for (Index t = 0; t < steps; ++t) {
            try {
                drv.phi.col(t) = embed_normalized(map, traj.x[static_cast<std::size_t>(t)]);
            } catch (const std::exception& e) {
                throw NumericalError("driver '" + traj.driver_id + "' step " +
                                     std::to_string(t) + ": " + e.what());
            }
            drv.ctx.col(t) = ctx_norm.apply(Vector(traj.c[static_cast<std::size_t>(t)].vec()));
        }
        out.total_obs += steps;
        out.drivers.push_back(std::move(drv));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation context: everything derived from ModelParams that the per-driver
// passes need, realized once per gradient step.

struct EvalContext {
    std::vector<Matrix> rho;  // K realized profiles
    Matrix beta_mat;          // K x q
    double alpha = 0.5, eta = 0.5, eps = 1e-12;
    LikelihoodTarget target = LikelihoodTarget::kPrediction;
    InitState init = InitState::kContextMixture;
    Index dim = 0, k = 0;
};

EvalContext make_context(const ModelParams& params) {
    EvalContext ctx;
    ctx.k = params.num_profiles();
    ctx.dim = params.dim();
    ctx.rho.reserve(static_cast<std::size_t>(ctx.k));
    for (const auto& factor : params.profiles) ctx.rho.push_back(realize(factor).m);
    ctx.beta_mat.resize(ctx.k, params.context_dim());
    for (Index k = 0; k < ctx.k; ++k)
        ctx.beta_mat.row(k) = params.betas[static_cast<std::size_t>(k)].transpose();
    ctx.alpha = params.alpha();
    ctx.eta = params.eta();
    ctx.eps = params.epsilon;
    ctx.target = params.likelihood_target;
    ctx.init = params.init_state;
    return ctx;
}

// Gradient accumulated in realized-profile space; converted to factor space
// once per evaluation.
struct RhoGrad {
    std::vector<Matrix> rho;
    Matrix beta;  // K x q
    double alpha = 0.0;
    double eta = 0.0;

    void init(Index k, Index d, Index q) {
        rho.assign(static_cast<std::size_t>(k), Matrix::Zero(d, d));
        beta = Matrix::Zero(k, q);
        alpha = eta = 0.0;
    }

    void add(const RhoGrad& other) {
        for (std::size_t i = 0; i < rho.size(); ++i) rho[i] += other.rho[i];
        beta += other.beta;
        alpha += other.alpha;
        eta += other.eta;
    }
};

// Per-worker scratch to keep the inner loops allocation-free.
struct Scratch {
    Matrix mixture, pred, state, big_a, big_g;
    Vector y, dpi, dz;
    std::vector<Matrix> seg_prev, seg_mix, checkpoints;

    void init(Index d, Index k, Index seg_len) {
        mixture.resize(d, d);
        pred.resize(d, d);
        state.resize(d, d);
        big_a.resize(d, d);
        big_g.resize(d, d);
        y.resize(d);
        dpi.resize(k);
        dz.resize(k);
        seg_prev.assign(static_cast<std::size_t>(seg_len), Matrix(d, d));
        seg_mix.assign(static_cast<std::size_t>(seg_len), Matrix(d, d));
        checkpoints.clear();
    }
};

Matrix activations(const EvalContext& ctx, const EmbeddedDriver& drv) {
    Matrix pi = ctx.beta_mat * drv.ctx;  // K x T logits
    for (Index t = 0; t < pi.cols(); ++t) {
        auto col = pi.col(t);
        col.array() -= col.maxCoeff();
        col = col.array().exp();
        col /= col.sum();
    }
    return pi;
}

void mixture_at(const EvalContext& ctx, const Matrix& pi, Index t, Matrix& out) {
    out.setZero();
    for (Index k = 0; k < ctx.k; ++k)
        out.noalias() += pi(k, t) * ctx.rho[static_cast<std::size_t>(k)];
}

// Forward pass plus, when `grad` is non-null, reverse-mode accumulation of
// d nll / d {rho_k, beta, alpha, eta}. The recursion is backpropagated in
// segments: state checkpoints are stored at segment starts during the
// forward sweep and interior states are rebuilt per segment during the
// backward sweep. `truncation > 0` additionally cuts the gradient flow at
// segment boundaries.
double process_driver(const EvalContext& ctx, const EmbeddedDriver& drv, int truncation,
                      Scratch& s, RhoGrad* grad) {
    const Index steps = drv.phi.cols();
    const Index seg_len =
        truncation > 0 ? static_cast<Index>(truncation) : std::min(steps, kSegmentSteps);
    const Index n_segs = (steps + seg_len - 1) / seg_len;
    const Index last_start = (n_segs - 1) * seg_len;
    const bool store = grad != nullptr;

    const Matrix pi = activations(ctx, drv);
    Vector p(steps);

    if (store) s.checkpoints.assign(static_cast<std::size_t>(n_segs), Matrix());

    // Forward.
    if (ctx.init == InitState::kContextMixture) {
        mixture_at(ctx, pi, 0, s.state);
    } else {
        s.state = Matrix::Identity(ctx.dim, ctx.dim) / static_cast<double>(ctx.dim);
    }

    double nll = 0.0;
    for (Index t = 0; t < steps; ++t) {
        if (store && t % seg_len == 0)
            s.checkpoints[static_cast<std::size_t>(t / seg_len)] = s.state;
        mixture_at(ctx, pi, t, s.mixture);
        if (store && t >= last_start) {
            s.seg_prev[static_cast<std::size_t>(t - last_start)] = s.state;
            s.seg_mix[static_cast<std::size_t>(t - last_start)] = s.mixture;
        }
        const auto phi = drv.phi.col(t);
        s.pred = (1.0 - ctx.alpha) * s.state + ctx.alpha * s.mixture;
        s.state = (1.0 - ctx.eta) * s.pred;
        s.state.noalias() += ctx.eta * phi * phi.transpose();

        double p_t;
        if (ctx.target == LikelihoodTarget::kPrediction) {
            s.y.noalias() = s.pred * phi;
            p_t = phi.dot(s.y);
        } else {
            s.y.noalias() = s.state * phi;
            p_t = phi.dot(s.y);
        }
        if (!std::isfinite(p_t))
            throw NumericalError("non-finite likelihood for driver '" + drv.id + "' at step " +
                                 std::to_string(t));
        p(t) = p_t;
        nll -= std::log(std::max(p_t, 0.0) + ctx.eps);
    }
    if (!grad) return nll;

    // Backward.
    const double alpha = ctx.alpha;
    const double eta = ctx.eta;
    s.big_a.setZero();
    for (Index seg = n_segs - 1; seg >= 0; --seg) {
        const Index start = seg * seg_len;
        const Index end = std::min(steps, start + seg_len);
        if (seg != n_segs - 1) {
            // Rebuild this segment's entering states and mixtures.
            s.state = s.checkpoints[static_cast<std::size_t>(seg)];
            for (Index t = start; t < end; ++t) {
                const Index loc = t - start;
                s.seg_prev[static_cast<std::size_t>(loc)] = s.state;
                mixture_at(ctx, pi, t, s.seg_mix[static_cast<std::size_t>(loc)]);
                s.pred = (1.0 - alpha) * s.state + alpha * s.seg_mix[static_cast<std::size_t>(loc)];
                s.state = (1.0 - eta) * s.pred;
                s.state.noalias() += eta * drv.phi.col(t) * drv.phi.col(t).transpose();
            }
        }
        for (Index t = end - 1; t >= start; --t) {
            const Index loc = t - start;
            const auto phi = drv.phi.col(t);
            const Matrix& prev = s.seg_prev[static_cast<std::size_t>(loc)];
            const Matrix& mixg = s.seg_mix[static_cast<std::size_t>(loc)];
            const double s_t = p(t) > 0.0 ? -1.0 / (p(t) + ctx.eps) : 0.0;

            if (ctx.target == LikelihoodTarget::kPostUpdate)
                s.big_a.noalias() += s_t * phi * phi.transpose();

            // d nll / d eta through rho_t = (1-eta) pred_t + eta phi phi^T,
            // with <A, pred_t> expanded so pred_t is never materialized.
            s.y.noalias() = s.big_a * phi;
            const double a_phi = phi.dot(s.y);
            const double a_prev = dot_f(s.big_a, prev);
            const double a_mix = dot_f(s.big_a, mixg);
            grad->eta += a_phi - (1.0 - alpha) * a_prev - alpha * a_mix;

            s.big_g = (1.0 - eta) * s.big_a;
            if (ctx.target == LikelihoodTarget::kPrediction)
                s.big_g.noalias() += s_t * phi * phi.transpose();

            grad->alpha += dot_f(s.big_g, mixg) - dot_f(s.big_g, prev);

            for (Index k = 0; k < ctx.k; ++k) {
                grad->rho[static_cast<std::size_t>(k)].noalias() +=
                    (alpha * pi(k, t)) * s.big_g;
                s.dpi(k) = alpha * dot_f(s.big_g, ctx.rho[static_cast<std::size_t>(k)]);
            }
            const double pidot = pi.col(t).dot(s.dpi);
            s.dz = pi.col(t).cwiseProduct((s.dpi.array() - pidot).matrix());
            grad->beta.noalias() += s.dz * drv.ctx.col(t).transpose();

            s.big_a = (1.0 - alpha) * s.big_g;
        }
        if (seg > 0 && truncation > 0) s.big_a.setZero();
    }

    // Initial state rho_0 = sum_k pi_k(c_1) rho_k receives the remaining
    // adjoint in mixture-init mode.
    if (ctx.init == InitState::kContextMixture) {
        for (Index k = 0; k < ctx.k; ++k) {
            grad->rho[static_cast<std::size_t>(k)].noalias() += pi(k, 0) * s.big_a;
            s.dpi(k) = dot_f(s.big_a, ctx.rho[static_cast<std::size_t>(k)]);
        }
        const double pidot = pi.col(0).dot(s.dpi);
        s.dz = pi.col(0).cwiseProduct((s.dpi.array() - pidot).matrix());
        grad->beta.noalias() += s.dz * drv.ctx.col(0).transpose();
    }
    return nll;
}

struct EvalResult {
    double nll = 0.0;
    Index obs = 0;
    RhoGrad grad;
};

// Chunked parallel evaluation. Chunk size is fixed, so the deterministic
// reduction (chunk-order) is independent of thread count and scheduling.
EvalResult evaluate(const EvalContext& ctx, const EmbeddedDataset& data,
                    std::span<const Index> driver_idx, int truncation, int threads,
                    bool deterministic, bool with_grad, Index ctx_dim_q) {
    const Index n = static_cast<Index>(driver_idx.size());
    const Index n_chunks = (n + kChunkDrivers - 1) / kChunkDrivers;
    int workers = threads > 0 ? threads : static_cast<int>(std::thread::hardware_concurrency());
    if (workers < 1) workers = 1;
    workers = static_cast<int>(std::min<Index>(workers, n_chunks));

    const Index seg_cap =
        truncation > 0 ? static_cast<Index>(truncation) : kSegmentSteps;

    EvalResult total;
    total.grad.init(ctx.k, ctx.dim, ctx_dim_q);

    auto run_chunk = [&](Index chunk, Scratch& scratch, RhoGrad* grad, double& nll,
                         Index& obs) {
        const Index lo = chunk * kChunkDrivers;
        const Index hi = std::min(n, lo + kChunkDrivers);
        for (Index i = lo; i < hi; ++i) {
            const auto& drv = data.drivers[static_cast<std::size_t>(driver_idx[i])];
            nll += process_driver(ctx, drv, truncation, scratch, grad);
            obs += drv.phi.cols();
        }
    };

    if (workers == 1) {
        Scratch scratch;
        scratch.init(ctx.dim, ctx.k, seg_cap);
        for (Index c = 0; c < n_chunks; ++c)
            run_chunk(c, scratch, with_grad ? &total.grad : nullptr, total.nll, total.obs);
        return total;
    }

    std::atomic<Index> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;

    if (deterministic) {
        // One partial per chunk, reduced in chunk order after the join.
        std::vector<double> chunk_nll(static_cast<std::size_t>(n_chunks), 0.0);
        std::vector<Index> chunk_obs(static_cast<std::size_t>(n_chunks), 0);
        std::vector<RhoGrad> chunk_grad(with_grad ? static_cast<std::size_t>(n_chunks) : 0);

        auto work = [&]() {
            Scratch scratch;
            scratch.init(ctx.dim, ctx.k, seg_cap);
            for (;;) {
                const Index c = next.fetch_add(1);
                if (c >= n_chunks) break;
                try {
                    RhoGrad* g = nullptr;
                    if (with_grad) {
                        chunk_grad[static_cast<std::size_t>(c)].init(ctx.k, ctx.dim, ctx_dim_q);
                        g = &chunk_grad[static_cast<std::size_t>(c)];
                    }
                    run_chunk(c, scratch, g, chunk_nll[static_cast<std::size_t>(c)],
                              chunk_obs[static_cast<std::size_t>(c)]);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        };
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) pool.emplace_back(work);
        for (auto& th : pool) th.join();
        if (first_error) std::rethrow_exception(first_error);

        for (Index c = 0; c < n_chunks; ++c) {
            total.nll += chunk_nll[static_cast<std::size_t>(c)];
            total.obs += chunk_obs[static_cast<std::size_t>(c)];
            if (with_grad) total.grad.add(chunk_grad[static_cast<std::size_t>(c)]);
        }
        return total;
    }

    // Completion-order accumulation: cheaper, not reproducible across runs.
    std::mutex merge_mu;
    auto work = [&]() {
        Scratch scratch;
        scratch.init(ctx.dim, ctx.k, seg_cap);
        RhoGrad local;
        if (with_grad) local.init(ctx.k, ctx.dim, ctx_dim_q);
        double nll = 0.0;
        Index obs = 0;
        for (;;) {
            const Index c = next.fetch_add(1);
            if (c >= n_chunks) break;
            try {
                run_chunk(c, scratch, with_grad ? &local : nullptr, nll, obs);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
        std::lock_guard<std::mutex> lock(merge_mu);
        total.nll += nll;
        total.obs += obs;
        if (with_grad) total.grad.add(local);
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
    return total;
}

std::vector<Index> all_indices(const EmbeddedDataset& data) {
    std::vector<Index> idx(data.drivers.size());
    std::iota(idx.begin(), idx.end(), Index{0});
    return idx;
}

// d loss / d B_k from the realized-space gradient:
// rho_k = S_k / tr(S_k) with S_k = B_k B_k^T.
Gradients to_factor_space(const ModelParams& params, const RhoGrad& rg) {
    Gradients out;
    out.profiles.reserve(params.profiles.size());
    for (std::size_t k = 0; k < params.profiles.size(); ++k) {
        const Matrix& b = params.profiles[k].b;
        const double tau = b.squaredNorm();
        const Matrix s = b * b.transpose();
        const Matrix& c = rg.rho[k];
        Matrix ds = c / tau;
        ds.diagonal().array() -= dot_f(c, s) / (tau * tau);
        out.profiles.push_back(2.0 * (ds * b));
    }
    out.betas.reserve(params.betas.size());
    for (Index k = 0; k < rg.beta.rows(); ++k) out.betas.push_back(rg.beta.row(k).transpose());
    const double a = params.alpha();
    const double e = params.eta();
    out.alpha_raw = rg.alpha * a * (1.0 - a);
    out.eta_raw = rg.eta * e * (1.0 - e);
    return out;
}

// ---------------------------------------------------------------------------
// Adam with bias correction.

struct Adam {
    double lr = 1e-2, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;
    std::vector<Matrix> m_prof, v_prof;
    std::vector<Vector> m_beta, v_beta;
    double m_alpha = 0, v_alpha = 0, m_eta = 0, v_eta = 0;

    void reset(const ModelParams& params) {
        step = 0;
        m_prof.clear();
        v_prof.clear();
        for (const auto& f : params.profiles) {
            m_prof.push_back(Matrix::Zero(f.b.rows(), f.b.cols()));
            v_prof.push_back(Matrix::Zero(f.b.rows(), f.b.cols()));
        }
        m_beta.clear();
        v_beta.clear();
        for (const auto& beta : params.betas) {
            m_beta.push_back(Vector::Zero(beta.size()));
            v_beta.push_back(Vector::Zero(beta.size()));
        }
        m_alpha = v_alpha = m_eta = v_eta = 0.0;
    }

    void update_scalar(double& theta, double g, double& m, double& v, double c1, double c2) {
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        theta -= lr * (m / c1) / (std::sqrt(v / c2) + eps);
    }

    void apply(ModelParams& params, const Gradients& g) {
        ++step;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t k = 0; k < params.profiles.size(); ++k) {
            m_prof[k] = beta1 * m_prof[k] + (1.0 - beta1) * g.profiles[k];
            v_prof[k] =
                (beta2 * v_prof[k].array() + (1.0 - beta2) * g.profiles[k].array().square())
                    .matrix();
            params.profiles[k].b.array() -=
                lr * (m_prof[k].array() / c1) / ((v_prof[k].array() / c2).sqrt() + eps);
        }
        for (std::size_t k = 0; k < params.betas.size(); ++k) {
            m_beta[k] = beta1 * m_beta[k] + (1.0 - beta1) * g.betas[k];
            v_beta[k] =
                (beta2 * v_beta[k].array() + (1.0 - beta2) * g.betas[k].array().square())
                    .matrix();
            params.betas[k].array() -=
                lr * (m_beta[k].array() / c1) / ((v_beta[k].array() / c2).sqrt() + eps);
        }
        update_scalar(params.alpha_raw, g.alpha_raw, m_alpha, v_alpha, c1, c2);
        update_scalar(params.eta_raw, g.eta_raw, m_eta, v_eta, c1, c2);
    }
};

// ---------------------------------------------------------------------------
// Initialization: factors seeded with well-separated observed feature vectors
// plus small noise, neutral activation, alpha = eta = 1/2.

ModelParams init_params(const TrainConfig& config, std::uint64_t seed, const RFFMap& map,
                        const Normalization& ctx_norm, const EmbeddedDataset& data) {
    const Index dim = map.dim_out;
    const Index rank = config.rank > 0 ? config.rank : dim;
    const Index k_profiles = config.k_profiles;

    ModelParams params;
    params.rff = map;
    params.context_norm = ctx_norm;
    params.alpha_raw = 0.0;
    params.eta_raw = 0.0;
    params.epsilon = config.epsilon;
    params.likelihood_target = config.likelihood_target;
    params.init_state = config.init_state;

    Rng rng(seed);
    // Cumulative observation index -> (driver, t).
    std::vector<Index> offsets(data.drivers.size() + 1, 0);
    for (std::size_t i = 0; i < data.drivers.size(); ++i)
        offsets[i + 1] = offsets[i] + data.drivers[i].phi.cols();
    const Index total = offsets.back();
    auto phi_at = [&](Index flat) -> Vector {
        std::size_t d = 0;
        while (offsets[d + 1] <= flat) ++d;
        return data.drivers[d].phi.col(flat - offsets[d]);
    };

    // Greedy max-min seeding over a candidate pool, to break symmetry with
    // well-separated pure states.
    std::vector<Vector> seeds;
    seeds.push_back(phi_at(static_cast<Index>(rng.below(static_cast<std::uint64_t>(total)))));
    while (static_cast<Index>(seeds.size()) < k_profiles) {
        Vector best;
        double best_score = -1.0;
        const int candidates = 64;
        for (int c = 0; c < candidates; ++c) {
            Vector cand =
                phi_at(static_cast<Index>(rng.below(static_cast<std::uint64_t>(total))));
            double score = 2.0;
            for (const auto& s : seeds)
                score = std::min(score, 1.0 - std::abs(s.dot(cand)));
            if (score > best_score) {
                best_score = score;
                best = std::move(cand);
            }
        }
        seeds.push_back(std::move(best));
    }

    const double noise_std =
        config.init_noise / std::sqrt(static_cast<double>(dim) * static_cast<double>(rank));
    params.profiles.reserve(static_cast<std::size_t>(k_profiles));
    params.betas.reserve(static_cast<std::size_t>(k_profiles));
    for (Index k = 0; k < k_profiles; ++k) {
        Matrix b = Matrix::Zero(dim, rank);
        b.col(0) = seeds[static_cast<std::size_t>(k)];
        for (Index j = 0; j < rank; ++j)
            for (Index i = 0; i < dim; ++i) b(i, j) += noise_std * rng.gaussian();
        params.profiles.push_back(ProfileFactor{std::move(b)});
        params.betas.push_back(Vector::Zero(ctx_norm.dim()));
    }
    return params;
}

Normalization fit_context_normalization(const Dataset& dataset) {
    Normalization norm;
    norm.mean = Vector::Zero(4);
    norm.scale = Vector::Zero(4);
    double n = 0;
    for (const auto& drv : dataset.drivers)
        for (const auto& c : drv.c) {
            norm.mean += c.vec();
            n += 1.0;
        }
    if (n == 0) throw InvalidArgument("empty dataset");
    norm.mean /= n;
    for (const auto& drv : dataset.drivers)
        for (const auto& c : drv.c) {
            const Vector d = Vector(c.vec()) - norm.mean;
            norm.scale += d.cwiseProduct(d);
        }
    norm.scale = (norm.scale / n).cwiseSqrt();
    for (Index i = 0; i < 4; ++i)
        if (norm.scale(i) <= 0.0) norm.scale(i) = 1.0;
    return norm;
}

RFFMap prepare_map(const TrainConfig& config, const Dataset& dataset) {
    std::vector<BehavioralVector> sample;
    sample.reserve(static_cast<std::size_t>(dataset.total_observations()));
    for (const auto& drv : dataset.drivers)
        for (const auto& x : drv.x) sample.push_back(x);
    const Normalization norm = fit_normalization(sample);
    const double bandwidth =
        config.bandwidth > 0.0
            ? config.bandwidth
            : median_heuristic_bandwidth(sample, norm, config.bandwidth_sample, config.seed);
    RFFMap map = build_rff_map(3, config.rff_dim, bandwidth, config.seed);
    map.input_norm = norm;
    return map;
}

// Single restart of Adam over the embedded data. Returns the final
// per-observation NLL (NaN when the restart aborted on non-finite values).
double run_restart(ModelParams& params, const TrainConfig& config, const EmbeddedDataset& data,
                   int restart, std::uint64_t shuffle_seed, TrainReport& report,
                   std::ostream* epoch_csv) {
    Adam adam;
    adam.lr = config.learning_rate;
    adam.reset(params);

    const auto idx_all = all_indices(data);
    const Index n = static_cast<Index>(idx_all.size());
    const Index batch = config.batch > 0 ? std::min<Index>(config.batch, n) : n;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double t0 = now_ms();
        double epoch_nll = 0.0;
        Index epoch_obs = 0;

        std::vector<Index> order = idx_all;
        if (batch < n) {
            Rng rng(shuffle_seed + static_cast<std::uint64_t>(epoch) * 7919u);
            for (Index i = n - 1; i > 0; --i) {
                const Index j =
                    static_cast<Index>(rng.below(static_cast<std::uint64_t>(i + 1)));
                std::swap(order[static_cast<std::size_t>(i)],
                          order[static_cast<std::size_t>(j)]);
            }
        }

        for (Index lo = 0; lo < n; lo += batch) {
            const Index hi = std::min(n, lo + batch);
            const EvalContext ctx = make_context(params);
            EvalResult res = evaluate(
                ctx, data,
                std::span<const Index>(order.data() + lo, static_cast<std::size_t>(hi - lo)),
                config.truncation, config.threads, config.deterministic, true,
                params.context_dim());
            epoch_nll += res.nll;
            epoch_obs += res.obs;
            if (!std::isfinite(res.nll)) {
                report.diagnostics.push_back("restart " + std::to_string(restart) +
                                             ": non-finite loss at epoch " +
                                             std::to_string(epoch) + "; aborted");
                return std::numeric_limits<double>::quiet_NaN();
            }
            Gradients g = to_factor_space(params, res.grad);
            if (!g.all_finite()) {
                report.diagnostics.push_back("restart " + std::to_string(restart) +
                                             ": non-finite gradient at epoch " +
                                             std::to_string(epoch) + "; aborted");
                return std::numeric_limits<double>::quiet_NaN();
            }
            adam.apply(params, g);
        }

        if (config.check_constraints) {
            for (const auto& factor : params.profiles) {
                if (!is_valid_density(realize(factor).m))
                    throw NumericalError("realized profile violated density constraints");
            }
        }

        EpochRecord rec;
        rec.restart = restart;
        rec.epoch = epoch;
        rec.nll_per_obs = epoch_nll / static_cast<double>(epoch_obs);
        rec.wall_ms = now_ms() - t0;
        report.epochs.push_back(rec);
        if (epoch_csv)
            (*epoch_csv) << epoch << ',' << restart << ',' << fmt_double(rec.nll_per_obs) << ','
                         << fmt_double(rec.wall_ms) << '\n';
    }

    const EvalContext ctx = make_context(params);
    EvalResult final_eval = evaluate(ctx, data, idx_all, config.truncation, config.threads,
                                     config.deterministic, false, params.context_dim());
    return final_eval.nll / static_cast<double>(final_eval.obs);
}

FitResult fit_embedded(const TrainConfig& config, const RFFMap& map,
                       const Normalization& ctx_norm, const EmbeddedDataset& data,
                       std::ostream* epoch_csv) {
    if (config.k_profiles < 1) throw InvalidArgument("fit: k_profiles must be >= 1");
    if (config.epochs < 0 || config.restarts < 1)
        throw InvalidArgument("fit: epochs must be >= 0 and restarts >= 1");
    if (!(config.learning_rate > 0.0)) throw InvalidArgument("fit: learning_rate must be > 0");
    if (!(config.epsilon > 0.0)) throw InvalidArgument("fit: epsilon must be > 0");

    const double t0 = now_ms();
    bool have_best = false;
    ModelParams best_params;

    TrainReport report;
    report.restart_final.assign(static_cast<std::size_t>(config.restarts),
                                std::numeric_limits<double>::quiet_NaN());

    for (int r = 0; r < config.restarts; ++r) {
        const std::uint64_t restart_seed =
            detail::splitmix64(config.seed + 0x9e37u * static_cast<std::uint64_t>(r + 1));
        ModelParams params = init_params(config, restart_seed, map, ctx_norm, data);
        double final_nll = std::numeric_limits<double>::quiet_NaN();
        try {
            final_nll =
                run_restart(params, config, data, r, restart_seed ^ 0xabcdu, report, epoch_csv);
        } catch (const std::exception& e) {
            report.diagnostics.push_back("restart " + std::to_string(r) + ": aborted: " +
                                         e.what());
        }
        report.restart_final[static_cast<std::size_t>(r)] = final_nll;
        if (std::isfinite(final_nll) &&
            (!have_best || final_nll < report.final_nll_per_obs)) {
            have_best = true;
            report.best_restart = r;
            report.final_nll_per_obs = final_nll;
            best_params = std::move(params);
        }
    }
    if (!have_best) throw NumericalError("fit: every restart aborted on non-finite values");

    report.wall_ms_total = now_ms() - t0;
    FitResult best;
    best.params = std::move(best_params);
    best.report = std::move(report);
    return best;
}

}  // namespace

bool Gradients::all_finite() const {
    for (const auto& p : profiles)
        if (!p.allFinite()) return false;
    for (const auto& b : betas)
        if (!b.allFinite()) return false;
    return std::isfinite(alpha_raw) && std::isfinite(eta_raw);
}

LossInfo loss(const ModelParams& params, const Dataset& dataset) {
    const EmbeddedDataset data = embed_dataset(dataset, params.rff, params.context_norm);
    const EvalContext ctx = make_context(params);
    EvalResult res = evaluate(ctx, data, all_indices(data), 0, 1, true, false,
                              params.context_dim());
    return LossInfo{res.nll, res.obs};
}

Gradients gradient(const ModelParams& params, const Dataset& dataset, int truncation) {
    const EmbeddedDataset data = embed_dataset(dataset, params.rff, params.context_norm);
    const EvalContext ctx = make_context(params);
    EvalResult res = evaluate(ctx, data, all_indices(data), truncation, 1, true, true,
                              params.context_dim());
    return to_factor_space(params, res.grad);
}

FitResult fit(const TrainConfig& config, const Dataset& dataset, const RFFMap* fixed_map,
              std::ostream* epoch_csv) {
    const RFFMap map = fixed_map ? *fixed_map : prepare_map(config, dataset);
    const Normalization ctx_norm = fit_context_normalization(dataset);
    const EmbeddedDataset data = embed_dataset(dataset, map, ctx_norm);
    FitResult result = fit_embedded(config, map, ctx_norm, data, epoch_csv);
    if (config.run_grad_check)
        result.report.grad_check = grad_check(result.params, dataset, config.grad_check_step,
                                              config.grad_check_tolerance);
    return result;
}

FitResult fit_from(const ModelParams& init, const TrainConfig& config, const Dataset& dataset,
                   std::ostream* epoch_csv) {
    const EmbeddedDataset data = embed_dataset(dataset, init.rff, init.context_norm);
    FitResult out;
    out.report.restart_final.assign(1, std::numeric_limits<double>::quiet_NaN());
    ModelParams params = init;
    params.epsilon = config.epsilon;
    const double t0 = now_ms();
    const double final_nll =
        run_restart(params, config, data, 0, config.seed, out.report, epoch_csv);
    out.report.restart_final[0] = final_nll;
    if (!std::isfinite(final_nll))
        throw NumericalError("fit_from: restart aborted on non-finite values");
    out.report.best_restart = 0;
    out.report.final_nll_per_obs = final_nll;
    out.report.wall_ms_total = now_ms() - t0;
    out.params = std::move(params);
    if (config.run_grad_check)
        out.report.grad_check = grad_check(out.params, dataset, config.grad_check_step,
                                           config.grad_check_tolerance);
    return out;
}

GradCheckReport grad_check(const ModelParams& params, const Dataset& dataset, double step,
                           double tolerance, const GradCheckOptions& options) {
    if (!(step > 0.0)) throw InvalidArgument("grad_check: step must be > 0");
    const EmbeddedDataset data = embed_dataset(dataset, params.rff, params.context_norm);
    const auto idx = all_indices(data);

    auto loss_at = [&](const ModelParams& p) {
        const EvalContext ctx = make_context(p);
        return evaluate(ctx, data, idx, 0, 1, true, false, p.context_dim()).nll;
    };

    const EvalContext ctx = make_context(params);
    EvalResult res = evaluate(ctx, data, idx, 0, 1, true, true, params.context_dim());
    Gradients analytic = to_factor_space(params, res.grad);

    GradCheckReport report;
    report.step = step;
    report.tolerance = tolerance;
    report.step_size_suspect = step > 1e-3;

    bool fault_pending = options.inject_fault;
    auto compare = [&](double a, double theta_plus, double theta_minus, GradCheckGroup& g) {
        const double fd = (theta_plus - theta_minus) / (2.0 * step);
        const double denom = std::max({std::abs(a), std::abs(fd), 1e-4});
        g.max_rel_err = std::max(g.max_rel_err, std::abs(a - fd) / denom);
        g.max_abs_err = std::max(g.max_abs_err, std::abs(a - fd));
    };

    // Profiles.
    {
        GradCheckGroup g{"profiles"};
        if (!options.check_profiles) {
            g.skipped = true;
        } else {
            const double fault = fault_pending ? -1.0 : 1.0;
            fault_pending = false;
            ModelParams p = params;
            for (std::size_t k = 0; k < params.profiles.size(); ++k) {
                Matrix& b = p.profiles[k].b;
                for (Index j = 0; j < b.cols(); ++j)
                    for (Index i = 0; i < b.rows(); ++i) {
                        const double saved = b(i, j);
                        b(i, j) = saved + step;
                        const double lp = loss_at(p);
                        b(i, j) = saved - step;
                        const double lm = loss_at(p);
                        b(i, j) = saved;
                        compare(fault * analytic.profiles[k](i, j), lp, lm, g);
                    }
            }
        }
        report.groups.push_back(g);
    }
    // Betas.
    {
        GradCheckGroup g{"betas"};
        if (!options.check_betas) {
            g.skipped = true;
        } else {
            const double fault = fault_pending ? -1.0 : 1.0;
            fault_pending = false;
            ModelParams p = params;
            for (std::size_t k = 0; k < params.betas.size(); ++k) {
                Vector& beta = p.betas[k];
                for (Index i = 0; i < beta.size(); ++i) {
                    const double saved = beta(i);
                    beta(i) = saved + step;
                    const double lp = loss_at(p);
                    beta(i) = saved - step;
                    const double lm = loss_at(p);
                    beta(i) = saved;
                    compare(fault * analytic.betas[k](i), lp, lm, g);
                }
            }
        }
        report.groups.push_back(g);
    }
    // Scalars.
    auto scalar_group = [&](const char* name, bool enabled, double analytic_value,
                            double ModelParams::* member) {
        GradCheckGroup g{name};
        if (!enabled) {
            g.skipped = true;
        } else {
            const double fault = fault_pending ? -1.0 : 1.0;
            fault_pending = false;
            ModelParams p = params;
            const double saved = p.*member;
            p.*member = saved + step;
            const double lp = loss_at(p);
            p.*member = saved - step;
            const double lm = loss_at(p);
            p.*member = saved;
            compare(fault * analytic_value, lp, lm, g);
        }
        report.groups.push_back(g);
    };
    scalar_group("alpha_raw", options.check_alpha, analytic.alpha_raw, &ModelParams::alpha_raw);
    scalar_group("eta_raw", options.check_eta, analytic.eta_raw, &ModelParams::eta_raw);

    report.max_rel_err = 0.0;
    for (const auto& g : report.groups)
        if (!g.skipped) report.max_rel_err = std::max(report.max_rel_err, g.max_rel_err);
    report.passed = report.max_rel_err < tolerance;
    return report;
}

std::vector<SelectKRow> select_k(const TrainConfig& base, const Dataset& dataset,
                                 const std::vector<int>& candidates, const RFFMap* fixed_map) {
    if (candidates.empty()) throw InvalidArgument("select_k: no candidates");
    const RFFMap map = fixed_map ? *fixed_map : prepare_map(base, dataset);
    const Normalization ctx_norm = fit_context_normalization(dataset);
    const EmbeddedDataset data = embed_dataset(dataset, map, ctx_norm);

    std::vector<SelectKRow> rows;
    rows.reserve(candidates.size());
    for (int k : candidates) {
        TrainConfig config = base;
        config.k_profiles = k;
        FitResult res = fit_embedded(config, map, ctx_norm, data, nullptr);

        SelectKRow row;
        row.k = k;
        row.restart_nll = res.report.restart_final;
        double sum = 0.0, count = 0.0;
        for (double v : row.restart_nll)
            if (std::isfinite(v)) {
                sum += v;
                count += 1.0;
            }
        row.mean_nll = count > 0 ? sum / count : std::numeric_limits<double>::quiet_NaN();
        double var = 0.0;
        for (double v : row.restart_nll)
            if (std::isfinite(v)) var += (v - row.mean_nll) * (v - row.mean_nll);
        row.std_nll = count > 1 ? std::sqrt(var / (count - 1.0)) : 0.0;

        const Index top = std::min<Index>(4, res.params.dim());
        for (const auto& factor : res.params.profiles)
            row.spectra.push_back(spectral(realize(factor), top).eigenvalues);
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace rhoflow
