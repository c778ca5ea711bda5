#pragma once

// Straight-line reference implementation of the sequential model, written
// against plain std::vector with index loops only. Used as an independent
// oracle for the library's forward pass; keep it free of any project
// headers so the two routes share no code.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major: Mat[i][j]

struct RefModel {
    int dim_in = 3;
    int dim = 0;  // feature dimension
    int k = 0;    // profiles
    int q = 4;    // context dimension
    Mat weights;  // dim x dim_in
    Vec offsets;  // dim
    Vec in_mean, in_scale;    // dim_in
    Vec ctx_mean, ctx_scale;  // q
    std::vector<Mat> factors;  // k factors, dim x rank
    Mat betas;                 // k x q
    double alpha_raw = 0.0;
    double eta_raw = 0.0;
    double epsilon = 1e-12;
    bool post_update = false;     // likelihood against the updated state
    bool maximally_mixed = false;  // initial state I/dim instead of the mixture
};

inline double ref_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vec ref_embed_normalized(const RefModel& m, const Vec& x_raw) {
    Vec phi(static_cast<std::size_t>(m.dim));
    double norm_sq = 0.0;
    for (int j = 0; j < m.dim; ++j) {
        double arg = m.offsets[static_cast<std::size_t>(j)];
        for (int i = 0; i < m.dim_in; ++i) {
            const double z = (x_raw[static_cast<std::size_t>(i)] -
                              m.in_mean[static_cast<std::size_t>(i)]) /
                             m.in_scale[static_cast<std::size_t>(i)];
            arg += m.weights[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] * z;
        }
        phi[static_cast<std::size_t>(j)] = std::cos(arg);
        norm_sq += phi[static_cast<std::size_t>(j)] * phi[static_cast<std::size_t>(j)];
    }
    const double norm = std::sqrt(norm_sq);
    for (int j = 0; j < m.dim; ++j) phi[static_cast<std::size_t>(j)] /= norm;
    return phi;
}

// rho = B B^T / tr(B B^T)
inline Mat ref_realize(const Mat& b) {
    const std::size_t d = b.size();
    const std::size_t r = b[0].size();
    Mat rho(d, Vec(d, 0.0));
    double trace = 0.0;
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < r; ++c) s += b[i][c] * b[j][c];
            rho[i][j] = s;
            if (i == j) trace += s;
        }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) rho[i][j] /= trace;
    return rho;
}

inline Vec ref_activation(const RefModel& m, const Vec& c_raw) {
    Vec z(static_cast<std::size_t>(m.k), 0.0);
    for (int k = 0; k < m.k; ++k)
        for (int i = 0; i < m.q; ++i) {
            const double c = (c_raw[static_cast<std::size_t>(i)] -
                              m.ctx_mean[static_cast<std::size_t>(i)]) /
                             m.ctx_scale[static_cast<std::size_t>(i)];
            z[static_cast<std::size_t>(k)] +=
                m.betas[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)] * c;
        }
    double zmax = z[0];
    for (double v : z) zmax = v > zmax ? v : zmax;
    double sum = 0.0;
    Vec pi(static_cast<std::size_t>(m.k));
    for (int k = 0; k < m.k; ++k) {
        pi[static_cast<std::size_t>(k)] = std::exp(z[static_cast<std::size_t>(k)] - zmax);
        sum += pi[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < m.k; ++k) pi[static_cast<std::size_t>(k)] /= sum;
    return pi;
}

// Negative log-likelihood of one trajectory given raw behavior rows (T x 3)
// and raw context rows (T x 4).
inline double ref_nll(const RefModel& m, const Mat& behavior, const Mat& context) {
    const std::size_t dim = static_cast<std::size_t>(m.dim);
    const std::size_t steps = behavior.size();
    const double alpha = ref_sigmoid(m.alpha_raw);
    const double eta = ref_sigmoid(m.eta_raw);

    std::vector<Mat> rho;
    for (const auto& b : m.factors) rho.push_back(ref_realize(b));

    Mat state(dim, Vec(dim, 0.0));
    Mat pred(dim, Vec(dim, 0.0));
    double nll = 0.0;

    for (std::size_t t = 0; t < steps; ++t) {
        const Vec pi = ref_activation(m, context[t]);
        if (t == 0) {
            if (m.maximally_mixed) {
                for (std::size_t i = 0; i < dim; ++i) state[i][i] = 1.0 / static_cast<double>(dim);
            } else {
                for (std::size_t i = 0; i < dim; ++i)
                    for (std::size_t j = 0; j < dim; ++j) {
                        double s = 0.0;
                        for (int k = 0; k < m.k; ++k)
                            s += pi[static_cast<std::size_t>(k)] *
                                 rho[static_cast<std::size_t>(k)][i][j];
                        state[i][j] = s;
                    }
            }
        }
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = 0; j < dim; ++j) {
                double mixture = 0.0;
                for (int k = 0; k < m.k; ++k)
                    mixture += pi[static_cast<std::size_t>(k)] *
                               rho[static_cast<std::size_t>(k)][i][j];
                pred[i][j] = (1.0 - alpha) * state[i][j] + alpha * mixture;
            }

        const Vec phi = ref_embed_normalized(m, behavior[t]);
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = 0; j < dim; ++j)
                state[i][j] = (1.0 - eta) * pred[i][j] + eta * phi[i] * phi[j];

        const Mat& target = m.post_update ? state : pred;
        double p = 0.0;
        for (std::size_t i = 0; i < dim; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < dim; ++j) row += target[i][j] * phi[j];
            p += phi[i] * row;
        }
        nll -= std::log((p > 0.0 ? p : 0.0) + m.epsilon);
    }
    return nll;
}

}  // namespace oracle
