#include "rhoflow/density.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace rhoflow {

namespace {

constexpr double kUnitNormTol = 1e-12;
constexpr double kWeightSumTol = 1e-10;
constexpr double kSignTol = 1e-12;
constexpr double kTieTol = 1e-12;

// First sufficiently nonzero entry positive; zero vectors pass through.
void fix_sign(Eigen::Ref<Vector> v) {
    for (Index i = 0; i < v.size(); ++i) {
        if (std::abs(v(i)) > kSignTol) {
            if (v(i) < 0.0) v = -v;
            return;
        }
    }
}

bool lex_less(const Vector& a, const Vector& b) {
    for (Index i = 0; i < a.size(); ++i) {
        if (a(i) != b(i)) return a(i) < b(i);
    }
    return false;
}

}  // namespace

ValidityReport check_density(const Matrix& rho) {
    ValidityReport report;
    report.symmetry_error = (rho - rho.transpose()).cwiseAbs().maxCoeff();
    report.trace_error = std::abs(rho.trace() - 1.0);
    Eigen::SelfAdjointEigenSolver<Matrix> solver(rho, Eigen::EigenvaluesOnly);
    report.min_eigenvalue = solver.eigenvalues().minCoeff();
    return report;
}

DensityMatrix realize(const ProfileFactor& factor) {
    Matrix gram = factor.b * factor.b.transpose();
    const double trace = gram.trace();
    if (!(trace > 0.0))
        throw InvalidArgument("realize: profile factor is zero (degenerate profile)");
    gram /= trace;
    return DensityMatrix{std::move(gram)};
}

DensityMatrix pure_state(const Vector& phi) {
    if (std::abs(phi.norm() - 1.0) > kUnitNormTol)
        throw InvalidArgument("pure_state: feature vector is not unit norm");
    return DensityMatrix{phi * phi.transpose()};
}

DensityMatrix mix(const Vector& weights, std::span<const DensityMatrix> matrices) {
    if (static_cast<std::size_t>(weights.size()) != matrices.size())
        throw InvalidArgument("mix: weight/matrix count mismatch");
    if (matrices.empty()) throw InvalidArgument("mix: empty mixture");
    if (weights.minCoeff() < 0.0)
        throw InvalidArgument("mix: negative mixture weight");
    if (std::abs(weights.sum() - 1.0) > kWeightSumTol)
        throw InvalidArgument("mix: weights do not sum to 1");

    const Index dim = matrices.front().dim();
    Matrix out = Matrix::Zero(dim, dim);
    for (std::size_t k = 0; k < matrices.size(); ++k) {
        if (matrices[k].dim() != dim) throw InvalidArgument("mix: dimension mismatch");
        out += weights(static_cast<Index>(k)) * matrices[k].m;
    }
    return DensityMatrix{std::move(out)};
}

DensityMatrix maximally_mixed(Index dim) {
    if (dim < 1) throw InvalidArgument("maximally_mixed: dimension must be >= 1");
    return DensityMatrix{Matrix::Identity(dim, dim) / static_cast<double>(dim)};
}

SpectralDecomposition spectral(const DensityMatrix& rho, Index top_m) {
    const Index dim = rho.dim();
    if (top_m < 1 || top_m > dim)
        throw InvalidArgument("spectral: top_m must be in [1, D]");

    Eigen::SelfAdjointEigenSolver<Matrix> solver(rho.m);
    if (solver.info() != Eigen::Success)
        throw NumericalError("spectral: eigen-decomposition failed to converge");

    // Solver order is ascending; collect all pairs, fix signs, then order
    // descending with a deterministic tie rule.
    std::vector<Vector> vecs(static_cast<std::size_t>(dim));
    Vector vals(dim);
    for (Index i = 0; i < dim; ++i) {
        vals(i) = solver.eigenvalues()(i);
        if (vals(i) < 0.0 && vals(i) >= kMinEigTol) vals(i) = 0.0;
        vecs[static_cast<std::size_t>(i)] = solver.eigenvectors().col(i);
        fix_sign(vecs[static_cast<std::size_t>(i)]);
    }

    std::vector<Index> order(static_cast<std::size_t>(dim));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
        if (std::abs(vals(a) - vals(b)) > kTieTol) return vals(a) > vals(b);
        return lex_less(vecs[static_cast<std::size_t>(a)], vecs[static_cast<std::size_t>(b)]);
    });

    SpectralDecomposition out;
    out.eigenvalues.resize(top_m);
    out.eigenvectors.resize(dim, top_m);
    for (Index m = 0; m < top_m; ++m) {
        const Index src = order[static_cast<std::size_t>(m)];
        out.eigenvalues(m) = vals(src);
        out.eigenvectors.col(m) = vecs[static_cast<std::size_t>(src)];
    }
    return out;
}

double frobenius_distance(const DensityMatrix& a, const DensityMatrix& b) {
    if (a.dim() != b.dim())
        throw InvalidArgument("frobenius_distance: dimension mismatch");
    return (a.m - b.m).norm();
}

}  // namespace rhoflow
