#pragma once

#include <span>

#include "rhoflow/types.hpp"

namespace rhoflow {

/// Validity tolerances for density matrices.
inline constexpr double kSymmetryTol = 1e-10;
inline constexpr double kMinEigTol = -1e-8;
inline constexpr double kTraceTol = 1e-8;

/// Symmetric positive-semidefinite matrix with unit trace.
struct DensityMatrix {
    Matrix m;

    Index dim() const { return m.rows(); }
};

/// Unconstrained D x r factor B; the profile it realizes is
/// B B^T / tr(B B^T), which satisfies the density-matrix constraints for any
/// nonzero B. The column count r is the rank budget.
struct ProfileFactor {
    Matrix b;

    Index dim() const { return b.rows(); }
    Index rank() const { return b.cols(); }
};

/// Leading eigenpairs of a density matrix: eigenvalues nonincreasing and
/// clipped at zero, eigenvectors orthonormal with each vector's first
/// nonzero entry made positive.
struct SpectralDecomposition {
    Vector eigenvalues;   // top_m, nonincreasing, >= 0
    Matrix eigenvectors;  // D x top_m, column m pairs with eigenvalues(m)
};

struct ValidityReport {
    double symmetry_error = 0.0;  // max |rho - rho^T|
    double min_eigenvalue = 0.0;
    double trace_error = 0.0;  // |tr(rho) - 1|

    bool ok() const {
        return symmetry_error <= kSymmetryTol && min_eigenvalue >= kMinEigTol &&
               trace_error <= kTraceTol;
    }
};

ValidityReport check_density(const Matrix& rho);
inline bool is_valid_density(const Matrix& rho) { return check_density(rho).ok(); }
inline bool is_valid_density(const DensityMatrix& rho) { return is_valid_density(rho.m); }

/// B B^T / tr(B B^T). Throws on a zero factor.
DensityMatrix realize(const ProfileFactor& factor);

/// Rank-1 projector phi phi^T of a unit vector (norm within 1e-12 of 1).
DensityMatrix pure_state(const Vector& phi);

/// Convex combination; weights must be nonnegative and sum to 1 within 1e-10.
DensityMatrix mix(const Vector& weights, std::span<const DensityMatrix> matrices);

/// I / D, the state of complete uncertainty.
DensityMatrix maximally_mixed(Index dim);

/// Top `top_m` eigenpairs in nonincreasing order. Eigenvalues in [-1e-8, 0)
/// are reported as 0; ties are ordered by the sign-fixed eigenvectors'
/// lexicographic order so degenerate spectra decompose deterministically.
SpectralDecomposition spectral(const DensityMatrix& rho, Index top_m);

/// sqrt(tr[(a - b)^2]), the element-wise divergence between two profiles.
double frobenius_distance(const DensityMatrix& a, const DensityMatrix& b);

}  // namespace rhoflow
