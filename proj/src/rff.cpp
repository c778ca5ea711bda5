#include "rhoflow/rff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "rhoflow/rng.hpp"

namespace rhoflow {

namespace {

constexpr double kDegenerateNorm = 1e-9;

void require_finite(const Vector& x) {
    if (!x.allFinite()) throw InvalidArgument("embed: input has NaN or Inf components");
}

}  // namespace

RFFMap build_rff_map(Index dim_in, Index dim_out, double bandwidth, std::uint64_t seed) {
    if (dim_in < 1 || dim_out < 1)
        throw InvalidArgument("build_rff_map: dimensions must be >= 1");
    if (!(bandwidth > 0.0))
        throw InvalidArgument("build_rff_map: bandwidth must be positive");

    RFFMap map;
    map.dim_in = dim_in;
    map.dim_out = dim_out;
    map.bandwidth = bandwidth;
    map.seed = seed;
    map.input_norm = Normalization::identity(dim_in);

    Rng rng(seed);
    const double stddev = 1.0 / bandwidth;
    map.weights.resize(dim_out, dim_in);
    for (Index j = 0; j < dim_out; ++j)
        for (Index i = 0; i < dim_in; ++i) map.weights(j, i) = stddev * rng.gaussian();

    map.offsets.resize(dim_out);
    for (Index j = 0; j < dim_out; ++j)
        map.offsets(j) = rng.uniform(0.0, 2.0 * std::numbers::pi);

    return map;
}

Vector embed(const RFFMap& map, const Vector& x) {
    require_finite(x);
    if (x.size() != map.dim_in)
        throw InvalidArgument("embed: input dimension mismatch");
    const Vector z = map.input_norm.apply(x);
    return ((map.weights * z + map.offsets).array().cos()).matrix();
}

Vector embed(const RFFMap& map, const BehavioralVector& x) {
    if (!x.finite()) throw InvalidArgument("embed: behavioral vector has NaN or Inf components");
    return embed(map, Vector(x.vec()));
}

Vector embed_normalized(const RFFMap& map, const Vector& x) {
    Vector phi = embed(map, x);
    const double norm = phi.norm();
    if (norm < kDegenerateNorm)
        throw NumericalError("embed_normalized: feature vector has vanishing norm");
    return phi / norm;
}

Vector embed_normalized(const RFFMap& map, const BehavioralVector& x) {
    return embed_normalized(map, Vector(x.vec()));
}

double kernel_estimate(const RFFMap& map, const Vector& x, const Vector& y) {
    const Vector phi_x = embed(map, x);
    const Vector phi_y = embed(map, y);
    return 2.0 / static_cast<double>(map.dim_out) * phi_x.dot(phi_y);
}

double kernel_estimate(const RFFMap& map, const BehavioralVector& x, const BehavioralVector& y) {
    return kernel_estimate(map, Vector(x.vec()), Vector(y.vec()));
}

double rbf_kernel(const Vector& x, const Vector& y, double sigma) {
    return std::exp(-(x - y).squaredNorm() / (2.0 * sigma * sigma));
}

Normalization fit_normalization(std::span<const BehavioralVector> sample) {
    if (sample.empty()) throw InvalidArgument("fit_normalization: empty sample");
    Normalization norm;
    norm.mean = Vector::Zero(3);
    norm.scale = Vector::Zero(3);
    for (const auto& b : sample) norm.mean += b.vec();
    norm.mean /= static_cast<double>(sample.size());
    for (const auto& b : sample) {
        const Vector d = Vector(b.vec()) - norm.mean;
        norm.scale += d.cwiseProduct(d);
    }
    norm.scale = (norm.scale / static_cast<double>(sample.size())).cwiseSqrt();
    for (Index i = 0; i < 3; ++i)
        if (norm.scale(i) <= 0.0) norm.scale(i) = 1.0;
    return norm;
}

double median_heuristic_bandwidth(std::span<const BehavioralVector> sample,
                                  const Normalization& norm,
                                  Index max_sample,
                                  std::uint64_t seed) {
    if (sample.empty()) throw InvalidArgument("median_heuristic_bandwidth: empty sample");

    // Subsample without replacement when the dataset exceeds the budget.
    std::vector<Vector> pts;
    const Index n = static_cast<Index>(sample.size());
    if (n <= max_sample) {
        pts.reserve(n);
        for (const auto& b : sample) pts.push_back(norm.apply(Vector(b.vec())));
    } else {
        Rng rng(seed);
        std::vector<Index> idx(n);
        for (Index i = 0; i < n; ++i) idx[i] = i;
        for (Index i = 0; i < max_sample; ++i) {
            const Index j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
            std::swap(idx[i], idx[j]);
        }
        pts.reserve(max_sample);
        for (Index i = 0; i < max_sample; ++i)
            pts.push_back(norm.apply(Vector(sample[idx[i]].vec())));
    }

    std::vector<double> dists;
    dists.reserve(pts.size() * (pts.size() - 1) / 2);
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j)
            dists.push_back((pts[i] - pts[j]).norm());
    if (dists.empty()) return 1.0;

    const auto mid = dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2);
    std::nth_element(dists.begin(), mid, dists.end());
    const double median = *mid;
    return median > 0.0 ? median : 1.0;
}

}  // namespace rhoflow
