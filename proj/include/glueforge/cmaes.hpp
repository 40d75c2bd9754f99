#pragma once

// (mu/mu_w, lambda)-CMA-ES with box constraints handled by clipping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"
#include "parallel.hpp"

namespace glueforge {

struct CmaesOptions {
    std::size_t dim = 1;
    int budget = 200;        ///< objective evaluations
    std::uint64_t seed = 0;
    double sigma0 = 0.3;
    std::vector<double> lower; ///< empty = all zeros
    std::vector<double> upper; ///< empty = all ones
    std::optional<std::vector<double>> init; ///< starting mean; random in the box when absent
    unsigned threads = 1;    ///< evaluations within a generation; results do not depend on it
};

struct CmaesEval {
    int index = 0;      ///< global evaluation index
    int generation = 0;
    std::vector<double> x; ///< the (clipped) point handed to the objective
    double value = 0.0;
};

struct CmaesResult {
    std::vector<double> x_best;
    double f_best = 0.0;
    std::vector<CmaesEval> trace;
    int evaluations = 0;
};

/// Minimizes `objective` over the box. Deterministic for a fixed seed regardless of thread count.
inline CmaesResult cmaes_minimize(const std::function<double(const std::vector<double>&)>& objective,
                                  const CmaesOptions& opt) {
    using Vec = Eigen::VectorXd;
    using Mat = Eigen::MatrixXd;
    const std::size_t n = opt.dim;
    if (n < 1) throw Error("cmaes: dim must be >= 1");
    if (opt.budget < 1) throw Error("cmaes: budget must be >= 1");
    if (!(opt.sigma0 > 0.0)) throw Error("cmaes: sigma0 must be positive");
    std::vector<double> lo = opt.lower.empty() ? std::vector<double>(n, 0.0) : opt.lower;
    std::vector<double> hi = opt.upper.empty() ? std::vector<double>(n, 1.0) : opt.upper;
    if (lo.size() != n || hi.size() != n) throw Error("cmaes: bound dimension mismatch");
    for (std::size_t i = 0; i < n; ++i)
        if (!(lo[i] <= hi[i])) throw Error("cmaes: lower bound exceeds upper bound");

    const double N = static_cast<double>(n);
    const int lambda = 4 + static_cast<int>(std::floor(3.0 * std::log(N)));
    const int mu = lambda / 2;
    Vec w(mu);
    for (int i = 0; i < mu; ++i) w[i] = std::log(mu + 0.5) - std::log(i + 1.0);
    w /= w.sum();
    const double mueff = 1.0 / w.squaredNorm();
    const double cc = (4.0 + mueff / N) / (N + 4.0 + 2.0 * mueff / N);
    const double cs = (mueff + 2.0) / (N + mueff + 5.0);
    const double c1 = 2.0 / ((N + 1.3) * (N + 1.3) + mueff);
    const double cmu = std::min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((N + 2.0) * (N + 2.0) + mueff));
    const double damps = 1.0 + 2.0 * std::max(0.0, std::sqrt((mueff - 1.0) / (N + 1.0)) - 1.0) + cs;
    const double chiN = std::sqrt(N) * (1.0 - 1.0 / (4.0 * N) + 1.0 / (21.0 * N * N));

    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    Vec mean(n);
    if (opt.init) {
        if (opt.init->size() != n) throw Error("cmaes: init dimension mismatch");
        for (std::size_t i = 0; i < n; ++i) mean[i] = std::clamp((*opt.init)[i], lo[i], hi[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i)
            mean[i] = lo[i] + (hi[i] - lo[i]) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    }
    double sigma = opt.sigma0;
    Mat C = Mat::Identity(n, n), B = Mat::Identity(n, n);
    Vec D = Vec::Ones(n), pc = Vec::Zero(n), ps = Vec::Zero(n);

    CmaesResult res;
    res.f_best = std::numeric_limits<double>::infinity();
    for (int gen = 0; res.evaluations < opt.budget; ++gen) {
        const int count = std::min(lambda, opt.budget - res.evaluations);
        std::vector<std::vector<double>> xs(static_cast<std::size_t>(count), std::vector<double>(n));
        for (int k = 0; k < count; ++k) {
            Vec z(n);
            for (std::size_t i = 0; i < n; ++i) z[i] = gauss(rng);
            Vec x = mean + sigma * (B * D.asDiagonal() * z);
            for (std::size_t i = 0; i < n; ++i) xs[k][i] = std::clamp(x[i], lo[i], hi[i]);
        }
        std::vector<double> fs(static_cast<std::size_t>(count));
        detail::parallel_for(static_cast<std::size_t>(count), opt.threads,
                             [&](std::size_t k) { fs[k] = objective(xs[k]); });
        for (int k = 0; k < count; ++k) {
            const int idx = res.evaluations + k;
            if (!std::isfinite(fs[k]))
                throw Error("cmaes: non-finite objective value at trial " + std::to_string(idx) + " (generation " +
                            std::to_string(gen) + ")");
            res.trace.push_back({idx, gen, xs[k], fs[k]});
            if (fs[k] < res.f_best) {
                res.f_best = fs[k];
                res.x_best = xs[k];
            }
        }
        res.evaluations += count;
        if (count < lambda) break;

        std::vector<int> order(static_cast<std::size_t>(lambda));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return fs[a] < fs[b]; });

        const Vec old_mean = mean;
        std::vector<Vec> ys(static_cast<std::size_t>(mu));
        mean.setZero();
        for (int i = 0; i < mu; ++i) {
            Vec x = Eigen::Map<const Vec>(xs[order[i]].data(), static_cast<Eigen::Index>(n));
            mean += w[i] * x;
            ys[i] = (x - old_mean) / sigma;
        }
        const Vec yw = (mean - old_mean) / sigma;
        const Mat invsqrtC = B * D.cwiseInverse().asDiagonal() * B.transpose();
        ps = (1.0 - cs) * ps + std::sqrt(cs * (2.0 - cs) * mueff) * (invsqrtC * yw);
        const double psn = ps.norm() / std::sqrt(1.0 - std::pow(1.0 - cs, 2.0 * (gen + 1)));
        const bool hsig = psn / chiN < 1.4 + 2.0 / (N + 1.0);
        pc = (1.0 - cc) * pc + (hsig ? std::sqrt(cc * (2.0 - cc) * mueff) : 0.0) * yw;
        Mat rank_mu = Mat::Zero(n, n);
        for (int i = 0; i < mu; ++i) rank_mu += w[i] * ys[i] * ys[i].transpose();
        C = (1.0 - c1 - cmu) * C + c1 * (pc * pc.transpose() + (hsig ? 0.0 : cc * (2.0 - cc)) * C) + cmu * rank_mu;
        sigma *= std::exp((cs / damps) * (ps.norm() / chiN - 1.0));

        C = 0.5 * (C + C.transpose());
        Eigen::SelfAdjointEigenSolver<Mat> eig(C);
        B = eig.eigenvectors();
        D = eig.eigenvalues().cwiseMax(1e-300).cwiseSqrt();
    }
    return res;
}

/// Convenience form over the unit box.
inline CmaesResult cmaes_minimize(const std::function<double(const std::vector<double>&)>& objective,
                                  std::size_t dim, int budget, std::uint64_t seed) {
    CmaesOptions opt;
    opt.dim = dim;
    opt.budget = budget;
    opt.seed = seed;
    return cmaes_minimize(objective, opt);
}

} // namespace glueforge
