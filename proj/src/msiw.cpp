#include "ttmg/msiw.hpp"

#include <algorithm>
#include <cmath>

#include "ttmg/masp.hpp"
#include "ttmg/rng.hpp"

namespace ttmg::msiw {

Tensor covariance(Tape& t, const Tensor& f, double eps) {
    if (f.shape.size() != 3) throw ShapeError("covariance: feature map must be (C,H,W)");
    int c = f.shape[0];
    int64_t hw = static_cast<int64_t>(f.shape[1]) * f.shape[2];
    if (hw < 2) throw DomainError("covariance: needs at least 2 spatial positions");
    auto [mu, sigma] = masp::mine_style(t, f);
    Tensor fn = masp::instance_normalize(t, f, mu, sigma, eps);
    Tensor rows = t.reshape(fn, {c, static_cast<int>(hw)});
    return t.mul_scalar(t.matmul(rows, t.transpose(rows)), 1.0 / static_cast<double>(hw));
}

std::vector<double> variance_matrix(const std::vector<Tensor>& lambdas) {
    if (lambdas.size() < 2) throw DomainError("variance_matrix: needs at least 2 matrices");
    const Shape& s = lambdas[0].shape;
    if (s.size() != 2 || s[0] != s[1])
        throw ShapeError("variance_matrix: matrices must be square");
    for (const auto& l : lambdas)
        if (!shape_eq(l.shape, s)) throw ShapeError("variance_matrix: shapes differ");
    size_t n = lambdas[0].data.size();
    double inv = 1.0 / static_cast<double>(lambdas.size());
    std::vector<double> mean(n, 0.0), var(n, 0.0);
    for (const auto& l : lambdas)
        for (size_t i = 0; i < n; ++i) mean[i] += l.data[i];
    for (auto& v : mean) v *= inv;
    for (const auto& l : lambdas)
        for (size_t i = 0; i < n; ++i) {
            double d = l.data[i] - mean[i];
            var[i] += d * d;
        }
    for (auto& v : var) v *= inv;
    return var;
}

std::vector<std::pair<int, int>> strict_upper_positions(int c) {
    std::vector<std::pair<int, int>> pos;
    pos.reserve(static_cast<size_t>(c) * (c - 1) / 2);
    for (int i = 0; i < c; ++i)
        for (int j = i + 1; j < c; ++j) pos.emplace_back(i, j);
    return pos;
}

namespace {

struct LloydRun {
    std::vector<double> centroids;
    std::vector<int> assignments;
    double inertia = 0.0;
    std::vector<double> trace;
};

int nearest(const std::vector<double>& cents, double v) {
    int best = 0;
    double bd = std::fabs(v - cents[0]);
    for (size_t j = 1; j < cents.size(); ++j) {
        double d = std::fabs(v - cents[j]);
        if (d < bd) {
            bd = d;
            best = static_cast<int>(j);
        }
    }
    return best;
}

enum class Seeding { FarthestPoint, DistanceWeighted, RandomDistinct };

// Optimal 1-D k-means clusters are contiguous in sorted order, so the exact
// optimum over contiguous partitions (Fisher's DP on prefix sums) makes a
// seeding that Lloyd can only keep or improve.
std::vector<double> contiguous_optimum_centroids(std::vector<double> sorted, int k) {
    int n = static_cast<int>(sorted.size());
    std::vector<double> sum(n + 1, 0.0), sq(n + 1, 0.0);
    for (int i = 0; i < n; ++i) {
        sum[i + 1] = sum[i] + sorted[i];
        sq[i + 1] = sq[i] + sorted[i] * sorted[i];
    }
    auto sse = [&](int a, int b) { // [a, b)
        double s = sum[b] - sum[a];
        return (sq[b] - sq[a]) - s * s / (b - a);
    };
    std::vector<std::vector<double>> dp(k + 1, std::vector<double>(n + 1, 1e300));
    std::vector<std::vector<int>> cut(k + 1, std::vector<int>(n + 1, 0));
    dp[0][0] = 0.0;
    for (int j = 1; j <= k; ++j)
        for (int i = j; i <= n; ++i)
            for (int m = j - 1; m < i; ++m) {
                double cand = dp[j - 1][m] + sse(m, i);
                if (cand < dp[j][i]) {
                    dp[j][i] = cand;
                    cut[j][i] = m;
                }
            }
    std::vector<double> cents(k);
    int i = n;
    for (int j = k; j >= 1; --j) {
        int m = cut[j][i];
        cents[j - 1] = (sum[i] - sum[m]) / (i - m);
        i = m;
    }
    return cents;
}

std::vector<double> seed_centroids(const std::vector<double>& values,
                                   const std::vector<double>& distinct, int k,
                                   Seeding scheme, uint64_t seed) {
    Rng rng(seed);
    size_t n = values.size();
    std::vector<double> cents;
    if (scheme == Seeding::RandomDistinct) {
        std::vector<size_t> idx(distinct.size());
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (size_t i = idx.size(); i-- > 1;) std::swap(idx[i], idx[rng.below(i + 1)]);
        for (int j = 0; j < k; ++j) cents.push_back(distinct[idx[j]]);
        return cents;
    }
    cents.push_back(values[rng.below(n)]);
    while (static_cast<int>(cents.size()) < k) {
        std::vector<double> d2(n);
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double d = std::fabs(values[i] - cents[nearest(cents, values[i])]);
            d2[i] = d * d;
            total += d2[i];
        }
        size_t pick = 0;
        if (scheme == Seeding::FarthestPoint || total == 0.0) {
            double fd = -1.0;
            for (size_t i = 0; i < n; ++i)
                if (d2[i] > fd) {
                    fd = d2[i];
                    pick = i;
                }
        } else {
            double target = rng.uniform() * total, acc = 0.0;
            for (size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= target) {
                    pick = i;
                    break;
                }
                pick = i;
            }
        }
        cents.push_back(values[pick]);
    }
    return cents;
}

LloydRun lloyd(const std::vector<double>& values, std::vector<double> init_centroids) {
    size_t n = values.size();
    int k = static_cast<int>(init_centroids.size());
    LloydRun run;
    run.centroids = std::move(init_centroids);
    run.assignments.assign(n, -1);
    for (int iter = 0; iter < 100; ++iter) {
        bool changed = false;
        double inertia = 0.0;
        for (size_t i = 0; i < n; ++i) {
            int a = nearest(run.centroids, values[i]);
            double d = values[i] - run.centroids[a];
            inertia += d * d;
            if (a != run.assignments[i]) {
                run.assignments[i] = a;
                changed = true;
            }
        }
        run.trace.push_back(inertia);
        run.inertia = inertia;
        if (!changed) break;
        std::vector<double> sum(k, 0.0);
        std::vector<int> cnt(k, 0);
        for (size_t i = 0; i < n; ++i) {
            sum[run.assignments[i]] += values[i];
            ++cnt[run.assignments[i]];
        }
        for (int j = 0; j < k; ++j)
            if (cnt[j] > 0) run.centroids[j] = sum[j] / cnt[j]; // empty keeps its spot
    }
    // inertia of the final centroids (last update may have moved them)
    double inertia = 0.0;
    for (size_t i = 0; i < n; ++i) {
        run.assignments[i] = nearest(run.centroids, values[i]);
        double d = values[i] - run.centroids[run.assignments[i]];
        inertia += d * d;
    }
    run.inertia = inertia;
    return run;
}

} // namespace

KMeansResult kmeans_1d(const std::vector<double>& values, int k, uint64_t seed) {
    if (values.empty()) throw DomainError("kmeans_1d: empty input");
    if (k < 1) throw DomainError("kmeans_1d: k must be >= 1");
    std::vector<double> distinct(values);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    int keff = std::min<int>(k, static_cast<int>(distinct.size()));

    // restarts mix seeding schemes; farthest-point alone lands in poor local
    // optima on small inputs. The contiguous-partition optimum is one of the
    // candidates, so the winner is never worse than it.
    std::vector<double> sorted(values);
    std::sort(sorted.begin(), sorted.end());
    LloydRun best = lloyd(values, contiguous_optimum_centroids(std::move(sorted), keff));
    for (int restart = 0; restart < 7; ++restart) {
        Seeding scheme = restart == 0 ? Seeding::FarthestPoint
                         : restart < 4 ? Seeding::DistanceWeighted
                                       : Seeding::RandomDistinct;
        LloydRun run =
            lloyd(values, seed_centroids(values, distinct, keff, scheme,
                                         derive_seed(seed, restart)));
        if (run.inertia < best.inertia) best = std::move(run);
    }

    // drop empty clusters, sort ascending, remap assignments
    std::vector<int> count(keff, 0);
    for (int a : best.assignments) ++count[a];
    std::vector<std::pair<double, int>> order; // (centroid, old index)
    for (int j = 0; j < keff; ++j)
        if (count[j] > 0) order.emplace_back(best.centroids[j], j);
    std::sort(order.begin(), order.end());
    std::vector<int> remap(keff, -1);
    KMeansResult res;
    for (size_t j = 0; j < order.size(); ++j) {
        res.centroids.push_back(order[j].first);
        remap[order[j].second] = static_cast<int>(j);
    }
    res.assignments.reserve(best.assignments.size());
    for (int a : best.assignments) res.assignments.push_back(remap[a]);
    res.inertia = best.inertia;
    res.inertia_trace = std::move(best.trace);
    return res;
}

VarianceMask build_mask(const KMeansResult& result, int s,
                        const std::vector<std::pair<int, int>>& positions, int c) {
    if (positions.size() != result.assignments.size())
        throw ShapeError("build_mask: positions and assignments disagree");
    int keff = static_cast<int>(result.centroids.size());
    VarianceMask mask;
    mask.c = c;
    mask.high_mask.assign(static_cast<size_t>(c) * c, 0);
    if (keff == 1) { // no spread to split on: everything is invariant
        mask.low_count = static_cast<int>(positions.size());
        return mask;
    }
    if (s < 1 || s >= keff) throw ConfigError("build_mask: s must satisfy 1 <= s < k");
    for (size_t p = 0; p < positions.size(); ++p) {
        auto [i, j] = positions[p];
        if (i < 0 || j <= i || j >= c) throw ShapeError("build_mask: not a strict-upper position");
        if (result.assignments[p] >= s) {
            mask.high_mask[static_cast<size_t>(i) * c + j] = 1;
            ++mask.high_count;
        } else {
            ++mask.low_count;
        }
    }
    return mask;
}

Tensor msiw_loss(Tape& t, const std::vector<Tensor>& lambdas, const VarianceMask& mask) {
    if (lambdas.empty()) throw ShapeError("msiw_loss: no covariance matrices");
    int c = mask.c;
    for (const auto& l : lambdas)
        if (!shape_eq(l.shape, {c, c})) throw ShapeError("msiw_loss: mask/matrix shape mismatch");
    std::vector<double> m(mask.high_mask.begin(), mask.high_mask.end());
    Tensor mt = t.constant({c, c}, std::move(m));
    Tensor total;
    for (size_t i = 0; i < lambdas.size(); ++i) {
        Tensor term = t.reduce_all(ReduceOp::Sum, t.mul(t.abs(lambdas[i]), mt));
        total = i == 0 ? term : t.add(total, term);
    }
    return t.mul_scalar(total, 1.0 / static_cast<double>(lambdas.size()));
}

ForwardResult forward(Tape& t, const Tensor& f, const std::vector<Tensor>& f_modal,
                      const Tensor& f_masp, int k, int s, uint64_t seed, double eps) {
    ForwardResult r;
    r.lambdas.push_back(covariance(t, f, eps));
    for (const auto& fm : f_modal) r.lambdas.push_back(covariance(t, fm, eps));
    r.lambdas.push_back(covariance(t, f_masp, eps));

    std::vector<double> var = variance_matrix(r.lambdas);
    int c = r.lambdas[0].shape[0];
    auto positions = strict_upper_positions(c);
    std::vector<double> vu;
    vu.reserve(positions.size());
    for (auto [i, j] : positions) vu.push_back(var[static_cast<size_t>(i) * c + j]);

    KMeansResult km = kmeans_1d(vu, k, seed);
    r.mask = build_mask(km, s, positions, c);
    r.mask.variance = std::move(var);
    r.loss = msiw_loss(t, r.lambdas, r.mask);
    return r;
}

} // namespace ttmg::msiw
