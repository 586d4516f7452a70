#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ttmg/tensor.hpp"

namespace ttmg::msiw {

struct KMeansResult {
    std::vector<double> centroids;     // sorted ascending
    std::vector<int> assignments;      // indices into the sorted centroids
    double inertia = 0.0;
    std::vector<double> inertia_trace; // one entry per Lloyd iteration (winning restart)
};

struct VarianceMask {
    std::vector<double> variance;   // C*C, symmetric, no gradient
    std::vector<uint8_t> high_mask; // C*C, true only at strict-upper high positions
    int c = 0;
    int low_count = 0;
    int high_count = 0;
};

// Channel correlation matrix of a (C,H,W) map: standardize each channel with
// its own spatial mean/std (eps-guarded), then (1/HW) X^T X. Differentiable.
Tensor covariance(Tape& t, const Tensor& f, double eps = 1e-6);

// Element-wise population variance across >= 2 same-shaped square matrices.
// Plain data: downstream treats it as a constant.
std::vector<double> variance_matrix(const std::vector<Tensor>& lambdas);

// (i, j) pairs with i < j, row-major order
std::vector<std::pair<int, int>> strict_upper_positions(int c);

// Lloyd's algorithm with farthest-point seeding and deterministic restarts.
// k is reduced to the number of distinct values when smaller.
KMeansResult kmeans_1d(const std::vector<double>& values, int k, uint64_t seed);

// Lowest s clusters (by centroid) are modality-invariant; the rest form the
// high mask. Degenerate single-cluster results give an empty mask.
VarianceMask build_mask(const KMeansResult& result, int s,
                        const std::vector<std::pair<int, int>>& positions, int c);

// (1/|lambdas|) sum_m ||Lambda_m  .* high_mask||_1, strict-upper entries only.
// The mask is a constant: gradients flow into the lambdas alone.
Tensor msiw_loss(Tape& t, const std::vector<Tensor>& lambdas, const VarianceMask& mask);

struct ForwardResult {
    Tensor loss;
    VarianceMask mask;
    std::vector<Tensor> lambdas; // order: F, each F_m, F_MASP
};

// Algorithm end-to-end for one instance: covariances of the M+2 maps,
// variance matrix, k-means split of the strict upper triangle, masked loss.
ForwardResult forward(Tape& t, const Tensor& f, const std::vector<Tensor>& f_modal,
                      const Tensor& f_masp, int k, int s, uint64_t seed,
                      double eps = 1e-6);

} // namespace ttmg::msiw
