#pragma once

#include <utility>
#include <vector>

#include "ttmg/tensor.hpp"

namespace ttmg::masp {

// One projection stage's outputs. f_masp is what feeds the next encoder
// block; the rest exists for the losses and for inspection.
struct Output {
    Tensor f_masp;                // (C,H,W)
    Tensor f_norm;                // (C,H,W) instance-normalized input
    std::vector<Tensor> f_modal;  // M per-modality projections
    Tensor probs;                 // (M) modality probabilities
    Tensor mu;                    // (C) mined channel means
    Tensor sigma;                 // (C) mined channel stds
};

// softmax(GAP(f) * w + b); w is (C,M), b is (M)
Tensor classify(Tape& t, const Tensor& f, const Tensor& w, const Tensor& b);

// channel-wise spatial mean and population std of a (C,H,W) map
std::pair<Tensor, Tensor> mine_style(Tape& t, const Tensor& f);

// (f - mu) / (sigma + eps), channel broadcast
Tensor instance_normalize(Tape& t, const Tensor& f, const Tensor& mu, const Tensor& sigma,
                          double eps = 1e-6);

// Blend one modality's K basis pairs (each (K,C)) by softmax over
// cos(mu, mu_k) + cos(sigma, sigma_k). Returns the blended (mu_m, sigma_m).
std::pair<Tensor, Tensor> recalibrate(Tape& t, const Tensor& mu, const Tensor& sigma,
                                      const Tensor& mu_bases, const Tensor& sigma_bases);

// f_m = f_norm * sigma_m + mu_m per modality; blend by probs (soft) or pick
// the argmax modality (hard). sigma_m is floored at 1e-6.
std::pair<std::vector<Tensor>, Tensor> project(
    Tape& t, const Tensor& f_norm, const std::vector<std::pair<Tensor, Tensor>>& styles,
    const Tensor& probs, bool hard = false);

// -(1/M) sum_m log softmax(z)_m with z_m the cosine of flattened f_norm, f_m
Tensor content_loss(Tape& t, const Tensor& f_norm, const std::vector<Tensor>& f_modal);

// cross-entropy of probs against the true modality index
Tensor cls_loss(Tape& t, const Tensor& probs, int label);

// the whole stage: classify, mine, normalize, recalibrate each modality,
// project. mu_bases/sigma_bases are (M,K,C).
Output forward(Tape& t, const Tensor& f, const Tensor& w, const Tensor& b,
               const Tensor& mu_bases, const Tensor& sigma_bases, double eps = 1e-6,
               bool hard = false);

} // namespace ttmg::masp
