#pragma once

// Segmentation and uncertainty-quality metrics. All functions are pure and
// operate on flat double/byte arrays; distances are exact (brute force over
// surface voxels) and the curve/AUC computations are deterministic with ties
// broken by voxel index.

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

namespace dgrnet::uq {

// 2|P∩G| / (|P|+|G|); both masks empty -> 1.0 by convention.
double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt);

// 95th percentile (linear interpolation) of the pooled symmetric
// surface-to-surface Euclidean distances. Surfaces use 6-connectivity with
// out-of-volume treated as background. Either side empty -> nullopt.
std::optional<double> hd95(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                           std::array<int, 3> dims);

// Union over classes of threshold-0.5 mismatches. probs is [C, N], gt is
// [C, N] binary; result is [N].
std::vector<std::uint8_t> error_mask(const std::vector<double>& probs, const std::vector<std::uint8_t>& gt,
                                     int classes);

// Brier error per voxel: mean over classes of (p - y)^2.
std::vector<double> brier_error(const std::vector<double>& probs, const std::vector<std::uint8_t>& gt,
                                int classes);

// mean(U | error) / max(mean(U | correct), 1e-12), reported capped at 1e6;
// nullopt when there are no error voxels.
std::optional<double> uncertainty_ratio(const std::vector<double>& u, const std::vector<std::uint8_t>& err);

// Mann-Whitney AUC of u as a ranker of error vs correct voxels, ties 0.5;
// nullopt when either group is empty.
std::optional<double> error_auc(const std::vector<double>& u, const std::vector<std::uint8_t>& err);

struct Sparsification {
    std::vector<double> fractions;    // 0.00 .. 0.99
    std::vector<double> model_curve;  // residual error after removing most-uncertain voxels
    std::vector<double> oracle_curve; // residual error after removing largest true errors
    double ause = 0.0;                // mean(model - oracle)
};

Sparsification sparsification(const std::vector<double>& u, const std::vector<double>& per_voxel_error);

}  // namespace dgrnet::uq
