#include "dgrnet/uqeval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace dgrnet::uq {

double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt) {
    if (pred.size() != gt.size()) throw std::invalid_argument("dice: mask sizes differ");
    std::size_t np = 0, ng = 0, inter = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        np += pred[i] != 0;
        ng += gt[i] != 0;
        inter += (pred[i] != 0) && (gt[i] != 0);
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * double(inter) / double(np + ng);
}

namespace {

// Foreground voxels with at least one six-connected background neighbour;
// the volume border counts as background.
std::vector<std::array<int, 3>> surface_voxels(const std::vector<std::uint8_t>& mask, std::array<int, 3> dims) {
    const int D = dims[0], H = dims[1], W = dims[2];
    auto at = [&](int z, int y, int x) -> bool {
        if (z < 0 || z >= D || y < 0 || y >= H || x < 0 || x >= W) return false;
        return mask[(std::size_t(z) * H + y) * W + x] != 0;
    };
    std::vector<std::array<int, 3>> out;
    for (int z = 0; z < D; ++z)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                if (!at(z, y, x)) continue;
                if (!at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) || !at(z, y + 1, x) ||
                    !at(z, y, x - 1) || !at(z, y, x + 1))
                    out.push_back({z, y, x});
            }
    return out;
}

void directed_distances(const std::vector<std::array<int, 3>>& from, const std::vector<std::array<int, 3>>& to,
                        std::vector<double>& pooled) {
    for (const auto& a : from) {
        long best = std::numeric_limits<long>::max();
        for (const auto& b : to) {
            const long dz = a[0] - b[0], dy = a[1] - b[1], dx = a[2] - b[2];
            best = std::min(best, dz * dz + dy * dy + dx * dx);
        }
        pooled.push_back(std::sqrt(double(best)));
    }
}

double percentile_linear(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const std::size_t lo = std::size_t(pos);
    if (lo + 1 >= v.size()) return v.back();
    const double frac = pos - double(lo);
    return v[lo] + (v[lo + 1] - v[lo]) * frac;
}

}  // namespace

std::optional<double> hd95(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                           std::array<int, 3> dims) {
    const std::size_t n = std::size_t(dims[0]) * dims[1] * dims[2];
    if (pred.size() != n || gt.size() != n) throw std::invalid_argument("hd95: mask size does not match dims");
    auto sp = surface_voxels(pred, dims);
    auto sg = surface_voxels(gt, dims);
    if (sp.empty() || sg.empty()) return std::nullopt;
    std::vector<double> pooled;
    pooled.reserve(sp.size() + sg.size());
    directed_distances(sp, sg, pooled);
    directed_distances(sg, sp, pooled);
    return percentile_linear(std::move(pooled), 0.95);
}

std::vector<std::uint8_t> error_mask(const std::vector<double>& probs, const std::vector<std::uint8_t>& gt,
                                     int classes) {
    if (probs.size() != gt.size() || classes <= 0 || probs.size() % classes != 0)
        throw std::invalid_argument("error_mask: inconsistent sizes");
    const std::size_t n = probs.size() / classes;
    std::vector<std::uint8_t> err(n, 0);
    for (int c = 0; c < classes; ++c)
        for (std::size_t i = 0; i < n; ++i) {
            const bool p = probs[c * n + i] >= 0.5;
            const bool g = gt[c * n + i] != 0;
            if (p != g) err[i] = 1;
        }
    return err;
}

std::vector<double> brier_error(const std::vector<double>& probs, const std::vector<std::uint8_t>& gt,
                                int classes) {
    if (probs.size() != gt.size() || classes <= 0 || probs.size() % classes != 0)
        throw std::invalid_argument("brier_error: inconsistent sizes");
    const std::size_t n = probs.size() / classes;
    std::vector<double> e(n, 0.0);
    for (int c = 0; c < classes; ++c)
        for (std::size_t i = 0; i < n; ++i) {
            const double d = probs[c * n + i] - double(gt[c * n + i]);
            e[i] += d * d;
        }
    for (auto& v : e) v /= classes;
    return e;
}

std::optional<double> uncertainty_ratio(const std::vector<double>& u, const std::vector<std::uint8_t>& err) {
    if (u.size() != err.size()) throw std::invalid_argument("uncertainty_ratio: size mismatch");
    double se = 0, sc = 0;
    std::size_t ne = 0, nc = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        if (err[i]) {
            se += u[i];
            ++ne;
        } else {
            sc += u[i];
            ++nc;
        }
    }
    if (ne == 0) return std::nullopt;
    const double mean_err = se / double(ne);
    const double mean_cor = nc ? sc / double(nc) : 0.0;
    return std::min(mean_err / std::max(mean_cor, 1e-12), 1e6);
}

std::optional<double> error_auc(const std::vector<double>& u, const std::vector<std::uint8_t>& err) {
    if (u.size() != err.size()) throw std::invalid_argument("error_auc: size mismatch");
    std::size_t npos = 0;
    for (auto e : err) npos += e != 0;
    const std::size_t nneg = u.size() - npos;
    if (npos == 0 || nneg == 0) return std::nullopt;
    std::vector<std::size_t> idx(u.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return u[a] < u[b]; });
    // midrank sum over the error group
    double rank_sum = 0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && u[idx[j]] == u[idx[i]]) ++j;
        const double midrank = 0.5 * double(i + 1 + j);  // average of ranks i+1 .. j
        for (std::size_t k = i; k < j; ++k)
            if (err[idx[k]]) rank_sum += midrank;
        i = j;
    }
    return (rank_sum - 0.5 * double(npos) * double(npos + 1)) / (double(npos) * double(nneg));
}

Sparsification sparsification(const std::vector<double>& u, const std::vector<double>& per_voxel_error) {
    if (u.size() != per_voxel_error.size() || u.empty())
        throw std::invalid_argument("sparsification: inconsistent sizes");
    const std::size_t n = u.size();
    auto order_desc = [n](const std::vector<double>& key) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        // ties broken by voxel index
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return key[a] > key[b]; });
        return idx;
    };
    // suffix means of the error, following a removal order
    auto residual_curve = [&](const std::vector<std::size_t>& order) {
        std::vector<double> suffix(n + 1, 0.0);
        for (std::size_t k = n; k-- > 0;) suffix[k] = suffix[k + 1] + per_voxel_error[order[k]];
        std::vector<double> curve(100);
        for (int f = 0; f < 100; ++f) {
            const std::size_t removed = (std::size_t(f) * n) / 100;
            curve[f] = suffix[removed] / double(n - removed);
        }
        return curve;
    };
    Sparsification s;
    s.fractions.resize(100);
    for (int f = 0; f < 100; ++f) s.fractions[f] = f / 100.0;
    s.model_curve = residual_curve(order_desc(u));
    s.oracle_curve = residual_curve(order_desc(per_voxel_error));
    double acc = 0;
    for (int f = 0; f < 100; ++f) acc += s.model_curve[f] - s.oracle_curve[f];
    s.ause = acc / 100.0;
    return s;
}

}  // namespace dgrnet::uq
