#pragma once

// Aggregates V view predictions into the fused voxel-wise uncertainty map
// and the consensus logits. The three component maps all live in [0,1]:
// variance is normalized by 0.25 (the maximum for [0,1] data), pairwise
// disagreement is a windowed squared-denominator soft Dice, and entropy is
// binary Shannon entropy in bits.

#include <vector>

#include "dgrnet/tensor.hpp"

namespace dgrnet {

inline constexpr double kPairEps = 1e-6;

template <class Real>
struct UncertaintyMaps {
    Tensor<Real> u_var, u_pair, u_ent;  // [D,H,W]
    Tensor<Real> u;                     // fused, [D,H,W]
    Tensor<Real> w;                     // [3] softmax fusion weights
};

// Population variance across views, averaged over classes, scaled to [0,1].
template <class Real>
Tensor<Real> variance_map(const std::vector<Tensor<Real>>& probs) {
    check(!probs.empty(), "variance_map: no views");
    const Real inv_v = Real(1) / Real(probs.size());
    Tensor<Real> mean_p = probs[0];
    for (std::size_t v = 1; v < probs.size(); ++v) mean_p = add(mean_p, probs[v]);
    mean_p = mul_scalar(mean_p, inv_v);
    Tensor<Real> var;
    for (std::size_t v = 0; v < probs.size(); ++v) {
        Tensor<Real> d = sub(probs[v], mean_p);
        Tensor<Real> sq = mul(d, d);
        var = v == 0 ? sq : add(var, sq);
    }
    var = mul_scalar(var, inv_v);
    return clamp01(mul_scalar(mean_axis0(var), Real(4)));  // divide by the 0.25 bound
}

// Windowed soft-Dice disagreement, averaged over unordered view pairs and
// classes. The squared-denominator form makes d(p, p) exactly zero.
template <class Real>
Tensor<Real> pairwise_map(const std::vector<Tensor<Real>>& probs, int window = 3) {
    check(probs.size() >= 2, "pairwise_map: need at least 2 views");
    check(window % 2 == 1, "pairwise_map: window must be odd");
    const int C = probs[0].shape()[0];
    const Shape vol(probs[0].shape().begin() + 1, probs[0].shape().end());
    const int n_vox = int(shape_numel(vol));
    const Real eps = static_cast<Real>(kPairEps);
    Tensor<Real> acc;
    int terms = 0;
    for (std::size_t i = 0; i < probs.size(); ++i)
        for (std::size_t j = i + 1; j < probs.size(); ++j)
            for (int c = 0; c < C; ++c) {
                Tensor<Real> a = reshape(narrow(reshape(probs[i], {C, n_vox}), c * n_vox, n_vox), vol);
                Tensor<Real> b = reshape(narrow(reshape(probs[j], {C, n_vox}), c * n_vox, n_vox), vol);
                Tensor<Real> s_ab = box_sum3(mul(a, b), window);
                Tensor<Real> s_aa = box_sum3(mul(a, a), window);
                Tensor<Real> s_bb = box_sum3(mul(b, b), window);
                Tensor<Real> d = add_scalar(
                    neg(div(add_scalar(mul_scalar(s_ab, Real(2)), eps), add_scalar(add(s_aa, s_bb), eps))),
                    Real(1));
                acc = terms == 0 ? d : add(acc, d);
                ++terms;
            }
    return clamp01(mul_scalar(acc, Real(1) / Real(terms)));
}

// Per-class binary Shannon entropy in bits, averaged over classes.
template <class Real>
Tensor<Real> entropy_map(const Tensor<Real>& mean_probs) {
    const Real inv_ln2 = static_cast<Real>(1.0 / 0.6931471805599453094);
    Tensor<Real> one_minus = add_scalar(neg(mean_probs), Real(1));
    Tensor<Real> ent = neg(add(mul(mean_probs, dgrnet::log(mean_probs)),
                               mul(one_minus, dgrnet::log(one_minus))));
    return clamp01(mean_axis0(mul_scalar(ent, inv_ln2)));
}

// Convex combination with learnable pre-softmax weights.
template <class Real>
UncertaintyMaps<Real> fuse(const Tensor<Real>& u_var, const Tensor<Real>& u_pair, const Tensor<Real>& u_ent,
                           const Tensor<Real>& theta_w) {
    check(u_var.shape() == u_pair.shape() && u_pair.shape() == u_ent.shape(),
          "fuse: maps must share a shape");
    check(theta_w.shape() == Shape{3}, "fuse: theta_w must be [3], got " + shape_str(theta_w.shape()));
    UncertaintyMaps<Real> m;
    m.u_var = u_var;
    m.u_pair = u_pair;
    m.u_ent = u_ent;
    m.w = softmax(theta_w);
    m.u = add(add(scale(u_var, narrow(m.w, 0, 1)), scale(u_pair, narrow(m.w, 1, 1))),
              scale(u_ent, narrow(m.w, 2, 1)));
    return m;
}

// Mean of the logits (not the probabilities).
template <class Real>
Tensor<Real> consensus(const std::vector<Tensor<Real>>& logits) {
    check(logits.size() >= 2, "consensus: need at least 2 views");
    Tensor<Real> acc = logits[0];
    for (std::size_t v = 1; v < logits.size(); ++v) acc = add(acc, logits[v]);
    return mul_scalar(acc, Real(1) / Real(logits.size()));
}

}  // namespace dgrnet
