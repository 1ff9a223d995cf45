#pragma once

// View-specific adapters: a learnable embedding drives a two-layer MLP that
// emits FiLM scale/shift for the shared bottleneck, and each view owns a
// 1x1x1 output head. FiLM weights start at N(0, 0.1^2) and head biases follow
// the fixed 0.02*(v-1) schedule so views separate from step zero without
// diverging far from the shared state.

#include <string>
#include <vector>

#include "dgrnet/backbone.hpp"
#include "dgrnet/tensor.hpp"

namespace dgrnet {

inline constexpr double kFilmInitSigma = 0.1;
inline constexpr double kHeadBiasStep = 0.02;

template <class Real>
struct ViewAdapter {
    Tensor<Real> embedding;            // e_v [d_b]
    Tensor<Real> film_w1, film_b1;     // [d_b, d_b], [d_b]
    Tensor<Real> film_w2, film_b2;     // [d_b, 2*d_b], [2*d_b]
    Tensor<Real> head_w, head_b;       // [C, d_0, 1,1,1], [C]

    // (gamma, beta), each [d_b].
    std::pair<Tensor<Real>, Tensor<Real>> film_params() const {
        const int d_b = embedding.shape()[0];
        Tensor<Real> h = gelu(add(matmul(reshape(embedding, {1, d_b}), film_w1), reshape(film_b1, {1, d_b})));
        Tensor<Real> gb = add(matmul(h, film_w2), reshape(film_b2, {1, 2 * d_b}));
        Tensor<Real> flat = reshape(gb, {2 * d_b});
        return {narrow(flat, 0, d_b), narrow(flat, d_b, d_b)};
    }

    void collect_params(const std::string& prefix, std::vector<std::pair<std::string, Tensor<Real>*>>& out) {
        out.emplace_back(prefix + ".e", &embedding);
        out.emplace_back(prefix + ".film.w1", &film_w1);
        out.emplace_back(prefix + ".film.b1", &film_b1);
        out.emplace_back(prefix + ".film.w2", &film_w2);
        out.emplace_back(prefix + ".film.b2", &film_b2);
        out.emplace_back(prefix + ".head.w", &head_w);
        out.emplace_back(prefix + ".head.b", &head_b);
    }
};

// Per-view seeds are base_seed + v so views are reproducible and never
// accidentally identical; head weights are one shared draw, biases follow
// the deterministic schedule.
template <class Real>
std::vector<ViewAdapter<Real>> make_adapters(int views, int d_b, int d_0, int classes,
                                             std::uint64_t base_seed) {
    check(views >= 1, "make_adapters: need at least one view");
    Rng head_rng(base_seed);
    const double head_sigma = std::sqrt(2.0 / double(d_0));
    const auto head_w_shared = head_rng.normal_vec<Real>(std::size_t(classes) * d_0, 0.0, head_sigma);
    std::vector<ViewAdapter<Real>> out;
    for (int v = 1; v <= views; ++v) {
        Rng rng(base_seed + std::uint64_t(v));
        ViewAdapter<Real> a;
        a.embedding = Tensor<Real>::param({d_b}, rng.normal_vec<Real>(d_b, 0.0, 1.0));
        a.film_w1 = Tensor<Real>::param({d_b, d_b},
                                        rng.normal_vec<Real>(std::size_t(d_b) * d_b, 0.0, kFilmInitSigma));
        a.film_b1 = Tensor<Real>::param({d_b}, std::vector<Real>(d_b, Real(0)));
        a.film_w2 = Tensor<Real>::param({d_b, 2 * d_b},
                                        rng.normal_vec<Real>(std::size_t(d_b) * 2 * d_b, 0.0, kFilmInitSigma));
        a.film_b2 = Tensor<Real>::param({2 * d_b}, std::vector<Real>(2 * d_b, Real(0)));
        a.head_w = Tensor<Real>::param({classes, d_0, 1, 1, 1}, head_w_shared);
        a.head_b = Tensor<Real>::param(
            {classes}, std::vector<Real>(classes, static_cast<Real>(kHeadBiasStep * (v - 1))));
        out.push_back(std::move(a));
    }
    return out;
}

// H4 (1 + gamma) + beta, channel-wise over space.
template <class Real>
Tensor<Real> film_modulate(const Tensor<Real>& h4, const ViewAdapter<Real>& adapter) {
    auto [gamma, beta] = adapter.film_params();
    return add_channels(mul_channels(h4, add_scalar(gamma, Real(1))), beta);
}

template <class Real>
struct ViewBundle {
    std::vector<Tensor<Real>> logits;  // Z^(v), each [C,D,H,W]
    std::vector<Tensor<Real>> probs;   // sigmoid(Z^(v))
    Tensor<Real> consensus;            // mean of the logits
};

// One encoder pass, then V modulate/decode/head branches.
template <class Real>
ViewBundle<Real> predict_views(const Tensor<Real>& x, const ReportTokens<Real>& text,
                               const Backbone<Real>& backbone,
                               const std::vector<ViewAdapter<Real>>& adapters) {
    check(adapters.size() >= 2, "predict_views: disagreement needs at least 2 views, got " +
                                    std::to_string(adapters.size()));
    ViewBundle<Real> out;
    const BackboneFeatures<Real> f = backbone.encode(x, text);
    for (const auto& a : adapters) {
        Tensor<Real> d0 = backbone.decode(f, film_modulate(f.h4, a));
        out.logits.push_back(conv3d(d0, a.head_w, a.head_b, 0));
        out.probs.push_back(sigmoid(out.logits.back()));
    }
    Tensor<Real> acc = out.logits[0];
    for (std::size_t v = 1; v < out.logits.size(); ++v) acc = add(acc, out.logits[v]);
    out.consensus = mul_scalar(acc, Real(1) / Real(out.logits.size()));
    return out;
}

}  // namespace dgrnet
