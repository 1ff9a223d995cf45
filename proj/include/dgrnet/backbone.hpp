#pragma once

// Shared encoder-decoder. Three stride-2 stages (channels 16 -> 32 -> 64)
// over a small stem, report tokens fused into the bottleneck through one
// residual cross-attention step, and a mirrored decoder with skip
// concatenation. Decoder weights are shared across views; per-view variation
// enters only through the modulated bottleneck passed to decode().

#include <cstdint>
#include <utility>
#include <vector>

#include "dgrnet/conv3d.hpp"
#include "dgrnet/rng.hpp"
#include "dgrnet/tensor.hpp"

namespace dgrnet {

template <class Real>
struct ReportTokens {
    Tensor<Real> tokens;             // [L, d_t]
    std::vector<bool> mask;          // per-token validity

    bool has_text() const {
        for (bool b : mask)
            if (b) return true;
        return false;
    }

    // The "no text" sentinel: zero tokens, all-false mask.
    static ReportTokens none(int token_count = 16, int token_dim = 32) {
        ReportTokens t;
        t.tokens = Tensor<Real>({token_count, token_dim});
        t.mask.assign(token_count, false);
        return t;
    }
};

struct BackboneConfig {
    int in_channels = 4;
    int stem_channels = 8;
    std::array<int, 3> stage_channels{16, 32, 64};
    std::array<int, 3> stage_res_units{2, 2, 4};
    int decoder_channels = 8;  // d_0
    int token_dim = 32;        // d_t
    int attn_dim = 32;
};

template <class Real>
struct ConvParams {
    Tensor<Real> w, b;
};

template <class Real>
struct BackboneFeatures {
    Tensor<Real> h4;                      // [d_b, D/8, H/8, W/8]
    std::array<Tensor<Real>, 3> skips;    // full, half, quarter resolution
};

template <class Real>
class Backbone {
  public:
    Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
        stem_ = make_conv(rng, cfg.stem_channels, cfg.in_channels, 3);
        int ch = cfg.stem_channels;
        for (int s = 0; s < 3; ++s) {
            down_[s] = make_conv(rng, cfg.stage_channels[s], ch, 3);
            ch = cfg.stage_channels[s];
            for (int r = 0; r < cfg.stage_res_units[s]; ++r) res_[s].push_back(make_conv(rng, ch, ch, 3));
        }
        const int d_b = cfg.stage_channels[2];
        fuse_q_ = make_linear(rng, d_b, cfg.attn_dim);
        fuse_k_ = make_linear(rng, cfg.token_dim, cfg.attn_dim);
        fuse_v_ = make_linear(rng, cfg.token_dim, d_b);
        dec_[0] = make_conv(rng, cfg.stage_channels[1], d_b + cfg.stage_channels[1], 3);
        dec_res_[0] = make_conv(rng, cfg.stage_channels[1], cfg.stage_channels[1], 3);
        dec_[1] = make_conv(rng, cfg.stage_channels[0], cfg.stage_channels[1] + cfg.stage_channels[0], 3);
        dec_res_[1] = make_conv(rng, cfg.stage_channels[0], cfg.stage_channels[0], 3);
        dec_[2] = make_conv(rng, cfg.decoder_channels, cfg.stage_channels[0] + cfg.stem_channels, 3);
    }

    int bottleneck_channels() const { return cfg_.stage_channels[2]; }
    int decoder_channels() const { return cfg_.decoder_channels; }
    const BackboneConfig& config() const { return cfg_; }

    std::uint64_t encode_count() const { return encode_count_; }
    void reset_encode_count() { encode_count_ = 0; }

    BackboneFeatures<Real> encode(const Tensor<Real>& x, const ReportTokens<Real>& text) const {
        check(x.shape().size() == 4 && x.shape()[0] == cfg_.in_channels,
              "encode: expected [" + std::to_string(cfg_.in_channels) + ",D,H,W], got " + shape_str(x.shape()));
        for (int a = 1; a <= 3; ++a) {
            const int d = x.shape()[a];
            if (d % 8 != 0 || d == 0)
                throw std::invalid_argument("encode: spatial dim " + std::to_string(d) +
                                            " must be a multiple of 8; pad to " +
                                            std::to_string(((d + 7) / 8) * 8));
        }
        ++encode_count_;
        BackboneFeatures<Real> f;
        Tensor<Real> h = gelu(conv3d(x, stem_.w, stem_.b, 1));
        f.skips[0] = h;
        for (int s = 0; s < 3; ++s) {
            h = gelu(conv3d(h, down_[s].w, down_[s].b, 1, 2));
            for (const auto& r : res_[s]) h = add(h, conv3d(gelu(h), r.w, r.b, 1));
            if (s < 2) f.skips[s + 1] = h;
        }
        f.h4 = text.has_text() ? fuse_text(h, text) : h;
        return f;
    }

    // Pure function of (features, modulated bottleneck).
    Tensor<Real> decode(const BackboneFeatures<Real>& f, const Tensor<Real>& modulated_h4) const {
        check(modulated_h4.shape() == f.h4.shape(),
              "decode: modulated bottleneck " + shape_str(modulated_h4.shape()) + " must match features " +
                  shape_str(f.h4.shape()));
        Tensor<Real> h = modulated_h4;
        for (int s = 0; s < 3; ++s) {
            h = upsample_nearest2(h);
            h = gelu(conv3d(concat_channels<Real>({h, f.skips[2 - s]}), dec_[s].w, dec_[s].b, 1));
            if (s < 2) h = add(h, conv3d(gelu(h), dec_res_[s].w, dec_res_[s].b, 1));
        }
        return h;
    }

    void collect_params(std::vector<std::pair<std::string, Tensor<Real>*>>& out) {
        auto put = [&](const std::string& name, ConvParams<Real>& c) {
            out.emplace_back(name + ".w", &c.w);
            out.emplace_back(name + ".b", &c.b);
        };
        put("backbone.stem", stem_);
        for (int s = 0; s < 3; ++s) {
            put("backbone.down" + std::to_string(s), down_[s]);
            for (std::size_t r = 0; r < res_[s].size(); ++r)
                put("backbone.res" + std::to_string(s) + "_" + std::to_string(r), res_[s][r]);
        }
        out.emplace_back("backbone.fuse.q", &fuse_q_);
        out.emplace_back("backbone.fuse.k", &fuse_k_);
        out.emplace_back("backbone.fuse.v", &fuse_v_);
        for (int s = 0; s < 3; ++s) {
            put("backbone.dec" + std::to_string(s), dec_[s]);
            if (s < 2) put("backbone.dec_res" + std::to_string(s), dec_res_[s]);
        }
    }

  private:
    static ConvParams<Real> make_conv(Rng& rng, int co, int ci, int k) {
        const double sigma = std::sqrt(2.0 / (double(ci) * k * k * k));
        ConvParams<Real> c;
        c.w = Tensor<Real>::param({co, ci, k, k, k},
                                  rng.normal_vec<Real>(std::size_t(co) * ci * k * k * k, 0.0, sigma));
        c.b = Tensor<Real>::param({co}, std::vector<Real>(co, Real(0)));
        return c;
    }

    static Tensor<Real> make_linear(Rng& rng, int in, int out) {
        const double sigma = std::sqrt(1.0 / double(in));
        return Tensor<Real>::param({in, out}, rng.normal_vec<Real>(std::size_t(in) * out, 0.0, sigma));
    }

    // One residual single-head cross-attention step: bottleneck voxels attend
    // over the report tokens.
    Tensor<Real> fuse_text(const Tensor<Real>& h4, const ReportTokens<Real>& text) const {
        const int d_b = h4.shape()[0];
        const int n_vox = int(h4.numel() / d_b);
        Tensor<Real> m = transpose2d(reshape(h4, {d_b, n_vox}));               // [N, d_b]
        Tensor<Real> q = matmul(m, fuse_q_);                                   // [N, d_a]
        Tensor<Real> k = matmul(text.tokens, fuse_k_);                         // [L, d_a]
        Tensor<Real> v = matmul(text.tokens, fuse_v_);                         // [L, d_b]
        const Real inv_sqrt = Real(1) / static_cast<Real>(std::sqrt(double(cfg_.attn_dim)));
        Tensor<Real> scores = mul_scalar(matmul(q, transpose2d(k)), inv_sqrt); // [N, L]
        Tensor<Real> attn = softmax_rows(scores, text.mask);
        Tensor<Real> ctx = matmul(attn, v);                                    // [N, d_b]
        return add(h4, reshape(transpose2d(ctx), h4.shape()));
    }

    BackboneConfig cfg_;
    ConvParams<Real> stem_;
    std::array<ConvParams<Real>, 3> down_;
    std::array<std::vector<ConvParams<Real>>, 3> res_;
    Tensor<Real> fuse_q_, fuse_k_, fuse_v_;
    std::array<ConvParams<Real>, 3> dec_;
    std::array<ConvParams<Real>, 2> dec_res_;
    mutable std::uint64_t encode_count_ = 0;
};

}  // namespace dgrnet
