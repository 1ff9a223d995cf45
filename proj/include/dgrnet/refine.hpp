#pragma once

// Disagreement-aware, text-conditioned residual correction. The input stack
// is [X; sigmoid(consensus); U]; uncertain regions are amplified by a learned
// attention mask, the report tokens modulate the attended features through
// attention pooling plus FiLM, and the corrected logits come back through a
// learnable scalar gate that starts nearly closed.

#include <string>
#include <utility>
#include <vector>

#include "dgrnet/backbone.hpp"
#include "dgrnet/conv3d.hpp"
#include "dgrnet/tensor.hpp"

namespace dgrnet {

inline constexpr double kGateInit = -2.0;  // sigmoid(-2) ~ 0.119

struct RefinerConfig {
    int image_channels = 4;
    int classes = 3;
    int width = 16;     // d_r
    int token_dim = 32; // d_t
    bool use_attention = true;
    bool use_text = true;
};

template <class Real>
struct RefineResult {
    Tensor<Real> refined;    // Z-hat = consensus + delta
    Tensor<Real> delta;      // gated residual correction
    Tensor<Real> gate;       // scalar g = sigmoid(theta_g)
    Tensor<Real> attention;  // A, [D,H,W]
};

template <class Real>
class Refiner {
  public:
    Refiner(const RefinerConfig& cfg, Rng& rng) : cfg_(cfg) {
        const int in_ch = cfg.image_channels + cfg.classes + 1;
        attn_w_ = conv_init(rng, 1, 1, 3);
        attn_b_ = Tensor<Real>::param({1}, {Real(0)});
        conv1_w_ = conv_init(rng, cfg.width, in_ch, 3);
        conv1_b_ = Tensor<Real>::param({cfg.width}, std::vector<Real>(cfg.width, Real(0)));
        pool_q_ = Tensor<Real>::param({cfg.width, cfg.token_dim},
                                      rng.normal_vec<Real>(std::size_t(cfg.width) * cfg.token_dim, 0.0,
                                                           std::sqrt(1.0 / cfg.width)));
        pool_v_ = Tensor<Real>::param({cfg.token_dim, 2 * cfg.width},
                                      rng.normal_vec<Real>(std::size_t(cfg.token_dim) * 2 * cfg.width, 0.0,
                                                           std::sqrt(1.0 / cfg.token_dim)));
        conv2_w_ = conv_init(rng, cfg.width, cfg.width, 3);
        conv2_b_ = Tensor<Real>::param({cfg.width}, std::vector<Real>(cfg.width, Real(0)));
        conv3_w_ = conv_init(rng, cfg.width, cfg.width, 3);
        conv3_b_ = Tensor<Real>::param({cfg.width}, std::vector<Real>(cfg.width, Real(0)));
        out_w_ = conv_init(rng, cfg.classes, cfg.width, 1);
        out_b_ = Tensor<Real>::param({cfg.classes}, std::vector<Real>(cfg.classes, Real(0)));
        theta_g_ = Tensor<Real>::param({1}, {static_cast<Real>(kGateInit)});
    }

    const RefinerConfig& config() const { return cfg_; }
    Tensor<Real>& theta_g() { return theta_g_; }

    // A = sigmoid(conv3(U)); strictly inside (0,1).
    Tensor<Real> attention_mask(const Tensor<Real>& u) const {
        check(u.shape().size() == 3, "attention_mask: expected [D,H,W], got " + shape_str(u.shape()));
        Shape boxed = {1, u.shape()[0], u.shape()[1], u.shape()[2]};
        Tensor<Real> a = sigmoid(conv3d(reshape(u, boxed), attn_w_, attn_b_, 1));
        return reshape(a, u.shape());
    }

    // F1' = F1 (1 + A): amplification between 1x and 2x.
    static Tensor<Real> spatial_attend(const Tensor<Real>& f1, const Tensor<Real>& a) {
        return mul_spatial(f1, add_scalar(a, Real(1)));
    }

    // Attention pooling over valid tokens, then the value projection emits
    // (gamma_t, beta_t). The no-text sentinel yields exact zeros.
    std::pair<Tensor<Real>, Tensor<Real>> text_pool(const Tensor<Real>& context,
                                                    const ReportTokens<Real>& text) const {
        if (!text.has_text())
            return {Tensor<Real>({cfg_.width}), Tensor<Real>({cfg_.width})};
        Tensor<Real> q = matmul(reshape(context, {1, cfg_.width}), pool_q_);  // [1, d_t]
        const Real inv_sqrt = Real(1) / static_cast<Real>(std::sqrt(double(cfg_.token_dim)));
        Tensor<Real> scores = mul_scalar(matmul(q, transpose2d(text.tokens)), inv_sqrt);  // [1, L]
        Tensor<Real> alpha = softmax_rows(scores, text.mask);
        Tensor<Real> pooled = matmul(alpha, text.tokens);  // [1, d_t]
        Tensor<Real> gb = reshape(matmul(pooled, pool_v_), {2 * cfg_.width});
        return {narrow(gb, 0, cfg_.width), narrow(gb, cfg_.width, cfg_.width)};
    }

    RefineResult<Real> forward(const Tensor<Real>& x, const Tensor<Real>& consensus_logits,
                               const Tensor<Real>& u, const ReportTokens<Real>& text) const {
        if (x.shape()[0] != cfg_.image_channels || consensus_logits.shape()[0] != cfg_.classes)
            throw std::invalid_argument(
                "refine: input stack must be image(" + std::to_string(cfg_.image_channels) + ") + probs(" +
                std::to_string(cfg_.classes) + ") + uncertainty(1) channels; got image " +
                shape_str(x.shape()) + " and consensus " + shape_str(consensus_logits.shape()));
        Shape u_boxed = {1, u.shape()[0], u.shape()[1], u.shape()[2]};
        Tensor<Real> f_in = concat_channels<Real>({x, sigmoid(consensus_logits), reshape(u, u_boxed)});
        Tensor<Real> f1 = gelu(conv3d(f_in, conv1_w_, conv1_b_, 1));
        RefineResult<Real> r;
        if (cfg_.use_attention) {
            r.attention = attention_mask(u);
            f1 = spatial_attend(f1, r.attention);
        } else {
            r.attention = Tensor<Real>(u.shape());  // disabled: A = 0, amplification is identity
        }
        if (cfg_.use_text && text.has_text()) {
            auto [gamma_t, beta_t] = text_pool(mean_spatial(f1), text);
            f1 = add_channels(mul_channels(f1, add_scalar(gamma_t, Real(1))), beta_t);
        }
        Tensor<Real> f3 = gelu(conv3d(f1, conv2_w_, conv2_b_, 1));
        Tensor<Real> f4 = gelu(conv3d(f3, conv3_w_, conv3_b_, 1));
        r.gate = sigmoid(theta_g_);
        r.delta = scale(conv3d(f4, out_w_, out_b_, 0), r.gate);
        r.refined = add(consensus_logits, r.delta);
        return r;
    }

    void collect_params(std::vector<std::pair<std::string, Tensor<Real>*>>& out) {
        out.emplace_back("refiner.attn.w", &attn_w_);
        out.emplace_back("refiner.attn.b", &attn_b_);
        out.emplace_back("refiner.conv1.w", &conv1_w_);
        out.emplace_back("refiner.conv1.b", &conv1_b_);
        out.emplace_back("refiner.pool.q", &pool_q_);
        out.emplace_back("refiner.pool.v", &pool_v_);
        out.emplace_back("refiner.conv2.w", &conv2_w_);
        out.emplace_back("refiner.conv2.b", &conv2_b_);
        out.emplace_back("refiner.conv3.w", &conv3_w_);
        out.emplace_back("refiner.conv3.b", &conv3_b_);
        out.emplace_back("refiner.out.w", &out_w_);
        out.emplace_back("refiner.out.b", &out_b_);
        out.emplace_back("refiner.theta_g", &theta_g_);
    }

    // Test hooks: zeroing specific blocks exercises the spec'd identities.
    Tensor<Real>& attn_w() { return attn_w_; }
    Tensor<Real>& attn_b() { return attn_b_; }

  private:
    static Tensor<Real> conv_init(Rng& rng, int co, int ci, int k) {
        const double sigma = std::sqrt(2.0 / (double(ci) * k * k * k));
        return Tensor<Real>::param({co, ci, k, k, k},
                                   rng.normal_vec<Real>(std::size_t(co) * ci * k * k * k, 0.0, sigma));
    }

    RefinerConfig cfg_;
    Tensor<Real> attn_w_, attn_b_;
    Tensor<Real> conv1_w_, conv1_b_;
    Tensor<Real> pool_q_, pool_v_;
    Tensor<Real> conv2_w_, conv2_b_;
    Tensor<Real> conv3_w_, conv3_b_;
    Tensor<Real> out_w_, out_b_;
    Tensor<Real> theta_g_;
};

}  // namespace dgrnet
