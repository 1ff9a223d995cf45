#pragma once

// The four-term objective, the diversity-preserving barriers, and SAM over
// SGD-momentum. Each training step makes exactly two loss evaluations
// (forward + backward): one at w, one at w + rho * g/|g|. The diversity term
// reaches only adapter leaves (when isolation is on) through a second
// backward sweep over the same graph, which costs no extra forward pass.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "dgrnet/model.hpp"
#include "dgrnet/synthdata.hpp"

namespace dgrnet {

inline constexpr double kDiceEps = 1e-6;
inline constexpr double kDisagreeEps = 0.01;

struct TrainConfig {
    int views = 4;
    double lambda_aux = 0.5;       // lambda_a
    double lambda_disagree = 0.2;  // lambda_c
    double lambda_div = 0.5;       // lambda_v
    double lr = 0.1;
    double momentum = 0.9;
    double rho_sam = 0.05;
    double tau_hi = 0.95;
    double tau_lo = 0.5;
    int epochs = 10;
    int batch = 1;
    std::uint64_t seed = 0;
    int pair_window = 3;
    bool isolation = true;
    bool use_multiview = true;
    bool use_attention = true;
    bool use_refine = true;
    bool use_text = true;

    void validate() const {
        check(lambda_aux >= 0 && lambda_disagree >= 0 && lambda_div >= 0,
              "config: loss weights must be non-negative");
        check(tau_lo < tau_hi, "config: tau_lo must be below tau_hi");
        check(!use_multiview || views >= 2, "config: multi-view training needs views >= 2");
        check(batch == 1, "config: only batch size 1 is supported");
    }

    ModelConfig model_config() const {
        ModelConfig m;
        m.views = views;
        m.pair_window = pair_window;
        m.use_multiview = use_multiview;
        m.use_attention = use_attention;
        m.use_refine = use_refine;
        m.use_text = use_text;
        m.isolation = isolation;
        m.seed = seed;
        return m;
    }

    nlohmann::json to_json() const {
        return {{"views", views},       {"lambda_aux", lambda_aux}, {"lambda_disagree", lambda_disagree},
                {"lambda_div", lambda_div}, {"lr", lr},             {"momentum", momentum},
                {"rho_sam", rho_sam},   {"tau_hi", tau_hi},         {"tau_lo", tau_lo},
                {"epochs", epochs},     {"batch", batch},           {"seed", seed},
                {"pair_window", pair_window}, {"isolation", isolation}, {"use_multiview", use_multiview},
                {"use_attention", use_attention}, {"use_refine", use_refine}, {"use_text", use_text}};
    }
};

// Mean over classes of soft Dice loss (squared denominator) plus BCE.
template <class Real>
Tensor<Real> seg_loss(const Tensor<Real>& logits, const Tensor<Real>& target) {
    check_same_shape(logits, target, "seg_loss");
    const int classes = logits.shape()[0];
    const Real voxels = static_cast<Real>(logits.numel() / classes);
    Tensor<Real> probs = sigmoid(logits);
    Tensor<Real> inter = channel_sums(mul(probs, target));
    Tensor<Real> denom = add(channel_sums(mul(probs, probs)), channel_sums(mul(target, target)));
    const Real eps = static_cast<Real>(kDiceEps);
    Tensor<Real> dice_loss = add_scalar(
        neg(div(add_scalar(mul_scalar(inter, Real(2)), eps), add_scalar(denom, eps))), Real(1));
    Tensor<Real> bce_per_class = mul_scalar(channel_sums(bce_logits(logits, target)), Real(1) / voxels);
    return mean(add(dice_loss, bce_per_class));
}

// Per-class soft Dice coefficients as plain values (for reporting).
template <class Real>
std::vector<double> soft_dice_values(const Tensor<Real>& logits, const Tensor<Real>& target) {
    NoGradGuard ng;
    const int classes = logits.shape()[0];
    Tensor<Real> probs = sigmoid(logits);
    Tensor<Real> inter = channel_sums(mul(probs, target));
    Tensor<Real> denom = add(channel_sums(mul(probs, probs)), channel_sums(mul(target, target)));
    std::vector<double> out(classes);
    for (int c = 0; c < classes; ++c)
        out[c] = (2.0 * double(inter.values()[c]) + kDiceEps) / (double(denom.values()[c]) + kDiceEps);
    return out;
}

template <class Real>
Tensor<Real> loss_refined(const Tensor<Real>& refined, const Tensor<Real>& target) {
    return seg_loss(refined, target);
}

template <class Real>
Tensor<Real> loss_aux(const std::vector<Tensor<Real>>& view_logits, const Tensor<Real>& target) {
    Tensor<Real> acc;
    for (std::size_t v = 0; v < view_logits.size(); ++v) {
        Tensor<Real> l = seg_loss(view_logits[v], target);
        acc = v == 0 ? l : add(acc, l);
    }
    return mul_scalar(acc, Real(1) / Real(view_logits.size()));
}

// Uncertainty-weighted BCE on the consensus. The caller passes U already
// detached when isolation is on.
template <class Real>
Tensor<Real> loss_disagree(const Tensor<Real>& consensus_logits, const Tensor<Real>& target,
                           const Tensor<Real>& u) {
    Tensor<Real> bce_vox = mean_axis0(bce_logits(consensus_logits, target));  // [D,H,W]
    Tensor<Real> w = add_scalar(u, static_cast<Real>(kDisagreeEps));
    return div(sum(mul(bce_vox, w)), sum(w));
}

template <class Real>
struct DiversityLoss {
    Tensor<Real> loss;             // scalar (undefined tensor when no usable pair)
    std::vector<double> cosines;   // pairwise cosine similarities
    int skipped_pairs = 0;         // zero-norm pairs, excluded from the mean
};

// Two-sided hinge keeping pairwise cosine similarity inside [tau_lo, tau_hi].
template <class Real>
DiversityLoss<Real> loss_diversity(const std::vector<Tensor<Real>>& view_logits, double tau_lo,
                                   double tau_hi) {
    check(view_logits.size() >= 2, "loss_diversity: need at least 2 views");
    DiversityLoss<Real> out;
    std::vector<Tensor<Real>> flat, norms;
    for (const auto& z : view_logits) {
        Tensor<Real> f = reshape(z, {int(z.numel())});
        flat.push_back(f);
        norms.push_back(sqrt(sum(mul(f, f))));
    }
    Tensor<Real> acc;
    int used = 0;
    for (std::size_t i = 0; i < flat.size(); ++i)
        for (std::size_t j = i + 1; j < flat.size(); ++j) {
            if (norms[i].values()[0] == 0 || norms[j].values()[0] == 0) {
                ++out.skipped_pairs;
                continue;
            }
            Tensor<Real> c = div(sum(mul(flat[i], flat[j])), mul(norms[i], norms[j]));
            out.cosines.push_back(double(c.values()[0]));
            Tensor<Real> hinge = add(relu(add_scalar(c, static_cast<Real>(-tau_hi))),
                                     relu(add_scalar(neg(c), static_cast<Real>(tau_lo))));
            acc = used == 0 ? hinge : add(acc, hinge);
            ++used;
        }
    if (used > 0) out.loss = mul_scalar(acc, Real(1) / Real(used));
    return out;
}

struct LossReport {
    double refined = 0, aux = 0, disagree = 0, diversity = 0, total = 0;
    std::vector<double> view_dice;  // per-view mean soft Dice
    std::vector<double> cosines;    // current pairwise cosine similarities
    double w_var = 0, w_pair = 0, w_ent = 0;
    double gate = 0;
    int skipped_pairs = 0;

    static std::string csv_header() {
        return "step,l_refined,l_aux,l_disagree,l_diversity,l_total,mean_pairwise_cosine,w_var,w_pair,w_ent,g";
    }
    std::string csv_row(int step) const {
        double mc = 0;
        for (double c : cosines) mc += c;
        if (!cosines.empty()) mc /= double(cosines.size());
        char buf[320];
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", step,
                      refined, aux, disagree, diversity, total, mc, w_var, w_pair, w_ent, gate);
        return buf;
    }
};

struct TrainingDiverged : std::runtime_error {
    std::string case_id;
    LossReport last_finite;
    TrainingDiverged(const std::string& id, LossReport last)
        : std::runtime_error("training diverged (non-finite loss) at case " + id),
          case_id(id),
          last_finite(std::move(last)) {}
};

// SAM over SGD-momentum.
template <class Real>
class SamSgd {
  public:
    SamSgd(std::vector<Tensor<Real>*> params, double lr, double momentum, double rho)
        : params_(std::move(params)), lr_(lr), momentum_(momentum), rho_(rho) {
        for (auto* p : params_) momentum_buf_.emplace_back(p->numel(), Real(0));
    }

    // eval_fn must zero grads, run forward and backward, and return the loss
    // report; after it returns, each parameter's grad holds dL/dw.
    LossReport step(const std::function<LossReport()>& eval_fn) {
        LossReport report = eval_fn();
        ++evaluations_;
        std::vector<std::vector<Real>> g1;
        g1.reserve(params_.size());
        double norm_sq = 0;
        for (auto* p : params_) {
            g1.push_back(p->grad());
            for (Real g : g1.back()) norm_sq += double(g) * double(g);
        }
        const double norm = std::sqrt(norm_sq);
        if (norm > 0 && rho_ > 0) {
            const double scale = rho_ / norm;
            for (std::size_t k = 0; k < params_.size(); ++k) {
                auto& v = params_[k]->values();
                for (std::size_t i = 0; i < v.size(); ++i)
                    v[i] += static_cast<Real>(scale * double(g1[k][i]));
            }
            report = eval_fn();  // gradient at the perturbed point
            ++evaluations_;
            for (std::size_t k = 0; k < params_.size(); ++k) {
                auto& v = params_[k]->values();
                for (std::size_t i = 0; i < v.size(); ++i)
                    v[i] -= static_cast<Real>(scale * double(g1[k][i]));
            }
        } else if (rho_ > 0) {
            // vanishing gradient: plain SGD step with epsilon = 0
            ++evaluations_;
        } else {
            // rho = 0 degenerates to SGD-momentum on g1
            ++evaluations_;
        }
        for (std::size_t k = 0; k < params_.size(); ++k) {
            const auto g2 = params_[k]->grad();
            auto& m = momentum_buf_[k];
            auto& v = params_[k]->values();
            for (std::size_t i = 0; i < v.size(); ++i) {
                m[i] = static_cast<Real>(momentum_ * double(m[i]) + double(g2[i]));
                v[i] -= static_cast<Real>(lr_ * double(m[i]));
            }
        }
        ++steps_;
        return report;
    }

    std::uint64_t steps() const { return steps_; }
    std::uint64_t evaluations() const { return evaluations_; }

  private:
    std::vector<Tensor<Real>*> params_;
    std::vector<std::vector<Real>> momentum_buf_;
    double lr_, momentum_, rho_;
    std::uint64_t steps_ = 0, evaluations_ = 0;
};

template <class Real>
class Trainer {
  public:
    Trainer(DgrNet<Real>& model, const TrainConfig& cfg)
        : model_(model), cfg_(cfg), param_ptrs_(), opt_(nullptr) {
        cfg_.validate();
        for (auto& [name, t] : model_.params()) param_ptrs_.push_back(t);
        opt_ = std::make_unique<SamSgd<Real>>(param_ptrs_, cfg.lr, cfg.momentum, cfg.rho_sam);
        for (auto* t : model_.adapter_params()) adapter_leaves_.insert(t->node().get());
    }

    // One forward plus the (possibly barriered) backward sweeps.
    LossReport evaluate_losses(const Case& c) {
        for (auto* p : param_ptrs_) p->clear_grad();
        const int D = c.dims[0], H = c.dims[1], W = c.dims[2];
        Tensor<Real> x = tensor_from<Real>(c.x, {4, D, H, W});
        Tensor<Real> y = tensor_from<Real>(c.y, {3, D, H, W});
        ReportTokens<Real> tokens = case_tokens(c);
        ModelOutput<Real> out = model_.forward(x, tokens);

        Tensor<Real> l_ref = loss_refined(out.refined, y);
        Tensor<Real> l_aux_t = loss_aux(out.views.logits, y);
        Tensor<Real> u_for_loss = cfg_.isolation ? out.maps.u.detach() : out.maps.u;
        Tensor<Real> l_dis = loss_disagree(out.views.consensus, y, u_for_loss);

        LossReport r;
        r.refined = double(l_ref.values()[0]);
        r.aux = double(l_aux_t.values()[0]);
        r.disagree = double(l_dis.values()[0]);
        r.w_var = double(out.maps.w.values()[0]);
        r.w_pair = double(out.maps.w.values()[1]);
        r.w_ent = double(out.maps.w.values()[2]);
        r.gate = double(out.gate);
        for (const auto& z : out.views.logits) {
            auto d = soft_dice_values(z, y);
            double m = 0;
            for (double v : d) m += v;
            r.view_dice.push_back(m / double(d.size()));
        }

        DiversityLoss<Real> div_loss;
        const bool multiview = out.views.logits.size() >= 2;
        if (multiview) {
            div_loss = loss_diversity(out.views.logits, cfg_.tau_lo, cfg_.tau_hi);
            r.cosines = div_loss.cosines;
            r.skipped_pairs = div_loss.skipped_pairs;
            if (div_loss.loss.defined()) r.diversity = double(div_loss.loss.values()[0]);
        }
        r.total = r.refined + cfg_.lambda_aux * r.aux + cfg_.lambda_disagree * r.disagree +
                  cfg_.lambda_div * r.diversity;

        Tensor<Real> main = add(l_ref, add(mul_scalar(l_aux_t, static_cast<Real>(cfg_.lambda_aux)),
                                           mul_scalar(l_dis, static_cast<Real>(cfg_.lambda_disagree))));
        backward(main);
        if (multiview && cfg_.lambda_div > 0 && div_loss.loss.defined()) {
            Tensor<Real> scaled = mul_scalar(div_loss.loss, static_cast<Real>(cfg_.lambda_div));
            backward(scaled, cfg_.isolation ? &adapter_leaves_ : nullptr);
        }
        return r;
    }

    LossReport train_step(const Case& c) {
        LossReport r = opt_->step([&]() { return evaluate_losses(c); });
        if (!std::isfinite(r.total)) throw TrainingDiverged(c.id, last_report_);
        last_report_ = r;
        return r;
    }

    // One pass over the cases in a seed-derived order; emits one report per
    // step through on_step.
    void train_epoch(const std::vector<Case>& cases, int epoch,
                     const std::function<void(int, const LossReport&)>& on_step = {}) {
        check(!cases.empty(), "train_epoch: empty dataset");
        std::vector<std::size_t> order(cases.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(cfg_.seed * 0x9e3779b97f4a7c15ULL + std::uint64_t(epoch) + 1);
        shuffle_rng.shuffle(order);
        for (std::size_t i : order) {
            LossReport r = train_step(cases[i]);
            if (on_step) on_step(int(opt_->steps()), r);
        }
    }

    SamSgd<Real>& optimizer() { return *opt_; }
    const TrainConfig& config() const { return cfg_; }

    static ReportTokens<Real> case_tokens(const Case& c) {
        ReportTokens<Real> t;
        t.tokens = tensor_from<Real>(c.tokens, {kTokenCount, kTokenDim});
        t.mask.assign(c.token_mask.begin(), c.token_mask.end());
        return t;
    }

  private:
    DgrNet<Real>& model_;
    TrainConfig cfg_;
    std::vector<Tensor<Real>*> param_ptrs_;
    std::unique_ptr<SamSgd<Real>> opt_;
    std::unordered_set<const Node<Real>*> adapter_leaves_;
    LossReport last_report_;
};

}  // namespace dgrnet
