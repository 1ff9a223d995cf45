#pragma once

// DGRNet: shared backbone + V FiLM adapters + disagreement fusion + gated
// text-conditioned refinement. One encoder pass per prediction regardless of
// V (instrumented). The isolation switch detaches the view probabilities
// before the disagreement maps; the diversity-loss barrier lives in the
// trainer.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgrnet/backbone.hpp"
#include "dgrnet/disagreement.hpp"
#include "dgrnet/refine.hpp"
#include "dgrnet/serialize.hpp"
#include "dgrnet/views.hpp"

namespace dgrnet {

struct ModelConfig {
    int views = 4;
    int classes = 3;
    int pair_window = 3;
    bool use_multiview = true;   // off: single view, variance/pairwise drop to zero
    bool use_attention = true;
    bool use_refine = true;
    bool use_text = true;
    bool isolation = true;
    std::uint64_t seed = 0;
    BackboneConfig backbone;

    int effective_views() const { return use_multiview ? views : 1; }

    nlohmann::json to_json() const {
        return {{"views", views},
                {"classes", classes},
                {"pair_window", pair_window},
                {"use_multiview", use_multiview},
                {"use_attention", use_attention},
                {"use_refine", use_refine},
                {"use_text", use_text},
                {"isolation", isolation},
                {"seed", seed},
                {"d_b", backbone.stage_channels[2]},
                {"d_0", backbone.decoder_channels},
                {"stem_channels", backbone.stem_channels}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.views = j.at("views");
        c.classes = j.at("classes");
        c.pair_window = j.at("pair_window");
        c.use_multiview = j.at("use_multiview");
        c.use_attention = j.at("use_attention");
        c.use_refine = j.at("use_refine");
        c.use_text = j.at("use_text");
        c.isolation = j.at("isolation");
        c.seed = j.at("seed");
        return c;
    }
};

template <class Real>
struct ModelOutput {
    ViewBundle<Real> views;
    UncertaintyMaps<Real> maps;
    Tensor<Real> refined;    // Z-hat (equals consensus when refinement is off)
    Tensor<Real> delta;      // gated correction (zeros when refinement is off)
    Tensor<Real> attention;  // A (zeros when attention is off)
    Real gate = 0;
};

template <class Real>
class DgrNet {
  public:
    explicit DgrNet(const ModelConfig& cfg)
        : cfg_(cfg),
          init_rng_(cfg.seed),
          backbone_(make_backbone_config(cfg), init_rng_),
          refiner_(make_refiner_config(cfg), init_rng_),
          adapters_(make_adapters<Real>(cfg.effective_views(), cfg.backbone.stage_channels[2],
                                        cfg.backbone.decoder_channels, cfg.classes, cfg.seed)),
          theta_w_(Tensor<Real>::param({3}, {Real(0), Real(0), Real(0)})) {}

    const ModelConfig& config() const { return cfg_; }
    Backbone<Real>& backbone() { return backbone_; }
    const Backbone<Real>& backbone() const { return backbone_; }
    Refiner<Real>& refiner() { return refiner_; }
    std::vector<ViewAdapter<Real>>& adapters() { return adapters_; }
    Tensor<Real>& theta_w() { return theta_w_; }

    ModelOutput<Real> forward(const Tensor<Real>& x, const ReportTokens<Real>& text) const {
        const ReportTokens<Real>& tokens = cfg_.use_text ? text : no_text_;
        ModelOutput<Real> out;
        if (cfg_.effective_views() >= 2) {
            out.views = predict_views(x, tokens, backbone_, adapters_);
        } else {
            // single-view ablation path; the public predict_views contract
            // still rejects V < 2
            const BackboneFeatures<Real> f = backbone_.encode(x, tokens);
            Tensor<Real> d0 = backbone_.decode(f, film_modulate(f.h4, adapters_[0]));
            out.views.logits.push_back(conv3d(d0, adapters_[0].head_w, adapters_[0].head_b, 0));
            out.views.probs.push_back(sigmoid(out.views.logits[0]));
            out.views.consensus = out.views.logits[0];
        }

        // Disagreement maps from (optionally gradient-blocked) probabilities.
        std::vector<Tensor<Real>> map_probs;
        for (const auto& p : out.views.probs) map_probs.push_back(cfg_.isolation ? p.detach() : p);
        Tensor<Real> consensus_probs = sigmoid(out.views.consensus);
        if (cfg_.isolation) consensus_probs = consensus_probs.detach();

        const Shape vol(x.shape().begin() + 1, x.shape().end());
        Tensor<Real> u_var =
            map_probs.size() >= 2 ? variance_map(map_probs) : Tensor<Real>(vol);
        Tensor<Real> u_pair =
            map_probs.size() >= 2 ? pairwise_map(map_probs, cfg_.pair_window) : Tensor<Real>(vol);
        Tensor<Real> u_ent = entropy_map(consensus_probs);
        out.maps = fuse(u_var, u_pair, u_ent, theta_w_);

        if (cfg_.use_refine) {
            RefineResult<Real> r = refiner_.forward(x, out.views.consensus, out.maps.u, tokens);
            out.refined = r.refined;
            out.delta = r.delta;
            out.attention = r.attention;
            out.gate = r.gate.values()[0];
        } else {
            out.refined = out.views.consensus;
            out.delta = Tensor<Real>(out.views.consensus.shape());
            out.attention = Tensor<Real>(vol);
            out.gate = Real(0);
        }
        return out;
    }

    // Deterministically ordered parameter registry.
    std::vector<std::pair<std::string, Tensor<Real>*>> params() {
        std::vector<std::pair<std::string, Tensor<Real>*>> out;
        backbone_.collect_params(out);
        for (std::size_t v = 0; v < adapters_.size(); ++v)
            adapters_[v].collect_params("adapter" + std::to_string(v), out);
        out.emplace_back("theta_w", &theta_w_);
        refiner_.collect_params(out);
        return out;
    }

    // Adapter-only leaves (view embeddings, FiLM MLPs, heads): the diversity
    // loss updates these and nothing else.
    std::vector<Tensor<Real>*> adapter_params() {
        std::vector<std::pair<std::string, Tensor<Real>*>> named;
        for (std::size_t v = 0; v < adapters_.size(); ++v)
            adapters_[v].collect_params("adapter" + std::to_string(v), named);
        std::vector<Tensor<Real>*> out;
        for (auto& [name, t] : named) out.push_back(t);
        return out;
    }

    std::int64_t param_count() {
        std::int64_t n = 0;
        for (auto& [name, t] : params()) n += t->numel();
        return n;
    }

    // (full - baseline) / baseline where the baseline keeps one head and
    // drops every FiLM adapter and view embedding.
    double adapter_overhead_ratio() {
        std::int64_t full = param_count();
        std::int64_t adapters = 0;
        for (auto* t : adapter_params()) adapters += t->numel();
        const std::int64_t one_head =
            adapters_[0].head_w.numel() + adapters_[0].head_b.numel();
        const std::int64_t baseline = full - adapters + one_head;
        return double(full - baseline) / double(baseline);
    }

    void save(const std::filesystem::path& path, const nlohmann::json& extra_config = {}) {
        std::vector<NamedArray> arrays;
        for (auto& [name, t] : params()) {
            NamedArray a;
            a.name = name;
            a.shape = t->shape();
            a.data.resize(t->values().size());
            for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] = float(t->values()[i]);
            arrays.push_back(std::move(a));
        }
        nlohmann::json cfg = cfg_.to_json();
        if (!extra_config.empty()) cfg["run"] = extra_config;
        save_checkpoint(path, arrays, cfg);
    }

    static DgrNet load(const std::filesystem::path& path) {
        Checkpoint ckpt = load_checkpoint(path);
        DgrNet net(ModelConfig::from_json(ckpt.config));
        std::map<std::string, NamedArray*> by_name;
        for (auto& a : ckpt.arrays) by_name[a.name] = &a;
        for (auto& [name, t] : net.params()) {
            auto it = by_name.find(name);
            if (it == by_name.end()) throw std::runtime_error("checkpoint missing parameter " + name);
            if (it->second->shape != t->shape())
                throw std::runtime_error("checkpoint parameter " + name + " has shape " +
                                         shape_str(it->second->shape) + ", model expects " +
                                         shape_str(t->shape()));
            for (std::size_t i = 0; i < t->values().size(); ++i)
                t->values()[i] = static_cast<Real>(it->second->data[i]);
        }
        return net;
    }

  private:
    static BackboneConfig make_backbone_config(const ModelConfig& cfg) { return cfg.backbone; }

    static RefinerConfig make_refiner_config(const ModelConfig& cfg) {
        RefinerConfig r;
        r.image_channels = cfg.backbone.in_channels;
        r.classes = cfg.classes;
        r.token_dim = cfg.backbone.token_dim;
        r.use_attention = cfg.use_attention;
        r.use_text = cfg.use_text;
        return r;
    }

    ModelConfig cfg_;
    Rng init_rng_;
    Backbone<Real> backbone_;
    Refiner<Real> refiner_;
    std::vector<ViewAdapter<Real>> adapters_;
    Tensor<Real> theta_w_;
    ReportTokens<Real> no_text_ = ReportTokens<Real>::none();
};

// Builds a tensor from a stored case volume.
template <class Real>
Tensor<Real> tensor_from(const std::vector<double>& data, Shape shape) {
    std::vector<Real> v(data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(data[i]);
    return Tensor<Real>(std::move(shape), std::move(v));
}

template <class Real>
Tensor<Real> tensor_from(const std::vector<std::uint8_t>& data, Shape shape) {
    std::vector<Real> v(data.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Real>(data[i]);
    return Tensor<Real>(std::move(shape), std::move(v));
}

}  // namespace dgrnet
