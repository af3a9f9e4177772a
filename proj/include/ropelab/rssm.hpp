#pragma once

#include <chrono>
#include <cstdint>
#include <limits>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ropelab/autodiff.hpp"
#include "ropelab/core.hpp"
#include "ropelab/data.hpp"

namespace ropelab {

struct Hyperparams {
    std::size_t segment_count = 20;  // L, fixes the flattened state width
    std::size_t d_embed = 256;
    std::size_t d_action = 256;
    std::size_t d_rnn = 128;
    std::size_t d_z = 16;
    std::size_t d_hidden = 128;
    std::size_t link_embed_dim = 8;
    std::size_t mlp_depth = 2;   // hidden layers per MLP
    double min_std = 0.1;
    double beta = 1.0;           // KL weight
    double free_nats = 0.0;      // per-step KL floor (final value when annealed)
    // Optional linear anneal of the KL floor from free_nats_init down to
    // free_nats over the first free_nats_anneal epochs (0 disables). A wide
    // early floor lets the posterior channel open up before the prior is
    // asked to track it; the final floor restores prior/posterior alignment
    // for open-loop rollouts.
    double free_nats_init = 0.0;
    std::size_t free_nats_anneal = 0;
    // KL balancing (0 disables): with balance alpha, the prior is trained
    // toward a gradient-frozen posterior at weight alpha while the posterior
    // feels only the remaining (1 - alpha), subject to the free-nats floor.
    // Keeps the posterior channel open while the prior learns to track it,
    // which is what open-loop rollouts need.
    double kl_balance = 0.0;
    double decoder_gain = 0.1;   // fixed output scale of the residual decoder heads
    double link_length = 50.0;   // mm; scales the decoded-position loss to link units
    double lr = 1e-4;
    double grad_clip = 100.0;    // global-norm clip
    std::size_t batch = 32;      // B
    std::size_t seq_len = 20;    // n
    std::size_t max_epochs = 200;
    std::size_t patience = 10;

    std::size_t state_dim() const { return 3 + 4 * (segment_count - 1); }

    void validate() const {
        if (segment_count < 2) throw ConfigError("Hyperparams: segment_count must be >= 2");
        if (!d_embed || !d_action || !d_rnn || !d_z || !d_hidden || !link_embed_dim)
            throw ConfigError("Hyperparams: widths must be >= 1");
        if (min_std <= 0) throw ConfigError("Hyperparams: min_std must be positive");
        if (beta < 0 || free_nats < 0 || free_nats_init < 0)
            throw ConfigError("Hyperparams: beta/free_nats negative");
        if (kl_balance < 0 || kl_balance > 1)
            throw ConfigError("Hyperparams: kl_balance must be in [0, 1]");
        if (lr <= 0 || batch == 0 || seq_len < 2) throw ConfigError("Hyperparams: lr/batch/seq_len");
        if (link_length <= 0) throw ConfigError("Hyperparams: link_length must be positive");
        if (decoder_gain <= 0) throw ConfigError("Hyperparams: decoder_gain must be positive");
    }
};

inline void to_json(nlohmann::json& j, const Hyperparams& h) {
    j = {{"segment_count", h.segment_count}, {"d_embed", h.d_embed},
         {"d_action", h.d_action},           {"d_rnn", h.d_rnn},
         {"d_z", h.d_z},                     {"d_hidden", h.d_hidden},
         {"link_embed_dim", h.link_embed_dim}, {"mlp_depth", h.mlp_depth},
         {"min_std", h.min_std},             {"beta", h.beta},
         {"free_nats", h.free_nats},
         {"link_length", h.link_length},     {"free_nats_init", h.free_nats_init},
         {"free_nats_anneal", h.free_nats_anneal}, {"kl_balance", h.kl_balance},
         {"decoder_gain", h.decoder_gain},
         {"lr", h.lr},                       {"grad_clip", h.grad_clip},
         {"batch", h.batch},                 {"seq_len", h.seq_len},
         {"max_epochs", h.max_epochs},       {"patience", h.patience}};
}

inline void from_json(const nlohmann::json& j, Hyperparams& h) {
    j.at("segment_count").get_to(h.segment_count);
    j.at("d_embed").get_to(h.d_embed);
    j.at("d_action").get_to(h.d_action);
    j.at("d_rnn").get_to(h.d_rnn);
    j.at("d_z").get_to(h.d_z);
    j.at("d_hidden").get_to(h.d_hidden);
    j.at("link_embed_dim").get_to(h.link_embed_dim);
    j.at("mlp_depth").get_to(h.mlp_depth);
    j.at("min_std").get_to(h.min_std);
    j.at("beta").get_to(h.beta);
    j.at("free_nats").get_to(h.free_nats);
    // training-only knobs: optional in the header, defaulted when absent
    h.link_length = j.value("link_length", 50.0);
    h.free_nats_init = j.value("free_nats_init", 0.0);
    h.free_nats_anneal = j.value("free_nats_anneal", std::size_t{0});
    h.kl_balance = j.value("kl_balance", 0.0);
    h.decoder_gain = j.value("decoder_gain", 0.1);
    j.at("lr").get_to(h.lr);
    j.at("grad_clip").get_to(h.grad_clip);
    j.at("batch").get_to(h.batch);
    j.at("seq_len").get_to(h.seq_len);
    j.at("max_epochs").get_to(h.max_epochs);
    j.at("patience").get_to(h.patience);
}

namespace rssm_detail {

// layer shapes of an MLP with `depth` hidden layers of width `hidden`
inline std::vector<std::pair<int, int>> mlp_shapes(int in, int hidden, int depth, int out) {
    std::vector<std::pair<int, int>> s;
    int prev = in;
    for (int d = 0; d < depth; ++d) {
        s.emplace_back(prev, hidden);
        prev = hidden;
    }
    s.emplace_back(prev, out);
    return s;
}

}  // namespace rssm_detail

struct MlpParams {
    std::vector<ad::Tensor<float>> w, b;
};

// All model weights, in a fixed canonical order (see tensors()).
struct ModelParams {
    Hyperparams hp;
    MlpParams enc;    // state encoder: D -> d_embed
    ad::Tensor<float> embed;  // grasp-index embedding: L x link_embed_dim
    MlpParams disp;   // displacement MLP: 2 -> d_hidden
    MlpParams fuse;   // action fusion: link_embed_dim + d_hidden -> d_action
    ad::Tensor<float> gru_wr, gru_br, gru_wu, gru_bu, gru_wc, gru_bc;
    MlpParams prior_head;  // d_rnn -> 2*d_z
    MlpParams post_head;   // d_rnn + d_embed -> 2*d_z
    MlpParams recon;       // d_rnn + d_z -> D
    MlpParams pred;        // d_rnn + d_z -> D

    static ModelParams init(const Hyperparams& hp, Rng& rng) {
        hp.validate();
        ModelParams p;
        p.hp = hp;
        auto fill = [&](int r, int c, double scale) {
            ad::Tensor<float> t(r, c);
            for (auto& v : t.data) v = static_cast<float>(rng.next_normal() * scale);
            return t;
        };
        auto make_mlp = [&](int in, int out) {
            MlpParams m;
            for (auto [r, c] : rssm_detail::mlp_shapes(in, static_cast<int>(hp.d_hidden),
                                                       static_cast<int>(hp.mlp_depth), out)) {
                m.w.push_back(fill(r, c, 1.0 / std::sqrt(static_cast<double>(r))));
                m.b.push_back(ad::Tensor<float>(1, c));
            }
            return m;
        };
        const int D = static_cast<int>(hp.state_dim());
        const int L = static_cast<int>(hp.segment_count);
        p.enc = make_mlp(D, static_cast<int>(hp.d_embed));
        p.embed = fill(L, static_cast<int>(hp.link_embed_dim), 1.0);
        p.disp = make_mlp(2, static_cast<int>(hp.d_hidden));
        p.fuse = make_mlp(static_cast<int>(hp.link_embed_dim + hp.d_hidden),
                          static_cast<int>(hp.d_action));
        int gin = static_cast<int>(hp.d_z + hp.d_action + hp.d_rnn);
        int gh = static_cast<int>(hp.d_rnn);
        double gs = 1.0 / std::sqrt(static_cast<double>(gin));
        p.gru_wr = fill(gin, gh, gs);
        p.gru_br = ad::Tensor<float>(1, gh);
        p.gru_wu = fill(gin, gh, gs);
        p.gru_bu = ad::Tensor<float>(1, gh);
        p.gru_wc = fill(gin, gh, gs);
        p.gru_bc = ad::Tensor<float>(1, gh);
        p.prior_head = make_mlp(static_cast<int>(hp.d_rnn), static_cast<int>(2 * hp.d_z));
        p.post_head = make_mlp(static_cast<int>(hp.d_rnn + hp.d_embed),
                               static_cast<int>(2 * hp.d_z));
        p.recon = make_mlp(static_cast<int>(hp.d_rnn + hp.d_z), D);
        p.pred = make_mlp(static_cast<int>(hp.d_rnn + hp.d_z), D);
        // the decoders are residual heads: zero output layers make the
        // untrained model reproduce the previous state exactly, so training
        // starts from the persistence baseline instead of a random chain
        for (auto& v : p.recon.w.back().data) v = 0.0f;
        for (auto& v : p.pred.w.back().data) v = 0.0f;
        return p;
    }

    std::vector<ad::Tensor<float>*> tensors() {
        std::vector<ad::Tensor<float>*> out;
        auto push_mlp = [&](MlpParams& m) {
            for (std::size_t i = 0; i < m.w.size(); ++i) {
                out.push_back(&m.w[i]);
                out.push_back(&m.b[i]);
            }
        };
        push_mlp(enc);
        out.push_back(&embed);
        push_mlp(disp);
        push_mlp(fuse);
        for (auto* t : {&gru_wr, &gru_br, &gru_wu, &gru_bu, &gru_wc, &gru_bc}) out.push_back(t);
        push_mlp(prior_head);
        push_mlp(post_head);
        push_mlp(recon);
        push_mlp(pred);
        return out;
    }

    std::vector<const ad::Tensor<float>*> tensors() const {
        auto v = const_cast<ModelParams*>(this)->tensors();
        return {v.begin(), v.end()};
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto* t : tensors()) n += t->numel();
        return n;
    }
};

// Vars mirroring ModelParams on some tape (f32 for training, f64 for the
// finite-difference oracle).
template <typename T>
struct TapedModel {
    struct Mlp {
        std::vector<ad::Var> w, b;
    };
    Mlp enc, disp, fuse, prior_head, post_head, recon, pred;
    ad::Var embed;
    ad::GruWeights<T> gru;
};

namespace rssm_detail {

// Consumes vars in the canonical tensors() order.
template <typename T>
TapedModel<T> group_vars(const Hyperparams& hp, const std::vector<ad::Var>& vars) {
    TapedModel<T> m;
    std::size_t k = 0;
    auto next = [&] {
        if (k >= vars.size()) throw ShapeError("group_vars: too few vars");
        return vars[k++];
    };
    auto take_mlp = [&](int in, int out) {
        typename TapedModel<T>::Mlp mm;
        auto shapes = mlp_shapes(in, static_cast<int>(hp.d_hidden),
                                 static_cast<int>(hp.mlp_depth), out);
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            mm.w.push_back(next());
            mm.b.push_back(next());
        }
        return mm;
    };
    const int D = static_cast<int>(hp.state_dim());
    m.enc = take_mlp(D, static_cast<int>(hp.d_embed));
    m.embed = next();
    m.disp = take_mlp(2, static_cast<int>(hp.d_hidden));
    m.fuse = take_mlp(static_cast<int>(hp.link_embed_dim + hp.d_hidden),
                      static_cast<int>(hp.d_action));
    m.gru.w_reset = next();
    m.gru.b_reset = next();
    m.gru.w_update = next();
    m.gru.b_update = next();
    m.gru.w_cand = next();
    m.gru.b_cand = next();
    m.prior_head = take_mlp(static_cast<int>(hp.d_rnn), static_cast<int>(2 * hp.d_z));
    m.post_head = take_mlp(static_cast<int>(hp.d_rnn + hp.d_embed),
                           static_cast<int>(2 * hp.d_z));
    m.recon = take_mlp(static_cast<int>(hp.d_rnn + hp.d_z), D);
    m.pred = take_mlp(static_cast<int>(hp.d_rnn + hp.d_z), D);
    if (k != vars.size()) throw ShapeError("group_vars: too many vars");
    return m;
}

template <typename T>
TapedModel<T> insert_params(ad::Tape<T>& tp, const ModelParams& p, bool requires_grad) {
    std::vector<ad::Var> vars;
    for (const auto* t : p.tensors())
        vars.push_back(tp.input(t->template cast<T>(), requires_grad));
    return group_vars<T>(p.hp, vars);
}

// ELU hidden layers, linear output.
template <typename T>
ad::Var mlp_forward(ad::Tape<T>& tp, const typename TapedModel<T>::Mlp& m, ad::Var x) {
    ad::Var h = x;
    for (std::size_t i = 0; i < m.w.size(); ++i) {
        h = tp.add(tp.matmul(h, m.w[i]), m.b[i]);
        if (i + 1 < m.w.size()) h = tp.elu(h);
    }
    return h;
}

template <typename T>
struct GaussVars {
    ad::Var mu, sigma;
};

// head output [B, 2*d_z] -> mu and sigma = softplus(pre) + min_std
template <typename T>
GaussVars<T> gaussian_head(ad::Tape<T>& tp, ad::Var raw, int d_z, T min_std) {
    GaussVars<T> g;
    g.mu = tp.slice(raw, 0, d_z);
    g.sigma = tp.affine(tp.softplus(tp.slice(raw, d_z, d_z)), T(1), min_std);
    return g;
}

}  // namespace rssm_detail

// ---- single-component forwards (shared by the loss graph and rollout) ------

template <typename T>
ad::Var encode_state(ad::Tape<T>& tp, const TapedModel<T>& m, ad::Var s) {
    return rssm_detail::mlp_forward<T>(tp, m.enc, s);
}

template <typename T>
ad::Var encode_action(ad::Tape<T>& tp, const TapedModel<T>& m, const std::vector<int>& grasps,
                      ad::Var displacement) {
    ad::Var e = tp.embedding_lookup(m.embed, grasps);
    ad::Var d = rssm_detail::mlp_forward<T>(tp, m.disp, displacement);
    return rssm_detail::mlp_forward<T>(tp, m.fuse, tp.concat(e, d));
}

template <typename T>
ad::Var recurrent_step(ad::Tape<T>& tp, const TapedModel<T>& m, ad::Var h, ad::Var z, ad::Var a) {
    return ad::gru_cell(tp, tp.concat(z, a), h, m.gru);
}

template <typename T>
rssm_detail::GaussVars<T> prior(ad::Tape<T>& tp, const TapedModel<T>& m, const Hyperparams& hp,
                                ad::Var h) {
    ad::Var raw = rssm_detail::mlp_forward<T>(tp, m.prior_head, h);
    return rssm_detail::gaussian_head<T>(tp, raw, static_cast<int>(hp.d_z),
                                         static_cast<T>(hp.min_std));
}

template <typename T>
rssm_detail::GaussVars<T> posterior(ad::Tape<T>& tp, const TapedModel<T>& m,
                                    const Hyperparams& hp, ad::Var h, ad::Var e) {
    ad::Var raw = rssm_detail::mlp_forward<T>(tp, m.post_head, tp.concat(h, e));
    return rssm_detail::gaussian_head<T>(tp, raw, static_cast<int>(hp.d_z),
                                         static_cast<T>(hp.min_std));
}

// Both decoders are residual heads: they emit a state-width delta that is
// added to the previous state (skip connection). A zero decoder therefore
// reproduces the previous state exactly, and learning starts from that
// baseline instead of having to regenerate the whole chain from latent.
// The small fixed output gain keeps the effective per-update delta change
// small under Adam (whose per-weight steps ignore the loss scale), so the
// heads cannot blow past the persistence baseline early in training.
template <typename T>
ad::Var decode_recon(ad::Tape<T>& tp, const TapedModel<T>& m, const Hyperparams& hp, ad::Var h,
                     ad::Var z) {
    return tp.affine(rssm_detail::mlp_forward<T>(tp, m.recon, tp.concat(h, z)),
                     static_cast<T>(hp.decoder_gain), T(0));
}

template <typename T>
ad::Var decode_pred(ad::Tape<T>& tp, const TapedModel<T>& m, const Hyperparams& hp, ad::Var h,
                    ad::Var z) {
    return tp.affine(rssm_detail::mlp_forward<T>(tp, m.pred, tp.concat(h, z)),
                     static_cast<T>(hp.decoder_gain), T(0));
}

// ---- sequence loss ----------------------------------------------------------

template <typename T>
struct LossVars {
    ad::Var total, recon, pred, kl;
};

namespace rssm_detail {

// The state loss is measured in decoded Cartesian space: a flat-space MSE on
// quaternion components does not track positional error (an orientation error
// on an early link sweeps the whole downstream rope; correlated component
// errors can decode much better or worse than independent ones), and models
// trained on it beat the flat metric while losing in millimetres. The
// forward kinematics of decode_chain are therefore replicated on the tape so
// both decoders are trained directly on segment positions, expressed in
// link-length units to keep the loss scale O(1) against beta*KL.

constexpr double kFkEps = 1e-12;  // keeps rsqrt finite for degenerate inputs

// C++ mirror of the on-tape kinematics below; used to build the (constant)
// target position tensors. Output: 3L values in link-length units.
inline void fk_positions(const double* v, std::size_t L, double link_length, double* out) {
    double px = v[0] / link_length, py = v[1] / link_length, pz = v[2] / link_length;
    double dx = 1.0, dy = 0.0, dz = 0.0;
    out[0] = px; out[1] = py; out[2] = pz;
    for (std::size_t j = 0; j + 1 < L; ++j) {
        const double* q = v + 3 + 4 * j;
        double inv = 1.0 / std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3] +
                                     kFkEps);
        double qw = q[0] * inv, qx = q[1] * inv, qy = q[2] * inv, qz = q[3] * inv;
        double tx = 2.0 * (qy * dz - qz * dy);
        double ty = 2.0 * (qz * dx - qx * dz);
        double tz = 2.0 * (qx * dy - qy * dx);
        double nx = dx + qw * tx + (qy * tz - qz * ty);
        double ny = dy + qw * ty + (qz * tx - qx * tz);
        double nz = dz + qw * tz + (qx * ty - qy * tx);
        double dinv = 1.0 / std::sqrt(nx * nx + ny * ny + nz * nz + kFkEps);
        dx = nx * dinv; dy = ny * dinv; dz = nz * dinv;
        px += dx; py += dy; pz += dz;
        out[3 * (j + 1)] = px; out[3 * (j + 1) + 1] = py; out[3 * (j + 1) + 2] = pz;
    }
}

// Differentiable forward kinematics: flattened states [B, 3+4(L-1)] ->
// segment positions [B, 3L] in link-length units, matching decode_chain
// (normalize each relative quaternion, rotate the running direction,
// renormalize, accumulate).
template <typename T>
ad::Var decode_positions(ad::Tape<T>& tp, const Hyperparams& hp, ad::Var flat) {
    const int L = static_cast<int>(hp.segment_count);
    auto neg = [&](ad::Var v) { return tp.affine(v, T(-1), T(0)); };
    auto sub = [&](ad::Var a, ad::Var b) { return tp.add(a, neg(b)); };
    ad::Var base = tp.affine(tp.slice(flat, 0, 3), T(1) / static_cast<T>(hp.link_length), T(0));
    ad::Var px = tp.slice(base, 0, 1), py = tp.slice(base, 1, 1), pz = tp.slice(base, 2, 1);
    const int B = tp.value(flat).rows;
    ad::Tensor<T> one_t(B, 1), zero_t(B, 1);
    for (auto& v : one_t.data) v = T(1);
    ad::Var dx = tp.input(std::move(one_t), false);
    ad::Var dy = tp.input(zero_t, false);
    ad::Var dz = tp.input(std::move(zero_t), false);
    ad::Var out = tp.concat(tp.concat(px, py), pz);
    for (int j = 0; j + 1 < L; ++j) {
        ad::Var qw = tp.slice(flat, 3 + 4 * j, 1), qx = tp.slice(flat, 4 + 4 * j, 1),
                qy = tp.slice(flat, 5 + 4 * j, 1), qz = tp.slice(flat, 6 + 4 * j, 1);
        ad::Var n2 = tp.add(tp.add(tp.mul(qw, qw), tp.mul(qx, qx)),
                            tp.add(tp.mul(qy, qy), tp.mul(qz, qz)));
        ad::Var inv = tp.rsqrt(tp.affine(n2, T(1), static_cast<T>(kFkEps)));
        qw = tp.mul(qw, inv); qx = tp.mul(qx, inv); qy = tp.mul(qy, inv); qz = tp.mul(qz, inv);
        // d' = d + 2 w (u x d) + u x (2 u x d), u = (qx, qy, qz)
        ad::Var tx = tp.affine(sub(tp.mul(qy, dz), tp.mul(qz, dy)), T(2), T(0));
        ad::Var ty = tp.affine(sub(tp.mul(qz, dx), tp.mul(qx, dz)), T(2), T(0));
        ad::Var tz = tp.affine(sub(tp.mul(qx, dy), tp.mul(qy, dx)), T(2), T(0));
        ad::Var nx = tp.add(tp.add(dx, tp.mul(qw, tx)), sub(tp.mul(qy, tz), tp.mul(qz, ty)));
        ad::Var ny = tp.add(tp.add(dy, tp.mul(qw, ty)), sub(tp.mul(qz, tx), tp.mul(qx, tz)));
        ad::Var nz = tp.add(tp.add(dz, tp.mul(qw, tz)), sub(tp.mul(qx, ty), tp.mul(qy, tx)));
        ad::Var dn2 = tp.add(tp.add(tp.mul(nx, nx), tp.mul(ny, ny)), tp.mul(nz, nz));
        ad::Var dinv = tp.rsqrt(tp.affine(dn2, T(1), static_cast<T>(kFkEps)));
        dx = tp.mul(nx, dinv); dy = tp.mul(ny, dinv); dz = tp.mul(nz, dinv);
        px = tp.add(px, dx); py = tp.add(py, dy); pz = tp.add(pz, dz);
        out = tp.concat(out, tp.concat(tp.concat(px, py), pz));
    }
    return out;
}

}  // namespace rssm_detail

// One graph over a batch of windows. Per step t in 0..n-2: posterior
// reconstruction of s_t, KL(posterior || prior at the same h_t), then the GRU
// advances with (z_t, a_t) and the prior at h_{t+1} drives the prediction of
// s_{t+1}. Both reconstruction and prediction are scored in decoded segment
// positions (link-length units) via the on-tape forward kinematics. post_noise/pred_noise hold n-1 standard-normal tensors [B, d_z]
// each (zeros for the deterministic validation path).
template <typename T>
LossVars<T> sequence_loss_graph(ad::Tape<T>& tp, const TapedModel<T>& m, const Hyperparams& hp,
                                const Batch& batch, const std::vector<ad::Tensor<T>>& post_noise,
                                const std::vector<ad::Tensor<T>>& pred_noise) {
    const int B = static_cast<int>(batch.batch_size);
    const int n = static_cast<int>(batch.window);
    const int D = static_cast<int>(batch.dim);
    if (batch.dim != hp.state_dim()) throw ShapeError("sequence_loss: state width mismatch");
    if (post_noise.size() != static_cast<std::size_t>(n - 1) ||
        pred_noise.size() != static_cast<std::size_t>(n - 1))
        throw ShapeError("sequence_loss: need n-1 noise tensors per path");

    // States are viewed relative to the window's first base position: the
    // base coordinates random-walk across the workspace over a trajectory,
    // and absolute placement carries no dynamical information. Rollout code
    // applies the same centering and restores the offset after decoding.
    auto state_at = [&](int t) {
        ad::Tensor<T> s(B, D);
        for (int w = 0; w < B; ++w) {
            std::size_t row = (static_cast<std::size_t>(w) * n + t) * D;
            std::size_t row0 = static_cast<std::size_t>(w) * n * D;
            for (int c = 0; c < D; ++c) {
                T v = static_cast<T>(batch.states[row + c]);
                if (c < 3) v -= static_cast<T>(batch.states[row0 + c]);
                s.at(w, c) = v;
            }
        }
        return tp.input(std::move(s), false);
    };
    // reconstruction/prediction targets in decoded-position space (link
    // units), same centering as state_at; constants on the tape
    const int P = 3 * static_cast<int>(hp.segment_count);
    auto positions_at = [&](int t) {
        ad::Tensor<T> p(B, P);
        std::vector<double> flat(static_cast<std::size_t>(D)), pts(static_cast<std::size_t>(P));
        for (int w = 0; w < B; ++w) {
            std::size_t row = (static_cast<std::size_t>(w) * n + t) * D;
            std::size_t row0 = static_cast<std::size_t>(w) * n * D;
            for (int c = 0; c < D; ++c) {
                flat[static_cast<std::size_t>(c)] =
                    batch.states[row + c] - (c < 3 ? batch.states[row0 + c] : 0.0);
            }
            rssm_detail::fk_positions(flat.data(), hp.segment_count, hp.link_length, pts.data());
            for (int c = 0; c < P; ++c) p.at(w, c) = static_cast<T>(pts[static_cast<std::size_t>(c)]);
        }
        return tp.input(std::move(p), false);
    };
    auto action_at = [&](int t, std::vector<int>& grasps) {
        grasps.resize(B);
        ad::Tensor<T> d(B, 2);
        for (int w = 0; w < B; ++w) {
            std::size_t idx = static_cast<std::size_t>(w) * (n - 1) + t;
            grasps[w] = static_cast<int>(batch.grasps[idx]);
            d.at(w, 0) = static_cast<T>(batch.displacements[idx * 2]);
            d.at(w, 1) = static_cast<T>(batch.displacements[idx * 2 + 1]);
        }
        return tp.input(std::move(d), false);
    };

    ad::Var h = tp.input(ad::Tensor<T>(B, static_cast<int>(hp.d_rnn)), false);
    ad::Var recon_acc = tp.input(ad::Tensor<T>(1, 1), false);
    ad::Var pred_acc = tp.input(ad::Tensor<T>(1, 1), false);
    ad::Var kl_acc = tp.input(ad::Tensor<T>(1, 1), false);

    ad::Var s_prev{};
    for (int t = 0; t + 1 < n; ++t) {
        ad::Var s_t = state_at(t);
        ad::Var e_t = encode_state(tp, m, s_t);
        auto post = posterior(tp, m, hp, h, e_t);
        ad::Var zn = tp.input(post_noise[t], false);
        ad::Var z_t = tp.reparameterize(post.mu, post.sigma, zn);

        // residual decoding: the head predicts the change from the previous
        // state (the window's first state is its own skip input)
        ad::Var skip = (t == 0) ? s_t : s_prev;
        recon_acc = tp.add(
            recon_acc,
            tp.mean_squared_error(
                rssm_detail::decode_positions(tp, hp,
                                              tp.add(skip, decode_recon(tp, m, hp, h, z_t))),
                positions_at(t)));

        auto pri = prior(tp, m, hp, h);
        auto freeze = [&](ad::Var v) { return tp.input(tp.value(v), false); };
        // per-step floor: below free_nats the posterior-facing term becomes
        // the constant floor and contributes no gradient
        auto floored = [&](ad::Var v) {
            T m_ = tp.value(v).data[0] / static_cast<T>(B);
            if (m_ < static_cast<T>(hp.free_nats))
                return tp.input(
                    ad::Tensor<T>(1, 1, {static_cast<T>(hp.free_nats) * static_cast<T>(B)}),
                    false);
            return v;
        };
        ad::Var kl;
        if (hp.kl_balance > 0.0) {
            // balanced KL: the prior chases the frozen posterior at weight
            // alpha (never floored), the posterior feels the rest
            ad::Var lhs = tp.gaussian_kl(freeze(post.mu), freeze(post.sigma), pri.mu, pri.sigma);
            ad::Var rhs = floored(
                tp.gaussian_kl(post.mu, post.sigma, freeze(pri.mu), freeze(pri.sigma)));
            T a = static_cast<T>(hp.kl_balance);
            kl = tp.add(tp.affine(lhs, a, T(0)), tp.affine(rhs, T(1) - a, T(0)));
        } else {
            kl = floored(tp.gaussian_kl(post.mu, post.sigma, pri.mu, pri.sigma));
        }
        kl_acc = tp.add(kl_acc, kl);

        std::vector<int> grasps;
        ad::Var disp = action_at(t, grasps);
        ad::Var a_t = encode_action(tp, m, grasps, disp);
        h = recurrent_step(tp, m, h, z_t, a_t);

        auto pri_next = prior(tp, m, hp, h);
        ad::Var pn = tp.input(pred_noise[t], false);
        ad::Var z_hat = tp.reparameterize(pri_next.mu, pri_next.sigma, pn);
        pred_acc = tp.add(
            pred_acc,
            tp.mean_squared_error(
                rssm_detail::decode_positions(tp, hp,
                                              tp.add(s_t, decode_pred(tp, m, hp, h, z_hat))),
                positions_at(t + 1)));
        s_prev = s_t;
    }

    T steps = static_cast<T>(n - 1);
    LossVars<T> out;
    out.recon = tp.affine(recon_acc, T(1) / steps, T(0));
    out.pred = tp.affine(pred_acc, T(1) / steps, T(0));
    out.kl = tp.affine(kl_acc, T(1) / (steps * static_cast<T>(B)), T(0));
    out.total = tp.add(tp.add(out.recon, out.pred),
                       tp.affine(out.kl, static_cast<T>(hp.beta), T(0)));
    return out;
}

struct LossBreakdown {
    double total = 0, recon = 0, pred = 0, kl = 0;
};

inline std::vector<ad::Tensor<float>> make_noise(std::size_t count, int B, int d_z, Rng* rng) {
    std::vector<ad::Tensor<float>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        ad::Tensor<float> t(B, d_z);
        if (rng)
            for (auto& v : t.data) v = static_cast<float>(rng->next_normal());
        out.push_back(std::move(t));
    }
    return out;
}

// forward-only evaluation (no gradients); rng = nullptr gives the
// deterministic noise-free path used for validation
inline LossBreakdown sequence_loss(const ModelParams& params, const Batch& batch, Rng* rng,
                                   const Hyperparams* hp_override = nullptr) {
    ad::Tape<float> tp;
    auto m = rssm_detail::insert_params(tp, params, false);
    const Hyperparams& hp = hp_override ? *hp_override : params.hp;
    auto post_noise = make_noise(batch.window - 1, static_cast<int>(batch.batch_size),
                                 static_cast<int>(hp.d_z), rng);
    auto pred_noise = make_noise(batch.window - 1, static_cast<int>(batch.batch_size),
                                 static_cast<int>(hp.d_z), rng);
    auto lv = sequence_loss_graph(tp, m, hp, batch, post_noise, pred_noise);
    return {static_cast<double>(tp.value(lv.total).data[0]),
            static_cast<double>(tp.value(lv.recon).data[0]),
            static_cast<double>(tp.value(lv.pred).data[0]),
            static_cast<double>(tp.value(lv.kl).data[0])};
}

// ---- checkpoints ------------------------------------------------------------

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["hyperparams"] = params.hp;
    j["parameter_count"] = params.parameter_count();
    std::string header = j.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_checkpoint: cannot write " + path.string());
    os.write("RSSM", 4);
    data_detail::write_u32(os, static_cast<std::uint32_t>(header.size()));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto* t : params.tensors())
        for (float v : t->data) data_detail::write_f32(os, v);
    if (!os) throw IoError("save_checkpoint: write failure on " + path.string());
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_checkpoint: missing " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RSSM", 4) != 0)
        throw CorruptCheckpoint("load_checkpoint: bad magic");
    std::uint32_t hlen;
    try {
        hlen = data_detail::read_u32(is);
    } catch (const CorruptDataset&) {
        throw CorruptCheckpoint("load_checkpoint: truncated header");
    }
    std::string header(hlen, '\0');
    is.read(header.data(), hlen);
    if (!is) throw CorruptCheckpoint("load_checkpoint: truncated header");
    Hyperparams hp;
    std::size_t expect_count = 0;
    try {
        nlohmann::json j = nlohmann::json::parse(header);
        if (j.at("format_version").get<int>() != 1)
            throw CorruptCheckpoint("load_checkpoint: unsupported version");
        hp = j.at("hyperparams").get<Hyperparams>();
        expect_count = j.at("parameter_count").get<std::size_t>();
    } catch (const nlohmann::json::exception&) {
        throw CorruptCheckpoint("load_checkpoint: malformed header");
    }
    Rng dummy(0);
    ModelParams p = ModelParams::init(hp, dummy);
    if (p.parameter_count() != expect_count)
        throw CorruptCheckpoint("load_checkpoint: parameter count mismatch");
    for (auto* t : p.tensors())
        for (auto& v : t->data) {
            try {
                std::uint32_t bits = data_detail::read_u32(is);
                std::memcpy(&v, &bits, 4);
            } catch (const CorruptDataset&) {
                throw CorruptCheckpoint("load_checkpoint: truncated weights");
            }
        }
    if (is.peek() != std::char_traits<char>::eof())
        throw CorruptCheckpoint("load_checkpoint: trailing bytes");
    return p;
}

// ---- training loop ----------------------------------------------------------

struct EpochLog {
    std::size_t epoch = 0;
    double total = 0, recon = 0, pred = 0, kl = 0;
    double val_total = 0;
    double wall_seconds = 0;
};

struct TrainResult {
    ModelParams best;
    std::vector<EpochLog> log;
    std::size_t best_epoch = 0;
    double best_val = 0;
};

namespace rssm_detail {

// deterministic, non-overlapping validation windows
inline std::vector<Batch> validation_batches(BatchSampler& sampler,
                                             const std::vector<Trajectory>& trajs,
                                             const std::vector<std::size_t>& val,
                                             const Hyperparams& hp) {
    std::vector<Batch> out;
    const std::size_t n = hp.seq_len;
    const std::size_t n_states = trajs[0].states.size();
    const std::size_t D = sampler.flat_dim();
    Batch cur;
    auto flush = [&] {
        if (cur.batch_size > 0) out.push_back(std::move(cur)), cur = Batch{};
    };
    for (std::size_t k : val)
        for (std::size_t start = 0; start + n <= n_states; start += n) {
            if (cur.batch_size == 0) {
                cur.window = n;
                cur.dim = D;
            }
            const auto& flat = sampler.encoded(k);
            for (std::size_t s = 0; s < n; ++s)
                cur.states.insert(cur.states.end(), flat[start + s].begin(),
                                  flat[start + s].end());
            for (std::size_t s = 0; s + 1 < n; ++s) {
                const auto& a = trajs[k].actions[start + s];
                cur.grasps.push_back(static_cast<std::uint32_t>(a.grasp_index));
                cur.displacements.push_back(static_cast<float>(a.dx));
                cur.displacements.push_back(static_cast<float>(a.dy));
            }
            if (++cur.batch_size == hp.batch) flush();
        }
    flush();
    if (out.empty()) throw EmptyDataset("train: validation split produced no windows");
    return out;
}

}  // namespace rssm_detail

inline TrainResult train(const std::vector<Trajectory>& trajectories,
                         const DatasetManifest& manifest, const Hyperparams& hp_in,
                         std::uint64_t seed, std::ostream* csv = nullptr) {
    Hyperparams hp = hp_in;
    hp.link_length = manifest.link_length;  // loss lever arms follow the data geometry
    hp.validate();
    if (manifest.train.empty() || manifest.val.empty())
        throw EmptyDataset("train: dataset has empty train or validation split");
    if (hp.seq_len > manifest.horizon + 1)
        throw WindowTooLong("train: seq_len exceeds trajectory length");

    BatchSampler sampler(trajectories, manifest.link_length);
    auto val_batches = rssm_detail::validation_batches(sampler, trajectories, manifest.val, hp);

    Rng init_rng = Rng::stream(seed, 0);
    Rng batch_rng = Rng::stream(seed, 1);
    Rng noise_rng = Rng::stream(seed, 2);
    ModelParams params = ModelParams::init(hp, init_rng);

    const std::size_t windows_per_traj = manifest.horizon + 2 - hp.seq_len;
    const std::size_t batches_per_epoch =
        std::max<std::size_t>(1, manifest.train.size() * windows_per_traj / hp.batch);

    std::vector<ad::AdamMoments<float>> moments(params.tensors().size());
    long adam_t = 0;

    TrainResult result;
    result.best_val = std::numeric_limits<double>::infinity();
    std::size_t since_best = 0;
    if (csv) (*csv) << "epoch,L_total,L_recon,L_pred,L_KL,val_L_total,wall_seconds\n";
    auto t_start = std::chrono::steady_clock::now();

    // validation uses no KL floor so epoch scores stay comparable while the
    // training floor anneals; it is the honest recon + pred + beta*KL
    Hyperparams val_hp = hp;
    val_hp.free_nats = 0.0;

    for (std::size_t epoch = 1; epoch <= hp.max_epochs; ++epoch) {
        Hyperparams ehp = hp;
        if (hp.free_nats_init > 0.0 && hp.free_nats_anneal > 0) {
            double f = std::min(1.0, static_cast<double>(epoch - 1) /
                                         static_cast<double>(hp.free_nats_anneal));
            ehp.free_nats = hp.free_nats_init + (hp.free_nats - hp.free_nats_init) * f;
        }
        LossBreakdown mean;
        for (std::size_t bi = 0; bi < batches_per_epoch; ++bi) {
            Batch batch = sampler.sample(manifest.train, hp.batch, hp.seq_len, batch_rng);
            ad::Tape<float> tp;
            auto m = rssm_detail::insert_params(tp, params, true);
            auto post_noise = make_noise(hp.seq_len - 1, static_cast<int>(hp.batch),
                                         static_cast<int>(hp.d_z), &noise_rng);
            auto pred_noise = make_noise(hp.seq_len - 1, static_cast<int>(hp.batch),
                                         static_cast<int>(hp.d_z), &noise_rng);
            auto lv = sequence_loss_graph(tp, m, ehp, batch, post_noise, pred_noise);
            tp.backward(lv.total);

            auto ptrs = params.tensors();
            // gradients live on the first |params| tape vars, in insertion order
            double norm_sq = 0;
            for (std::size_t i = 0; i < ptrs.size(); ++i)
                for (float g : tp.grad(static_cast<ad::Var>(i)).data)
                    norm_sq += static_cast<double>(g) * g;
            float scale = 1.0f;
            double gnorm = std::sqrt(norm_sq);
            if (gnorm > hp.grad_clip) scale = static_cast<float>(hp.grad_clip / gnorm);
            ++adam_t;
            for (std::size_t i = 0; i < ptrs.size(); ++i) {
                ad::Tensor<float> g = tp.grad(static_cast<ad::Var>(i));
                if (scale != 1.0f)
                    for (auto& v : g.data) v *= scale;
                ad::adam_step(*ptrs[i], g, moments[i], adam_t, static_cast<float>(hp.lr));
            }

            mean.total += static_cast<double>(tp.value(lv.total).data[0]);
            mean.recon += static_cast<double>(tp.value(lv.recon).data[0]);
            mean.pred += static_cast<double>(tp.value(lv.pred).data[0]);
            mean.kl += static_cast<double>(tp.value(lv.kl).data[0]);
        }
        mean.total /= static_cast<double>(batches_per_epoch);
        mean.recon /= static_cast<double>(batches_per_epoch);
        mean.pred /= static_cast<double>(batches_per_epoch);
        mean.kl /= static_cast<double>(batches_per_epoch);

        double val_total = 0;
        std::size_t val_windows = 0;
        for (const Batch& vb : val_batches) {
            val_total += sequence_loss(params, vb, nullptr, &val_hp).total * vb.batch_size;
            val_windows += vb.batch_size;
        }
        val_total /= static_cast<double>(val_windows);

        EpochLog log;
        log.epoch = epoch;
        log.total = mean.total;
        log.recon = mean.recon;
        log.pred = mean.pred;
        log.kl = mean.kl;
        log.val_total = val_total;
        log.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        result.log.push_back(log);
        if (csv)
            (*csv) << epoch << ',' << mean.total << ',' << mean.recon << ',' << mean.pred << ','
                   << mean.kl << ',' << val_total << ',' << log.wall_seconds << std::endl;

        if (val_total < result.best_val) {
            result.best_val = val_total;
            result.best_epoch = epoch;
            result.best = params;
            since_best = 0;
        } else if (++since_best > hp.patience) {
            break;
        }
    }
    if (result.log.empty() || result.best_epoch == 0)
        throw EmptyDataset("train: no epochs completed");
    return result;
}

}  // namespace ropelab
