#pragma once

#include <chrono>
#include <cmath>
#include <memory>
#include <ostream>
#include <vector>

#include "ropelab/core.hpp"
#include "ropelab/quatchain.hpp"
#include "ropelab/rssm.hpp"
#include "ropelab/sim.hpp"

namespace ropelab {

struct LatentState {
    std::vector<float> h, z;
    // Base position of the first warmup state. The model works in a frame
    // centered on it (matching training); decoded predictions add it back.
    Vec3 offset{0.0, 0.0, 0.0};
    // Last observed state in the centered frame; the residual decoder adds
    // its predicted delta to this (and to its own running prediction after).
    std::vector<float> prev;
};

namespace rollout_detail {

using FTensor = ad::Tensor<float>;

// Forward-only evaluation of the model components on raw tensors (no tape).
// Uses the same kernels and operation order as the tape path, so outputs are
// bit-identical to it; tests assert that equivalence.
class FastForward {
  public:
    explicit FastForward(const ModelParams& p) : p_(&p) {}

    FTensor mlp(const MlpParams& m, FTensor x) const {
        for (std::size_t i = 0; i < m.w.size(); ++i) {
            FTensor y(x.rows, m.w[i].cols);
            ad::detail::matmul_accum(x, m.w[i], y, false, false);
            for (int r = 0; r < y.rows; ++r)
                for (int c = 0; c < y.cols; ++c) y.at(r, c) += m.b[i].at(0, c);
            if (i + 1 < m.w.size())
                for (auto& v : y.data) v = v > 0.0f ? v : std::exp(v) - 1.0f;
            x = std::move(y);
        }
        return x;
    }

    FTensor encode_state(const FTensor& s) const { return mlp(p_->enc, s); }

    FTensor encode_action(const PickPlaceAction& a) const {
        if (a.grasp_index >= p_->hp.segment_count)
            throw InvalidGrasp("encode_action: grasp index out of range");
        FTensor d(1, 2);
        d.data = {static_cast<float>(a.dx), static_cast<float>(a.dy)};
        FTensor dv = mlp(p_->disp, d);
        FTensor cat(1, static_cast<int>(p_->hp.link_embed_dim) + dv.cols);
        for (int c = 0; c < static_cast<int>(p_->hp.link_embed_dim); ++c)
            cat.at(0, c) = p_->embed.at(static_cast<int>(a.grasp_index), c);
        for (int c = 0; c < dv.cols; ++c)
            cat.at(0, static_cast<int>(p_->hp.link_embed_dim) + c) = dv.at(0, c);
        return mlp(p_->fuse, cat);
    }

    FTensor gru(const FTensor& x, const FTensor& h) const {
        auto cat2 = [](const FTensor& a, const FTensor& b) {
            FTensor o(1, a.cols + b.cols);
            std::copy(a.data.begin(), a.data.end(), o.data.begin());
            std::copy(b.data.begin(), b.data.end(), o.data.begin() + a.cols);
            return o;
        };
        auto affine_sig = [](const FTensor& in, const FTensor& w, const FTensor& b) {
            FTensor o(1, w.cols);
            ad::detail::matmul_accum(in, w, o, false, false);
            for (int c = 0; c < o.cols; ++c)
                o.data[c] = 1.0f / (1.0f + std::exp(-(o.data[c] + b.at(0, c))));
            return o;
        };
        FTensor xh = cat2(x, h);
        FTensor r = affine_sig(xh, p_->gru_wr, p_->gru_br);
        FTensor u = affine_sig(xh, p_->gru_wu, p_->gru_bu);
        FTensor rh = h;
        for (int c = 0; c < h.cols; ++c) rh.data[c] *= r.data[c];
        FTensor xrh = cat2(x, rh);
        FTensor cand(1, p_->gru_wc.cols);
        ad::detail::matmul_accum(xrh, p_->gru_wc, cand, false, false);
        for (int c = 0; c < cand.cols; ++c)
            cand.data[c] = std::tanh(cand.data[c] + p_->gru_bc.at(0, c));
        FTensor out(1, h.cols);
        for (int c = 0; c < h.cols; ++c)
            out.data[c] = (1.0f - u.data[c]) * cand.data[c] + u.data[c] * h.data[c];
        return out;
    }

    // (mu, sigma) with sigma = softplus(pre) + min_std
    std::pair<FTensor, FTensor> gaussian(const MlpParams& head, const FTensor& in) const {
        FTensor raw = mlp(head, in);
        int dz = raw.cols / 2;
        FTensor mu(1, dz), sigma(1, dz);
        for (int c = 0; c < dz; ++c) {
            mu.data[c] = raw.data[c];
            float v = raw.data[dz + c];
            sigma.data[c] = std::max(v, 0.0f) + std::log1p(std::exp(-std::abs(v))) +
                            static_cast<float>(p_->hp.min_std);
        }
        return {mu, sigma};
    }

    FTensor cat2(const FTensor& a, const FTensor& b) const {
        FTensor o(1, a.cols + b.cols);
        std::copy(a.data.begin(), a.data.end(), o.data.begin());
        std::copy(b.data.begin(), b.data.end(), o.data.begin() + a.cols);
        return o;
    }

    const ModelParams& params() const { return *p_; }

  private:
    const ModelParams* p_;
};

inline FTensor to_tensor(const std::vector<float>& v) {
    FTensor t(1, static_cast<int>(v.size()));
    t.data = v;
    return t;
}

}  // namespace rollout_detail

// Ground-truth grounding: runs the posterior pathway (noise = 0) over
// `warmup` states with the interleaved actions, returning the final latent.
inline LatentState warmup(const ModelParams& model,
                          const std::vector<std::vector<float>>& states,
                          const std::vector<PickPlaceAction>& actions) {
    if (states.empty() || actions.size() + 1 != states.size())
        throw ProtocolError("warmup: need k states and k-1 interleaved actions");
    rollout_detail::FastForward f(model);
    const Hyperparams& hp = model.hp;
    rollout_detail::FTensor h(1, static_cast<int>(hp.d_rnn));
    rollout_detail::FTensor z(1, static_cast<int>(hp.d_z));
    LatentState out;
    for (std::size_t t = 0; t < states.size(); ++t) {
        if (states[t].size() != hp.state_dim())
            throw ShapeError("warmup: state width mismatch");
        if (t > 0) {
            rollout_detail::FTensor a = f.encode_action(actions[t - 1]);
            h = f.gru(f.cat2(z, a), h);
        }
        // same frame as training: base relative to the first warmup state
        std::vector<float> centered = states[t];
        for (std::size_t c = 0; c < 3; ++c) centered[c] -= states[0][c];
        auto e = f.encode_state(rollout_detail::to_tensor(centered));
        auto [mu, sigma] = f.gaussian(model.post_head, f.cat2(h, e));
        z = mu;  // noise = 0
        out.prev = std::move(centered);
    }
    out.h = h.data;
    out.z = z.data;
    out.offset = {static_cast<double>(states[0][0]), static_cast<double>(states[0][1]),
                  static_cast<double>(states[0][2])};
    return out;
}

// Open-loop latent rollout: actions only, prior means, never re-encodes its
// own predictions. Every returned state comes out of decode_chain, so link
// lengths are exact by construction.
inline std::vector<RopeState> open_loop(const ModelParams& model, LatentState latent,
                                        const std::vector<PickPlaceAction>& actions,
                                        std::size_t horizon, double link_length) {
    if (actions.size() != horizon)
        throw ProtocolError("open_loop: need exactly `horizon` actions");
    rollout_detail::FastForward f(model);
    const Hyperparams& hp = model.hp;
    rollout_detail::FTensor h = rollout_detail::to_tensor(latent.h);
    rollout_detail::FTensor z = rollout_detail::to_tensor(latent.z);
    if (latent.prev.size() != hp.state_dim())
        throw ProtocolError("open_loop: latent state is missing the warmup state");
    std::vector<float> prev = latent.prev;  // running prediction, centered frame
    std::vector<RopeState> out;
    out.reserve(horizon);
    for (std::size_t t = 0; t < horizon; ++t) {
        rollout_detail::FTensor a = f.encode_action(actions[t]);
        h = f.gru(f.cat2(z, a), h);
        auto [mu, sigma] = f.gaussian(model.prior_head, h);
        z = mu;
        rollout_detail::FTensor delta = f.mlp(model.pred, f.cat2(h, z));
        const float gain = static_cast<float>(hp.decoder_gain);
        for (std::size_t i = 0; i < prev.size(); ++i) prev[i] += gain * delta.data[i];
        // keep the running flat state on the unit-quaternion manifold so the
        // accumulated deltas cannot drift the representation
        for (std::size_t j = 3; j + 3 < prev.size(); j += 4) {
            float n2 = prev[j] * prev[j] + prev[j + 1] * prev[j + 1] +
                       prev[j + 2] * prev[j + 2] + prev[j + 3] * prev[j + 3];
            if (n2 > 1e-12f) {
                float inv = 1.0f / std::sqrt(n2);
                for (int c = 0; c < 4; ++c) prev[j + c] *= inv;
            }
        }
        std::vector<double> v(prev.begin(), prev.end());
        QuatChainState qcs = unflatten(v, hp.segment_count, link_length).state;
        qcs.base += latent.offset;  // back to world coordinates
        out.push_back(decode_chain(qcs));
    }
    return out;
}

inline double rmse(const RopeState& pred, const RopeState& truth) {
    if (pred.positions.size() != truth.positions.size())
        throw ShapeError("rmse: segment counts differ");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.positions.size(); ++i) {
        Vec3 d = pred.positions[i] - truth.positions[i];
        acc += dot(d, d);
    }
    return std::sqrt(acc / static_cast<double>(pred.positions.size()));
}

// ---- evaluation harness -----------------------------------------------------

// A predictor produces H states following a warmup prefix of a trajectory.
class Predictor {
  public:
    virtual ~Predictor() = default;
    virtual std::vector<RopeState> rollout(const Trajectory& traj, std::size_t start,
                                           std::size_t warmup_len, std::size_t horizon,
                                           double link_length) = 0;
};

class RssmPredictor : public Predictor {
  public:
    explicit RssmPredictor(ModelParams model) : model_(std::move(model)) {}

    std::vector<RopeState> rollout(const Trajectory& traj, std::size_t start,
                                   std::size_t warmup_len, std::size_t horizon,
                                   double link_length) override {
        std::vector<std::vector<float>> states;
        std::vector<PickPlaceAction> warm_actions;
        for (std::size_t t = 0; t < warmup_len; ++t) {
            auto v = flatten(encode_chain(traj.states[start + t], link_length));
            states.emplace_back(v.begin(), v.end());
            if (t + 1 < warmup_len) warm_actions.push_back(traj.actions[start + t]);
        }
        LatentState latent = warmup(model_, states, warm_actions);
        std::vector<PickPlaceAction> future(
            traj.actions.begin() + static_cast<std::ptrdiff_t>(start + warmup_len - 1),
            traj.actions.begin() + static_cast<std::ptrdiff_t>(start + warmup_len - 1 + horizon));
        return open_loop(model_, latent, future, horizon, link_length);
    }

    const ModelParams& model() const { return model_; }

  private:
    ModelParams model_;
};

// Repeats the last warmup state forever; the reference lower bar.
class PersistencePredictor : public Predictor {
  public:
    std::vector<RopeState> rollout(const Trajectory& traj, std::size_t start,
                                   std::size_t warmup_len, std::size_t horizon,
                                   double) override {
        return std::vector<RopeState>(horizon, traj.states[start + warmup_len - 1]);
    }
};

struct RolloutReport {
    std::size_t horizon = 0, warmup_len = 0, n_rollouts = 0;
    std::vector<double> rmse_mean, rmse_std;  // per step 1..H, mm
    double latency_mean_ms = 0, latency_std_ms = 0;
};

inline RolloutReport evaluate(Predictor& predictor, const std::vector<Trajectory>& trajectories,
                              const std::vector<std::size_t>& test_split, std::size_t n_rollouts,
                              std::size_t warmup_len, std::size_t horizon, double link_length,
                              std::uint64_t seed) {
    if (test_split.empty()) throw EmptyDataset("evaluate: empty test split");
    if (warmup_len == 0 || horizon == 0) throw ProtocolError("evaluate: warmup/horizon >= 1");
    const std::size_t T = trajectories[test_split[0]].actions.size();
    if (warmup_len + horizon - 1 > T)
        throw ProtocolError("evaluate: warmup + horizon exceeds trajectory length");
    const std::size_t max_start = T - (warmup_len + horizon - 1);

    Rng rng = Rng::stream(seed, 0);
    std::vector<std::vector<double>> per_step(horizon);
    double lat_sum = 0, lat_sq = 0;
    for (std::size_t r = 0; r < n_rollouts; ++r) {
        std::size_t k = test_split[rng.next_below(test_split.size())];
        std::size_t start = static_cast<std::size_t>(rng.next_below(max_start + 1));
        auto t0 = std::chrono::steady_clock::now();
        auto pred = predictor.rollout(trajectories[k], start, warmup_len, horizon, link_length);
        double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                              t0)
                        .count() /
                    static_cast<double>(horizon);
        lat_sum += ms;
        lat_sq += ms * ms;
        if (pred.size() != horizon) throw ProtocolError("evaluate: predictor length mismatch");
        for (std::size_t t = 0; t < horizon; ++t)
            per_step[t].push_back(
                rmse(pred[t], trajectories[k].states[start + warmup_len + t]));
    }

    RolloutReport rep;
    rep.horizon = horizon;
    rep.warmup_len = warmup_len;
    rep.n_rollouts = n_rollouts;
    for (std::size_t t = 0; t < horizon; ++t) {
        double mean = 0;
        for (double v : per_step[t]) mean += v;
        mean /= static_cast<double>(n_rollouts);
        double var = 0;
        for (double v : per_step[t]) var += (v - mean) * (v - mean);
        rep.rmse_mean.push_back(mean);
        rep.rmse_std.push_back(n_rollouts > 1
                                   ? std::sqrt(var / static_cast<double>(n_rollouts - 1))
                                   : 0.0);
    }
    rep.latency_mean_ms = lat_sum / static_cast<double>(n_rollouts);
    double lvar = lat_sq / static_cast<double>(n_rollouts) -
                  rep.latency_mean_ms * rep.latency_mean_ms;
    rep.latency_std_ms = lvar > 0 ? std::sqrt(lvar) : 0.0;
    return rep;
}

inline void write_rmse_csv(std::ostream& os, const RolloutReport& rep) {
    os << "step,rmse_mean_mm,rmse_std_mm\n";
    for (std::size_t t = 0; t < rep.horizon; ++t)
        os << (t + 1) << ',' << rep.rmse_mean[t] << ',' << rep.rmse_std[t] << "\n";
}

// ---- latency benchmark ------------------------------------------------------

struct LatencyStats {
    double mean_ms = 0, std_ms = 0;
    std::size_t n_steps = 0, n_repeats = 0;
};

// Times one latent step (recurrent_step + prior + decode_pred). Each repeat
// averages n_steps consecutive steps; mean/std are over repeats. A few
// untimed warm-up repeats run first.
inline LatencyStats bench_latency(const ModelParams& model, std::size_t n_steps,
                                  std::size_t n_repeats) {
    if (n_steps == 0 || n_repeats == 0)
        throw ConfigError("bench_latency: n_steps and n_repeats must be >= 1");
    rollout_detail::FastForward f(model);
    const Hyperparams& hp = model.hp;
    rollout_detail::FTensor h(1, static_cast<int>(hp.d_rnn));
    rollout_detail::FTensor z(1, static_cast<int>(hp.d_z));
    PickPlaceAction a{hp.segment_count / 2, 25.0, -25.0};
    volatile float sink = 0.0f;

    auto run_steps = [&](std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            rollout_detail::FTensor av = f.encode_action(a);
            h = f.gru(f.cat2(z, av), h);
            auto [mu, sigma] = f.gaussian(model.prior_head, h);
            z = mu;
            rollout_detail::FTensor flat = f.mlp(model.pred, f.cat2(h, z));
            sink = sink + flat.data[0];
        }
    };

    run_steps(std::min<std::size_t>(n_steps, 16));  // warm-up, untimed
    std::vector<double> per_repeat;
    for (std::size_t r = 0; r < n_repeats; ++r) {
        auto t0 = std::chrono::steady_clock::now();
        run_steps(n_steps);
        per_repeat.push_back(
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count() /
            static_cast<double>(n_steps));
    }
    LatencyStats s;
    s.n_steps = n_steps;
    s.n_repeats = n_repeats;
    for (double v : per_repeat) s.mean_ms += v;
    s.mean_ms /= static_cast<double>(n_repeats);
    if (n_repeats > 1) {
        double var = 0;
        for (double v : per_repeat) var += (v - s.mean_ms) * (v - s.mean_ms);
        s.std_ms = std::sqrt(var / static_cast<double>(n_repeats - 1));
    }
    return s;
}

inline void write_latency_csv(std::ostream& os, const std::string& config,
                              const LatencyStats& s) {
    os << "config,mean_ms,std_ms,n\n";
    os << config << ',' << s.mean_ms << ',' << s.std_ms << ',' << s.n_steps * s.n_repeats
       << "\n";
}

}  // namespace ropelab
