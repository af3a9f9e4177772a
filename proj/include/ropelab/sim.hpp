#pragma once

#include <cstdint>
#include <optional>
#include <thread>
#include <vector>

#include "ropelab/core.hpp"
#include "ropelab/quatchain.hpp"

namespace ropelab {

// Desk-scale rigid-link rope on a friction plane, manipulated by
// pick-and-place actions. Quasi-static: constraint projection only, no
// velocities. All physical quantities in millimeters.
struct SimConfig {
    std::size_t segment_count = 20;    // L
    double link_length = 10.0;         // mm
    double rope_radius = 5.0;          // mm
    double ground_friction = 1.0;
    double bending_stiffness = 0.005;
    double damping = 0.05;
    double z_lift = 50.0;              // mm
    double action_translation = 50.0;  // mm
    std::size_t horizon = 30;          // T: actions per trajectory
    std::size_t substeps = 8;          // per action phase
    std::size_t relax_iters = 40;      // projection rounds per substep
    std::size_t settle_iters = 40;     // full rounds after release
    std::size_t polish_iters = 1000;   // cap on length/contact polish rounds at settle
    double gravity_step = 1.0;         // mm pulled down per projection round
    double link_tol = 1e-3;            // relative link-length tolerance
    std::uint64_t seed = 0;

    void validate() const {
        if (segment_count < 2) throw ConfigError("SimConfig: segment_count must be >= 2");
        if (link_length <= 0 || rope_radius <= 0 || z_lift <= 0 || action_translation <= 0 ||
            ground_friction <= 0 || bending_stiffness <= 0 || damping <= 0 || gravity_step <= 0)
            throw ConfigError("SimConfig: physical quantities must be positive");
        if (link_tol <= 0 || link_tol >= 0.05) throw ConfigError("SimConfig: link_tol out of range");
        if (substeps == 0 || relax_iters == 0) throw ConfigError("SimConfig: substeps/relax_iters");
    }
};

struct PickPlaceAction {
    std::size_t grasp_index = 0;
    double dx = 0.0, dy = 0.0;  // planar displacement, mm
};

struct Trajectory {
    std::vector<RopeState> states;        // T + 1
    std::vector<PickPlaceAction> actions; // T
    std::uint64_t seed = 0;
};

// ---- invariant checks (shared by the solver, tests and the CLI) ------------

inline double max_link_error(const RopeState& s, double link_length) {
    double m = 0.0;
    for (std::size_t i = 1; i < s.positions.size(); ++i)
        m = std::max(m, std::abs(norm(s.positions[i] - s.positions[i - 1]) - link_length));
    return m;
}

inline double min_z(const RopeState& s) {
    double m = s.positions.empty() ? 0.0 : s.positions[0].z;
    for (const auto& p : s.positions) m = std::min(m, p.z);
    return m;
}

inline double min_nonadjacent_distance(const RopeState& s) {
    double m = 1e300;
    for (std::size_t i = 0; i + 2 < s.positions.size(); ++i)
        for (std::size_t j = i + 2; j < s.positions.size(); ++j)
            m = std::min(m, norm(s.positions[j] - s.positions[i]));
    return m;
}

namespace sim_detail {

struct Pin {
    std::size_t index;
    Vec3 position;
};

// One projection round, in fixed order: link length, gravity + ground,
// self-collision, bending, planar friction. `full` disables gravity, bending
// and friction when false (length/contact polish). The length step projects
// pairs sequentially outward from `anchor` (the pin when present), holding
// the point nearer the anchor, so every link is exact after one sweep.
inline void project_round(std::vector<Vec3>& p, const std::optional<Pin>& pin,
                          std::size_t anchor, const SimConfig& cfg, bool full) {
    const std::size_t L = p.size();
    const double len = cfg.link_length;
    const double radius = cfg.rope_radius;
    auto pinned = [&](std::size_t i) { return pin && pin->index == i; };

    std::vector<Vec3> round_start;
    if (full) round_start = p;

    // (1) link-length constraints, anchored follow-the-leader both ways
    auto stretch_to = [&](const Vec3& held, Vec3& moved) {
        Vec3 d = moved - held;
        double dist = norm(d);
        if (dist < 1e-12)
            moved = held + Vec3{len, 0.0, 0.0};
        else
            moved = held + d * (len / dist);
    };
    for (std::size_t i = anchor; i + 1 < L; ++i) stretch_to(p[i], p[i + 1]);
    for (std::size_t i = anchor; i-- > 0;) stretch_to(p[i + 1], p[i]);

    // (2) gravity pull-down and ground non-penetration
    for (std::size_t i = 0; i < L; ++i) {
        if (pinned(i)) continue;
        if (full) p[i].z -= cfg.gravity_step;
        if (p[i].z < radius) p[i].z = radius;
    }

    // (3) self-collision separation between non-adjacent segments; crossing
    // strands stack vertically instead of passing through. A small slack band
    // keeps this step from fighting the length constraints forever once pairs
    // are already within tolerance of contact.
    const double min_dist = 2.0 * radius - 5.0 * cfg.link_tol * len;
    for (std::size_t i = 0; i + 2 < L; ++i) {
        for (std::size_t j = i + 2; j < L; ++j) {
            Vec3 d = p[j] - p[i];
            double dist = norm(d);
            if (dist >= min_dist) continue;
            double xy = std::sqrt(d.x * d.x + d.y * d.y);
            bool contact = p[i].z <= radius + 1e-6 || p[j].z <= radius + 1e-6;
            bool stacked = false;
            if (xy < radius && (contact || std::abs(d.z) > 0.5 * radius)) {
                // vertical stacking: raise whichever is higher (later index on
                // an exact tie) until the pair clears min_dist
                double need_dz = std::sqrt(std::max(0.0, min_dist * min_dist - xy * xy));
                std::size_t up = d.z > 0.0 ? j : (d.z < 0.0 ? i : j);
                std::size_t down = up == i ? j : i;
                double lift = 0.5 * (need_dz - std::abs(d.z));
                if (lift <= 0.0) continue;
                if (pinned(up)) {
                    // the free point can only descend; if the floor blocks it,
                    // fall through to the horizontal push instead
                    double nz = p[down].z - 2.0 * lift;
                    if (nz >= radius) {
                        p[down].z = nz;
                        stacked = true;
                    }
                } else if (pinned(down)) {
                    p[up].z += 2.0 * lift;
                    stacked = true;
                } else {
                    p[up].z += lift;
                    p[down].z = std::max(radius, p[down].z - lift);
                    stacked = true;
                }
            }
            if (!stacked) {
                // airborne near-coincident strands separate horizontally
                Vec3 unit = xy > 1e-9 ? Vec3{d.x / xy, d.y / xy, 0.0} : Vec3{1.0, 0.0, 0.0};
                if (dist > xy && xy >= radius) unit = d / dist;
                Vec3 corr = unit * (0.25 * (min_dist - dist));
                if (pinned(i)) {
                    p[j] += corr * 2.0;
                } else if (pinned(j)) {
                    p[i] -= corr * 2.0;
                } else {
                    p[i] -= corr;
                    p[j] += corr;
                }
                if (p[i].z < radius) p[i].z = radius;
                if (p[j].z < radius) p[j].z = radius;
            }
        }
    }

    if (!full) return;

    // (4) bending regularization toward neighbor midpoints
    for (std::size_t i = 1; i + 1 < L; ++i) {
        if (pinned(i)) continue;
        Vec3 mid = (p[i - 1] + p[i + 1]) * 0.5;
        p[i] += (mid - p[i]) * cfg.bending_stiffness;
    }

    // (5) planar friction: segments in ground contact keep only part of this
    // round's XY motion
    double keep = std::max(0.0, 1.0 - cfg.ground_friction * cfg.damping);
    for (std::size_t i = 0; i < L; ++i) {
        if (pinned(i)) continue;
        if (p[i].z <= radius + 1e-9) {
            p[i].x = round_start[i].x + keep * (p[i].x - round_start[i].x);
            p[i].y = round_start[i].y + keep * (p[i].y - round_start[i].y);
        }
    }
}

}  // namespace sim_detail

// Iterative constraint projection; `grasped` pins one segment at a fixed
// position. Full rounds first, then length/contact polish rounds that drive
// the emitted state inside link_tol.
inline RopeState relax(const RopeState& state, std::optional<sim_detail::Pin> grasped,
                       const SimConfig& cfg, std::size_t full_rounds, std::size_t polish_rounds,
                       std::optional<std::size_t> anchor = std::nullopt) {
    RopeState out = state;
    if (grasped) out.positions[grasped->index] = grasped->position;
    std::size_t a = anchor.value_or(grasped ? grasped->index : 0);
    for (std::size_t r = 0; r < full_rounds; ++r)
        sim_detail::project_round(out.positions, grasped, a, cfg, true);
    // polish runs until every constraint is satisfied with margin (or the cap
    // is reached): exact links, no floor penetration, non-adjacent pairs clear
    if (polish_rounds > 0) {
        const double link_ok = 0.5 * cfg.link_tol * cfg.link_length;
        const double sep_ok = 2.0 * cfg.rope_radius - 8.0 * cfg.link_tol * cfg.link_length;
        for (std::size_t r = 0; r < polish_rounds; ++r) {
            sim_detail::project_round(out.positions, grasped, a, cfg, false);
            if (max_link_error(out, cfg.link_length) <= link_ok &&
                min_z(out) >= cfg.rope_radius - 1e-9 &&
                min_nonadjacent_distance(out) >= sep_ok)
                break;
        }
    }
    return out;
}

inline RopeState relax(const RopeState& state, std::optional<sim_detail::Pin> grasped,
                       const SimConfig& cfg) {
    return relax(state, grasped, cfg, cfg.relax_iters, 0);
}

namespace sim_detail {

// Drives the pinned segment along a straight path in `substeps` kinematic
// increments, relaxing the rest of the rope after each one.
inline void drive_pin(RopeState& state, std::size_t idx, const Vec3& from, const Vec3& to,
                      const SimConfig& cfg) {
    for (std::size_t s = 1; s <= cfg.substeps; ++s) {
        double a = static_cast<double>(s) / static_cast<double>(cfg.substeps);
        Vec3 target = from + (to - from) * a;
        state = relax(state, Pin{idx, target}, cfg);
    }
}

// Settling after an action keeps the just-released segment where the gripper
// left it (weld fidelity extends to the emitted state) while everything else
// relaxes; free settling only anchors the length sweep there.
inline RopeState settle(const RopeState& state, const SimConfig& cfg, std::size_t anchor,
                        bool hold_anchor) {
    std::optional<Pin> hold;
    if (hold_anchor) hold = Pin{anchor, state.positions[anchor]};
    return relax(state, hold, cfg, cfg.settle_iters, cfg.polish_iters, anchor);
}

}  // namespace sim_detail

// Straight rope along +X centered at the origin, then a random segment is
// lifted and lowered back; the settled state is s0.
inline RopeState init_rope(const SimConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t L = cfg.segment_count;
    RopeState s;
    s.positions.reserve(L);
    double x0 = -0.5 * cfg.link_length * static_cast<double>(L - 1);
    for (std::size_t i = 0; i < L; ++i)
        s.positions.push_back({x0 + cfg.link_length * static_cast<double>(i), 0.0, cfg.rope_radius});
    std::size_t lift_idx = static_cast<std::size_t>(rng.next_below(L));
    Vec3 base = s.positions[lift_idx];
    // small random lateral offset on the lift apex so the resulting fold is
    // never perfectly planar (planar folds can wedge into standing arches)
    double phi = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    Vec3 top = base + Vec3{0.2 * cfg.link_length * std::cos(phi),
                           0.2 * cfg.link_length * std::sin(phi), cfg.z_lift};
    sim_detail::drive_pin(s, lift_idx, base, top, cfg);
    sim_detail::drive_pin(s, lift_idx, top, base, cfg);
    return sim_detail::settle(s, cfg, lift_idx, false);
}

// Pick-and-place: vertical lift, planar translation, vertical descent, then
// release and settle. The grasped segment exactly tracks the commanded path.
inline RopeState step_action(const RopeState& state, const PickPlaceAction& action,
                             const SimConfig& cfg) {
    if (action.grasp_index >= state.segment_count())
        throw InvalidGrasp("step_action: grasp index out of range");
    RopeState s = state;
    const std::size_t g = action.grasp_index;
    Vec3 start = s.positions[g];
    Vec3 lifted{start.x, start.y, cfg.rope_radius + cfg.z_lift};
    Vec3 moved{start.x + action.dx, start.y + action.dy, lifted.z};
    Vec3 placed{moved.x, moved.y, cfg.rope_radius};
    sim_detail::drive_pin(s, g, start, lifted, cfg);
    sim_detail::drive_pin(s, g, lifted, moved, cfg);
    sim_detail::drive_pin(s, g, moved, placed, cfg);
    return sim_detail::settle(s, cfg, g, true);
}

inline Trajectory generate_trajectory(const SimConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng = Rng::stream(seed, 0);
    Trajectory traj;
    traj.seed = seed;
    traj.states.push_back(init_rope(cfg, rng));
    traj.actions.reserve(cfg.horizon);
    for (std::size_t t = 0; t < cfg.horizon; ++t) {
        PickPlaceAction a;
        a.grasp_index = static_cast<std::size_t>(rng.next_below(cfg.segment_count));
        double heading = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        a.dx = cfg.action_translation * std::cos(heading);
        a.dy = cfg.action_translation * std::sin(heading);
        traj.states.push_back(step_action(traj.states.back(), a, cfg));
        traj.actions.push_back(a);
    }
    return traj;
}

// Trajectory k is seeded base_seed + k, so the result is independent of the
// parallelism degree.
inline std::vector<Trajectory> generate_dataset(const SimConfig& cfg, std::size_t n_trajectories,
                                                std::uint64_t base_seed,
                                                std::size_t n_threads = 1) {
    if (n_trajectories == 0) throw ConfigError("generate_dataset: need at least one trajectory");
    std::vector<Trajectory> out(n_trajectories);
    if (n_threads <= 1) {
        for (std::size_t k = 0; k < n_trajectories; ++k)
            out[k] = generate_trajectory(cfg, base_seed + k);
        return out;
    }
    std::vector<std::thread> workers;
    std::size_t per = (n_trajectories + n_threads - 1) / n_threads;
    for (std::size_t w = 0; w < n_threads; ++w) {
        std::size_t lo = w * per, hi = std::min(n_trajectories, lo + per);
        if (lo >= hi) break;
        workers.emplace_back([&, lo, hi] {
            for (std::size_t k = lo; k < hi; ++k)
                out[k] = generate_trajectory(cfg, base_seed + k);
        });
    }
    for (auto& t : workers) t.join();
    return out;
}

}  // namespace ropelab
