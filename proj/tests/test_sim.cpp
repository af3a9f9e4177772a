#include <catch2/catch_amalgamated.hpp>

#include "ropelab/sim.hpp"

using namespace ropelab;

namespace {

SimConfig desk_config() {
    SimConfig cfg;
    cfg.segment_count = 20;
    cfg.horizon = 30;
    return cfg;
}

bool states_equal(const RopeState& a, const RopeState& b) {
    if (a.positions.size() != b.positions.size()) return false;
    for (std::size_t i = 0; i < a.positions.size(); ++i)
        if (!(a.positions[i] == b.positions[i])) return false;
    return true;
}

}  // namespace

TEST_CASE("config validation") {
    SimConfig cfg = desk_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.segment_count = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = desk_config();
    cfg.link_tol = 0.1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = desk_config();
    cfg.rope_radius = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("init_rope single link settles straight and planar") {
    SimConfig cfg = desk_config();
    cfg.segment_count = 2;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        auto s = init_rope(cfg, rng);
        CHECK(max_link_error(s, cfg.link_length) <= cfg.link_tol * cfg.link_length);
        CHECK(min_z(s) >= cfg.rope_radius - 1e-6);
    }
}

TEST_CASE("init_rope deterministic") {
    SimConfig cfg = desk_config();
    Rng r1(42), r2(42);
    auto a = init_rope(cfg, r1);
    auto b = init_rope(cfg, r2);
    CHECK(states_equal(a, b));
}

TEST_CASE("init_rope invariants at L=70") {
    SimConfig cfg = desk_config();
    cfg.segment_count = 70;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        auto s = init_rope(cfg, rng);
        CHECK(max_link_error(s, cfg.link_length) <= cfg.link_tol * cfg.link_length);
        CHECK(min_z(s) >= cfg.rope_radius - 1e-6);
    }
}

TEST_CASE("relax leaves straight resting rope unchanged") {
    SimConfig cfg = desk_config();
    RopeState s;
    for (std::size_t i = 0; i < cfg.segment_count; ++i)
        s.positions.push_back({10.0 * i, 0.0, cfg.rope_radius});
    auto r = relax(s, std::nullopt, cfg, cfg.relax_iters, cfg.polish_iters);
    for (std::size_t i = 0; i < s.positions.size(); ++i)
        CHECK(norm(r.positions[i] - s.positions[i]) < 1e-9);
}

TEST_CASE("relax separates overlapping non-adjacent segments") {
    SimConfig cfg = desk_config();
    RopeState s;
    s.positions = {{0, 0, 5}, {10, 0, 5}, {0, 0, 5}};  // p2 on top of p0
    auto r = relax(s, std::nullopt, cfg, 200, 200);
    CHECK(norm(r.positions[2] - r.positions[0]) >=
          2.0 * cfg.rope_radius - 10.0 * cfg.link_tol * cfg.link_length);
    CHECK(max_link_error(r, cfg.link_length) <= cfg.link_tol * cfg.link_length);
}

TEST_CASE("relax converges from a stretched chain") {
    SimConfig cfg = desk_config();
    RopeState s;
    for (std::size_t i = 0; i < cfg.segment_count; ++i)
        s.positions.push_back({15.0 * i, 0.0, cfg.rope_radius});  // links at 1.5 * length
    auto r = relax(s, std::nullopt, cfg, 200, 200);
    CHECK(max_link_error(r, cfg.link_length) < cfg.link_tol * cfg.link_length);
}

TEST_CASE("step_action weld fidelity on an axial pull") {
    SimConfig cfg = desk_config();
    RopeState s;
    for (std::size_t i = 0; i < cfg.segment_count; ++i)
        s.positions.push_back({10.0 * i, 0.0, cfg.rope_radius});
    Vec3 start = s.positions[0];
    auto out = step_action(s, PickPlaceAction{0, 50.0, 0.0}, cfg);
    CHECK(std::abs(out.positions[0].x - (start.x + 50.0)) < 1e-6);
    CHECK(std::abs(out.positions[0].y - start.y) < 1e-6);
}

TEST_CASE("step_action rejects out-of-range grasp") {
    SimConfig cfg = desk_config();
    Rng rng(1);
    auto s = init_rope(cfg, rng);
    CHECK_THROWS_AS(step_action(s, PickPlaceAction{cfg.segment_count, 10, 0}, cfg), InvalidGrasp);
}

TEST_CASE("step_action preserves link lengths over random actions") {
    SimConfig cfg = desk_config();
    Rng rng(99);
    auto s = init_rope(cfg, rng);
    for (int rep = 0; rep < 60; ++rep) {
        PickPlaceAction a;
        a.grasp_index = static_cast<std::size_t>(rng.next_below(cfg.segment_count));
        double h = rng.uniform(0, 6.283185307179586);
        a.dx = cfg.action_translation * std::cos(h);
        a.dy = cfg.action_translation * std::sin(h);
        s = step_action(s, a, cfg);
        CHECK(max_link_error(s, cfg.link_length) <= cfg.link_tol * cfg.link_length);
        CHECK(min_z(s) >= cfg.rope_radius - 1e-6);
    }
}

TEST_CASE("generate_trajectory shapes and determinism") {
    SimConfig cfg = desk_config();
    cfg.horizon = 0;
    auto t0 = generate_trajectory(cfg, 3);
    CHECK(t0.states.size() == 1);
    CHECK(t0.actions.empty());

    cfg.horizon = 5;
    auto a = generate_trajectory(cfg, 7);
    auto b = generate_trajectory(cfg, 7);
    REQUIRE(a.states.size() == 6);
    for (std::size_t i = 0; i < a.states.size(); ++i) CHECK(states_equal(a.states[i], b.states[i]));
    for (std::size_t i = 0; i < a.actions.size(); ++i) {
        CHECK(a.actions[i].grasp_index == b.actions[i].grasp_index);
        CHECK(a.actions[i].dx == b.actions[i].dx);
        CHECK(std::abs(std::hypot(a.actions[i].dx, a.actions[i].dy) - cfg.action_translation) <
              1e-9);
    }
}

TEST_CASE("trajectory states satisfy rest invariants") {
    SimConfig cfg = desk_config();
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto traj = generate_trajectory(cfg, seed);
        for (const auto& s : traj.states) {
            CHECK(max_link_error(s, cfg.link_length) <= cfg.link_tol * cfg.link_length);
            CHECK(min_z(s) >= cfg.rope_radius - 1e-6);
            CHECK(min_nonadjacent_distance(s) >=
                  2.0 * cfg.rope_radius - 10.0 * cfg.link_tol * cfg.link_length);
        }
    }
}

TEST_CASE("generate_dataset counts and parallel determinism") {
    SimConfig cfg = desk_config();
    cfg.segment_count = 10;
    cfg.horizon = 5;
    auto seq = generate_dataset(cfg, 10, 1000, 1);
    std::size_t transitions = 0;
    for (const auto& t : seq) transitions += t.actions.size();
    CHECK(transitions == 50);

    auto par = generate_dataset(cfg, 10, 1000, 8);
    REQUIRE(par.size() == seq.size());
    for (std::size_t k = 0; k < seq.size(); ++k)
        for (std::size_t i = 0; i < seq[k].states.size(); ++i)
            CHECK(states_equal(seq[k].states[i], par[k].states[i]));
}
