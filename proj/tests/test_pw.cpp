#include <helmpw/pw.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <random>

using namespace helmpw;
using Catch::Matchers::WithinAbs;

namespace {

Network net_from_json(const std::string& text) {
    return parse_case(text, CaseFormat::json);
}

std::string fixture(const std::string& name) {
    return std::string(HELMPW_FIXTURE_DIR) + "/" + name;
}

// two-bus conductance-only case: G (V - 1) = s P / V, V(s) = (1+sqrt(1+4sP))/2
Network dc_two_bus(double p_load) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), R"({
      "base_mva": 100,
      "buses": [
        {"id": 1, "kind": "swing", "vsp": 1.0},
        {"id": 2, "kind": "pq", "pd": %.17g}
      ],
      "branches": [{"from": 1, "to": 2, "y": [1.0, 0.0]}],
      "generators": []
    })", p_load);
    return net_from_json(buf);
}

double max_row_sum(const Eigen::SparseMatrix<cd>& y) {
    Eigen::VectorXcd rs = Eigen::VectorXcd::Zero(y.rows());
    for (int j = 0; j < y.outerSize(); ++j)
        for (Eigen::SparseMatrix<cd>::InnerIterator it(y, j); it; ++it)
            rs(it.row()) += it.value();
    return rs.cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("conductance-only worked example: partial, transform, pivot") {
    Network net = dc_two_bus(0.25);  // P = -0.25, collapse exactly at s = 1
    StageParams p = stage0_params(net, true);
    StageSystem sys(p);
    Germ g = make_germ(p);
    RunResult run = run_stage(sys, g, 1e-11, 32);
    REQUIRE_FALSE(run.converged);

    // sampled partial: the certified staircase value at the solver's reach
    auto [vs, qs] = evaluate_partial(run, p, 0.75, 1e-9);
    REQUIRE_THAT(std::abs(vs(1) - cd(0.75, 0.0)), WithinAbs(0.0, 1e-9));
    REQUIRE(vs(0) == cd(1.0, 0.0));

    // the closed form V(s0) = (1+sqrt(1-s0))/2 drives the step arithmetic
    Eigen::VectorXcd vx(2);
    vx << cd(1.0, 0.0), cd(0.75, 0.0);
    StageParams t = transform_stage(p, vx, qs, 0.75);
    CHECK_THAT(std::abs(t.y.coeff(1, 1) - cd(0.75, 0.0)), WithinAbs(0.0, 1e-12));
    CHECK_THAT(std::abs(t.y.coeff(0, 1) - cd(-0.75, 0.0)), WithinAbs(0.0, 1e-12));
    CHECK_THAT(std::abs(t.gamma(1) - cd(-0.1875, 0.0)), WithinAbs(0.0, 1e-12));
    CHECK_THAT(std::abs(t.sfix(1) - cd(-0.0625, 0.0)), WithinAbs(0.0, 1e-12));
    // next stage's scalar pivot G' + 2 Gamma'
    double pivot = t.y.coeff(1, 1).real() + 2.0 * t.gamma(1).real();
    CHECK_THAT(pivot, WithinAbs(0.375, 1e-12));
    CHECK(max_row_sum(t.y) < 1e-14);

    SECTION("evaluation beyond the convergence zone is rejected") {
        CHECK_THROWS_AS(evaluate_partial(run, p, 0.999, 1e-9), DegenerateVoltageError);
    }
}

TEST_CASE("transform at s0 = 0 is the identity") {
    Network net = dc_two_bus(0.25);
    StageParams p = stage0_params(net, true);
    Eigen::VectorXcd vs = Eigen::VectorXcd::Ones(2);
    Eigen::VectorXd qs(0);
    StageParams t = transform_stage(p, vs, qs, 0.0);
    CHECK(std::abs(t.y.coeff(1, 1) - p.y.coeff(1, 1)) < 1e-15);
    CHECK(std::abs(t.y.coeff(0, 1) - p.y.coeff(0, 1)) < 1e-15);
    CHECK(t.gamma(1) == p.gamma(1));
    CHECK(t.sfix(1) == p.sfix(1));
    CHECK(t.swing_v1 == p.swing_v1);
}

TEST_CASE("subcritical conductance case solves to the closed form") {
    Network net = dc_two_bus(0.2);
    Solution sol = solve_pw(net);
    REQUIRE(sol.converged);
    double v_exact = (1.0 + std::sqrt(1.0 - 0.8)) / 2.0;
    CHECK_THAT(std::abs(sol.v(1) - cd(v_exact, 0.0)), WithinAbs(0.0, 1e-10));
    CHECK(sol.mismatch <= 1e-8);
}

TEST_CASE("supercritical conductance case stalls with a sharp critical estimate") {
    Network net = dc_two_bus(0.26);  // singular at s = 0.25/0.26
    Solution sol = solve_pw(net);
    REQUIRE_FALSE(sol.converged);
    REQUIRE(sol.s_crit.has_value());
    CHECK_THAT(*sol.s_crit, WithinAbs(0.25 / 0.26, 0.02));
}

TEST_CASE("advance point contracts") {
    SECTION("too-shallow germ is rejected") {
        Network net = dc_two_bus(0.2);
        StageParams p = stage0_params(net, true);
        Germ g = make_germ(p);
        CHECK_THROWS_AS(find_advance_point(g, p, 1e-11), PWError);
    }
    SECTION("terminal point when s = 1 converges") {
        Network net = net_from_json(R"({
          "base_mva": 100,
          "buses": [
            {"id": 1, "kind": "swing", "vsp": 1.0},
            {"id": 2, "kind": "pq", "pd": 0.1, "qd": 0.02}
          ],
          "branches": [{"from": 1, "to": 2, "y": [2.0, -10.0]}],
          "generators": []
        })");
        StageParams p = stage0_params(net, true);
        StageSystem sys(p);
        Germ g = make_germ(p);
        for (int n = 0; n < 16; ++n) advance_order(g, sys);
        auto s0 = find_advance_point(g, p, 1e-11);
        REQUIRE(s0.has_value());
        CHECK(*s0 == 1.0);
    }
    SECTION("branch point just past 1 forces a strictly interior point") {
        // series of 1/sqrt(1 - s/1.0001)
        StageParams p;
        p.y = Eigen::SparseMatrix<cd>(2, 2);
        p.ysh = Eigen::VectorXcd::Zero(2);
        p.gamma = Eigen::VectorXcd::Zero(2);
        p.sfix = Eigen::VectorXcd::Zero(2);
        p.swing = 0;
        Germ g;
        Series flat = Series::constant(cd(1.0, 0.0));
        Series vb = Series::constant(cd(1.0, 0.0));
        double c = 1.0;
        for (int n = 0; n < 32; ++n) {
            flat.push(cd(0.0, 0.0));
            c *= (2.0 * n + 1.0) / (2.0 * n + 2.0) / 1.0001;
            vb.push(cd(c, 0.0));
        }
        g.v = {flat, vb};
        g.vinv = {flat, flat};
        g.order = 32;
        auto s0 = find_advance_point(g, p, 1e-11);
        REQUIRE(s0.has_value());
        CHECK(*s0 > 0.5);
        CHECK(*s0 < 1.0);
    }
}

TEST_CASE("unwind composes multiplicatively and additively") {
    Eigen::VectorXcd vf(2);
    vf << cd(1.0, 0.0), cd(0.9, 0.0);
    Eigen::VectorXd qf(1);
    qf << 0.2;

    SECTION("zero stages: identity passthrough") {
        auto [v, q] = unwind({}, vf, qf);
        CHECK(v == vf);
        CHECK(q == qf);
    }
    SECTION("one stage: product and sum") {
        PWStage st;
        st.v_partial = Eigen::VectorXcd(2);
        st.v_partial << cd(1.0, 0.0), cd(0.75, 0.0);
        st.q_partial = Eigen::VectorXd(1);
        st.q_partial << 0.05;
        std::vector<PWStage> stages;
        stages.push_back(std::move(st));
        auto [v, q] = unwind(stages, vf, qf);
        CHECK_THAT(std::abs(v(1) - cd(0.675, 0.0)), WithinAbs(0.0, 1e-15));
        CHECK_THAT(q(0), WithinAbs(0.25, 1e-15));
    }
}

TEST_CASE("saturation classification and the voltage sign rules") {
    Network net = net_from_json(R"({
      "base_mva": 100,
      "buses": [
        {"id": 1, "kind": "swing", "vsp": 1.0},
        {"id": 2, "kind": "pv"}
      ],
      "branches": [{"from": 1, "to": 2, "y": [1.0, -5.0]}],
      "generators": [{"bus": 2, "regulates": 2, "pg": 0.3, "vsp": 1.02,
                      "qmin": -0.4, "qmax": 0.5}]
    })");
    Eigen::VectorXcd v(2);
    v << cd(1.0, 0.0), cd(1.0, 0.0);  // |V| below the 1.02 setpoint

    SECTION("at the upper limit with depressed voltage: valid") {
        auto s = saturation_status(v, {0.5 - 1e-9}, net.controls, net);
        CHECK(s[0] == SaturationStatus::at_qmax);
    }
    SECTION("at the lower limit with depressed voltage: flagged") {
        auto s = saturation_status(v, {-0.4}, net.controls, net);
        CHECK(s[0] == SaturationStatus::inconsistent);
    }
    SECTION("interior holding the setpoint") {
        v(1) = std::polar(1.02, 0.1);
        auto s = saturation_status(v, {0.1}, net.controls, net);
        CHECK(s[0] == SaturationStatus::interior);
    }
    SECTION("interior but off the setpoint: flagged") {
        auto s = saturation_status(v, {0.1}, net.controls, net);
        CHECK(s[0] == SaturationStatus::inconsistent);
    }
}

TEST_CASE("case9 base case solves in few stages with interior controls") {
    Network net = load_case(fixture("case9.m"));
    Solution sol = solve_pw(net);
    REQUIRE(sol.converged);
    CHECK(sol.stages <= 3);
    CHECK(sol.mismatch <= 1e-8);
    REQUIRE(sol.q.size() == 2);
    for (size_t c = 0; c < sol.sat.size(); ++c) {
        CHECK(sol.sat[c] == SaturationStatus::interior);
        CHECK(sol.q[c] >= *net.controls[c].qmin);
        CHECK(sol.q[c] <= *net.controls[c].qmax);
    }
    // trace terminates at the converged stage
    REQUIRE_FALSE(sol.trace.empty());
    CHECK(sol.trace.back().s0 == 1.0);
    CHECK(sol.trace.back().accumulated == 1.0);
}

TEST_CASE("case9 beyond the nose is infeasible with an estimate") {
    Network net = scaled(load_case(fixture("case9.m")), 3.0);
    Solution sol = solve_pw(net);
    REQUIRE_FALSE(sol.converged);
    REQUIRE(sol.s_crit.has_value());
    CHECK(*sol.s_crit < 1.0);
    CHECK(*sol.s_crit > 0.0);
}

TEST_CASE("staged case9: geometry, row sums, determinism") {
    Network net = scaled(load_case(fixture("case9.m")), 2.48);
    PWOptions opts;
    opts.enforce_qlims = false;  // the deep-loading geometry study is unlimited
    opts.keep_stages = true;
    Solution sol = solve_pw(net, opts);
    REQUIRE(sol.converged);
    REQUIRE(sol.stages >= 2);

    SECTION("transformed rows cancel") {
        for (const PWStage& st : sol.stage_data)
            CHECK(max_row_sum(st.params.y) < 1e-11);
    }
    SECTION("accumulated position follows the zoom geometry") {
        double acc = 0.0;
        for (const PWStageRecord& r : sol.trace) {
            acc = acc + r.s0 * (1.0 - acc);
            CHECK_THAT(r.accumulated, WithinAbs(acc, 1e-12));
        }
        CHECK(sol.trace.back().accumulated == 1.0);
        for (size_t k = 1; k < sol.trace.size(); ++k)
            CHECK(sol.trace[k].accumulated > sol.trace[k - 1].accumulated);
    }
    SECTION("bit-identical reruns") {
        Solution again = solve_pw(net, opts);
        REQUIRE(again.trace.size() == sol.trace.size());
        for (size_t k = 0; k < sol.trace.size(); ++k) {
            CHECK(std::memcmp(&again.trace[k].s0, &sol.trace[k].s0, sizeof(double)) == 0);
            CHECK(std::memcmp(&again.trace[k].update_error, &sol.trace[k].update_error,
                              sizeof(double)) == 0);
        }
        for (int i = 0; i < net.n(); ++i) CHECK(again.v(i) == sol.v(i));
    }
}

TEST_CASE("stage invariance under the parameter substitution") {
    // scaled deep enough to need several stages; the conservative advance
    // factor keeps every mapped point inside the certified staircase zone
    // (s0 + (1-s0)/2 <= s* needs beta <= 2 - 1/s*)
    Network net = scaled(load_case(fixture("case9.m")), 2.2);
    PWOptions opts;
    opts.keep_germs = true;
    opts.beta = 0.5;
    Solution sol = solve_pw(net, opts);
    REQUIRE(sol.converged);
    REQUIRE(sol.stage_data.size() >= 2);

    std::mt19937 rng(4242);
    std::uniform_real_distribution<double> pick(1e-3, 0.5);
    for (size_t k = 0; k + 1 < sol.stage_data.size(); ++k) {
        const PWStage& a = sol.stage_data[k];
        const PWStage& b = sol.stage_data[k + 1];
        REQUIRE(a.germ.has_value());
        REQUIRE(b.germ.has_value());
        std::vector<StaircaseTable> ta, tb, qa, qb;
        for (const Series& s : a.germ->v) ta.emplace_back(s);
        for (const Series& s : b.germ->v) tb.emplace_back(s);
        for (const Series& s : a.germ->q) qa.emplace_back(s);
        for (const Series& s : b.germ->q) qb.emplace_back(s);
        for (int trial = 0; trial < 10; ++trial) {
            double sp = pick(rng);
            double mapped = a.s0 + (1.0 - a.s0) * sp;
            // deepest staircase entries on both sides; the identity budget
            // absorbs the evaluation error
            for (int i = 0; i < net.n(); ++i) {
                if (i == a.params.swing) continue;
                PadeVerdict lhs = ta[static_cast<size_t>(i)].verdict_at(mapped, 1e-13);
                PadeVerdict rhs = tb[static_cast<size_t>(i)].verdict_at(sp, 1e-13);
                cd composed = a.v_partial(i) * rhs.value;
                CHECK_THAT(std::abs(lhs.value - composed), WithinAbs(0.0, 1e-9));
            }
            for (size_t c = 0; c < qa.size(); ++c) {
                PadeVerdict lhs = qa[c].verdict_at(mapped, 1e-13);
                PadeVerdict rhs = qb[c].verdict_at(sp, 1e-13);
                double composed = a.q_partial(static_cast<Eigen::Index>(c)) + rhs.value.real();
                CHECK_THAT(lhs.value.real() - composed, WithinAbs(0.0, 1e-9));
            }
        }
    }
}

TEST_CASE("per-unit rebase leaves the physics unchanged") {
    Network net = load_case(fixture("case9.m"));
    Network re2 = rebased(net, 2.0);  // power-of-two keeps scaling exact

    SECTION("unlimited run is numerically identical") {
        PWOptions opts;
        opts.enforce_qlims = false;
        Solution a = solve_pw(net, opts);
        Solution b = solve_pw(re2, opts);
        REQUIRE(a.converged);
        REQUIRE(b.converged);
        for (int i = 0; i < net.n(); ++i)
            CHECK_THAT(std::abs(a.v(i) - b.v(i)), WithinAbs(0.0, 1e-12));
        // staging may differ (absolute staircase tolerances), so Q carries
        // a little of the final update error
        for (size_t c = 0; c < a.q.size(); ++c)
            CHECK_THAT(2.0 * b.q[c], WithinAbs(a.q[c], 1e-10));
    }
    SECTION("limited run agrees to solver tolerance") {
        Solution a = solve_pw(net);
        Solution b = solve_pw(re2);
        REQUIRE(a.converged);
        REQUIRE(b.converged);
        for (int i = 0; i < net.n(); ++i)
            CHECK_THAT(std::abs(a.v(i) - b.v(i)), WithinAbs(0.0, 1e-8));
        for (size_t c = 0; c < a.q.size(); ++c)
            CHECK_THAT(2.0 * b.q[c], WithinAbs(a.q[c], 1e-8));
    }
}
