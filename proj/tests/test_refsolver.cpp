#include <helmpw/pw.hpp>
#include <helmpw/refsolver.hpp>

#include <catch2/catch_amalgamated.hpp>

#include <string>

using namespace helmpw;
using Catch::Matchers::WithinAbs;

namespace {

Network net_from_json(const std::string& text) {
    return parse_case(text, CaseFormat::json);
}

std::string fixture(const std::string& name) {
    return std::string(HELMPW_FIXTURE_DIR) + "/" + name;
}

// one binding upper limit: the generator cannot hold 1.02 against the load
Network binding_2bus() {
    return net_from_json(R"({
      "base_mva": 100,
      "buses": [
        {"id": 1, "kind": "swing", "vsp": 1.0},
        {"id": 2, "kind": "pv", "qd": 0.3}
      ],
      "branches": [{"from": 1, "to": 2, "y": [1.0, -5.0]}],
      "generators": [{"bus": 2, "regulates": 2, "pg": 0.3, "vsp": 1.02,
                      "qmin": -1.0, "qmax": 0.05}]
    })");
}

}  // namespace

TEST_CASE("flat network converges immediately to the swing profile") {
    Network net = net_from_json(R"({
      "base_mva": 100,
      "buses": [
        {"id": 1, "kind": "swing", "vsp": 1.0},
        {"id": 2, "kind": "pq"},
        {"id": 3, "kind": "pq"}
      ],
      "branches": [
        {"from": 1, "to": 2, "y": [2.0, -8.0]},
        {"from": 2, "to": 3, "y": [1.0, -4.0]}
      ],
      "generators": []
    })");
    NRReport rep = newton_solve(net, NRStrategy::none);
    REQUIRE(rep.converged);
    CHECK(rep.iterations <= 2);
    CHECK(rep.mismatch <= 1e-8);
    for (int i = 0; i < net.n(); ++i) {
        CHECK_THAT(rep.vm(i), WithinAbs(1.0, 1e-12));
        CHECK_THAT(rep.va(i), WithinAbs(0.0, 1e-12));
    }
}

TEST_CASE("unlimited voltages agree with the holomorphic solver") {
    for (const char* name : {"case9.m", "case14.m", "case30.m"}) {
        DYNAMIC_SECTION(name) {
            Network net = load_case(fixture(name));
            PWOptions po;
            po.enforce_qlims = false;
            Solution helm = solve_pw(net, po);
            NRReport nr = newton_solve(net, NRStrategy::none);
            REQUIRE(helm.converged);
            REQUIRE(nr.converged);
            CHECK(nr.mismatch <= 1e-8);
            for (int i = 0; i < net.n(); ++i)
                CHECK_THAT(nr.vm(i), WithinAbs(std::abs(helm.v(i)), 1e-6));
        }
    }
}

TEST_CASE("interior case: both strategies settle with no switching") {
    Network net = load_case(fixture("case9.m"));
    Solution helm = solve_pw(net);
    REQUIRE(helm.converged);
    for (NRStrategy st : {NRStrategy::switch_all, NRStrategy::switch_one}) {
        NRReport rep = newton_solve(net, st);
        REQUIRE(rep.converged);
        CHECK(rep.history.size() == 1);
        for (size_t c = 0; c < rep.assignment.size(); ++c)
            CHECK(rep.assignment[c] == ControlMode::interior);
        for (int i = 0; i < net.n(); ++i)
            CHECK_THAT(rep.vm(i), WithinAbs(std::abs(helm.v(i)), 1e-6));
        for (size_t c = 0; c < rep.q.size(); ++c)
            CHECK_THAT(rep.q[c], WithinAbs(helm.q[c], 1e-6));
    }
}

TEST_CASE("binding upper limit: type switching matches the embedding") {
    Network net = binding_2bus();
    Solution helm = solve_pw(net);
    REQUIRE(helm.converged);
    REQUIRE(helm.sat[0] == SaturationStatus::at_qmax);

    for (NRStrategy st : {NRStrategy::switch_all, NRStrategy::switch_one}) {
        NRReport rep = newton_solve(net, st);
        REQUIRE(rep.converged);
        CHECK(rep.assignment[0] == ControlMode::at_qmax);
        CHECK(rep.history.size() == 2);  // interior round, then the switch
        CHECK(rep.vm(1) < 1.02);
        CHECK_THAT(rep.q[0], WithinAbs(0.05, 1e-12));
        CHECK_THAT(rep.vm(1), WithinAbs(std::abs(helm.v(1)), 1e-6));
    }
}

TEST_CASE("assignment enumeration covers existing sides only") {
    SECTION("two-sided control: three assignments, one feasible") {
        Network net = binding_2bus();
        auto results = enumerate_assignments(net);
        REQUIRE(results.size() == 3);
        int feasible = 0;
        for (const auto& r : results) {
            if (!r.feasible) continue;
            ++feasible;
            CHECK(r.assignment[0] == ControlMode::at_qmax);
            CHECK(r.report.mismatch <= 1e-8);
        }
        CHECK(feasible == 1);
    }
    SECTION("one-sided control: two assignments") {
        Network net = net_from_json(R"({
          "base_mva": 100,
          "buses": [
            {"id": 1, "kind": "swing", "vsp": 1.0},
            {"id": 2, "kind": "pv", "qd": 0.1}
          ],
          "branches": [{"from": 1, "to": 2, "y": [1.0, -5.0]}],
          "generators": [{"bus": 2, "regulates": 2, "pg": 0.2, "vsp": 1.01,
                          "qmax": 2.0}]
        })");
        auto results = enumerate_assignments(net);
        REQUIRE(results.size() == 2);
    }
    SECTION("no controls: the single trivial assignment") {
        Network net = net_from_json(R"({
          "base_mva": 100,
          "buses": [
            {"id": 1, "kind": "swing", "vsp": 1.0},
            {"id": 2, "kind": "pq", "pd": 0.2, "qd": 0.05}
          ],
          "branches": [{"from": 1, "to": 2, "y": [2.0, -9.0]}],
          "generators": []
        })");
        auto results = enumerate_assignments(net);
        REQUIRE(results.size() == 1);
        CHECK(results[0].feasible);
        CHECK(results[0].assignment.empty());
    }
}

TEST_CASE("case9 enumeration includes the embedding's assignment") {
    Network net = load_case(fixture("case9.m"));
    Solution helm = solve_pw(net);
    REQUIRE(helm.converged);
    auto results = enumerate_assignments(net);
    REQUIRE(results.size() <= 9);

    bool found = false;
    for (const auto& r : results) {
        bool same = true;
        for (size_t c = 0; c < r.assignment.size(); ++c) {
            ControlMode want = helm.sat[c] == SaturationStatus::at_qmin   ? ControlMode::at_qmin
                               : helm.sat[c] == SaturationStatus::at_qmax ? ControlMode::at_qmax
                                                                          : ControlMode::interior;
            if (r.assignment[c] != want) same = false;
        }
        if (!same) continue;
        found = true;
        CHECK(r.feasible);
        for (int i = 0; i < net.n(); ++i)
            CHECK_THAT(r.report.vm(i), WithinAbs(std::abs(helm.v(i)), 1e-6));
    }
    CHECK(found);
}

TEST_CASE("enumeration cap is enforced") {
    std::string buses = R"({"id": 1, "kind": "swing", "vsp": 1.0})";
    std::string branches, gens;
    for (int k = 2; k <= 14; ++k) {
        buses += ",\n        {\"id\": " + std::to_string(k) + ", \"kind\": \"pv\"}";
        branches += std::string(branches.empty() ? "" : ",\n        ") +
                    "{\"from\": 1, \"to\": " + std::to_string(k) + ", \"y\": [1.0, -5.0]}";
        gens += std::string(gens.empty() ? "" : ",\n        ") + "{\"bus\": " +
                std::to_string(k) +
                ", \"pg\": 0.1, \"vsp\": 1.0, \"qmin\": -1.0, \"qmax\": 1.0}";
    }
    Network net = net_from_json("{\n      \"base_mva\": 100,\n      \"buses\": [" + buses +
                                "],\n      \"branches\": [" + branches +
                                "],\n      \"generators\": [" + gens + "]\n    }");
    REQUIRE(net.controls.size() == 13);
    CHECK_THROWS_AS(enumerate_assignments(net), std::invalid_argument);
}
