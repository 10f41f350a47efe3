#include <catch2/catch_amalgamated.hpp>

#include <helmpw/netmodel.hpp>

#include <string>

using namespace helmpw;

namespace {

std::string fixture(const std::string& name) {
    return std::string(HELMPW_FIXTURE_DIR) + "/" + name;
}

double max_rowsum(const Network& net) {
    Eigen::VectorXcd ones = Eigen::VectorXcd::Ones(net.n());
    return (net.y * ones).cwiseAbs().maxCoeff();
}

const char* kTwoBus = R"({
  "base_mva": 100.0,
  "buses": [
    {"id": 1, "kind": "swing", "vsp": 1.0},
    {"id": 2, "kind": "pq", "pd": 0.5, "qd": 0.2}
  ],
  "branches": [
    {"from": 1, "to": 2, "r": 0.0, "x": 0.1}
  ]
})";

}  // namespace

TEST_CASE("case9 fixture parses with expected record counts") {
    Network net = load_case(fixture("case9.m"));
    CHECK(net.n() == 9);
    CHECK(net.branches.size() == 9);
    CHECK(net.controls.size() == 2);  // 3 gen records, one sits on the swing
    CHECK(net.buses[static_cast<size_t>(net.swing)].id == 1);
    for (const ControlSet& cs : net.controls) {
        REQUIRE(cs.qmin.has_value());
        REQUIRE(cs.qmax.has_value());
        CHECK(*cs.qmin == -3.0);
        CHECK(*cs.qmax == 3.0);
        CHECK(cs.ctrl_bus == cs.reg_bus);
    }
}

TEST_CASE("transmission condition holds for all bundled fixtures") {
    for (const char* name : {"case9.m", "case14.m", "case30.m", "case57.m", "case118.m",
                             "case300.m", "illinois200.m"}) {
        Network net = load_case(fixture(name));
        INFO(name);
        CHECK(max_rowsum(net) < 1e-12);
    }
    // the pegase case carries series admittances up to ~5e3 pu; at that scale
    // double summation noise alone exceeds 1e-12 absolute, so the condition
    // is asserted relative to the row magnitude there
    Network peg = load_case(fixture("case1354pegase.m"));
    Eigen::VectorXcd ones = Eigen::VectorXcd::Ones(peg.n());
    Eigen::VectorXcd rs = peg.y * ones;
    for (int i = 0; i < peg.n(); ++i) {
        double scale = 1.0;
        for (Eigen::SparseMatrix<cd>::InnerIterator it(peg.y, i); it; ++it)
            scale = std::max(scale, std::abs(it.value()));
        CHECK(std::abs(rs(i)) < 1e-12 * scale);
    }
}

TEST_CASE("single-line admittance layouts") {
    const char* body = R"({
      "buses": [{"id": 1, "kind": "swing"}, {"id": 2}],
      "branches": [{"from": 1, "to": 2, "r": 0.1, "x": 0.2, "b": %B%}]
    })";
    std::string no_chg(body), with_chg(body);
    no_chg.replace(no_chg.find("%B%"), 3, "0.0");
    with_chg.replace(with_chg.find("%B%"), 3, "0.3");

    Network a = parse_case(no_chg, CaseFormat::json);
    cd y = 1.0 / cd(0.1, 0.2);
    CHECK(std::abs(cd(a.y.coeff(0, 0)) - y) < 1e-15);
    CHECK(std::abs(cd(a.y.coeff(0, 1)) + y) < 1e-15);
    CHECK(std::abs(cd(a.y.coeff(1, 0)) + y) < 1e-15);
    CHECK(std::abs(cd(a.y.coeff(1, 1)) - y) < 1e-15);
    CHECK(std::abs(a.ysh(0)) == 0.0);
    CHECK(std::abs(a.ysh(1)) == 0.0);

    Network b = parse_case(with_chg, CaseFormat::json);
    CHECK(std::abs(b.ysh(0) - cd(0.0, 0.15)) < 1e-15);
    CHECK(std::abs(b.ysh(1) - cd(0.0, 0.15)) < 1e-15);
    CHECK(std::abs(cd(b.y.coeff(0, 0)) - y) < 1e-15);  // charging never enters Y
}

TEST_CASE("minimal two-bus JSON case") {
    Network net = parse_case(kTwoBus, CaseFormat::json);
    CHECK(net.n() == 2);
    CHECK(net.swing == 0);
    CHECK(net.controls.empty());
    CHECK(net.buses[1].pd == 0.5);
}

TEST_CASE("concurrent remote control is rejected") {
    const char* txt = R"({
      "buses": [{"id": 1, "kind": "swing"}, {"id": 2}, {"id": 3}, {"id": 4}],
      "branches": [{"from": 1, "to": 2, "x": 0.1}, {"from": 2, "to": 3, "x": 0.1},
                   {"from": 2, "to": 4, "x": 0.1}, {"from": 3, "to": 4, "x": 0.2}],
      "generators": [
        {"bus": 3, "regulates": 2, "qmin": -0.5, "qmax": 0.5, "vsp": 1.02},
        {"bus": 4, "regulates": 2, "qmin": -0.5, "qmax": 0.5, "vsp": 1.02}
      ]
    })";
    CHECK_THROWS_WITH(parse_case(txt, CaseFormat::json),
                      Catch::Matchers::ContainsSubstring("concurrent control unsupported"));
}

TEST_CASE("conflicting voltage setpoints on one bus are rejected") {
    const char* txt = R"({
      "buses": [{"id": 1, "kind": "swing"}, {"id": 2}],
      "branches": [{"from": 1, "to": 2, "x": 0.1}],
      "generators": [
        {"bus": 2, "qmin": -0.5, "qmax": 0.5, "vsp": 1.02},
        {"bus": 2, "qmin": -0.5, "qmax": 0.5, "vsp": 1.03}
      ]
    })";
    CHECK_THROWS_WITH(parse_case(txt, CaseFormat::json),
                      Catch::Matchers::ContainsSubstring("conflicting voltage setpoints"));
}

TEST_CASE("same-bus generators aggregate their limits") {
    const char* txt = R"({
      "buses": [{"id": 1, "kind": "swing"}, {"id": 2}],
      "branches": [{"from": 1, "to": 2, "x": 0.1}],
      "generators": [
        {"bus": 2, "pg": 0.1, "qmin": -0.1, "qmax": 0.3, "vsp": 1.02},
        {"bus": 2, "pg": 0.2, "qmin": -0.2, "qmax": 0.7, "vsp": 1.02}
      ]
    })";
    Network net = parse_case(txt, CaseFormat::json);
    REQUIRE(net.controls.size() == 1);
    CHECK(*net.controls[0].qmax == Catch::Approx(1.0).margin(1e-15));
    CHECK(*net.controls[0].qmin == Catch::Approx(-0.3).margin(1e-15));
    CHECK(net.controls[0].pg == Catch::Approx(0.3).margin(1e-15));
    CHECK(net.controls[0].wsp == Catch::Approx(1.02 * 1.02).margin(1e-15));
}

TEST_CASE("zero-width limits degenerate into a fixed injection") {
    const char* txt = R"({
      "buses": [{"id": 1, "kind": "swing"}, {"id": 2, "kind": "pv"}],
      "branches": [{"from": 1, "to": 2, "x": 0.1}],
      "generators": [{"bus": 2, "pg": 0.4, "qmin": 0.15, "qmax": 0.15, "vsp": 1.02}]
    })";
    Network net = parse_case(txt, CaseFormat::json);
    CHECK(net.controls.empty());
    CHECK(net.buses[1].kind == BusKind::pq);  // re-derived from controls
    CHECK(net.buses[1].pg_fixed == 0.4);
    CHECK(net.buses[1].qg_fixed == 0.15);
}

TEST_CASE("case300 control derivation") {
    Network net = load_case(fixture("case300.m"));
    CHECK(net.n() == 300);
    CHECK(net.controls.size() == 68);  // 69 in-service gen buses, one is the swing
    for (const ControlSet& cs : net.controls) {
        REQUIRE(cs.qmin.has_value());
        REQUIRE(cs.qmax.has_value());
        CHECK(*cs.qmin < *cs.qmax);
    }
}

TEST_CASE("case118 swing angle is honored") {
    Network net = load_case(fixture("case118.m"));
    const Bus& sw = net.buses[static_cast<size_t>(net.swing)];
    CHECK(sw.id == 69);
    CHECK(sw.va == Catch::Approx(30.0 * M_PI / 180.0).margin(1e-15));
}

TEST_CASE("native JSON round-trips bit-identically") {
    for (const char* name : {"case9.m", "case14.m", "case57.m"}) {
        Network net = load_case(fixture(name));
        std::string once = serialize(net);
        Network back = parse_case(once, CaseFormat::json);
        CHECK(serialize(back) == once);
    }
}

TEST_CASE("malformed matpower record reports its line") {
    std::string txt =
        "mpc.baseMVA = 100;\n"
        "mpc.bus = [\n"
        "1 3 0 0 0 0 1 1.0 0 345 1 1.1 0.9;\n"
        "2 1 bad 0 0 0 1 1.0 0 345 1 1.1 0.9;\n"
        "];\n";
    try {
        parse_case(txt, CaseFormat::matpower);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.line == 4);
    }
}

TEST_CASE("duplicate bus id is rejected") {
    const char* txt = R"({
      "buses": [{"id": 1, "kind": "swing"}, {"id": 1}],
      "branches": []
    })";
    CHECK_THROWS_AS(parse_case(txt, CaseFormat::json), ValidationError);
}

TEST_CASE("missing swing bus is rejected") {
    const char* txt = R"({
      "buses": [{"id": 1}, {"id": 2}],
      "branches": [{"from": 1, "to": 2, "x": 0.1}]
    })";
    CHECK_THROWS_AS(parse_case(txt, CaseFormat::json), ValidationError);
}

TEST_CASE("admittance threshold violation names the branch") {
    const char* txt = R"({
      "buses": [{"id": 1, "kind": "swing"}, {"id": 2}],
      "branches": [{"from": 1, "to": 2, "x": 1e9}]
    })";
    CHECK_THROWS_WITH(parse_case(txt, CaseFormat::json),
                      Catch::Matchers::ContainsSubstring("branch 1-2"));
}

TEST_CASE("load scaling touches loads and scheduled generation only") {
    Network net = load_case(fixture("case9.m"));
    Network s = scaled(net, 1.5);
    for (int i = 0; i < net.n(); ++i) {
        CHECK(s.buses[static_cast<size_t>(i)].pd ==
              Catch::Approx(1.5 * net.buses[static_cast<size_t>(i)].pd).margin(1e-15));
        CHECK(s.buses[static_cast<size_t>(i)].bsh == net.buses[static_cast<size_t>(i)].bsh);
    }
    for (size_t c = 0; c < net.controls.size(); ++c) {
        CHECK(s.controls[c].pg == Catch::Approx(1.5 * net.controls[c].pg).margin(1e-15));
        CHECK(*s.controls[c].qmax == *net.controls[c].qmax);  // limits unscaled
    }
}

TEST_CASE("re-basing scales powers and admittances together") {
    Network net = load_case(fixture("case14.m"));
    Network r = rebased(net, 2.0);
    CHECK(r.base_mva == 200.0);
    CHECK(r.buses[3].pd == Catch::Approx(net.buses[3].pd / 2.0).margin(1e-18));
    CHECK(std::abs(r.branches[0].y - net.branches[0].y / 2.0) < 1e-18);
    CHECK(max_rowsum(r) < 1e-12);
}
