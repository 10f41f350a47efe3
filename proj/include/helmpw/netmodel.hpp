// Grid case model: parsing (MATPOWER .m subset and a native JSON schema),
// admittance construction, and voltage-control set derivation.
#pragma once

#include <Eigen/Sparse>

#include <json.hpp>

#include <helmpw/series.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace helmpw {

struct ParseError : std::runtime_error {
    ParseError(const std::string& what, int line_)
        : std::runtime_error("line " + std::to_string(line_) + ": " + what), line(line_) {}
    int line;
};

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConditioningError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class BusKind { swing, pq, pv };

struct Bus {
    int id = 0;
    BusKind kind = BusKind::pq;
    double pd = 0.0, qd = 0.0;        // fixed load, pu
    double gsh = 0.0, bsh = 0.0;      // bus shunt admittance, pu
    double pg_fixed = 0.0;            // active injection of non-regulating units, pu
    double qg_fixed = 0.0;            // reactive injection pinned by zero-width limits, pu
    cd iconst{0.0, 0.0};              // constant-current injection, pu (native JSON only)
    double vsp = 1.0;                 // magnitude setpoint where regulated (and swing)
    double va = 0.0;                  // angle, rad (meaningful for the swing)
    double vm0 = 1.0, va0 = 0.0;      // file operating point, used as NR warm data
};

struct Branch {
    int from = 0, to = 0;             // external bus ids
    cd y{0.0, 0.0};                   // series admittance, pu
    double b_charge = 0.0;            // total line charging susceptance, pu
    double tap = 1.0;                 // off-nominal ratio (from side)
    double shift = 0.0;               // phase shift, rad
};

struct ControlSet {
    int ctrl_bus = 0;                 // bus injecting reactive power (a)
    int reg_bus = 0;                  // bus whose |V| is held (b)
    std::optional<double> qmin, qmax; // aggregate limits, pu; absent = one-sided/none
    double vsp = 1.0;
    double wsp = 1.0;                 // vsp^2
    double pg = 0.0;                  // aggregate active injection, pu
};

struct AdmittanceThresholds {
    double y_min = 1e-6, y_max = 1e6; // pu magnitude window for series admittances
};

struct Network {
    double base_mva = 100.0;
    std::vector<Bus> buses;
    std::vector<Branch> branches;
    std::vector<ControlSet> controls;

    // derived by build_admittance
    Eigen::SparseMatrix<cd> y;        // transmission matrix; rows sum to zero
    Eigen::VectorXcd ysh;             // charging + transformer surplus + bus shunts
    int swing = -1;                   // bus index (position, not id)

    int n() const { return static_cast<int>(buses.size()); }

    int bus_index(int id) const {
        auto it = index_.find(id);
        if (it == index_.end())
            throw ValidationError("unknown bus id " + std::to_string(id));
        return it->second;
    }

    void rebuild_index() {
        index_.clear();
        for (int i = 0; i < n(); ++i) {
            if (!index_.emplace(buses[static_cast<size_t>(i)].id, i).second)
                throw ValidationError("duplicate bus id " +
                                      std::to_string(buses[static_cast<size_t>(i)].id));
        }
    }

private:
    std::unordered_map<int, int> index_;
};

enum class CaseFormat { matpower, json };

// ---------------------------------------------------------------------------
// admittance construction
// ---------------------------------------------------------------------------

/// Build the transmission matrix Y (row sums exactly cancel per branch) and
/// the shunt vector. Line charging, the tap-model surplus, and bus shunts all
/// accumulate into Ysh; only series couplings live in Y.
inline void build_admittance(Network& net, const AdmittanceThresholds& th = {}) {
    const int n = net.n();
    std::vector<Eigen::Triplet<cd>> trip;
    net.ysh = Eigen::VectorXcd::Zero(n);
    for (size_t k = 0; k < net.branches.size(); ++k) {
        const Branch& br = net.branches[k];
        double ay = std::abs(br.y);
        if (!(ay >= th.y_min && ay <= th.y_max))
            throw ConditioningError("branch " + std::to_string(br.from) + "-" +
                                    std::to_string(br.to) + ": |y| = " + std::to_string(ay) +
                                    " outside [" + std::to_string(th.y_min) + ", " +
                                    std::to_string(th.y_max) + "]");
        int f = net.bus_index(br.from), t = net.bus_index(br.to);
        double tap = br.tap == 0.0 ? 1.0 : br.tap;
        cd rot = std::polar(1.0, br.shift);
        cd y_ft = br.y / (tap * std::conj(rot));  // effective series seen from row f
        cd y_tf = br.y / (tap * rot);             // ... and from row t
        cd half_chg(0.0, br.b_charge / 2.0);
        cd full_f = (br.y + half_chg) / (tap * tap);
        cd full_t = br.y + half_chg;
        trip.emplace_back(f, f, y_ft);
        trip.emplace_back(f, t, -y_ft);
        trip.emplace_back(t, t, y_tf);
        trip.emplace_back(t, f, -y_tf);
        net.ysh(f) += full_f - y_ft;
        net.ysh(t) += full_t - y_tf;
    }
    for (int i = 0; i < n; ++i) {
        const Bus& b = net.buses[static_cast<size_t>(i)];
        net.ysh(i) += cd(b.gsh, b.bsh);
    }
    net.y.resize(n, n);
    net.y.setFromTriplets(trip.begin(), trip.end());
    net.y.makeCompressed();
}

// ---------------------------------------------------------------------------
// shared validation / control derivation
// ---------------------------------------------------------------------------

namespace detail {

struct RawGen {
    int bus = 0, reg = 0;             // ids; reg == bus for local regulation
    double pg = 0, qmin = 0, qmax = 0, vsp = 1.0;
    bool has_qmin = true, has_qmax = true;
};

/// Aggregate per-bus generator records into ControlSets; fold zero-width
/// units into fixed injections; re-derive bus kinds.
inline void derive_controls(Network& net, const std::vector<RawGen>& gens) {
    const double width_eps = 1e-12;
    std::vector<RawGen> agg;  // one per controlling bus, in first-seen order
    std::unordered_map<int, size_t> slot;
    for (const RawGen& g : gens) {
        int bi = net.bus_index(g.bus);  // also validates the id
        if (bi == net.swing) {
            // swing units only pin the swing magnitude setpoint
            net.buses[static_cast<size_t>(bi)].vsp = g.vsp;
            continue;
        }
        if (g.has_qmin && g.has_qmax && std::abs(g.qmax - g.qmin) <= width_eps) {
            Bus& b = net.buses[static_cast<size_t>(bi)];
            b.pg_fixed += g.pg;
            b.qg_fixed += g.qmin;
            continue;
        }
        auto it = slot.find(g.bus);
        if (it == slot.end()) {
            slot.emplace(g.bus, agg.size());
            agg.push_back(g);
        } else {
            RawGen& a = agg[it->second];
            if (std::abs(a.vsp - g.vsp) > 1e-6)
                throw ValidationError("bus " + std::to_string(g.bus) +
                                      ": conflicting voltage setpoints " +
                                      std::to_string(a.vsp) + " vs " + std::to_string(g.vsp));
            if (a.reg != g.reg)
                throw ValidationError("bus " + std::to_string(g.bus) +
                                      ": units disagree on the regulated bus");
            a.pg += g.pg;
            if (a.has_qmin && g.has_qmin)
                a.qmin += g.qmin;
            else
                a.has_qmin = false;
            if (a.has_qmax && g.has_qmax)
                a.qmax += g.qmax;
            else
                a.has_qmax = false;
        }
    }

    net.controls.clear();
    std::unordered_map<int, int> reg_owner;  // regulated bus id -> controlling bus id
    for (const RawGen& a : agg) {
        net.bus_index(a.reg);
        if (net.bus_index(a.reg) == net.swing)
            throw ValidationError("bus " + std::to_string(a.bus) +
                                  " attempts to regulate the swing bus");
        auto [it, fresh] = reg_owner.emplace(a.reg, a.bus);
        if (!fresh)
            throw ValidationError("bus " + std::to_string(a.reg) +
                                  " regulated from buses " + std::to_string(it->second) +
                                  " and " + std::to_string(a.bus) +
                                  ": concurrent control unsupported");
        if (a.has_qmin && a.has_qmax && !(a.qmin < a.qmax))
            throw ValidationError("bus " + std::to_string(a.bus) + ": Qmin >= Qmax");
        ControlSet cs;
        cs.ctrl_bus = a.bus;
        cs.reg_bus = a.reg;
        if (a.has_qmin) cs.qmin = a.qmin;
        if (a.has_qmax) cs.qmax = a.qmax;
        cs.vsp = a.vsp;
        cs.wsp = a.vsp * a.vsp;
        cs.pg = a.pg;
        net.controls.push_back(cs);
    }

    // bus kinds follow from the derived control sets, not the file columns
    for (Bus& b : net.buses)
        if (b.kind != BusKind::swing) b.kind = BusKind::pq;
    for (const ControlSet& cs : net.controls) {
        net.buses[static_cast<size_t>(net.bus_index(cs.ctrl_bus))].kind = BusKind::pv;
        Bus& reg = net.buses[static_cast<size_t>(net.bus_index(cs.reg_bus))];
        reg.kind = BusKind::pv;
        reg.vsp = cs.vsp;
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MATPOWER parser (numeric matrix subset)
// ---------------------------------------------------------------------------

namespace detail {

struct MRow {
    std::vector<double> v;
    int line;
};

/// Extract the rows of `mpc.<name> = [ ... ];`. Name must match exactly
/// (so `gen` does not swallow `gencost`).
inline std::vector<MRow> matrix_block(const std::string& text, const std::string& name,
                                      bool required) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    const std::string key = "mpc." + name;
    bool inside = false;
    std::vector<MRow> rows;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto cut = line.find('%'); cut != std::string::npos) line.erase(cut);
        if (!inside) {
            auto pos = line.find(key);
            if (pos == std::string::npos) continue;
            auto rest = line.substr(pos + key.size());
            auto nonspace = rest.find_first_not_of(" \t");
            if (nonspace == std::string::npos || rest[nonspace] != '=') continue;
            if (rest.find('[') == std::string::npos)
                throw ParseError(key + ": expected '[' on the assignment line", lineno);
            inside = true;
            line = rest.substr(rest.find('[') + 1);
        }
        bool closes = false;
        if (auto endpos = line.find(']'); endpos != std::string::npos) {
            line.erase(endpos);
            closes = true;
        }
        std::replace(line.begin(), line.end(), ';', ' ');
        std::replace(line.begin(), line.end(), ',', ' ');
        // strtod-based tokenizer: stream extraction rejects the Inf literals
        // some distribution cases carry in their limit columns
        MRow row{{}, lineno};
        std::istringstream ls(line);
        std::string tok;
        while (ls >> tok) {
            char* end = nullptr;
            double x = std::strtod(tok.c_str(), &end);
            if (end != tok.c_str() + tok.size() || std::isnan(x))
                throw ParseError(key + ": malformed numeric record", lineno);
            row.v.push_back(x);
        }
        if (!row.v.empty()) rows.push_back(std::move(row));
        if (closes) return rows;
    }
    if (inside) throw ParseError(key + ": unterminated matrix block", lineno);
    if (required) throw ParseError(key + " block not found", lineno);
    return rows;
}

inline Network parse_matpower(const std::string& text, const AdmittanceThresholds& th) {
    Network net;
    {
        auto pos = text.find("mpc.baseMVA");
        if (pos == std::string::npos) throw ParseError("mpc.baseMVA not found", 0);
        auto eq = text.find('=', pos);
        if (eq == std::string::npos) throw ParseError("mpc.baseMVA: missing '='", 0);
        net.base_mva = std::stod(text.substr(eq + 1));
        if (!(net.base_mva > 0)) throw ParseError("mpc.baseMVA must be positive", 0);
    }
    const double base = net.base_mva;
    const double deg = M_PI / 180.0;

    for (const auto& row : matrix_block(text, "bus", true)) {
        if (row.v.size() < 13) throw ParseError("bus record has fewer than 13 columns", row.line);
        Bus b;
        b.id = static_cast<int>(row.v[0]);
        int type = static_cast<int>(row.v[1]);
        switch (type) {
            case 1: b.kind = BusKind::pq; break;
            case 2: b.kind = BusKind::pv; break;
            case 3: b.kind = BusKind::swing; break;
            default:
                throw ParseError("bus " + std::to_string(b.id) + ": unsupported type " +
                                 std::to_string(type), row.line);
        }
        b.pd = row.v[2] / base;
        b.qd = row.v[3] / base;
        b.gsh = row.v[4] / base;
        b.bsh = row.v[5] / base;
        b.vm0 = row.v[7];
        b.va0 = row.v[8] * deg;
        b.vsp = b.vm0;
        b.va = b.va0;
        net.buses.push_back(b);
    }
    net.rebuild_index();

    int swing_count = 0;
    for (int i = 0; i < net.n(); ++i)
        if (net.buses[static_cast<size_t>(i)].kind == BusKind::swing) {
            net.swing = i;
            ++swing_count;
        }
    if (swing_count == 0) throw ValidationError("no swing bus");
    if (swing_count > 1) throw ValidationError("multiple swing buses");

    std::vector<detail::RawGen> gens;
    for (const auto& row : matrix_block(text, "gen", true)) {
        if (row.v.size() < 8) throw ParseError("gen record has fewer than 8 columns", row.line);
        if (row.v[7] <= 0) continue;  // out of service
        detail::RawGen g;
        g.bus = static_cast<int>(row.v[0]);
        g.reg = g.bus;  // .m records regulate locally
        g.pg = row.v[1] / base;
        g.has_qmax = std::isfinite(row.v[3]);  // Inf marks an absent limit
        g.has_qmin = std::isfinite(row.v[4]);
        if (g.has_qmax) g.qmax = row.v[3] / base;
        if (g.has_qmin) g.qmin = row.v[4] / base;
        g.vsp = row.v[5];
        gens.push_back(g);
    }

    for (const auto& row : matrix_block(text, "branch", true)) {
        if (row.v.size() < 11)
            throw ParseError("branch record has fewer than 11 columns", row.line);
        if (row.v[10] <= 0) continue;  // out of service
        Branch br;
        br.from = static_cast<int>(row.v[0]);
        br.to = static_cast<int>(row.v[1]);
        if (br.from == br.to)
            throw ParseError("branch with identical endpoints " + std::to_string(br.from),
                             row.line);
        cd z(row.v[2], row.v[3]);
        if (std::abs(z) == 0.0)
            throw ParseError("branch " + std::to_string(br.from) + "-" +
                             std::to_string(br.to) + " has zero impedance", row.line);
        br.y = 1.0 / z;
        br.b_charge = row.v[4];
        br.tap = row.v[8] == 0.0 ? 1.0 : row.v[8];
        br.shift = row.v[9] * deg;
        net.bus_index(br.from);
        net.bus_index(br.to);
        net.branches.push_back(br);
    }

    detail::derive_controls(net, gens);
    build_admittance(net, th);
    return net;
}

// ---------------------------------------------------------------------------
// native JSON schema (per-unit throughout; see README for the field list)
// ---------------------------------------------------------------------------

inline Network parse_json(const std::string& text, const AdmittanceThresholds& th) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(e.what(), 0);
    }
    try {
        Network net;
        net.base_mva = j.value("base_mva", 100.0);
        for (const auto& jb : j.at("buses")) {
            Bus b;
            b.id = jb.at("id").get<int>();
            std::string kind = jb.value("kind", "pq");
            if (kind == "swing")
                b.kind = BusKind::swing;
            else if (kind == "pv")
                b.kind = BusKind::pv;
            else if (kind == "pq")
                b.kind = BusKind::pq;
            else
                throw ValidationError("bus " + std::to_string(b.id) + ": unknown kind '" +
                                      kind + "'");
            b.pd = jb.value("pd", 0.0);
            b.qd = jb.value("qd", 0.0);
            b.gsh = jb.value("gsh", 0.0);
            b.bsh = jb.value("bsh", 0.0);
            b.pg_fixed = jb.value("pg_fixed", 0.0);
            b.qg_fixed = jb.value("qg_fixed", 0.0);
            if (jb.contains("iconst")) {
                auto& ji = jb.at("iconst");
                b.iconst = cd(ji.at(0).get<double>(), ji.at(1).get<double>());
            }
            b.vsp = jb.value("vsp", 1.0);
            b.va = jb.value("va", 0.0);
            b.vm0 = jb.value("vm0", b.vsp);
            b.va0 = jb.value("va0", b.va);
            net.buses.push_back(b);
        }
        net.rebuild_index();
        int swing_count = 0;
        for (int i = 0; i < net.n(); ++i)
            if (net.buses[static_cast<size_t>(i)].kind == BusKind::swing) {
                net.swing = i;
                ++swing_count;
            }
        if (swing_count == 0) throw ValidationError("no swing bus");
        if (swing_count > 1) throw ValidationError("multiple swing buses");

        for (const auto& jb : j.at("branches")) {
            Branch br;
            br.from = jb.at("from").get<int>();
            br.to = jb.at("to").get<int>();
            if (br.from == br.to)
                throw ValidationError("branch with identical endpoints " +
                                      std::to_string(br.from));
            if (jb.contains("y")) {
                br.y = cd(jb.at("y").at(0).get<double>(), jb.at("y").at(1).get<double>());
            } else {
                cd z(jb.value("r", 0.0), jb.value("x", 0.0));
                if (std::abs(z) == 0.0)
                    throw ValidationError("branch " + std::to_string(br.from) + "-" +
                                          std::to_string(br.to) + " has zero impedance");
                br.y = 1.0 / z;
            }
            br.b_charge = jb.value("b", 0.0);
            br.tap = jb.value("tap", 1.0);
            if (br.tap == 0.0) br.tap = 1.0;
            br.shift = jb.value("shift", 0.0);
            net.branches.push_back(br);
        }

        std::vector<detail::RawGen> gens;
        for (const auto& jg : j.value("generators", nlohmann::json::array())) {
            if (jg.value("status", 1) <= 0) continue;
            detail::RawGen g;
            g.bus = jg.at("bus").get<int>();
            g.reg = jg.value("regulates", g.bus);
            g.pg = jg.value("pg", 0.0);
            g.has_qmin = jg.contains("qmin");
            g.has_qmax = jg.contains("qmax");
            if (g.has_qmin) g.qmin = jg.at("qmin").get<double>();
            if (g.has_qmax) g.qmax = jg.at("qmax").get<double>();
            g.vsp = jg.value("vsp", 1.0);
            gens.push_back(g);
        }
        detail::derive_controls(net, gens);
        build_admittance(net, th);
        return net;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(e.what(), 0);
    }
}

}  // namespace detail

inline Network parse_case(const std::string& text, CaseFormat format,
                          const AdmittanceThresholds& th = {}) {
    return format == CaseFormat::matpower ? detail::parse_matpower(text, th)
                                          : detail::parse_json(text, th);
}

/// Read a case file; format from the extension (.m / .json) unless forced.
inline Network load_case(const std::string& path,
                         std::optional<CaseFormat> format = std::nullopt,
                         const AdmittanceThresholds& th = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open case file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    CaseFormat f = format.value_or(path.size() >= 5 && path.substr(path.size() - 5) == ".json"
                                       ? CaseFormat::json
                                       : CaseFormat::matpower);
    return parse_case(buf.str(), f, th);
}

/// Serialize to the native JSON schema. Values are emitted verbatim (shortest
/// round-trip decimal), so parse(serialize(net)) reproduces the network
/// bit-identically.
inline std::string serialize(const Network& net) {
    nlohmann::ordered_json j;
    j["base_mva"] = net.base_mva;
    auto& jbs = j["buses"] = nlohmann::ordered_json::array();
    for (const Bus& b : net.buses) {
        nlohmann::ordered_json jb;
        jb["id"] = b.id;
        jb["kind"] = b.kind == BusKind::swing ? "swing" : (b.kind == BusKind::pv ? "pv" : "pq");
        jb["pd"] = b.pd;
        jb["qd"] = b.qd;
        jb["gsh"] = b.gsh;
        jb["bsh"] = b.bsh;
        jb["pg_fixed"] = b.pg_fixed;
        jb["qg_fixed"] = b.qg_fixed;
        jb["iconst"] = {b.iconst.real(), b.iconst.imag()};
        jb["vsp"] = b.vsp;
        jb["va"] = b.va;
        jb["vm0"] = b.vm0;
        jb["va0"] = b.va0;
        jbs.push_back(jb);
    }
    auto& jbr = j["branches"] = nlohmann::ordered_json::array();
    for (const Branch& br : net.branches) {
        nlohmann::ordered_json jb;
        jb["from"] = br.from;
        jb["to"] = br.to;
        jb["y"] = {br.y.real(), br.y.imag()};
        jb["b"] = br.b_charge;
        jb["tap"] = br.tap;
        jb["shift"] = br.shift;
        jbr.push_back(jb);
    }
    auto& jgs = j["generators"] = nlohmann::ordered_json::array();
    for (const ControlSet& cs : net.controls) {
        nlohmann::ordered_json jg;
        jg["bus"] = cs.ctrl_bus;
        jg["regulates"] = cs.reg_bus;
        jg["pg"] = cs.pg;
        if (cs.qmin) jg["qmin"] = *cs.qmin;
        if (cs.qmax) jg["qmax"] = *cs.qmax;
        jg["vsp"] = cs.vsp;
        jgs.push_back(jg);
    }
    return j.dump(2);
}

/// Loading scale: multiplies loads and scheduled generation (limits, shunts,
/// and pinned reactive injections untouched); the swing absorbs the balance.
inline Network scaled(const Network& net, double lambda) {
    Network out = net;
    for (Bus& b : out.buses) {
        b.pd *= lambda;
        b.qd *= lambda;
        b.pg_fixed *= lambda;
    }
    for (ControlSet& cs : out.controls) cs.pg *= lambda;
    return out;
}

/// Express the same physical grid on MVA base alpha*base: per-unit powers and
/// admittances scale by 1/alpha, voltages are untouched.
inline Network rebased(const Network& net, double alpha) {
    Network out = net;
    out.base_mva = net.base_mva * alpha;
    for (Bus& b : out.buses) {
        b.pd /= alpha;
        b.qd /= alpha;
        b.gsh /= alpha;
        b.bsh /= alpha;
        b.pg_fixed /= alpha;
        b.qg_fixed /= alpha;
        b.iconst /= alpha;
    }
    for (Branch& br : out.branches) {
        br.y /= alpha;
        br.b_charge /= alpha;
    }
    for (ControlSet& cs : out.controls) {
        if (cs.qmin) *cs.qmin /= alpha;
        if (cs.qmax) *cs.qmax /= alpha;
        cs.pg /= alpha;
    }
    build_admittance(out, AdmittanceThresholds{0.0, std::numeric_limits<double>::infinity()});
    return out;
}

}  // namespace helmpw
