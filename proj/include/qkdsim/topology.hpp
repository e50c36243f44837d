#pragma once

#include "qkdsim/error.hpp"
#include "qkdsim/json_util.hpp"
#include "qkdsim/physics.hpp"

#include <algorithm>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace qkdsim {

using SwitchId = std::string;
using PortId = int;

// Committed circuits of one switch, in_port -> out_port. Light travels both ways.
using CrossConnectTable = std::map<PortId, PortId>;
using FabricState = std::map<SwitchId, CrossConnectTable>;

struct PortRef {
    SwitchId switch_id;
    PortId port = 0;

    friend auto operator<=>(const PortRef&, const PortRef&) = default;
};

struct CrossConnect {
    SwitchId switch_id;
    PortId in_port = 0;
    PortId out_port = 0;

    friend auto operator<=>(const CrossConnect&, const CrossConnect&) = default;
};

enum class LinkKind { Coupler, Mcf, Multihop };

inline std::string_view to_string(LinkKind k) {
    switch (k) {
    case LinkKind::Coupler: return "coupler";
    case LinkKind::Mcf: return "mcf";
    case LinkKind::Multihop: return "multihop";
    }
    return "?";
}

struct SwitchSpec {
    SwitchId id;
    int ports = 0;
};

struct LinkSpec {
    std::string id;
    LinkKind kind = LinkKind::Coupler;
    int hop_count = 1;
    ChannelParams channel;
};

struct PathSpec {
    std::string id;
    std::string link_id;
    std::vector<CrossConnect> cross_connects;
};

struct Topology {
    std::vector<SwitchSpec> switches;
    std::vector<LinkSpec> links;
    // Selection order for the monitor; preserved from the file.
    std::vector<PathSpec> paths;
    PortRef alice_port;
    PortRef bob_port;
    // Inter-switch fibers implied by consecutive cross-connects of each path.
    // Stored in both directions.
    std::map<PortRef, PortRef> fibers;

    const SwitchSpec* find_switch(std::string_view id) const {
        auto it = std::find_if(switches.begin(), switches.end(), [&](const auto& s) { return s.id == id; });
        return it == switches.end() ? nullptr : &*it;
    }
    const LinkSpec* find_link(std::string_view id) const {
        auto it = std::find_if(links.begin(), links.end(), [&](const auto& l) { return l.id == id; });
        return it == links.end() ? nullptr : &*it;
    }
    const PathSpec* find_path(std::string_view id) const {
        auto it = std::find_if(paths.begin(), paths.end(), [&](const auto& p) { return p.id == id; });
        return it == paths.end() ? nullptr : &*it;
    }
    // Channel of the link a path runs over.
    const ChannelParams& channel_of(const PathSpec& path) const { return find_link(path.link_id)->channel; }
};

namespace detail {

    inline LinkKind parse_link_kind(const std::string& s, std::string_view ctx) {
        if (s == "coupler") return LinkKind::Coupler;
        if (s == "mcf") return LinkKind::Mcf;
        if (s == "multihop") return LinkKind::Multihop;
        throw ValidationError(std::string(ctx) + ": unknown link kind '" + s + "'");
    }

    inline PortRef parse_port_ref(const json& obj, const char* key) {
        const json& v = obj.contains(key) ? obj.at(key) : json();
        if (!v.is_array() || v.size() != 2 || !v[0].is_string() || !v[1].is_number_integer()) {
            throw ValidationError(std::string("topology: '") + key + "' must be [switch, port]");
        }
        return {v[0].get<std::string>(), v[1].get<int>()};
    }

    inline bool port_exists(const Topology& t, const PortRef& p) {
        const SwitchSpec* sw = t.find_switch(p.switch_id);
        return sw != nullptr && p.port >= 1 && p.port <= sw->ports;
    }

    inline std::string describe(const PortRef& p) { return p.switch_id + ":" + std::to_string(p.port); }

    inline void validate_topology(Topology& t) {
        auto fail = [](const std::string& what) { throw ValidationError("topology: " + what); };

        if (t.switches.empty()) fail("no switches");
        std::set<SwitchId> switch_ids;
        for (const auto& s : t.switches) {
            if (!switch_ids.insert(s.id).second) fail("duplicate switch id '" + s.id + "'");
            if (s.ports < 1) fail("switch '" + s.id + "' must have at least one port");
        }
        if (!port_exists(t, t.alice_port)) fail("alice_port " + describe(t.alice_port) + " does not exist");
        if (!port_exists(t, t.bob_port)) fail("bob_port " + describe(t.bob_port) + " does not exist");
        if (t.alice_port == t.bob_port) fail("alice_port and bob_port coincide");

        std::set<std::string> link_ids;
        for (const auto& l : t.links) {
            if (!link_ids.insert(l.id).second) fail("duplicate link id '" + l.id + "'");
            if (l.kind == LinkKind::Multihop && l.hop_count < 2) fail("multihop link '" + l.id + "' needs hop_count >= 2");
            if (l.kind != LinkKind::Multihop && l.hop_count != 1) fail("single-hop link '" + l.id + "' needs hop_count = 1");
        }

        if (t.paths.empty()) fail("no paths");
        std::set<std::string> path_ids;
        // Every port belongs to at most one path; the QKD endpoint ports are shared by all.
        std::map<PortRef, std::string> port_owner;
        for (const auto& p : t.paths) {
            const std::string ctx = "path '" + p.id + "'";
            if (!path_ids.insert(p.id).second) fail("duplicate path id '" + p.id + "'");
            if (t.find_link(p.link_id) == nullptr) fail(ctx + " references unknown link '" + p.link_id + "'");
            if (p.cross_connects.empty()) fail(ctx + " has no cross-connects");

            for (std::size_t i = 0; i < p.cross_connects.size(); ++i) {
                const CrossConnect& xc = p.cross_connects[i];
                if (t.find_switch(xc.switch_id) == nullptr) fail(ctx + " references unknown switch '" + xc.switch_id + "'");
                const PortRef in{xc.switch_id, xc.in_port};
                const PortRef out{xc.switch_id, xc.out_port};
                if (!port_exists(t, in)) fail(ctx + " references missing port " + describe(in));
                if (!port_exists(t, out)) fail(ctx + " references missing port " + describe(out));
                if (xc.in_port == xc.out_port) fail(ctx + " has a cross-connect with in_port == out_port");
                for (const PortRef& port : {in, out}) {
                    if (port == t.alice_port || port == t.bob_port) continue;
                    auto [it, fresh] = port_owner.emplace(port, p.id);
                    if (!fresh) fail(ctx + " reuses port " + describe(port) + " of path '" + it->second + "'");
                }
                if (i > 0 && p.cross_connects[i - 1].switch_id == xc.switch_id) {
                    fail(ctx + " has consecutive cross-connects on switch '" + xc.switch_id + "'");
                }
            }
            const CrossConnect& first = p.cross_connects.front();
            const CrossConnect& last = p.cross_connects.back();
            if (PortRef{first.switch_id, first.in_port} != t.alice_port) fail(ctx + " does not start at alice_port");
            if (PortRef{last.switch_id, last.out_port} != t.bob_port) fail(ctx + " does not end at bob_port");
            for (const auto& xc : p.cross_connects) {
                for (PortId port : {xc.in_port, xc.out_port}) {
                    const PortRef ref{xc.switch_id, port};
                    if ((ref == t.alice_port || ref == t.bob_port) && &xc != &first && &xc != &last) {
                        fail(ctx + " passes through a QKD endpoint port mid-path");
                    }
                }
            }
            for (std::size_t i = 0; i + 1 < p.cross_connects.size(); ++i) {
                const PortRef a{p.cross_connects[i].switch_id, p.cross_connects[i].out_port};
                const PortRef b{p.cross_connects[i + 1].switch_id, p.cross_connects[i + 1].in_port};
                t.fibers[a] = b;
                t.fibers[b] = a;
            }
        }

        std::size_t longest_single = 0;
        std::size_t shortest_multi = SIZE_MAX;
        for (const auto& p : t.paths) {
            const LinkSpec* l = t.find_link(p.link_id);
            if (l->kind == LinkKind::Multihop) {
                shortest_multi = std::min(shortest_multi, p.cross_connects.size());
            } else {
                longest_single = std::max(longest_single, p.cross_connects.size());
            }
        }
        if (shortest_multi != SIZE_MAX && shortest_multi <= longest_single) {
            fail("multihop paths must traverse more cross-connects than single-hop paths");
        }
    }

} // namespace detail

inline Topology parse_topology(const json& j) {
    if (!j.is_object()) {
        throw ValidationError("topology: document must be an object");
    }
    Topology t;
    for (const auto& s : detail::require<json>(j, "switches", "topology")) {
        t.switches.push_back({detail::require<std::string>(s, "id", "topology.switches"),
                              detail::require<int>(s, "ports", "topology.switches")});
    }
    t.alice_port = detail::parse_port_ref(j, "alice_port");
    t.bob_port = detail::parse_port_ref(j, "bob_port");

    const json links = detail::require<json>(j, "links", "topology");
    for (std::size_t i = 0; i < links.size(); ++i) {
        const std::string ctx = "topology.links[" + std::to_string(i) + "]";
        LinkSpec l;
        l.id = detail::require<std::string>(links[i], "id", ctx);
        l.kind = detail::parse_link_kind(detail::require<std::string>(links[i], "kind", ctx), ctx);
        l.hop_count = detail::require<int>(links[i], "hop_count", ctx);
        l.channel = parse_channel(detail::require<json>(links[i], "channel", ctx), ctx + ".channel");
        t.links.push_back(std::move(l));
    }

    const json paths = detail::require<json>(j, "paths", "topology");
    for (std::size_t i = 0; i < paths.size(); ++i) {
        const std::string ctx = "topology.paths[" + std::to_string(i) + "]";
        PathSpec p;
        p.id = detail::require<std::string>(paths[i], "id", ctx);
        p.link_id = detail::require<std::string>(paths[i], "link", ctx);
        for (const auto& xc : detail::require<json>(paths[i], "cross_connects", ctx)) {
            p.cross_connects.push_back({detail::require<std::string>(xc, "switch", ctx),
                                        detail::require<int>(xc, "in_port", ctx),
                                        detail::require<int>(xc, "out_port", ctx)});
        }
        t.paths.push_back(std::move(p));
    }

    detail::validate_topology(t);
    return t;
}

inline Topology load_topology(const std::filesystem::path& file) {
    const json doc = load_json_file(file);
    try {
        return parse_topology(doc);
    } catch (const ValidationError& e) {
        throw ValidationError(file.string() + ": " + e.what());
    }
}

/// Walks the committed circuit starting at the Alice QKD port and returns the
/// path whose cross-connects form it end to end, or nullopt when the walk does
/// not reach the Bob QKD port over exactly one known path.
inline std::optional<std::string> resolve_active_path(const Topology& topo, const FabricState& fabric) {
    std::size_t budget = 1;
    for (const auto& p : topo.paths) budget += p.cross_connects.size();

    std::set<CrossConnect> walked;
    PortRef at = topo.alice_port;
    for (std::size_t step = 0; step < budget; ++step) {
        auto sw = fabric.find(at.switch_id);
        if (sw == fabric.end()) return std::nullopt;
        const CrossConnectTable& table = sw->second;

        std::optional<CrossConnect> hop;
        PortId exit_port = 0;
        if (auto it = table.find(at.port); it != table.end()) {
            hop = CrossConnect{at.switch_id, it->first, it->second};
            exit_port = it->second;
        } else {
            for (const auto& [in, out] : table) {
                if (out == at.port) {
                    hop = CrossConnect{at.switch_id, in, out};
                    exit_port = in;
                    break;
                }
            }
        }
        if (!hop || !walked.insert(*hop).second) return std::nullopt;

        const PortRef exit{at.switch_id, exit_port};
        if (exit == topo.bob_port) {
            for (const auto& p : topo.paths) {
                const std::set<CrossConnect> wanted(p.cross_connects.begin(), p.cross_connects.end());
                if (wanted == walked) return p.id;
            }
            return std::nullopt;
        }
        auto fiber = topo.fibers.find(exit);
        if (fiber == topo.fibers.end()) return std::nullopt;
        at = fiber->second;
    }
    return std::nullopt;
}

// Fabric state with exactly the given path's cross-connects installed.
inline FabricState fabric_with_path(const Topology& topo, const PathSpec& path) {
    FabricState fabric;
    for (const auto& s : topo.switches) fabric[s.id];
    for (const auto& xc : path.cross_connects) fabric[xc.switch_id][xc.in_port] = xc.out_port;
    return fabric;
}

} // namespace qkdsim
