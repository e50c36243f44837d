#include "qkdsim/optical_switch.hpp"
#include "qkdsim/topology.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <thread>
#include <vector>

using namespace qkdsim;

namespace {

FlowMod add(Xid xid, PortId in, PortId out) { return {xid, "s", FlowCommand::Add, in, out}; }
FlowMod del(Xid xid, PortId in, PortId out) { return {xid, "s", FlowCommand::Delete, in, out}; }

} // namespace

TEST(SwitchState, StagesUntilBarrier) {
    SwitchState s("s", 8);
    EXPECT_EQ(s.handle_flow_mod(add(1, 1, 2)).status, AckStatus::Staged);
    EXPECT_TRUE(s.query_table().empty());
    EXPECT_EQ(s.pending().size(), 1u);
    const auto reply = s.handle_barrier(2);
    EXPECT_EQ(reply.xid, 2u);
    EXPECT_EQ(reply.committed_xids, std::vector<Xid>{1});
    EXPECT_EQ(s.query_table(), (CrossConnectTable{{1, 2}}));
    EXPECT_TRUE(s.pending().empty());
    EXPECT_TRUE(s.handle_barrier(3).committed_xids.empty());
}

TEST(SwitchState, ErrorAcks) {
    SwitchState s("s", 4);
    EXPECT_EQ(s.handle_flow_mod(add(1, 0, 2)).status, AckStatus::NoSuchPort);
    EXPECT_EQ(s.handle_flow_mod(add(2, 1, 5)).status, AckStatus::NoSuchPort);
    EXPECT_EQ(s.handle_flow_mod(add(3, 2, 2)).status, AckStatus::PortInUse);
    EXPECT_EQ(s.handle_flow_mod(del(4, 1, 2)).status, AckStatus::NoSuchEntry);
    EXPECT_EQ(s.handle_flow_mod(add(5, 1, 2)).status, AckStatus::Staged);
    // Conflicts are checked against the table as it will be after the batch.
    EXPECT_EQ(s.handle_flow_mod(add(6, 2, 3)).status, AckStatus::PortInUse);
    EXPECT_EQ(s.handle_flow_mod(add(7, 3, 1)).status, AckStatus::PortInUse);
    EXPECT_EQ(s.handle_flow_mod(del(8, 1, 3)).status, AckStatus::NoSuchEntry);
    EXPECT_EQ(s.handle_barrier(9).committed_xids, std::vector<Xid>{5});
    // Rejected mods never reach the table.
    EXPECT_EQ(s.query_table(), (CrossConnectTable{{1, 2}}));
}

TEST(SwitchState, DeleteThenAddReusesPortInOneBatch) {
    SwitchState s("s", 8);
    s.handle_flow_mod(add(1, 1, 2));
    s.handle_barrier(2);
    EXPECT_EQ(s.handle_flow_mod(del(3, 1, 2)).status, AckStatus::Staged);
    EXPECT_EQ(s.handle_flow_mod(add(4, 1, 3)).status, AckStatus::Staged);
    EXPECT_EQ(s.query_table(), (CrossConnectTable{{1, 2}}));
    EXPECT_EQ(s.handle_barrier(5).committed_xids, (std::vector<Xid>{3, 4}));
    EXPECT_EQ(s.query_table(), (CrossConnectTable{{1, 3}}));
}

TEST(Wire, MessagesAreBitExact) {
    EXPECT_EQ(wire::hello("alice").dump(), R"({"type":"HELLO","switch":"alice"})");
    EXPECT_EQ(wire::flow_mod({7, "alice", FlowCommand::Delete, 1, 2}).dump(),
              R"({"type":"FLOW_MOD","xid":7,"command":"DELETE","in_port":1,"out_port":2})");
    EXPECT_EQ(wire::flow_mod_ack({7, AckStatus::PortInUse}).dump(),
              R"({"type":"FLOW_MOD_ACK","xid":7,"status":"PORT_IN_USE"})");
    EXPECT_EQ(wire::barrier_request(8).dump(), R"({"type":"BARRIER_REQUEST","xid":8})");
    EXPECT_EQ(wire::barrier_reply({8, {6, 7}}).dump(), R"({"type":"BARRIER_REPLY","xid":8,"committed_xids":[6,7]})");
    for (auto s : {AckStatus::Staged, AckStatus::PortInUse, AckStatus::NoSuchEntry, AckStatus::NoSuchPort}) {
        EXPECT_EQ(parse_ack_status(to_string(s)), s);
    }
}

TEST(SwitchAgent, HandlesWireLines) {
    SwitchAgent a("alice", 8);
    EXPECT_EQ(a.handle_line(R"({"type":"FLOW_MOD","xid":1,"command":"ADD","in_port":1,"out_port":2})"),
              R"({"type":"FLOW_MOD_ACK","xid":1,"status":"STAGED"})");
    EXPECT_EQ(a.handle_line(R"({"type":"BARRIER_REQUEST","xid":2})"),
              R"({"type":"BARRIER_REPLY","xid":2,"committed_xids":[1]})");
    for (const char* bad : {"not json", R"({"type":"NOPE"})", R"({"type":"FLOW_MOD","xid":3})",
                            R"({"type":"FLOW_MOD","xid":3,"command":"MOVE","in_port":1,"out_port":2})"}) {
        const json reply = json::parse(a.handle_line(bad));
        EXPECT_EQ(reply["type"], "ERROR") << bad;
    }
    EXPECT_EQ(a.query_table(), (CrossConnectTable{{1, 2}}));
}

// Every placement of observer snapshots around the three steps of a
// 2-entry batch (two flow-mods, then the barrier) sees either the whole
// batch or none of it.
TEST(Atomicity, ExhaustiveInterleavingOfTwoEntryBatch) {
    const CrossConnectTable before{{1, 2}};
    const CrossConnectTable after{{1, 3}};
    const std::vector<std::function<void(SwitchAgent&)>> steps = {
        [](SwitchAgent& a) { a.handle_flow_mod(del(10, 1, 2)); },
        [](SwitchAgent& a) { a.handle_flow_mod(add(11, 1, 3)); },
        [](SwitchAgent& a) { a.handle_barrier(12); },
    };
    const int observers = 4;
    // Each observer picks a gap 0..3 (before step 0, ..., after step 2).
    int checked = 0;
    for (int code = 0; code < 256; ++code) {
        std::vector<int> gap(observers);
        for (int o = 0, c = code; o < observers; ++o, c /= 4) gap[o] = c % 4;
        SwitchAgent a("s", 8);
        a.handle_flow_mod(add(1, 1, 2));
        a.handle_barrier(2);
        for (int g = 0; g <= 3; ++g) {
            for (int o = 0; o < observers; ++o) {
                if (gap[o] != g) continue;
                const auto snap = a.query_table();
                ASSERT_TRUE(snap == before || snap == after);
                ASSERT_EQ(snap == after, g == 3);
                ++checked;
            }
            if (g < 3) steps[g](a);
        }
    }
    EXPECT_EQ(checked, 256 * observers);
}

namespace {

struct Msg {
    SwitchId sw;
    std::function<void(SwitchAgent&)> apply;
    bool barrier;
};

// Flow-mods a switch receives for a path change, deletes first, then its barrier.
std::vector<Msg> switch_script(const SwitchId& sw, const PathSpec* from, const PathSpec* to, Xid& xid) {
    std::vector<Msg> out;
    auto emit = [&](FlowCommand c, const CrossConnect& xc) {
        FlowMod m{++xid, sw, c, xc.in_port, xc.out_port};
        out.push_back({sw, [m](SwitchAgent& a) { ASSERT_EQ(a.handle_flow_mod(m).status, AckStatus::Staged); }, false});
    };
    if (from != nullptr) {
        for (const auto& xc : from->cross_connects) {
            if (xc.switch_id == sw) emit(FlowCommand::Delete, xc);
        }
    }
    for (const auto& xc : to->cross_connects) {
        if (xc.switch_id == sw) emit(FlowCommand::Add, xc);
    }
    if (!out.empty()) {
        const Xid b = ++xid;
        out.push_back({sw, [b](SwitchAgent& a) { a.handle_barrier(b); }, true});
    }
    return out;
}

void for_each_interleaving(std::vector<std::vector<Msg>>& scripts, std::vector<std::size_t>& pos,
                           std::vector<const Msg*>& order, const std::function<void(const std::vector<const Msg*>&)>& fn) {
    bool any = false;
    for (std::size_t i = 0; i < scripts.size(); ++i) {
        if (pos[i] == scripts[i].size()) continue;
        any = true;
        order.push_back(&scripts[i][pos[i]++]);
        for_each_interleaving(scripts, pos, order, fn);
        --pos[i];
        order.pop_back();
    }
    if (!any) fn(order);
}

} // namespace

// Any global ordering of per-switch message streams: the old path resolves
// only while none of its switches has committed, the new path only once all
// of its switches have, and nothing resolves in between.
TEST(Atomicity, NoPathResolvesDuringHalfCommittedTransition) {
    const auto topo = load_topology(std::filesystem::path(QKDSIM_DATA_DIR) / "topology" / "reference.json");
    std::vector<std::pair<const PathSpec*, const PathSpec*>> transitions;
    for (const auto& to : topo.paths) {
        transitions.emplace_back(nullptr, &to);
        for (const auto& from : topo.paths) {
            if (&from != &to) transitions.emplace_back(&from, &to);
        }
    }
    std::size_t orders = 0;
    for (const auto& [from, to] : transitions) {
        Xid xid = 0;
        std::vector<std::vector<Msg>> scripts;
        for (const auto& s : topo.switches) {
            auto script = switch_script(s.id, from, to, xid);
            if (!script.empty()) scripts.push_back(std::move(script));
        }
        std::vector<std::size_t> pos(scripts.size(), 0);
        std::vector<const Msg*> order;
        for_each_interleaving(scripts, pos, order, [&](const std::vector<const Msg*>& seq) {
            ++orders;
            std::map<SwitchId, std::unique_ptr<SwitchAgent>> agents;
            for (const auto& s : topo.switches) agents[s.id] = std::make_unique<SwitchAgent>(s.id, s.ports);
            if (from != nullptr) {
                for (const auto& xc : from->cross_connects) {
                    agents[xc.switch_id]->handle_flow_mod({0, xc.switch_id, FlowCommand::Add, xc.in_port, xc.out_port});
                    agents[xc.switch_id]->handle_barrier(0);
                }
            }
            auto resolve = [&] {
                FabricState f;
                for (const auto& [id, a] : agents) f[id] = a->query_table();
                return resolve_active_path(topo, f);
            };
            auto on = [](const PathSpec* p, const SwitchId& sw) {
                return p != nullptr && std::any_of(p->cross_connects.begin(), p->cross_connects.end(),
                                                   [&](const CrossConnect& xc) { return xc.switch_id == sw; });
            };
            std::set<SwitchId> to_switches, from_switches;
            for (const auto& s : topo.switches) {
                if (on(to, s.id)) to_switches.insert(s.id);
                if (on(from, s.id)) from_switches.insert(s.id);
            }
            std::set<SwitchId> committed;
            ASSERT_EQ(resolve(), from ? std::optional<std::string>(from->id) : std::nullopt);
            for (const Msg* m : seq) {
                m->apply(*agents[m->sw]);
                if (m->barrier) committed.insert(m->sw);
                const auto r = resolve();
                const bool to_done = std::includes(committed.begin(), committed.end(), to_switches.begin(),
                                                   to_switches.end());
                const bool from_untouched = std::none_of(committed.begin(), committed.end(),
                                                         [&](const SwitchId& sw) { return from_switches.count(sw); });
                if (r == to->id) {
                    ASSERT_TRUE(to_done);
                } else if (r) {
                    ASSERT_TRUE(from != nullptr && *r == from->id && from_untouched);
                } else {
                    ASSERT_FALSE(to_done);
                }
            }
        });
    }
    EXPECT_GT(orders, 1000u);
}

TEST(Atomicity, ConcurrentObserversNeverSeeHalfBatch) {
    SwitchAgent a("s", 8);
    a.handle_flow_mod(add(1, 1, 2));
    a.handle_barrier(2);
    std::atomic<bool> done{false};
    std::atomic<long> bad{0}, seen{0};
    std::vector<std::thread> readers;
    for (int r = 0; r < 3; ++r) {
        readers.emplace_back([&] {
            while (!done) {
                const auto t = a.query_table();
                const bool ok = t == CrossConnectTable{{1, 2}} || t == CrossConnectTable{{1, 3}};
                if (!ok) ++bad;
                ++seen;
            }
        });
    }
    while (seen.load() < 3) std::this_thread::yield();
    Xid xid = 10;
    for (int i = 0; i < 20000; ++i) {
        const PortId from = i % 2 == 0 ? 2 : 3, to = i % 2 == 0 ? 3 : 2;
        a.handle_flow_mod(del(++xid, 1, from));
        a.handle_flow_mod(add(++xid, 1, to));
        a.handle_barrier(++xid);
    }
    done = true;
    for (auto& t : readers) t.join();
    EXPECT_EQ(bad.load(), 0);
    EXPECT_GT(seen.load(), 0);
}
