#pragma once

// Dynamic slicing of control data writers.
//
// For each benign input the program runs twice: once with a load trace to
// learn the concrete addresses every load site reads, then with watchpoints
// on those addresses. Each store that hits a watched address becomes an edge
// from its WIO to the slot in the Data Source Graph.

#include <climits>
#include <cstdio>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "proconda/ident.hpp"
#include "proconda/machine.hpp"

namespace proconda {

class SliceError : public Error {
public:
  using Error::Error;
};

struct ControlDataSlot {
  std::string id;  // origin LoadSite id
  LoadSite origin;
  std::set<std::uint32_t> observed_addresses;
  std::uint32_t width = 4;
  friend bool operator==(const ControlDataSlot&, const ControlDataSlot&) = default;

  /// Return-address slot: a pc/lr value restored from the stack.
  bool is_return_slot() const {
    return origin.paired_store && (origin.target == Reg::pc || origin.target == Reg::lr) &&
           origin.base.kind == BaseExpr::Kind::Stack;
  }
};

struct DsgEdge {
  CodeLocation wio;
  std::string slot;
  friend auto operator<=>(const DsgEdge&, const DsgEdge&) = default;
};

struct DataSourceGraph {
  std::map<std::string, ControlDataSlot> slots;
  std::set<DsgEdge> edges;
  friend bool operator==(const DataSourceGraph&, const DataSourceGraph&) = default;

  std::set<CodeLocation> writers() const {
    std::set<CodeLocation> w;
    for (const auto& e : edges) w.insert(e.wio);
    return w;
  }

  std::vector<CodeLocation> writers_of(std::string_view slot) const {
    std::vector<CodeLocation> w;
    for (const auto& e : edges)
      if (e.slot == slot) w.push_back(e.wio);
    return w;
  }
};

struct RunRecord {
  std::string input;
  std::uint32_t exit_code = 0;
  std::size_t events = 0;
  std::size_t blocks = 0;
  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

struct SliceOptions {
  double coverage_threshold = 0.92;
  MachineOptions machine;
};

struct SliceResult {
  DataSourceGraph graph;
  double coverage = 0.0;
  double threshold = 0.92;
  std::size_t runs = 0;
  bool finalized = false;
  std::vector<RunRecord> records;
  std::vector<Unresolved> unresolved;  // carried over from phase 1
  std::vector<std::string> unreached_slots;  // slots no input executed
  std::string diagnostic;
  friend bool operator==(const SliceResult&, const SliceResult&) = default;
};

/// Runs `input` once with load tracing. Every slot-bearing load site of the
/// report gets an entry; sites the run never reached map to an empty set.
inline std::map<std::string, std::set<std::uint32_t>> resolve_watch_addresses(
    const Program& p, const MemoryLayout& layout, const TestInput& input, const ControlDataReport& report,
    const MachineOptions& options = {}, std::map<std::string, std::uint32_t>* widths = nullptr) {
  std::map<std::string, std::set<std::uint32_t>> out;
  std::map<std::pair<CodeLocation, Reg>, std::vector<std::string>> by_read;
  for (const auto& ls : report.load_sites) {
    if (!ls.has_slot()) continue;
    out[ls.id()];
    by_read[{*ls.read_loc, ls.read_reg}].push_back(ls.id());
  }
  MachineHooks hooks;
  hooks.on_load = [&](const MemAccess& a) {
    auto it = by_read.find({a.loc, a.reg});
    if (it == by_read.end()) return;
    for (const auto& id : it->second) {
      out[id].insert(a.address);
      if (widths) (*widths)[id] = a.width;
    }
  };
  RunResult r = run_program(p, layout, input, options, hooks);
  if (auto t = r.trap())
    throw SliceError("benign input '" + input.name + "' trapped while tracing: " + format_trap(*t));
  return out;
}

/// Watchpoints covering every observed slot address.
inline std::vector<Watchpoint> watchpoints_for(const std::map<std::string, std::set<std::uint32_t>>& addresses,
                                               const std::map<std::string, std::uint32_t>& widths) {
  std::set<std::pair<std::uint32_t, std::uint32_t>> unique;
  for (const auto& [id, set] : addresses) {
    auto w = widths.find(id);
    for (auto a : set) unique.insert({a, w == widths.end() ? 4u : w->second});
  }
  std::vector<Watchpoint> out;
  for (auto [a, w] : unique) out.push_back({a, w});
  return out;
}

inline bool overlaps(std::uint32_t a, std::uint32_t aw, std::uint32_t b, std::uint32_t bw) {
  return a < b + bw && b < a + aw;
}

inline SliceResult build_dsg(const Program& p, const MemoryLayout& layout, const ControlDataReport& report,
                             const std::vector<TestInput>& suite, const SliceOptions& options = {}) {
  if (suite.empty()) throw SliceError("test-input suite is empty");
  SliceResult result;
  result.threshold = options.coverage_threshold;
  result.unresolved = report.unresolved;
  for (const auto& ls : report.load_sites)
    if (ls.has_slot()) result.graph.slots[ls.id()] = ControlDataSlot{ls.id(), ls, {}, 4};

  std::vector<std::set<BlockId>> coverage;
  for (const auto& input : suite) {
    std::map<std::string, std::uint32_t> widths;
    auto addresses = resolve_watch_addresses(p, layout, input, report, options.machine, &widths);
    for (const auto& [id, set] : addresses) {
      auto& slot = result.graph.slots.at(id);
      slot.observed_addresses.insert(set.begin(), set.end());
      if (auto w = widths.find(id); w != widths.end()) slot.width = w->second;
    }
    RunResult run = run_with_watchpoints(p, layout, input, watchpoints_for(addresses, widths), options.machine);
    if (auto t = run.trap())
      throw SliceError("benign input '" + input.name + "' trapped: " + format_trap(*t));
    for (const auto& e : run.events) {
      for (const auto& [id, set] : addresses) {
        const std::uint32_t w = widths.count(id) ? widths.at(id) : 4;
        for (auto a : set) {
          if (overlaps(e.address, e.width, a, w)) {
            result.graph.edges.insert({e.wio, id});
            break;
          }
        }
      }
    }
    coverage.push_back(run.coverage);
    result.records.push_back({input.name, *run.exit_code(), run.events.size(), run.coverage.size()});
  }
  result.runs = suite.size();
  result.coverage = coverage_fraction(p, coverage);
  for (const auto& [id, slot] : result.graph.slots)
    if (slot.observed_addresses.empty()) result.unreached_slots.push_back(id);
  result.finalized = result.coverage >= result.threshold;
  if (!result.finalized) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "basic-block coverage %.4f is below the threshold %.4f after %zu run(s)",
                  result.coverage, result.threshold, result.runs);
    result.diagnostic = buf;
  }
  return result;
}

inline bool wio_permitted(const DataSourceGraph& g, const CodeLocation& wio, std::string_view slot) {
  if (!g.slots.count(std::string(slot))) throw SliceError("unknown slot '" + std::string(slot) + "'");
  return g.edges.count({wio, std::string(slot)}) > 0;
}

// ---------------------------------------------------------------------------
// Boundary-value input generation

struct ScalarDomain {
  std::int32_t lo = INT32_MIN;
  std::int32_t hi = INT32_MAX;
  std::int32_t nominal = 0;
  friend bool operator==(const ScalarDomain&, const ScalarDomain&) = default;
};

struct BufferDomain {
  std::string role;
  std::size_t capacity = 0;  // bytes excluding the terminator
  char fill = 'A';
  friend bool operator==(const BufferDomain&, const BufferDomain&) = default;
};

struct InputDomain {
  std::vector<BufferDomain> buffers;
  std::vector<ScalarDomain> scalars;
  friend bool operator==(const InputDomain&, const InputDomain&) = default;
};

inline std::vector<std::int32_t> scalar_boundaries(const ScalarDomain& d) {
  std::set<std::int64_t> v{d.lo, std::int64_t(d.lo) + 1, std::int64_t(d.hi) - 1, d.hi};
  if (d.lo <= 0 && 0 <= d.hi) v.insert(0);
  std::vector<std::int32_t> out;
  for (auto x : v)
    if (x >= d.lo && x <= d.hi) out.push_back(static_cast<std::int32_t>(x));
  return out;
}

inline std::vector<std::size_t> buffer_boundaries(const BufferDomain& d) {
  std::set<std::size_t> v{0, 1, d.capacity ? d.capacity - 1 : 0, d.capacity};
  std::vector<std::size_t> out;
  for (auto x : v)
    if (x <= d.capacity) out.push_back(x);
  return out;
}

/// One input per boundary value of each parameter, the others held nominal
/// (buffers at capacity - 1, scalars at their nominal value).
inline std::vector<TestInput> boundary_inputs(const InputDomain& d) {
  auto nominal = [&] {
    TestInput t;
    for (const auto& b : d.buffers)
      t.buffers.push_back({b.role, std::vector<std::uint8_t>(b.capacity ? b.capacity - 1 : 0, std::uint8_t(b.fill))});
    for (const auto& s : d.scalars) t.scalars.push_back(s.nominal);
    return t;
  };
  std::vector<TestInput> out;
  for (std::size_t i = 0; i < d.buffers.size(); ++i) {
    for (auto len : buffer_boundaries(d.buffers[i])) {
      TestInput t = nominal();
      t.buffers[i].bytes.assign(len, std::uint8_t(d.buffers[i].fill));
      t.name = d.buffers[i].role + "-len" + std::to_string(len);
      out.push_back(std::move(t));
    }
  }
  for (std::size_t i = 0; i < d.scalars.size(); ++i) {
    for (auto v : scalar_boundaries(d.scalars[i])) {
      TestInput t = nominal();
      t.scalars[i] = v;
      t.name = "s" + std::to_string(i) + "=" + std::to_string(v);
      out.push_back(std::move(t));
    }
  }
  if (out.empty()) {
    TestInput t = nominal();
    t.name = "nominal";
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace proconda
