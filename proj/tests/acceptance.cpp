// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 on any FAIL.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "proconda/proconda.hpp"
#include "test_support.hpp"

using namespace proconda;
namespace t = proconda::testing;

namespace {

const MemoryLayout kLayout{};

struct Verdict {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

ExploitCase corpus_case(const std::string& name) {
  return case_from_json(Json::parse(t::read_text(t::corpus_path(name))),
                        [](const std::string& prog) { return t::corpus_program(prog); });
}

Verdict fig2_reproduction() {
  Program p = t::corpus_program("strcpy.s");
  ControlDataReport report = identify_control_data(p);
  SliceResult s = build_dsg(p, kLayout, report, t::suite_file("strcpy.suite.json"));
  std::ostringstream d;
  d << report.sites.size() << " site(s), " << s.graph.edges.size() << " edge(s)";
  bool ok = report.sites.size() == 1 && locate(p, report.sites[0].loc).op == Mnemonic::POP;
  ok = ok && s.graph.edges.size() == 1 && s.graph.edges.begin()->wio == CodeLocation{"strcpy", 0x0};
  ok = ok && locate(p, s.graph.edges.begin()->wio).op == Mnemonic::PUSH;
  ok = ok && !wio_permitted(s.graph, {"strcpy", 0xc}, s.graph.edges.begin()->slot);
  const bool golden = slice_to_json(s, p).dump(2) + "\n" == t::read_text(t::fixture_path("strcpy.graph.json"));
  if (!golden) d << ", golden graph differs";
  return {ok && golden, d.str()};
}

Verdict exploit_prevention() {
  ExploitMatrix m = run_exploit_matrix({corpus_case("local_overflow.case.json"), corpus_case("global_overflow.case.json"),
                                        corpus_case("pointer_overwrite.case.json")});
  bool ok = m.rows.size() == 3 && m.passed() && m.prevented() == 3 && m.false_positives() == 0;
  std::ostringstream d;
  d << m.prevented() << "/" << m.rows.size() << " prevented, " << m.false_positives() << " false positive(s)";
  for (const auto& r : m.rows) {
    const bool row = r.unprotected.outcome == Outcome::Hijacked && r.protected_run.outcome == Outcome::Faulted &&
                     r.wio_correct && r.protected_run.protected_intact;
    if (!row) d << "; " << r.name << " bad" << (r.error.empty() ? "" : ": " + r.error);
    ok = ok && row;
  }
  return {ok, d.str()};
}

Verdict oracle_equivalence() {
  std::size_t programs = 0, edges = 0;
  for (const auto& c : t::corpus()) {
    Program p = t::corpus_program(c.program);
    ControlDataReport report = identify_control_data(p);
    auto got = build_dsg(p, kLayout, report, c.suite, {0.0, {}}).graph.edges;
    if (got != t::oracle_edges(p, report, c.suite, kLayout)) return {false, std::string(c.program) + " differs from store trace"};
    ++programs;
    edges += got.size();
  }
  return {true, std::to_string(programs) + " programs, " + std::to_string(edges) + " edges, sets equal"};
}

Verdict benign_semantics() {
  std::size_t runs = 0, divergences = 0;
  std::string first;
  for (const auto& c : t::corpus()) {
    Program p = t::corpus_program(c.program);
    ProtectedBuild b = protect(p, c.suite, {kLayout, {0.0, {}}, AnnounceMode::SimulatedSyscall});
    for (AnnounceMode mode : {AnnounceMode::SimulatedSyscall, AnnounceMode::NopBaseline}) {
      RewriteResult rw = instrument(p, b.plan, mode, kLayout);
      EquivalenceVerdict v = verify_benign_equivalence(p, rw.program, kLayout, c.suite, machine_options_for(mode));
      runs += v.inputs_checked;
      if (!v.equivalent) {
        ++divergences;
        if (first.empty()) first = std::string(c.program) + "/" + v.input + ": " + v.difference;
      }
    }
  }
  std::string d = std::to_string(runs) + " paired runs, " + std::to_string(divergences) + " divergence(s)";
  if (!first.empty()) d += "; " + first;
  return {divergences == 0, d};
}

Verdict cost_identities() {
  const CostModel cost;
  const std::uint64_t per_pair = 2 * (cost.announce_cost_syscall - cost.announce_cost_nop);
  std::uint64_t writes = 0;
  for (const auto& c : t::corpus()) {
    Program p = t::corpus_program(c.program);
    ProtectedBuild b = protect(p, c.suite, {kLayout, {0.0, {}}, AnnounceMode::SimulatedSyscall});
    RewriteResult nop = instrument(p, b.plan, AnnounceMode::NopBaseline, kLayout);
    OverheadReport r = measure_overhead(p, b.rewrite, nop, kLayout, c.suite);
    if (r.cycles_syscall - r.cycles_nop != per_pair * r.protected_writes || !r.identity_holds())
      return {false, std::string(c.program) + ": delta " + std::to_string(r.cycles_syscall - r.cycles_nop) +
                         " expected " + std::to_string(per_pair * r.protected_writes)};
    writes += r.protected_writes;
  }

  const std::uint64_t pairs = 50000;
  Program loop = parse_program(announce_loop_source(pairs));
  RunResult sys = run_program(loop, kLayout, {}, machine_options_for(AnnounceMode::SimulatedSyscall));
  RunResult nop = run_program(loop, kLayout, {}, machine_options_for(AnnounceMode::NopBaseline));
  // One cycle is one nanosecond, so each announce accounts for 6.45 us.
  const std::uint64_t announce_ns = sys.cycles - (sys.steps - sys.announces_executed) * cost.per_instruction;
  const bool loop_ok = !sys.trapped() && sys.announces_executed == 2 * pairs &&
                       sys.cycles - nop.cycles == pairs * per_pair && announce_ns == 2 * pairs * 6450;
  std::ostringstream d;
  d << writes << " corpus protected writes exact; loop " << sys.announces_executed << " announces = " << announce_ns
    << " ns (" << double(announce_ns) / double(sys.announces_executed) / 1000.0 << " us/check)";
  return {loop_ok, d.str()};
}

Verdict overhead_in_kind() {
  auto measure = [](const char* prog, const char* suite) {
    Program p = t::corpus_program(prog);
    auto s = t::suite_file(suite);
    ProtectedBuild b = protect(p, s);
    return measure_overhead(p, b.rewrite, instrument(p, b.plan, AnnounceMode::NopBaseline, kLayout), kLayout, s);
  };
  OverheadReport call = measure("call_heavy.s", "call_heavy.suite.json");
  OverheadReport flat = measure("straight_line.s", "straight_line.suite.json");
  std::ostringstream d;
  d.precision(2);
  d << std::fixed << "instr delta call-heavy " << call.instr_delta_pct << "% > straight-line " << flat.instr_delta_pct
    << "%; footprint " << call.footprint_delta_pct << "% / " << flat.footprint_delta_pct << "%";
  return {call.instr_delta_pct > flat.instr_delta_pct && call.footprint_delta_pct > 0 && flat.footprint_delta_pct > 0,
          d.str()};
}

Verdict coverage_gate() {
  const std::string prog = t::corpus_path("local_overflow.s");
  std::ostringstream out, err, out2, err2;
  const int under = run_cli({"slice", prog, "--suite", t::corpus_path("local_overflow.undercover.json")}, out, err);
  const int full = run_cli({"slice", prog, "--suite", t::corpus_path("local_overflow.suite.json")}, out2, err2);
  const double frac = Json::parse(out.str()).at("coverage").get<double>();
  std::ostringstream d;
  d << "under-covering exit " << under << " at " << frac << ", full suite exit " << full;
  return {under == 2 && frac < 0.92 && full == 0, d.str()};
}

Verdict soundness_property() {
  t::Rng rng(1000);
  const int n = 1000;
  std::size_t announces = 0, traps = 0;
  for (int i = 0; i < n; ++i) {
    Program p = parse_program(t::random_runnable_source(rng, {4, 10, 0.3}));
    std::vector<TestInput> suite{{"a", {}, {t::range(rng, -9, 9), t::range(rng, -9, 9)}}};
    ProtectedBuild b = protect(p, suite, {kLayout, {0.0, {}}, AnnounceMode::SimulatedSyscall});
    TestInput probe{"probe", {}, {t::range(rng, -30, 30), t::coin(rng) ? 99 : t::range(rng, -30, 30)}};
    auto v1 = t::soundness_run(b.rewrite.program, kLayout, probe);
    auto v2 = t::soundness_run(b.rewrite.program, kLayout, probe);
    if (!v1.ok) return {false, "program " + std::to_string(i) + ": " + v1.why};
    if (!(v1.result == v2.result)) return {false, "program " + std::to_string(i) + " is not deterministic"};
    announces += count_brackets(b.rewrite.program);
    traps += v1.result.trap() != nullptr;
  }
  return {true, std::to_string(n) + " programs, " + std::to_string(announces) + " brackets, " + std::to_string(traps) +
                    " trapped runs, no protected byte changed outside a window"};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;  // 0: no runtime bound
  std::function<Verdict()> check;
};

}  // namespace

int main() {
  const Criterion criteria[] = {
      {1, "fig2-reproduction", 1.0, fig2_reproduction},
      {2, "exploit-prevention", 10.0, exploit_prevention},
      {3, "oracle-equivalence", 0.0, oracle_equivalence},
      {4, "benign-semantics", 0.0, benign_semantics},
      {5, "cost-identities", 0.0, cost_identities},
      {6, "overhead-in-kind", 0.0, overhead_in_kind},
      {7, "coverage-gate", 0.0, coverage_gate},
      {8, "soundness-property", 60.0, soundness_property},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = Clock::now();
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - start).count();
    if (c.limit_s > 0 && secs >= c.limit_s) {
      v.pass = false;
      v.detail += "; over the " + std::to_string(int(c.limit_s)) + " s limit";
    }
    failed += !v.pass;
    std::printf("%s %d %-20s %8.3fs  %s\n", v.pass ? "PASS" : "FAIL", c.id, c.name, secs, v.detail.c_str());
  }
  std::fflush(stdout);
  return failed ? 1 : 0;
}
