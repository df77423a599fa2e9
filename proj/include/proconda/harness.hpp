#pragma once

// Protected execution, the exploit matrix and overhead measurement.

#include <cstdint>
#include <future>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "proconda/ident.hpp"
#include "proconda/machine.hpp"
#include "proconda/rewrite.hpp"
#include "proconda/slice.hpp"

namespace proconda {

class HarnessError : public Error {
public:
  using Error::Error;
};

enum class Outcome : std::uint8_t { Completed, Hijacked, Faulted };

inline std::string_view outcome_name(Outcome o) {
  switch (o) {
    case Outcome::Completed: return "completed";
    case Outcome::Hijacked: return "hijacked";
    case Outcome::Faulted: return "faulted";
  }
  return "?";
}

struct ProtectedRun {
  Outcome outcome = Outcome::Completed;
  std::uint32_t exit_code = 0;
  std::uint32_t pc = 0;  // Hijacked: the attacker target reached
  std::optional<TrapInfo> trap;
  std::optional<CodeLocation> original_wio;  // trap WIO mapped back to the input program
  std::vector<std::uint32_t> output;
  std::uint64_t cycles = 0;
  std::uint64_t steps = 0;
  std::uint64_t announces = 0;
  std::uint32_t final_depth = 0;
  bool protected_intact = true;  // .proconda bytes unchanged by the faulting step
};

inline std::map<std::string, std::uint32_t, std::less<>> symbol_table(const Program& p, const MemoryLayout& layout) {
  return load(p, layout, TestInput{}).image->symbols;
}

inline std::uint32_t symbol_address(const Program& p, const MemoryLayout& layout, std::string_view label) {
  auto syms = symbol_table(p, layout);
  auto it = syms.find(label);
  if (it == syms.end()) throw HarnessError("unknown label '" + std::string(label) + "'");
  return it->second;
}

/// Runs `p` to completion. With an attacker target, reaching that address
/// before it is fetched ends the run as Hijacked.
inline ProtectedRun run_protected(const Program& p, const MemoryLayout& layout, const TestInput& input,
                                  const MachineOptions& options = {},
                                  std::optional<std::uint32_t> attacker_target = std::nullopt,
                                  const std::map<CodeLocation, CodeLocation>* origin = nullptr) {
  MachineState s = load(p, layout, input, options);
  ProtectedRun out;
  for (;;) {
    if (attacker_target && s.reg(Reg::pc) == *attacker_target) {
      out.outcome = Outcome::Hijacked;
      out.pc = *attacker_target;
      break;
    }
    if (s.steps >= s.options.step_budget)
      throw BudgetExceeded("step budget of " + std::to_string(s.options.step_budget) + " exceeded");
    const std::uint64_t before = s.memory.checksum(PageKind::Proconda);
    StepResult r = step(s);
    if (auto e = std::get_if<Exit>(&r)) {
      out.exit_code = e->code;
      break;
    }
    if (auto t = std::get_if<TrapInfo>(&r)) {
      out.outcome = Outcome::Faulted;
      out.trap = *t;
      out.original_wio = t->wio;
      if (origin)
        if (auto it = origin->find(t->wio); it != origin->end()) out.original_wio = it->second;
      out.protected_intact = s.memory.checksum(PageKind::Proconda) == before;
      break;
    }
  }
  out.output = s.output;
  out.cycles = s.cycles;
  out.steps = s.steps;
  out.announces = s.announces_executed;
  out.final_depth = s.announce_depth;
  return out;
}

// ---------------------------------------------------------------------------
// Exploit inputs that refer to addresses of the build under attack

struct BytePiece {
  std::vector<std::uint8_t> bytes;
  std::string address_of;  // when set, the label's address, little-endian
  friend bool operator==(const BytePiece&, const BytePiece&) = default;
};

struct BufferTemplate {
  std::string role;
  std::vector<BytePiece> pieces;
  friend bool operator==(const BufferTemplate&, const BufferTemplate&) = default;
};

struct ScalarTemplate {
  std::int32_t value = 0;
  std::string address_of;
  friend bool operator==(const ScalarTemplate&, const ScalarTemplate&) = default;
};

struct InputTemplate {
  std::string name = "exploit";
  std::vector<BufferTemplate> buffers;
  std::vector<ScalarTemplate> scalars;
  friend bool operator==(const InputTemplate&, const InputTemplate&) = default;

  TestInput materialize(const Program& p, const MemoryLayout& layout) const {
    auto syms = symbol_table(p, layout);
    auto addr = [&](const std::string& label) {
      auto it = syms.find(label);
      if (it == syms.end()) throw HarnessError("exploit refers to unknown label '" + label + "'");
      return it->second;
    };
    TestInput t;
    t.name = name;
    for (const auto& b : buffers) {
      InputBuffer out{b.role, {}};
      for (const auto& piece : b.pieces) {
        if (piece.address_of.empty()) {
          out.bytes.insert(out.bytes.end(), piece.bytes.begin(), piece.bytes.end());
        } else {
          const std::uint32_t a = addr(piece.address_of);
          for (int i = 0; i < 4; ++i) out.bytes.push_back(std::uint8_t(a >> (8 * i)));
        }
      }
      t.buffers.push_back(std::move(out));
    }
    for (const auto& s : scalars)
      t.scalars.push_back(s.address_of.empty() ? s.value : static_cast<std::int32_t>(addr(s.address_of)));
    return t;
  }
};

// ---------------------------------------------------------------------------
// Pipeline

struct PipelineOptions {
  MemoryLayout layout;
  SliceOptions slice;
  AnnounceMode mode = AnnounceMode::SimulatedSyscall;
};

struct ProtectedBuild {
  ControlDataReport report;
  SliceResult slice;
  RelocationPlan plan;
  RewriteResult rewrite;
};

/// Phases 1 to 3 in one go. Does not enforce the coverage gate; callers
/// check `slice.finalized`.
inline ProtectedBuild protect(const Program& p, const std::vector<TestInput>& suite,
                              const PipelineOptions& options = {}) {
  ProtectedBuild b;
  b.report = identify_control_data(p);
  b.slice = build_dsg(p, options.layout, b.report, suite, options.slice);
  b.plan = plan_relocation(p, b.slice.graph, b.report, options.layout);
  b.rewrite = instrument(p, b.plan, options.mode, options.layout);
  return b;
}

// ---------------------------------------------------------------------------
// Exploit matrix

struct ExploitCase {
  std::string name;
  std::string program_file;
  Program program;
  std::string vuln_class;  // local-overflow | global-overflow | pointer-overwrite
  std::string attacker_target;
  std::vector<TestInput> benign;
  InputTemplate exploit;
  std::optional<CodeLocation> expected_fault_wio;  // original-program coordinates
};

struct CaseResult {
  std::string name;
  std::string vuln_class;
  ProtectedRun unprotected;
  ProtectedRun protected_run;
  double coverage = 0.0;
  bool coverage_ok = false;
  std::size_t benign_inputs = 0;
  std::size_t false_positives = 0;  // benign inputs that did not complete in the protected build
  std::string first_false_positive;
  bool wio_correct = false;
  RewriteReport rewrite;
  std::string error;  // pipeline error, if any

  bool exploit_valid() const { return unprotected.outcome == Outcome::Hijacked; }
  bool prevented() const {
    return error.empty() && exploit_valid() && protected_run.outcome != Outcome::Hijacked;
  }
  bool passed() const {
    return prevented() && protected_run.outcome == Outcome::Faulted && wio_correct &&
           protected_run.protected_intact && false_positives == 0 && coverage_ok;
  }
};

struct ExploitMatrix {
  std::vector<CaseResult> rows;
  std::size_t prevented() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.prevented();
    return n;
  }
  std::size_t false_positives() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.false_positives;
    return n;
  }
  bool passed() const {
    for (const auto& r : rows)
      if (!r.passed()) return false;
    return true;
  }
};

inline CaseResult run_case(const ExploitCase& c, const PipelineOptions& options = {}) {
  CaseResult r;
  r.name = c.name;
  r.vuln_class = c.vuln_class;
  r.benign_inputs = c.benign.size();
  const MemoryLayout& layout = options.layout;
  const MachineOptions plain = options.slice.machine;
  try {
    TestInput attack = c.exploit.materialize(c.program, layout);
    r.unprotected = run_protected(c.program, layout, attack, plain, symbol_address(c.program, layout, c.attacker_target));
    if (!r.exploit_valid()) {
      r.error = "exploit does not hijack the unprotected build (" + std::string(outcome_name(r.unprotected.outcome)) + ")";
      return r;
    }
    PipelineOptions po = options;
    po.mode = AnnounceMode::SimulatedSyscall;
    ProtectedBuild b = protect(c.program, c.benign, po);
    r.coverage = b.slice.coverage;
    r.coverage_ok = b.slice.finalized;
    r.rewrite = b.rewrite.report;
    const Program& q = b.rewrite.program;
    const MachineOptions mo = machine_options_for(AnnounceMode::SimulatedSyscall, plain);
    TestInput attack_q = c.exploit.materialize(q, layout);
    r.protected_run = run_protected(q, layout, attack_q, mo, symbol_address(q, layout, c.attacker_target),
                                    &b.rewrite.origin);
    r.wio_correct = r.protected_run.outcome == Outcome::Faulted &&
                    (!c.expected_fault_wio || r.protected_run.original_wio == c.expected_fault_wio);
    for (const auto& in : c.benign) {
      ProtectedRun run = run_protected(q, layout, in, mo);
      if (run.outcome != Outcome::Completed) {
        if (r.false_positives++ == 0) r.first_false_positive = in.name;
      }
    }
  } catch (const Error& e) {
    r.error = e.what();
  }
  return r;
}

/// Rows run in parallel; each owns its machine states.
inline ExploitMatrix run_exploit_matrix(const std::vector<ExploitCase>& cases, const PipelineOptions& options = {}) {
  std::vector<std::future<CaseResult>> jobs;
  for (const auto& c : cases)
    jobs.push_back(std::async(std::launch::async, [&c, &options] { return run_case(c, options); }));
  ExploitMatrix m;
  for (auto& j : jobs) m.rows.push_back(j.get());
  return m;
}

// ---------------------------------------------------------------------------
// Overhead

struct OverheadReport {
  std::uint64_t cycles_unprotected = 0;
  std::uint64_t cycles_nop = 0;
  std::uint64_t cycles_syscall = 0;
  std::uint64_t announce_executions = 0;  // syscall build
  std::uint64_t protected_writes = 0;     // announce pairs executed
  std::uint64_t expected_delta = 0;       // announce_executions * (syscall - nop cost)
  double instr_delta_pct = 0.0;
  double footprint_delta_pct = 0.0;
  std::size_t inputs = 0;

  bool identity_holds() const { return cycles_syscall - cycles_nop == expected_delta; }
  bool ordered() const { return cycles_syscall >= cycles_nop && cycles_nop >= cycles_unprotected; }
};

inline OverheadReport measure_overhead(const Program& p, const RewriteResult& syscall_build,
                                       const RewriteResult& nop_build, const MemoryLayout& layout,
                                       const std::vector<TestInput>& suite, const MachineOptions& base = {}) {
  const MachineOptions sys = machine_options_for(AnnounceMode::SimulatedSyscall, base);
  const MachineOptions nop = machine_options_for(AnnounceMode::NopBaseline, base);
  for (const auto& [build, mo] : {std::pair{&syscall_build, sys}, std::pair{&nop_build, nop}}) {
    auto v = verify_benign_equivalence(p, build->program, layout, suite, mo, base);
    if (!v.equivalent)
      throw HarnessError(std::string(announce_mode_name(build->report.mode)) + " build diverges on input '" +
                         v.input + "': " + v.difference);
  }
  OverheadReport r;
  r.inputs = suite.size();
  for (const auto& in : suite) {
    r.cycles_unprotected += run_program(p, layout, in, base).cycles;
    r.cycles_nop += run_program(nop_build.program, layout, in, nop).cycles;
    RunResult s = run_program(syscall_build.program, layout, in, sys);
    r.cycles_syscall += s.cycles;
    r.announce_executions += s.announces_executed;
  }
  r.protected_writes = r.announce_executions / 2;
  r.expected_delta = r.announce_executions * (base.cost.announce_cost_syscall - base.cost.announce_cost_nop);
  r.instr_delta_pct = syscall_build.report.instruction_delta_pct();
  r.footprint_delta_pct = syscall_build.report.footprint_delta_pct();
  return r;
}

/// A program executing `pairs` announce-bracketed protected writes in a loop.
inline std::string announce_loop_source(std::uint32_t pairs) {
  return "@ " + std::to_string(pairs) +
         " protected writes in a loop.\n"
         "\t.global main\n\t.text\nmain:\n"
         "\tLDR r2, =counter\n"
         "\tLDR r1, =" + std::to_string(pairs) + "\n"
         ".Lloop:\n"
         "\tANNOUNCE_BEGIN\n\tSTR r1, [r2]\n\tANNOUNCE_END\n"
         "\tSUB r1, r1, #1\n\tCMP r1, #0\n\tBNE .Lloop\n"
         "\tMOV r0, #0\n\tBX lr\n"
         "\t.section .proconda\ncounter:\n\t.word 0\n";
}

// ---------------------------------------------------------------------------
// Mutation: drop one announce bracket

inline std::size_t count_brackets(const Program& p) {
  std::size_t n = 0;
  for (const auto& f : p.functions)
    for (const auto& i : f.instructions) n += i.op == Mnemonic::ANNOUNCE_BEGIN;
  return n;
}

/// Removes the k-th ANNOUNCE_BEGIN and the next ANNOUNCE_END after it.
inline Program drop_bracket(const Program& p, std::size_t k) {
  Program q = p;
  for (auto& f : q.functions) {
    for (std::size_t i = 0; i < f.instructions.size(); ++i) {
      if (f.instructions[i].op != Mnemonic::ANNOUNCE_BEGIN || k-- != 0) continue;
      std::size_t j = i + 1;
      while (j < f.instructions.size() && f.instructions[j].op != Mnemonic::ANNOUNCE_END) ++j;
      if (j == f.instructions.size()) throw HarnessError("unterminated announce bracket in " + f.label);
      f.instructions.erase(f.instructions.begin() + std::ptrdiff_t(j));
      f.instructions.erase(f.instructions.begin() + std::ptrdiff_t(i));
      for (auto& l : f.local_labels) l.index -= (l.index > i) + (l.index > j);
      return q;
    }
  }
  throw HarnessError("program has fewer than " + std::to_string(k + 1) + " announce brackets");
}

}  // namespace proconda
