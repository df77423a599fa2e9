#pragma once

// Control data identification.
//
// Instructions are classified by how they pick their successor. Every
// instruction whose target comes from a register or memory (a control-flow
// site) is traced backwards, intra-procedurally, to the instruction that
// loaded the base address feeding it. Loads of the form `LDR rX, [rY, #k]`
// with rY != sp are dereference links: the walk continues through rY. The
// first non-dereferencing definition is the load site.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "proconda/asm_model.hpp"

namespace proconda {

enum class FlowKind : std::uint8_t { FallThrough, HardCodedTarget, DataDependentTarget };

inline std::string_view flow_kind_name(FlowKind k) {
  switch (k) {
    case FlowKind::FallThrough: return "FallThrough";
    case FlowKind::HardCodedTarget: return "HardCodedTarget";
    case FlowKind::DataDependentTarget: return "DataDependentTarget";
  }
  return "?";
}

inline FlowKind classify_instruction(const Instruction& ins) {
  switch (ins.op) {
    case Mnemonic::B: case Mnemonic::BEQ: case Mnemonic::BNE: case Mnemonic::BLT:
    case Mnemonic::BGE: case Mnemonic::BL:
      return FlowKind::HardCodedTarget;
    case Mnemonic::BX: case Mnemonic::BLX:
      return FlowKind::DataDependentTarget;
    case Mnemonic::POP:
      return ins.get<RegList>(0).contains(Reg::pc) ? FlowKind::DataDependentTarget
                                                   : FlowKind::FallThrough;
    case Mnemonic::LDR: case Mnemonic::ADD: case Mnemonic::SUB:
      return ins.get<Reg>(0) == Reg::pc ? FlowKind::DataDependentTarget : FlowKind::FallThrough;
    default:
      return FlowKind::FallThrough;
  }
}

// ---------------------------------------------------------------------------
// Report types

/// What a control-flow site consumes.
///   Register:  the value of `reg`
///   StackSlot: the word at sp + offset, loaded into `reg` (POP / LDR pc, [sp])
///   Memory:    the word at base register `reg` + offset (LDR pc, [rN, #k])
struct Consumed {
  enum class Kind : std::uint8_t { Register, StackSlot, Memory };
  Kind kind = Kind::Register;
  Reg reg = Reg::r0;
  std::int32_t offset = 0;
  friend bool operator==(const Consumed&, const Consumed&) = default;
};

struct ControlFlowSite {
  CodeLocation loc;
  std::vector<Consumed> consumed;
  friend bool operator==(const ControlFlowSite&, const ControlFlowSite&) = default;
};

/// Where a load site takes its base address from.
struct BaseExpr {
  enum class Kind : std::uint8_t { Stack, Label, Immediate, ReturnAddress };
  Kind kind = Kind::Stack;
  std::int32_t offset = 0;  // sp-relative for Stack; value for Immediate; byte offset for Label
  std::string label;
  friend bool operator==(const BaseExpr&, const BaseExpr&) = default;

  std::string str() const {
    switch (kind) {
      case Kind::Stack:
        return offset < 0 ? "sp-" + std::to_string(-static_cast<std::int64_t>(offset))
                          : "sp+" + std::to_string(offset);
      case Kind::Label: return "=" + label;
      case Kind::Immediate: return "#" + std::to_string(offset);
      case Kind::ReturnAddress: return "return-address";
    }
    return "?";
  }
};

enum class LoadKind : std::uint8_t {
  Memory,    // target register loaded from memory (LDR [sp,#k], POP)
  Address,   // target register receives an address (=label, sp + k)
  Constant,  // immediate or code address; nothing in writable memory feeds it
};

inline std::string_view load_kind_name(LoadKind k) {
  switch (k) {
    case LoadKind::Memory: return "memory";
    case LoadKind::Address: return "address";
    case LoadKind::Constant: return "constant";
  }
  return "?";
}

struct LoadSite {
  CodeLocation loc;
  Reg target = Reg::r0;
  LoadKind kind = LoadKind::Memory;
  BaseExpr base;
  /// First memory read on the chain: the instruction whose read address is the
  /// control-data slot. Empty when no writable memory feeds the site.
  std::optional<CodeLocation> read_loc;
  Reg read_reg = Reg::r0;
  /// For values restored by POP: the PUSH that saved them.
  std::optional<CodeLocation> paired_store;
  friend bool operator==(const LoadSite&, const LoadSite&) = default;

  bool has_slot() const { return read_loc.has_value(); }
  std::string id() const { return loc.str() + "/" + reg_name(target); }
};

struct Chain {
  CodeLocation site;
  Reg reg = Reg::r0;          // register (or pc) consumed at the site
  std::string load_site;      // LoadSite::id()
  std::vector<CodeLocation> path;  // from the load site to the site, inclusive
  friend bool operator==(const Chain&, const Chain&) = default;
};

enum class UnresolvedReason : std::uint8_t {
  RegisterResident,  // defined before function entry (argument, untouched lr)
  CrossFunction,     // defined by a callee's return value
};

inline std::string_view unresolved_reason_name(UnresolvedReason r) {
  return r == UnresolvedReason::RegisterResident ? "register-resident" : "cross-function";
}

struct Unresolved {
  CodeLocation site;
  Reg reg = Reg::r0;
  UnresolvedReason reason = UnresolvedReason::RegisterResident;
  CodeLocation at;  // where the walk stopped
  friend bool operator==(const Unresolved&, const Unresolved&) = default;
};

struct ControlDataReport {
  std::vector<ControlFlowSite> sites;
  std::vector<LoadSite> load_sites;
  std::vector<Chain> chains;
  std::vector<Unresolved> unresolved;
  friend bool operator==(const ControlDataReport&, const ControlDataReport&) = default;

  const LoadSite* find_load_site(std::string_view id) const {
    for (const auto& l : load_sites)
      if (l.id() == id) return &l;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Intra-procedural control flow helpers

inline bool falls_through(const Instruction& ins) {
  switch (ins.op) {
    case Mnemonic::B: case Mnemonic::BX: return false;
    case Mnemonic::POP: return !ins.get<RegList>(0).contains(Reg::pc);
    case Mnemonic::LDR: case Mnemonic::ADD: case Mnemonic::SUB:
      return ins.get<Reg>(0) != Reg::pc;
    case Mnemonic::SVC: return ins.get<Imm>(0).value != 0;
    default: return true;
  }
}

/// Local branch target of an instruction inside its function, if any.
inline std::optional<std::size_t> local_target(const FunctionBody& f, const Instruction& ins) {
  if (ins.op == Mnemonic::BL || ins.operands.empty() || !ins.holds<LabelRef>(0)) return std::nullopt;
  const std::string& name = ins.get<LabelRef>(0).name;
  if (auto i = f.local_index(name)) return i;
  if (name == f.label) return 0;
  return std::nullopt;
}

inline std::vector<std::vector<std::size_t>> predecessors(const FunctionBody& f) {
  const std::size_t n = f.instructions.size();
  std::vector<std::vector<std::size_t>> preds(n);
  for (std::size_t j = 0; j < n; ++j) {
    const Instruction& ins = f.instructions[j];
    if (j + 1 < n && falls_through(ins)) preds[j + 1].push_back(j);
    if (auto t = local_target(f, ins)) preds[*t].push_back(j);
  }
  for (auto& p : preds) {
    std::sort(p.begin(), p.end());
    p.erase(std::unique(p.begin(), p.end()), p.end());
  }
  return preds;
}

/// sp displacement (bytes, relative to function entry) in effect before each
/// instruction. Empty where paths disagree or sp is set opaquely.
inline std::vector<std::optional<std::int32_t>> sp_offsets(const FunctionBody& f) {
  const std::size_t n = f.instructions.size();
  std::vector<std::optional<std::int32_t>> at(n);
  std::vector<bool> conflict(n, false);
  if (!n) return at;
  std::vector<std::size_t> work{0};
  at[0] = 0;
  while (!work.empty()) {
    std::size_t i = work.back();
    work.pop_back();
    if (conflict[i] || !at[i]) continue;
    const Instruction& ins = f.instructions[i];
    std::optional<std::int32_t> out = *at[i];
    switch (ins.op) {
      case Mnemonic::PUSH: *out -= 4 * static_cast<std::int32_t>(ins.get<RegList>(0).regs.size()); break;
      case Mnemonic::POP: *out += 4 * static_cast<std::int32_t>(ins.get<RegList>(0).regs.size()); break;
      case Mnemonic::ADD: case Mnemonic::SUB: case Mnemonic::MOV: case Mnemonic::LDR:
      case Mnemonic::LDRB:
        if (ins.get<Reg>(0) == Reg::sp) {
          if ((ins.op == Mnemonic::ADD || ins.op == Mnemonic::SUB) && ins.get<Reg>(1) == Reg::sp &&
              ins.holds<Imm>(2)) {
            std::int32_t k = ins.get<Imm>(2).value;
            *out += ins.op == Mnemonic::ADD ? k : -k;
          } else {
            out.reset();
          }
        }
        break;
      default: break;
    }
    auto flow = [&](std::size_t j) {
      if (conflict[j]) return;
      if (!out) { conflict[j] = true; at[j].reset(); return; }
      if (!at[j]) { at[j] = out; work.push_back(j); }
      else if (*at[j] != *out) { conflict[j] = true; at[j].reset(); }
    };
    if (i + 1 < n && falls_through(ins)) flow(i + 1);
    if (auto t = local_target(f, ins)) flow(*t);
  }
  return at;
}

// ---------------------------------------------------------------------------
// Phase 1 operations

inline std::vector<ControlFlowSite> find_control_flow_sites(const Program& p) {
  std::vector<ControlFlowSite> sites;
  for (const auto& f : p.functions) {
    for (std::size_t i = 0; i < f.instructions.size(); ++i) {
      const Instruction& ins = f.instructions[i];
      if (classify_instruction(ins) != FlowKind::DataDependentTarget) continue;
      ControlFlowSite site{CodeLocation::at(f.label, i), {}};
      switch (ins.op) {
        case Mnemonic::BX: case Mnemonic::BLX:
          site.consumed.push_back({Consumed::Kind::Register, ins.get<Reg>(0), 0});
          break;
        case Mnemonic::POP: {
          const auto& list = ins.get<RegList>(0);
          site.consumed.push_back(
              {Consumed::Kind::StackSlot, Reg::pc, 4 * static_cast<std::int32_t>(list.slot_of(Reg::pc))});
          break;
        }
        case Mnemonic::LDR: {
          const Mem& m = ins.get<Mem>(1);
          site.consumed.push_back({m.base == Reg::sp ? Consumed::Kind::StackSlot : Consumed::Kind::Memory,
                                   m.base == Reg::sp ? Reg::pc : m.base, m.offset});
          break;
        }
        case Mnemonic::ADD: case Mnemonic::SUB: {
          Reg a = ins.get<Reg>(1);
          if (a != Reg::pc) site.consumed.push_back({Consumed::Kind::Register, a, 0});
          if (ins.holds<Reg>(2) && ins.get<Reg>(2) != Reg::pc && ins.get<Reg>(2) != a)
            site.consumed.push_back({Consumed::Kind::Register, ins.get<Reg>(2), 0});
          break;
        }
        default: break;
      }
      sites.push_back(std::move(site));
    }
  }
  std::sort(sites.begin(), sites.end(),
            [](const ControlFlowSite& a, const ControlFlowSite& b) { return a.loc < b.loc; });
  return sites;
}

struct TraceResult {
  std::vector<std::pair<LoadSite, Chain>> found;
  std::vector<Unresolved> unresolved;
};

namespace detail {

inline std::optional<CodeLocation> first_push_of(const FunctionBody& f, Reg r) {
  for (std::size_t i = 0; i < f.instructions.size(); ++i) {
    const Instruction& ins = f.instructions[i];
    if (ins.op == Mnemonic::PUSH && ins.get<RegList>(0).contains(r)) return CodeLocation::at(f.label, i);
  }
  return std::nullopt;
}

class Tracer {
public:
  Tracer(const FunctionBody& f, const ControlFlowSite& site)
      : f_(f), site_(site), preds_(predecessors(f)) {}

  TraceResult run() {
    const std::size_t s = site_.loc.index();
    const Instruction& ins = f_.instructions.at(s);
    for (const auto& c : site_.consumed) {
      const Reg consumed_reg = c.kind == Consumed::Kind::Register ? c.reg : Reg::pc;
      switch (c.kind) {
        case Consumed::Kind::Register:
          if (c.reg == Reg::pc) {
            emit({site_.loc, Reg::pc, LoadKind::Constant, {BaseExpr::Kind::Immediate, 0, {}}, std::nullopt,
                  Reg::r0, std::nullopt},
                 {s}, consumed_reg);
          } else {
            walk({s, c.reg, {s}, std::nullopt, Reg::r0}, consumed_reg);
          }
          break;
        case Consumed::Kind::StackSlot: {
          LoadSite ls{site_.loc, Reg::pc, LoadKind::Memory, {BaseExpr::Kind::Stack, c.offset, {}},
                      site_.loc, Reg::pc, std::nullopt};
          if (ins.op == Mnemonic::POP) ls.paired_store = first_push_of(f_, Reg::lr);
          emit(std::move(ls), {s}, consumed_reg);
          break;
        }
        case Consumed::Kind::Memory:
          walk({s, c.reg, {s}, s, Reg::pc}, consumed_reg);
          break;
      }
    }
    return std::move(result_);
  }

private:
  struct State {
    std::size_t at;  // walk the definitions reaching this index
    Reg reg;
    std::vector<std::size_t> path;  // consumption first
    std::optional<std::size_t> read;
    Reg read_reg;
  };

  CodeLocation loc(std::size_t i) const { return CodeLocation::at(f_.label, i); }

  void emit(LoadSite ls, const std::vector<std::size_t>& path, Reg consumed) {
    Chain chain{site_.loc, consumed, ls.id(), {}};
    for (auto it = path.rbegin(); it != path.rend(); ++it) chain.path.push_back(loc(*it));
    result_.found.emplace_back(std::move(ls), std::move(chain));
  }

  void unresolved(Reg consumed, UnresolvedReason why, std::size_t at) {
    Unresolved u{site_.loc, consumed, why, loc(at)};
    if (std::find(result_.unresolved.begin(), result_.unresolved.end(), u) == result_.unresolved.end())
      result_.unresolved.push_back(u);
  }

  LoadSite site_for(std::size_t j, Reg target, LoadKind kind, BaseExpr base, const State& st) const {
    LoadSite ls{loc(j), target, kind, std::move(base), std::nullopt, Reg::r0, std::nullopt};
    if (kind == LoadKind::Memory) {
      ls.read_loc = loc(j);
      ls.read_reg = target;
    } else if (kind == LoadKind::Address && st.read) {
      ls.read_loc = loc(*st.read);
      ls.read_reg = st.read_reg;
    }
    return ls;
  }

  void walk(State start, Reg consumed) {
    const std::size_t before = result_.found.size() + result_.unresolved.size();
    const std::size_t site = start.at;
    walk_from(std::move(start), consumed);
    // Only unreachable cycles reach here empty-handed.
    if (result_.found.size() + result_.unresolved.size() == before)
      unresolved(consumed, UnresolvedReason::RegisterResident, site);
  }

  void walk_from(State start, Reg consumed) {
    std::vector<State> work{std::move(start)};
    while (!work.empty()) {
      State st = std::move(work.back());
      work.pop_back();
      auto key = std::make_tuple(st.at, reg_index(st.reg), st.read ? *st.read + 1 : 0);
      if (!seen_.insert(key).second) continue;
      if (st.at == 0 || preds_[st.at].empty()) unresolved(consumed, UnresolvedReason::RegisterResident, st.at);
      for (std::size_t j : preds_[st.at]) {
        State next = st;
        next.at = j;
        if (!define(j, next, consumed, work)) work.push_back(std::move(next));
      }
    }
  }

  /// Handles instruction j if it defines st.reg. Returns false when j leaves
  /// the register untouched (the walk continues past j).
  bool define(std::size_t j, State st, Reg consumed, std::vector<State>& work) {
    const Instruction& ins = f_.instructions[j];
    const Reg r = st.reg;
    auto path_with_j = [&] {
      auto p = st.path;
      p.push_back(j);
      return p;
    };
    auto follow = [&](Reg next_reg, std::optional<std::size_t> read, Reg read_reg) {
      State n{j, next_reg, path_with_j(), read, read_reg};
      work.push_back(std::move(n));
    };
    switch (ins.op) {
      case Mnemonic::BL: case Mnemonic::BLX:
        if (r == Reg::lr) {
          emit(site_for(j, r, LoadKind::Constant, {BaseExpr::Kind::ReturnAddress, 0, {}}, st),
               path_with_j(), consumed);
          return true;
        }
        if (reg_index(r) <= 3 || r == Reg::r12) {
          unresolved(consumed, UnresolvedReason::CrossFunction, j);
          return true;
        }
        return false;
      case Mnemonic::POP: {
        const auto& list = ins.get<RegList>(0);
        if (!list.contains(r)) return false;
        LoadSite ls = site_for(j, r, LoadKind::Memory,
                               {BaseExpr::Kind::Stack, 4 * static_cast<std::int32_t>(list.slot_of(r)), {}}, st);
        ls.paired_store = first_push_of(f_, r);
        emit(std::move(ls), path_with_j(), consumed);
        return true;
      }
      default: break;
    }
    auto dest = ins.dest();
    if (!dest || *dest != r) return false;
    switch (ins.op) {
      case Mnemonic::MOV:
        if (ins.holds<Imm>(1)) {
          emit(site_for(j, r, LoadKind::Constant, {BaseExpr::Kind::Immediate, ins.get<Imm>(1).value, {}}, st),
               path_with_j(), consumed);
        } else if (ins.get<Reg>(1) == Reg::sp) {
          emit(site_for(j, r, LoadKind::Address, {BaseExpr::Kind::Stack, 0, {}}, st), path_with_j(), consumed);
        } else if (ins.get<Reg>(1) == Reg::pc) {
          emit(site_for(j, r, LoadKind::Constant, {BaseExpr::Kind::Immediate, 0, {}}, st), path_with_j(),
               consumed);
        } else {
          follow(ins.get<Reg>(1), st.read, st.read_reg);
        }
        return true;
      case Mnemonic::LDR: case Mnemonic::LDRB: {
        if (auto lit = std::get_if<Literal>(&ins.operands[1])) {
          if (lit->label)
            emit(site_for(j, r, LoadKind::Address, {BaseExpr::Kind::Label, 0, *lit->label}, st), path_with_j(),
                 consumed);
          else
            emit(site_for(j, r, st.read ? LoadKind::Address : LoadKind::Constant,
                          {BaseExpr::Kind::Immediate, lit->value, {}}, st),
                 path_with_j(), consumed);
          return true;
        }
        const Mem& m = ins.get<Mem>(1);
        if (m.base == Reg::sp) {
          emit(site_for(j, r, LoadKind::Memory, {BaseExpr::Kind::Stack, m.offset, {}}, st), path_with_j(),
               consumed);
        } else if (m.base == Reg::pc) {
          emit(site_for(j, r, LoadKind::Constant, {BaseExpr::Kind::Immediate, 0, {}}, st), path_with_j(),
               consumed);
        } else {
          follow(m.base, j, r);  // dereference link
        }
        return true;
      }
      case Mnemonic::ADD: case Mnemonic::SUB: {
        Reg a = ins.get<Reg>(1);
        if (a == Reg::sp && ins.holds<Imm>(2)) {
          std::int32_t k = ins.get<Imm>(2).value;
          emit(site_for(j, r, LoadKind::Address,
                        {BaseExpr::Kind::Stack, ins.op == Mnemonic::ADD ? k : -k, {}}, st),
               path_with_j(), consumed);
          return true;
        }
        bool any = false;
        if (a != Reg::pc && a != Reg::sp) {
          follow(a, st.read, st.read_reg);
          any = true;
        }
        if (ins.holds<Reg>(2)) {
          Reg b = ins.get<Reg>(2);
          if (b != Reg::pc && b != Reg::sp && b != a) {
            follow(b, st.read, st.read_reg);
            any = true;
          }
        }
        if (!any)
          emit(site_for(j, r, LoadKind::Constant, {BaseExpr::Kind::Immediate, 0, {}}, st), path_with_j(),
               consumed);
        return true;
      }
      default:
        return false;
    }
  }

  const FunctionBody& f_;
  const ControlFlowSite& site_;
  std::vector<std::vector<std::size_t>> preds_;
  std::set<std::tuple<std::size_t, unsigned, std::size_t>> seen_;
  TraceResult result_;
};

}  // namespace detail

/// Traces every value a site consumes back to its load sites. Conditional
/// definitions produce one load site per reaching definition.
inline TraceResult trace_base_address(const Program& p, const ControlFlowSite& site) {
  const FunctionBody* f = p.find_function(site.loc.function);
  if (!f) throw LocateError("unknown function '" + site.loc.function + "'");
  return detail::Tracer(*f, site).run();
}

inline ControlDataReport identify_control_data(const Program& p) {
  ControlDataReport report;
  report.sites = find_control_flow_sites(p);
  for (const auto& site : report.sites) {
    TraceResult t = trace_base_address(p, site);
    for (auto& [ls, chain] : t.found) {
      if (!report.find_load_site(ls.id())) report.load_sites.push_back(ls);
      if (std::find(report.chains.begin(), report.chains.end(), chain) == report.chains.end())
        report.chains.push_back(std::move(chain));
    }
    for (auto& u : t.unresolved) report.unresolved.push_back(std::move(u));
  }
  std::sort(report.load_sites.begin(), report.load_sites.end(), [](const LoadSite& a, const LoadSite& b) {
    return std::tie(a.loc, a.target) < std::tie(b.loc, b.target);
  });
  std::stable_sort(report.chains.begin(), report.chains.end(), [](const Chain& a, const Chain& b) {
    return std::tie(a.site, a.reg, a.load_site) < std::tie(b.site, b.reg, b.load_site);
  });
  return report;
}

}  // namespace proconda
