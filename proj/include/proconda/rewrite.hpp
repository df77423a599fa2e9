#pragma once

// Relocation of control data into the `.proconda` section.
//
// Return addresses move to a shadow stack that grows upward inside the
// protected pages. Its pointer lives in r11 for the whole run, loaded at
// entry from the protected word `__proconda_ssp`; memory corruption cannot
// reach a register, and keeping it there means only the prologue's lr store
// is a protected write:
//
//   PUSH {r4, lr}   ->  PUSH {r4}              POP {r4, pc}  ->  POP {r4}
//                       ANNOUNCE_BEGIN                          SUB r11, r11, #4
//                       STR lr, [r11]                           LDR pc, [r11]
//                       ANNOUNCE_END
//                       ADD r11, r11, #4
//
// Global code pointers move with their data label into `.proconda`; their
// observed writers are bracketed and readers follow the label. Stack-resident
// code pointers get a fixed `__proconda_slot_N` word, addressed through r12.

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "proconda/ident.hpp"
#include "proconda/machine.hpp"
#include "proconda/slice.hpp"

namespace proconda {

class PlanError : public Error {
public:
  using Error::Error;
};

inline constexpr std::string_view kShadowPointerLabel = "__proconda_ssp";
inline constexpr std::string_view kShadowStackLabel = "__proconda_stack";
inline constexpr Reg kShadowReg = Reg::r11;
inline constexpr Reg kScratchReg = Reg::r12;

enum class AnnounceMode : std::uint8_t { SimulatedSyscall, NopBaseline };

inline std::string_view announce_mode_name(AnnounceMode m) {
  return m == AnnounceMode::SimulatedSyscall ? "syscall" : "nop";
}

/// Machine options matching a build: NOP builds cannot open the protected
/// pages, so they run with protection off.
inline MachineOptions machine_options_for(AnnounceMode m, MachineOptions base = {}) {
  base.announce_cost = m == AnnounceMode::SimulatedSyscall ? AnnounceCost::Syscall : AnnounceCost::Nop;
  base.enforce_protection = m == AnnounceMode::SimulatedSyscall;
  return base;
}

struct ShadowSlot {
  enum class Kind : std::uint8_t { ShadowStack, RelocatedData, FixedSlot };
  Kind kind = Kind::ShadowStack;
  std::string label;  // data label (RelocatedData) or __proconda_slot_N (FixedSlot)
  friend bool operator==(const ShadowSlot&, const ShadowSlot&) = default;
};

inline std::string_view shadow_kind_name(ShadowSlot::Kind k) {
  switch (k) {
    case ShadowSlot::Kind::ShadowStack: return "shadow-stack";
    case ShadowSlot::Kind::RelocatedData: return "relocated-data";
    case ShadowSlot::Kind::FixedSlot: return "fixed-slot";
  }
  return "?";
}

/// Replacement of one original instruction by a sequence.
struct SplitOp {
  CodeLocation loc;
  std::vector<Instruction> replacement;
  std::size_t announce_pairs = 0;
  std::string reason;
  friend bool operator==(const SplitOp&, const SplitOp&) = default;
};

struct RelocationPlan {
  std::map<std::string, ShadowSlot> slot_map;  // slot id -> descriptor
  std::string shadow_sp_slot;                  // empty when no return slots
  std::vector<std::string> relocated_labels;
  std::vector<std::string> fixed_slots;
  std::vector<SplitOp> split_ops;  // sorted by location
  std::vector<std::string> notes;  // edges deliberately left alone
  friend bool operator==(const RelocationPlan&, const RelocationPlan&) = default;

  bool empty() const { return slot_map.empty() && split_ops.empty(); }
  bool uses_shadow_stack() const { return !shadow_sp_slot.empty(); }
  const SplitOp* op_at(const CodeLocation& loc) const {
    for (const auto& op : split_ops)
      if (op.loc == loc) return &op;
    return nullptr;
  }
};

struct RewriteReport {
  AnnounceMode mode = AnnounceMode::SimulatedSyscall;
  std::size_t original_count = 0;
  std::size_t rewritten_count = 0;
  std::size_t inserted_instructions = 0;
  std::size_t announce_pairs = 0;
  std::ptrdiff_t split_delta = 0;  // inserted - 2 * announce_pairs
  std::size_t original_footprint = 0;
  std::size_t rewritten_footprint = 0;
  std::ptrdiff_t footprint_delta = 0;
  friend bool operator==(const RewriteReport&, const RewriteReport&) = default;

  double instruction_delta_pct() const {
    return original_count ? 100.0 * double(inserted_instructions) / double(original_count) : 0.0;
  }
  double footprint_delta_pct() const {
    return original_footprint ? 100.0 * double(footprint_delta) / double(original_footprint) : 0.0;
  }
};

struct RewriteResult {
  Program program;
  RewriteReport report;
  /// Rewritten location -> original instruction it was derived from.
  std::map<CodeLocation, CodeLocation> origin;

  CodeLocation original_of(const CodeLocation& loc) const {
    auto it = origin.find(loc);
    return it == origin.end() ? loc : it->second;
  }
};

/// Bytes of code, data and (if present) whole `.proconda` pages.
inline std::size_t footprint_bytes(const Program& p, const MemoryLayout& layout = {}) {
  std::size_t bytes = p.instruction_count() * kInstructionSize;
  for (const auto& d : p.data)
    if (d.section == Section::Data) bytes += d.words.size() * 4;
  if (p.has_proconda_section()) bytes += std::size_t(layout.proconda_pages) * layout.page_size;
  return bytes;
}

namespace detail {

inline bool mentions(const Instruction& ins, Reg r) {
  for (const auto& op : ins.operands) {
    if (auto reg = std::get_if<Reg>(&op); reg && *reg == r) return true;
    if (auto m = std::get_if<Mem>(&op); m && m->base == r) return true;
    if (auto l = std::get_if<RegList>(&op); l && l->contains(r)) return true;
  }
  return false;
}

inline std::vector<Instruction> bracket(Instruction write) {
  return {make(Mnemonic::ANNOUNCE_BEGIN), std::move(write), make(Mnemonic::ANNOUNCE_END)};
}

inline std::vector<Instruction> shadow_push(const RegList& list) {
  std::vector<Instruction> seq;
  RegList rest;
  for (Reg r : list.regs)
    if (r != Reg::lr) rest.regs.push_back(r);
  if (!rest.regs.empty()) seq.push_back(make(Mnemonic::PUSH, {rest}));
  seq.push_back(make(Mnemonic::ANNOUNCE_BEGIN));
  seq.push_back(make(Mnemonic::STR, {Reg::lr, Mem{kShadowReg, 0}}));
  seq.push_back(make(Mnemonic::ANNOUNCE_END));
  seq.push_back(make(Mnemonic::ADD, {kShadowReg, kShadowReg, Imm{4}}));
  return seq;
}

inline std::vector<Instruction> shadow_pop(const RegList& list) {
  std::vector<Instruction> seq;
  RegList rest;
  Reg ret = Reg::pc;
  for (Reg r : list.regs) {
    if (r == Reg::lr || r == Reg::pc) ret = r;
    else rest.regs.push_back(r);
  }
  if (!rest.regs.empty()) seq.push_back(make(Mnemonic::POP, {rest}));
  seq.push_back(make(Mnemonic::SUB, {kShadowReg, kShadowReg, Imm{4}}));
  seq.push_back(make(Mnemonic::LDR, {ret, Mem{kShadowReg, 0}}));
  return seq;
}

}  // namespace detail

/// Decides where every control-data slot of the graph goes and how each
/// affected instruction is rewritten.
inline RelocationPlan plan_relocation(const Program& p, const DataSourceGraph& graph,
                                      const ControlDataReport& report, const MemoryLayout& layout = {}) {
  (void)report;
  RelocationPlan plan;
  std::set<std::string> return_functions;
  std::map<std::string, std::vector<CodeLocation>> bracketed;  // reason per WIO
  std::set<CodeLocation> bracket_set;
  std::map<CodeLocation, SplitOp> ops;

  for (const auto& [id, slot] : graph.slots) {
    const LoadSite& ls = slot.origin;
    if (slot.is_return_slot()) {
      plan.slot_map[id] = {ShadowSlot::Kind::ShadowStack, std::string(kShadowStackLabel)};
      return_functions.insert(ls.loc.function);
      for (const auto& w : graph.writers_of(id))
        if (w != *ls.paired_store)
          plan.notes.push_back(w.str() + " -> " + id + ": write to a reused stack address, not relocated");
      continue;
    }
    if (ls.base.kind == BaseExpr::Kind::Label) {
      const DataItem* item = p.find_data(ls.base.label);
      if (!item)
        throw PlanError("slot " + id + " is based on code label '" + ls.base.label + "', which cannot be relocated");
      plan.slot_map[id] = {ShadowSlot::Kind::RelocatedData, item->label};
      if (item->section == Section::Data &&
          std::find(plan.relocated_labels.begin(), plan.relocated_labels.end(), item->label) ==
              plan.relocated_labels.end())
        plan.relocated_labels.push_back(item->label);
      for (const auto& w : graph.writers_of(id)) {
        const Instruction& ins = locate(p, w);
        if (ins.op != Mnemonic::STR && ins.op != Mnemonic::STRB)
          throw PlanError("unpatchable writer " + w.str() + " (" + format_instruction(ins) + ") of slot " + id);
        bracket_set.insert(w);
      }
      continue;
    }
    const Instruction* read = ls.read_loc ? &locate(p, *ls.read_loc) : nullptr;
    if (ls.base.kind == BaseExpr::Kind::Stack && read && (read->op == Mnemonic::LDR || read->op == Mnemonic::LDRB) &&
        read->holds<Mem>(1) && read->get<Mem>(1).base == Reg::sp) {
      const CodeLocation rl = *ls.read_loc;
      const FunctionBody& f = *p.find_function(rl.function);
      const auto sp = sp_offsets(f)[rl.index()];
      if (!sp) throw PlanError("stack depth at " + rl.str() + " is not statically known");
      const std::int32_t frame_offset = *sp + read->get<Mem>(1).offset;
      const std::string label = "__proconda_slot_" + std::to_string(plan.fixed_slots.size());
      plan.fixed_slots.push_back(label);
      plan.slot_map[id] = {ShadowSlot::Kind::FixedSlot, label};
      ops[rl] = {rl,
                     {make(Mnemonic::LDR, {kScratchReg, Literal{label, 0}}),
                      make(read->op, {read->get<Reg>(0), Mem{kScratchReg, 0}})},
                     0,
                     "read of " + id};
      for (const auto& w : graph.writers_of(id)) {
        const Instruction& ins = locate(p, w);
        if (w.function != f.label) {
          plan.notes.push_back(w.str() + " -> " + id + ": write to a reused stack address, not relocated");
          continue;
        }
        const auto wsp = sp_offsets(f)[w.index()];
        if ((ins.op != Mnemonic::STR && ins.op != Mnemonic::STRB) || ins.get<Mem>(1).base != Reg::sp || !wsp ||
            *wsp + ins.get<Mem>(1).offset != frame_offset)
          throw PlanError("unpatchable writer " + w.str() + " (" + format_instruction(ins) + ") of slot " + id);
        std::vector<Instruction> seq{make(Mnemonic::LDR, {kScratchReg, Literal{label, 0}})};
        for (auto& i : detail::bracket(make(ins.op, {ins.get<Reg>(0), Mem{kScratchReg, 0}})))
          seq.push_back(std::move(i));
        ops[w] = {w, std::move(seq), 1, "write of " + id};
      }
      continue;
    }
    throw PlanError("unpatchable read " + ls.loc.str() + " of slot " + id + " (base " + ls.base.str() + ")");
  }

  for (const auto& w : bracket_set) {
    if (ops.count(w)) throw PlanError("instruction " + w.str() + " writes several relocated slots");
    ops[w] = {w, detail::bracket(locate(p, w)), 1, "write of relocated data"};
  }

  if (!return_functions.empty()) {
    plan.shadow_sp_slot = std::string(kShadowPointerLabel);
    for (const auto& fname : return_functions) {
      const FunctionBody& f = *p.find_function(fname);
      for (std::size_t i = 0; i < f.instructions.size(); ++i) {
        const Instruction& ins = f.instructions[i];
        CodeLocation loc = CodeLocation::at(f.label, i);
        if (ins.op == Mnemonic::PUSH && ins.get<RegList>(0).contains(Reg::lr)) {
          if (ops.count(loc)) throw PlanError("conflicting rewrites at " + loc.str());
          ops[loc] = {loc, detail::shadow_push(ins.get<RegList>(0)), 1, "shadow push"};
        } else if (ins.op == Mnemonic::POP &&
                   (ins.get<RegList>(0).contains(Reg::lr) || ins.get<RegList>(0).contains(Reg::pc))) {
          if (ops.count(loc)) throw PlanError("conflicting rewrites at " + loc.str());
          if (ins.get<RegList>(0).contains(Reg::lr) && ins.get<RegList>(0).contains(Reg::pc))
            throw PlanError("POP of both lr and pc at " + loc.str());
          ops[loc] = {loc, detail::shadow_pop(ins.get<RegList>(0)), 0, "shadow pop"};
        } else if (ins.op == Mnemonic::LDR && ins.holds<Mem>(1) && ins.get<Mem>(1).base == Reg::sp &&
                   (ins.get<Reg>(0) == Reg::pc || ins.get<Reg>(0) == Reg::lr)) {
          throw PlanError("return address read from the frame at " + loc.str() + " cannot be redirected");
        }
      }
    }
  }

  // Reserved registers must be free in the input program.
  const bool need_scratch = !plan.fixed_slots.empty();
  for (const auto& f : p.functions) {
    for (std::size_t i = 0; i < f.instructions.size(); ++i) {
      const Instruction& ins = f.instructions[i];
      if (plan.uses_shadow_stack() && detail::mentions(ins, kShadowReg))
        throw PlanError("r11 is reserved for the shadow stack pointer but used at " +
                        CodeLocation::at(f.label, i).str());
      if (need_scratch && detail::mentions(ins, kScratchReg))
        throw PlanError("r12 is reserved as scratch but used at " + CodeLocation::at(f.label, i).str());
    }
  }

  std::size_t words = plan.fixed_slots.size();
  for (const auto& label : plan.relocated_labels) words += p.find_data(label)->words.size();
  for (const auto& d : p.data)
    if (d.section == Section::Proconda) words += d.words.size();
  if (plan.uses_shadow_stack()) words += 2;
  if (words * 4 > std::size_t(layout.proconda_pages) * layout.page_size)
    throw PlanError("protected region needs " + std::to_string(words * 4) + " bytes but only " +
                    std::to_string(layout.proconda_pages * layout.page_size) + " are configured");

  for (auto& [loc, op] : ops) plan.split_ops.push_back(std::move(op));
  return plan;
}

/// Applies a plan. NopBaseline emits NOP wherever SimulatedSyscall emits an
/// announce instruction; everything else is identical.
inline RewriteResult instrument(const Program& p, const RelocationPlan& plan,
                                AnnounceMode mode = AnnounceMode::SimulatedSyscall,
                                const MemoryLayout& layout = {}) {
  RewriteResult out;
  Program& q = out.program;
  q.globals = p.globals;
  q.entry = p.entry;
  auto announce = [&](Instruction ins) {
    if (mode == AnnounceMode::NopBaseline &&
        (ins.op == Mnemonic::ANNOUNCE_BEGIN || ins.op == Mnemonic::ANNOUNCE_END))
      return make(Mnemonic::NOP);
    return ins;
  };
  for (const auto& f : p.functions) {
    FunctionBody g{f.label, {}, {}};
    std::vector<std::size_t> new_index(f.instructions.size() + 1, 0);
    auto emit = [&](Instruction ins, std::size_t from) {
      out.origin[CodeLocation::at(g.label, g.instructions.size())] = CodeLocation::at(f.label, from);
      g.instructions.push_back(announce(std::move(ins)));
    };
    if (plan.uses_shadow_stack() && f.label == p.entry) {
      emit(make(Mnemonic::LDR, {kShadowReg, Literal{std::string(kShadowPointerLabel), 0}}), 0);
      emit(make(Mnemonic::LDR, {kShadowReg, Mem{kShadowReg, 0}}), 0);
    }
    for (std::size_t i = 0; i < f.instructions.size(); ++i) {
      new_index[i] = g.instructions.size();
      const CodeLocation loc = CodeLocation::at(f.label, i);
      if (const SplitOp* op = plan.op_at(loc)) {
        for (const auto& ins : op->replacement) emit(ins, i);
      } else {
        emit(f.instructions[i], i);
      }
    }
    for (const auto& l : f.local_labels) g.local_labels.push_back({l.name, new_index[l.index]});
    q.functions.push_back(std::move(g));
  }

  std::set<std::string> relocated(plan.relocated_labels.begin(), plan.relocated_labels.end());
  for (const auto& d : p.data)
    if (d.section == Section::Data && !relocated.count(d.label)) q.data.push_back(d);
  if (plan.uses_shadow_stack())
    q.data.push_back({std::string(kShadowPointerLabel), {std::string(kShadowStackLabel)}, Section::Proconda});
  for (const auto& d : p.data)
    if (d.section == Section::Proconda) q.data.push_back(d);
  for (const auto& d : p.data) {
    if (relocated.count(d.label)) {
      DataItem moved = d;
      moved.section = Section::Proconda;
      q.data.push_back(std::move(moved));
    }
  }
  for (const auto& label : plan.fixed_slots) q.data.push_back({label, {std::int32_t{0}}, Section::Proconda});
  if (plan.uses_shadow_stack()) q.data.push_back({std::string(kShadowStackLabel), {std::int32_t{0}}, Section::Proconda});

  RewriteReport& r = out.report;
  r.mode = mode;
  r.original_count = p.instruction_count();
  r.rewritten_count = q.instruction_count();
  r.inserted_instructions = r.rewritten_count - r.original_count;
  for (const auto& op : plan.split_ops) r.announce_pairs += op.announce_pairs;
  r.split_delta = std::ptrdiff_t(r.inserted_instructions) - std::ptrdiff_t(2 * r.announce_pairs);
  r.original_footprint = footprint_bytes(p, layout);
  r.rewritten_footprint = footprint_bytes(q, layout);
  r.footprint_delta = std::ptrdiff_t(r.rewritten_footprint) - std::ptrdiff_t(r.original_footprint);
  return out;
}

// ---------------------------------------------------------------------------
// Equivalence

struct EquivalenceVerdict {
  bool equivalent = true;
  std::string input;       // first diverging input
  std::string difference;  // first differing observable
  std::size_t inputs_checked = 0;
};

inline EquivalenceVerdict verify_benign_equivalence(const Program& original, const Program& rewritten,
                                                    const MemoryLayout& layout, const std::vector<TestInput>& suite,
                                                    const MachineOptions& rewritten_options = {},
                                                    const MachineOptions& original_options = {}) {
  EquivalenceVerdict v;
  for (const auto& input : suite) {
    RunResult a = run_program(original, layout, input, original_options);
    RunResult b = run_program(rewritten, layout, input, rewritten_options);
    ++v.inputs_checked;
    auto fail = [&](std::string what) {
      v.equivalent = false;
      v.input = input.name;
      v.difference = std::move(what);
    };
    if (auto t = b.trap()) fail("rewritten build trapped: " + format_trap(*t));
    else if (auto t2 = a.trap()) fail("original build trapped: " + format_trap(*t2));
    else if (a.exit_code() != b.exit_code())
      fail("exit value " + std::to_string(*a.exit_code()) + " vs " + std::to_string(*b.exit_code()));
    else if (a.output != b.output) {
      std::size_t i = 0;
      while (i < a.output.size() && i < b.output.size() && a.output[i] == b.output[i]) ++i;
      fail("output differs at item " + std::to_string(i));
    } else if (b.final_announce_depth != 0) {
      fail("announce depth " + std::to_string(b.final_announce_depth) + " at exit");
    }
    if (!v.equivalent) return v;
  }
  return v;
}

}  // namespace proconda
