#pragma once

// Deterministic interpreter for the assembly dialect.
//
// Memory is a set of 4 KiB pages with read/write/execute bits. The protected
// `.proconda` pages are writable only while the announce depth is non-zero.
// The machine records watchpoint hits, basic-block coverage, an output channel
// (SVC #1) and a cycle counter driven by a CostModel.
//
// Address space (defaults):
//
//   code      code_base ..                        R-X, instructions laid out in
//                                                 function order
//   stack     stack_limit .. stack_base           RW-, grows down
//   data      page_floor(proconda_base - size) .. RW-, words end exactly at
//             proconda_base                       proconda_base
//   .proconda proconda_base .. +pages             R-- (RW- while announced)
//   guard     one unmapped page
//   input     input_base ..                       RW-, argument buffers
//
// Address 0 is the loader's return address: branching to it exits with r0.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "proconda/asm_model.hpp"

namespace proconda {

class LoadError : public Error {
public:
  using Error::Error;
};

class BudgetExceeded : public Error {
public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Configuration

struct MemoryLayout {
  std::uint32_t page_size = 4096;
  std::uint32_t code_base = 0x01011000;
  std::uint32_t code_pages = 4;
  std::uint32_t stack_size = 0x4000;
  std::uint32_t data_pages = 1;
  std::uint32_t proconda_base = 0x8000;
  std::uint32_t proconda_pages = 1;
  std::uint32_t input_pages = 2;
};

struct CostModel {
  std::uint64_t per_instruction = 1;
  std::uint64_t announce_cost_syscall = 6450;  // 6.45 us at 1 ns per cycle
  std::uint64_t announce_cost_nop = 1;
};

enum class AnnounceCost : std::uint8_t { Syscall, Nop };

struct MachineOptions {
  CostModel cost;
  AnnounceCost announce_cost = AnnounceCost::Syscall;
  /// When false the `.proconda` pages are plain RW memory. Used for builds
  /// whose announce instructions were replaced by NOPs.
  bool enforce_protection = true;
  std::uint64_t step_budget = 10'000'000;
};

struct PagePermissions {
  bool readable = false;
  bool writable = false;
  bool executable = false;
  friend bool operator==(const PagePermissions&, const PagePermissions&) = default;
};

// ---------------------------------------------------------------------------
// Inputs

struct InputBuffer {
  std::string role;
  std::vector<std::uint8_t> bytes;
  friend bool operator==(const InputBuffer&, const InputBuffer&) = default;
};

struct TestInput {
  std::string name;
  std::vector<InputBuffer> buffers;
  std::vector<std::int32_t> scalars;
  friend bool operator==(const TestInput&, const TestInput&) = default;
};

// ---------------------------------------------------------------------------
// Code image: the flattened, address-resolved program

struct BlockId {
  std::uint32_t function = 0;
  std::uint32_t block = 0;
  friend auto operator<=>(const BlockId&, const BlockId&) = default;
};

struct CodeImage {
  struct Slot {
    const Instruction* ins = nullptr;
    std::uint32_t function = 0;
    std::uint32_t index = 0;
    std::uint32_t block = 0;
  };

  Program program;  // owned copy so the image is self-contained
  std::uint32_t code_base = 0;
  std::vector<Slot> slots;  // one per instruction, in address order
  std::vector<std::uint32_t> function_start;  // global slot index of each function
  std::vector<std::uint32_t> block_count;     // per function
  std::map<std::string, std::uint32_t, std::less<>> symbols;  // label -> address

  std::uint32_t address_of(std::uint32_t function, std::uint32_t index) const {
    return code_base + (function_start[function] + index) * kInstructionSize;
  }

  const Slot* slot_at(std::uint32_t address) const {
    if (address < code_base || (address - code_base) % kInstructionSize) return nullptr;
    std::uint32_t i = (address - code_base) / kInstructionSize;
    return i < slots.size() ? &slots[i] : nullptr;
  }

  CodeLocation location_of(const Slot& s) const {
    return CodeLocation::at(program.functions[s.function].label, s.index);
  }

  std::optional<CodeLocation> location_at(std::uint32_t address) const {
    if (const Slot* s = slot_at(address)) return location_of(*s);
    return std::nullopt;
  }

  std::size_t total_blocks() const {
    std::size_t n = 0;
    for (auto c : block_count) n += c;
    return n;
  }
};

/// Basic-block leaders of one function: index 0, every local branch target and
/// every instruction following a control transfer (including BL).
inline std::vector<std::uint32_t> block_map(const FunctionBody& f) {
  const std::size_t n = f.instructions.size();
  std::vector<bool> leader(n, false);
  if (n) leader[0] = true;
  for (std::size_t i = 0; i < n; ++i) {
    const Instruction& ins = f.instructions[i];
    bool transfer = false;
    switch (ins.op) {
      case Mnemonic::B: case Mnemonic::BEQ: case Mnemonic::BNE: case Mnemonic::BLT:
      case Mnemonic::BGE: case Mnemonic::BL: {
        transfer = true;
        if (auto t = f.local_index(ins.get<LabelRef>(0).name)) leader[*t] = true;
        else if (ins.get<LabelRef>(0).name == f.label) leader[0] = true;
        break;
      }
      case Mnemonic::BX: case Mnemonic::BLX: transfer = true; break;
      case Mnemonic::POP: transfer = ins.get<RegList>(0).contains(Reg::pc); break;
      case Mnemonic::LDR: case Mnemonic::ADD: case Mnemonic::SUB:
        transfer = ins.get<Reg>(0) == Reg::pc;
        break;
      case Mnemonic::SVC: transfer = ins.get<Imm>(0).value == 0; break;
      default: break;
    }
    if (transfer && i + 1 < n) leader[i + 1] = true;
  }
  std::vector<std::uint32_t> block(n, 0);
  std::uint32_t current = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (leader[i] && i) ++current;
    block[i] = current;
  }
  return block;
}

inline std::shared_ptr<CodeImage> build_image(const Program& p, std::uint32_t code_base) {
  auto img = std::make_shared<CodeImage>();
  img->program = p;
  img->code_base = code_base;
  std::uint32_t next = 0;
  for (std::uint32_t fi = 0; fi < img->program.functions.size(); ++fi) {
    const FunctionBody& f = img->program.functions[fi];
    img->function_start.push_back(next);
    auto blocks = block_map(f);
    img->block_count.push_back(f.instructions.empty() ? 0 : blocks.back() + 1);
    for (std::uint32_t i = 0; i < f.instructions.size(); ++i)
      img->slots.push_back({&f.instructions[i], fi, i, blocks[i]});
    img->symbols[f.label] = code_base + next * kInstructionSize;
    for (const auto& l : f.local_labels)
      img->symbols[l.name] = code_base + (next + static_cast<std::uint32_t>(l.index)) * kInstructionSize;
    next += static_cast<std::uint32_t>(f.instructions.size());
  }
  return img;
}

// ---------------------------------------------------------------------------
// Memory

struct MemoryMap {
  std::uint32_t code_base = 0, code_end = 0;
  std::uint32_t stack_limit = 0, stack_base = 0;
  std::uint32_t data_begin = 0, data_words = 0, data_end = 0;
  std::uint32_t proconda_base = 0, proconda_end = 0;
  std::uint32_t input_base = 0, input_end = 0;
  std::vector<std::uint32_t> buffer_addresses;
};

enum class PageKind : std::uint8_t { Code, Stack, Data, Proconda, Input };

class Memory {
public:
  struct Page {
    std::vector<std::uint8_t> bytes;
    PagePermissions perms;
    PageKind kind = PageKind::Data;
    friend bool operator==(const Page&, const Page&) = default;
  };

  explicit Memory(std::uint32_t page_size = 4096) : page_size_(page_size) {}

  std::uint32_t page_size() const { return page_size_; }

  void map(std::uint32_t begin, std::uint32_t end, PagePermissions perms, PageKind kind) {
    for (std::uint32_t a = begin; a < end; a += page_size_)
      pages_[a / page_size_] = Page{std::vector<std::uint8_t>(page_size_, 0), perms, kind};
  }

  const Page* page(std::uint32_t address) const {
    auto it = pages_.find(address / page_size_);
    return it == pages_.end() ? nullptr : &it->second;
  }

  bool mapped(std::uint32_t address, std::uint32_t width) const {
    for (std::uint32_t i = 0; i < width; ++i)
      if (!page(address + i)) return false;
    return true;
  }

  std::uint8_t read8(std::uint32_t address) const {
    const Page* p = page(address);
    return p ? p->bytes[address % page_size_] : 0;
  }

  std::uint32_t read32(std::uint32_t address) const {
    std::uint32_t v = 0;
    for (std::uint32_t i = 0; i < 4; ++i) v |= std::uint32_t(read8(address + i)) << (8 * i);
    return v;
  }

  /// Raw write; permission checks are the caller's job.
  void write8(std::uint32_t address, std::uint8_t value) {
    auto it = pages_.find(address / page_size_);
    if (it != pages_.end()) it->second.bytes[address % page_size_] = value;
  }

  void write32(std::uint32_t address, std::uint32_t value) {
    for (std::uint32_t i = 0; i < 4; ++i) write8(address + i, std::uint8_t(value >> (8 * i)));
  }

  const std::map<std::uint32_t, Page>& pages() const { return pages_; }

  /// FNV-1a over every page of the given kind (all pages when kind is empty).
  std::uint64_t checksum(std::optional<PageKind> kind = std::nullopt) const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [no, p] : pages_) {
      if (kind && p.kind != *kind) continue;
      h = (h ^ no) * 1099511628211ull;
      for (auto b : p.bytes) h = (h ^ b) * 1099511628211ull;
    }
    return h;
  }

  friend bool operator==(const Memory&, const Memory&) = default;

private:
  std::uint32_t page_size_;
  std::map<std::uint32_t, Page> pages_;
};

// ---------------------------------------------------------------------------
// Events and traps

struct Watchpoint {
  std::uint32_t address = 0;
  std::uint32_t width = 4;
  friend bool operator==(const Watchpoint&, const Watchpoint&) = default;
};

struct WriteEvent {
  CodeLocation wio;
  std::uint32_t address = 0;
  std::uint32_t width = 0;
  std::uint32_t value = 0;
  friend bool operator==(const WriteEvent&, const WriteEvent&) = default;
};

/// One memory access as seen by the tracing hooks.
struct MemAccess {
  CodeLocation loc;
  std::uint32_t address = 0;
  std::uint32_t width = 0;
  std::uint32_t value = 0;
  Reg reg = Reg::r0;  // register loaded into / stored from
};

enum class TrapKind : std::uint8_t {
  ProtectedWrite,      // store to a mapped, non-writable page (code or .proconda)
  InvalidFetch,        // pc outside the code image
  StackOverflow,       // sp below stack_limit
  IllegalInstruction,  // unbalanced ANNOUNCE_END, unknown SVC, ...
  UnmappedAccess,      // load or store to an unmapped address
};

inline std::string_view trap_name(TrapKind k) {
  switch (k) {
    case TrapKind::ProtectedWrite: return "ProtectedWrite";
    case TrapKind::InvalidFetch: return "InvalidFetch";
    case TrapKind::StackOverflow: return "StackOverflow";
    case TrapKind::IllegalInstruction: return "IllegalInstruction";
    case TrapKind::UnmappedAccess: return "UnmappedAccess";
  }
  return "?";
}

struct TrapInfo {
  TrapKind kind = TrapKind::IllegalInstruction;
  CodeLocation wio;  // instruction that faulted (for InvalidFetch: the one that jumped)
  std::uint32_t address = 0;
  friend bool operator==(const TrapInfo&, const TrapInfo&) = default;
};

struct Continue {
  friend bool operator==(const Continue&, const Continue&) = default;
};
struct Exit {
  std::uint32_t code = 0;
  friend bool operator==(const Exit&, const Exit&) = default;
};
using StepResult = std::variant<Continue, Exit, TrapInfo>;

struct MachineHooks {
  std::function<void(const MemAccess&)> on_load;
  std::function<void(const MemAccess&)> on_store;
  /// Called before each instruction executes.
  std::function<void(const CodeLocation&, std::uint32_t pc)> on_fetch;
};

// ---------------------------------------------------------------------------
// Machine state

struct Flags {
  bool n = false, z = false, c = false, v = false;
  friend bool operator==(const Flags&, const Flags&) = default;
};

struct MachineState {
  std::array<std::uint32_t, kRegisterCount> regs{};
  Flags flags;
  Memory memory;
  MemoryMap map;
  std::uint32_t announce_depth = 0;
  std::uint64_t cycles = 0;
  std::uint64_t steps = 0;
  std::uint64_t announces_executed = 0;
  std::set<BlockId> coverage;
  bool halted = false;
  std::uint32_t exit_value = 0;
  std::vector<std::uint32_t> output;
  std::vector<Watchpoint> watchpoints;
  std::vector<WriteEvent> events;
  std::optional<CodeLocation> last_location;
  std::shared_ptr<const CodeImage> image;
  MachineOptions options;
  MachineHooks hooks;

  std::uint32_t& reg(Reg r) { return regs[reg_index(r)]; }
  std::uint32_t reg(Reg r) const { return regs[reg_index(r)]; }

  PagePermissions permissions(std::uint32_t address) const {
    const Memory::Page* p = memory.page(address);
    if (!p) return {};
    PagePermissions perms = p->perms;
    if (p->kind == PageKind::Proconda)
      perms.writable = !options.enforce_protection || announce_depth > 0;
    return perms;
  }
};

namespace detail {

inline std::uint32_t page_floor(std::uint32_t a, std::uint32_t page) { return a - a % page; }
inline std::uint32_t page_ceil(std::uint32_t a, std::uint32_t page) {
  return (a + page - 1) / page * page;
}

}  // namespace detail

/// Builds the initial machine state. Registers are zero except sp (stack
/// base) and pc (entry); buffers then scalars are passed in r0..r3.
inline MachineState load(const Program& p, const MemoryLayout& layout, const TestInput& input,
                         MachineOptions options = {}) {
  const std::uint32_t page = layout.page_size;
  MachineState s;
  s.options = options;
  s.memory = Memory(page);
  std::shared_ptr<CodeImage> img = build_image(p, layout.code_base);
  MemoryMap& m = s.map;

  m.code_base = layout.code_base;
  m.code_end = layout.code_base + layout.code_pages * page;
  if (p.instruction_count() * kInstructionSize > layout.code_pages * page)
    throw LoadError("program does not fit in the code region");

  std::uint32_t data_bytes = 0, proconda_bytes = 0;
  for (const auto& d : p.data)
    (d.section == Section::Data ? data_bytes : proconda_bytes) +=
        static_cast<std::uint32_t>(d.words.size()) * 4;
  if (data_bytes > layout.data_pages * page) throw LoadError("data does not fit in the data region");
  if (proconda_bytes > layout.proconda_pages * page)
    throw LoadError(".proconda section exceeds its pages");

  m.proconda_base = layout.proconda_base;
  m.proconda_end = layout.proconda_base + layout.proconda_pages * page;
  m.data_end = layout.proconda_base;
  m.data_words = layout.proconda_base - data_bytes;
  m.data_begin = detail::page_floor(m.data_words, page);
  m.stack_base = m.data_begin;
  if (m.stack_base < layout.stack_size) throw LoadError("stack does not fit below data");
  m.stack_limit = m.stack_base - layout.stack_size;
  m.input_base = m.proconda_end + page;  // one unmapped guard page
  m.input_end = m.input_base + layout.input_pages * page;
  if (m.code_base < m.input_end && m.code_end > m.stack_limit)
    throw LoadError("code region overlaps the data regions");

  s.memory.map(m.code_base, m.code_end, {true, false, true}, PageKind::Code);
  s.memory.map(m.stack_limit, m.stack_base, {true, true, false}, PageKind::Stack);
  if (m.data_begin < m.data_end)
    s.memory.map(m.data_begin, m.data_end, {true, true, false}, PageKind::Data);
  s.memory.map(m.proconda_base, m.proconda_end, {true, false, false}, PageKind::Proconda);
  s.memory.map(m.input_base, m.input_end, {true, true, false}, PageKind::Input);

  // Data labels.
  std::map<std::string, std::uint32_t, std::less<>> symbols = img->symbols;
  {
    std::uint32_t da = m.data_words, pa = m.proconda_base;
    for (const auto& d : p.data) {
      std::uint32_t& cursor = d.section == Section::Data ? da : pa;
      symbols[d.label] = cursor;
      cursor += static_cast<std::uint32_t>(d.words.size()) * 4;
    }
    da = m.data_words;
    pa = m.proconda_base;
    for (const auto& d : p.data) {
      std::uint32_t& cursor = d.section == Section::Data ? da : pa;
      for (const auto& w : d.words) {
        std::uint32_t v = 0;
        if (auto n = std::get_if<std::int32_t>(&w)) v = static_cast<std::uint32_t>(*n);
        else v = symbols.at(std::get<std::string>(w));
        s.memory.write32(cursor, v);
        cursor += 4;
      }
    }
  }
  img->symbols = std::move(symbols);
  s.image = std::move(img);

  // Argument buffers, NUL-terminated and word aligned.
  std::uint32_t cursor = m.input_base;
  for (const auto& b : input.buffers) {
    std::uint32_t need = detail::page_ceil(static_cast<std::uint32_t>(b.bytes.size()) + 1, 4);
    if (cursor + need > m.input_end) throw LoadError("input buffers do not fit in the input region");
    m.buffer_addresses.push_back(cursor);
    for (std::size_t i = 0; i < b.bytes.size(); ++i)
      s.memory.write8(cursor + static_cast<std::uint32_t>(i), b.bytes[i]);
    cursor += need;
  }
  std::vector<std::uint32_t> args(m.buffer_addresses);
  for (auto v : input.scalars) args.push_back(static_cast<std::uint32_t>(v));
  if (args.size() > 4) throw LoadError("at most four arguments are passed in registers");
  for (std::size_t i = 0; i < args.size(); ++i) s.regs[i] = args[i];

  s.reg(Reg::sp) = m.stack_base;
  if (p.functions.empty()) {
    s.halted = true;
    return s;
  }
  auto entry = s.image->symbols.find(p.entry);
  if (entry == s.image->symbols.end() || !p.find_function(p.entry))
    throw LoadError("entry label '" + p.entry + "' does not resolve to a function");
  s.reg(Reg::pc) = entry->second;
  return s;
}

namespace detail {

class Executor {
public:
  Executor(MachineState& s) : s_(s) {}

  StepResult step() {
    const std::uint32_t pc = s_.reg(Reg::pc);
    if (pc == 0) {
      s_.halted = true;
      s_.exit_value = s_.reg(Reg::r0);
      return Exit{s_.exit_value};
    }
    const CodeImage::Slot* slot = s_.image->slot_at(pc);
    if (!slot || !s_.permissions(pc).executable) {
      s_.halted = true;
      return TrapInfo{TrapKind::InvalidFetch, s_.last_location.value_or(CodeLocation{}), pc};
    }
    loc_ = s_.image->location_of(*slot);
    if (s_.hooks.on_fetch) s_.hooks.on_fetch(loc_, pc);
    s_.coverage.insert({slot->function, slot->block});
    s_.last_location = loc_;
    ++s_.steps;
    next_pc_ = pc + kInstructionSize;
    const Instruction& ins = *slot->ins;
    std::optional<TrapInfo> trap = execute(ins, pc);
    if (trap) {
      s_.halted = true;
      return *trap;
    }
    s_.cycles += cost(ins);
    if (exit_) {
      s_.halted = true;
      s_.exit_value = *exit_;
      return Exit{*exit_};
    }
    s_.reg(Reg::pc) = next_pc_;
    return Continue{};
  }

private:
  std::uint64_t cost(const Instruction& ins) const {
    if (ins.op == Mnemonic::ANNOUNCE_BEGIN || ins.op == Mnemonic::ANNOUNCE_END)
      return s_.options.announce_cost == AnnounceCost::Syscall ? s_.options.cost.announce_cost_syscall
                                                               : s_.options.cost.announce_cost_nop;
    return s_.options.cost.per_instruction;
  }

  TrapInfo trap(TrapKind k, std::uint32_t address) const { return {k, loc_, address}; }

  /// Reading pc yields the address of the current instruction + 8.
  std::uint32_t read(Reg r, std::uint32_t pc) const {
    return r == Reg::pc ? pc + 8 : s_.reg(r);
  }

  std::uint32_t value(const Operand& op, std::uint32_t pc) const {
    if (auto imm = std::get_if<Imm>(&op)) return static_cast<std::uint32_t>(imm->value);
    return read(std::get<Reg>(op), pc);
  }

  std::uint32_t symbol(const std::string& name) const { return s_.image->symbols.at(name); }

  std::optional<TrapInfo> check_load(std::uint32_t address, std::uint32_t width) const {
    for (std::uint32_t i = 0; i < width; ++i)
      if (!s_.permissions(address + i).readable) return trap(TrapKind::UnmappedAccess, address + i);
    return std::nullopt;
  }

  std::optional<TrapInfo> check_store(std::uint32_t address, std::uint32_t width) const {
    for (std::uint32_t i = 0; i < width; ++i) {
      const std::uint32_t a = address + i;
      if (!s_.memory.page(a)) return trap(TrapKind::UnmappedAccess, a);
      if (!s_.permissions(a).writable) return trap(TrapKind::ProtectedWrite, a);
    }
    return std::nullopt;
  }

  std::uint32_t load(std::uint32_t address, std::uint32_t width, Reg into) {
    std::uint32_t v = width == 4 ? s_.memory.read32(address) : s_.memory.read8(address);
    if (s_.hooks.on_load) s_.hooks.on_load({loc_, address, width, v, into});
    return v;
  }

  void store(std::uint32_t address, std::uint32_t width, std::uint32_t v, Reg from) {
    if (width == 4) s_.memory.write32(address, v);
    else s_.memory.write8(address, static_cast<std::uint8_t>(v));
    if (s_.hooks.on_store) s_.hooks.on_store({loc_, address, width, v, from});
    for (const auto& w : s_.watchpoints) {
      if (address < w.address + w.width && w.address < address + width) {
        s_.events.push_back({loc_, address, width, v});
        break;
      }
    }
  }

  std::optional<TrapInfo> set_sp(std::uint32_t v) {
    if (v < s_.map.stack_limit) return trap(TrapKind::StackOverflow, v);
    s_.reg(Reg::sp) = v;
    return std::nullopt;
  }

  /// Writes a destination register; writing pc branches, writing sp is checked.
  std::optional<TrapInfo> write_reg(Reg r, std::uint32_t v) {
    if (r == Reg::pc) {
      next_pc_ = v;
      return std::nullopt;
    }
    if (r == Reg::sp) return set_sp(v);
    s_.reg(r) = v;
    return std::nullopt;
  }

  bool condition(Mnemonic m) const {
    const Flags& f = s_.flags;
    switch (m) {
      case Mnemonic::BEQ: return f.z;
      case Mnemonic::BNE: return !f.z;
      case Mnemonic::BLT: return f.n != f.v;
      case Mnemonic::BGE: return f.n == f.v;
      default: return true;
    }
  }

  std::optional<TrapInfo> execute(const Instruction& ins, std::uint32_t pc) {
    switch (ins.op) {
      case Mnemonic::NOP:
        return std::nullopt;
      case Mnemonic::MOV:
        return write_reg(ins.get<Reg>(0), value(ins.operands[1], pc));
      case Mnemonic::ADD:
      case Mnemonic::SUB: {
        std::uint32_t a = read(ins.get<Reg>(1), pc), b = value(ins.operands[2], pc);
        return write_reg(ins.get<Reg>(0), ins.op == Mnemonic::ADD ? a + b : a - b);
      }
      case Mnemonic::CMP: {
        std::uint32_t a = read(ins.get<Reg>(0), pc), b = value(ins.operands[1], pc);
        std::uint32_t r = a - b;
        s_.flags.n = (r >> 31) & 1;
        s_.flags.z = r == 0;
        s_.flags.c = a >= b;
        s_.flags.v = (((a ^ b) & (a ^ r)) >> 31) & 1;
        return std::nullopt;
      }
      case Mnemonic::LDR:
      case Mnemonic::LDRB: {
        Reg d = ins.get<Reg>(0);
        if (auto lit = std::get_if<Literal>(&ins.operands[1]))
          return write_reg(d, lit->label ? symbol(*lit->label) : static_cast<std::uint32_t>(lit->value));
        const Mem& m = ins.get<Mem>(1);
        std::uint32_t addr = read(m.base, pc) + static_cast<std::uint32_t>(m.offset);
        std::uint32_t width = ins.op == Mnemonic::LDR ? 4 : 1;
        if (auto t = check_load(addr, width)) return t;
        return write_reg(d, load(addr, width, d));
      }
      case Mnemonic::STR:
      case Mnemonic::STRB: {
        const Mem& m = ins.get<Mem>(1);
        std::uint32_t addr = read(m.base, pc) + static_cast<std::uint32_t>(m.offset);
        std::uint32_t width = ins.op == Mnemonic::STR ? 4 : 1;
        if (auto t = check_store(addr, width)) return t;
        store(addr, width, read(ins.get<Reg>(0), pc), ins.get<Reg>(0));
        return std::nullopt;
      }
      case Mnemonic::PUSH: {
        const auto& regs = ins.get<RegList>(0).regs;
        std::uint32_t base = s_.reg(Reg::sp) - 4 * static_cast<std::uint32_t>(regs.size());
        if (base < s_.map.stack_limit) return trap(TrapKind::StackOverflow, base);
        if (auto t = check_store(base, 4 * static_cast<std::uint32_t>(regs.size()))) return t;
        for (std::size_t i = 0; i < regs.size(); ++i)
          store(base + 4 * static_cast<std::uint32_t>(i), 4, read(regs[i], pc), regs[i]);
        s_.reg(Reg::sp) = base;
        return std::nullopt;
      }
      case Mnemonic::POP: {
        const auto& regs = ins.get<RegList>(0).regs;
        std::uint32_t base = s_.reg(Reg::sp);
        if (auto t = check_load(base, 4 * static_cast<std::uint32_t>(regs.size()))) return t;
        std::vector<std::uint32_t> values;
        for (std::size_t i = 0; i < regs.size(); ++i)
          values.push_back(load(base + 4 * static_cast<std::uint32_t>(i), 4, regs[i]));
        s_.reg(Reg::sp) = base + 4 * static_cast<std::uint32_t>(regs.size());
        for (std::size_t i = 0; i < regs.size(); ++i) write_reg(regs[i], values[i]);
        return std::nullopt;
      }
      case Mnemonic::B: case Mnemonic::BEQ: case Mnemonic::BNE: case Mnemonic::BLT:
      case Mnemonic::BGE:
        if (condition(ins.op)) next_pc_ = symbol(ins.get<LabelRef>(0).name);
        return std::nullopt;
      case Mnemonic::BL:
        s_.reg(Reg::lr) = pc + kInstructionSize;
        next_pc_ = symbol(ins.get<LabelRef>(0).name);
        return std::nullopt;
      case Mnemonic::BX:
        next_pc_ = read(ins.get<Reg>(0), pc);
        return std::nullopt;
      case Mnemonic::BLX: {
        std::uint32_t target = read(ins.get<Reg>(0), pc);
        s_.reg(Reg::lr) = pc + kInstructionSize;
        next_pc_ = target;
        return std::nullopt;
      }
      case Mnemonic::SVC: {
        switch (ins.get<Imm>(0).value) {
          case 0: exit_ = s_.reg(Reg::r0); return std::nullopt;
          case 1: s_.output.push_back(s_.reg(Reg::r0)); return std::nullopt;
          default: return trap(TrapKind::IllegalInstruction, pc);
        }
      }
      case Mnemonic::ANNOUNCE_BEGIN:
        ++s_.announce_depth;
        ++s_.announces_executed;
        return std::nullopt;
      case Mnemonic::ANNOUNCE_END:
        if (s_.announce_depth == 0) return trap(TrapKind::IllegalInstruction, pc);
        --s_.announce_depth;
        ++s_.announces_executed;
        return std::nullopt;
    }
    return trap(TrapKind::IllegalInstruction, pc);
  }

  MachineState& s_;
  CodeLocation loc_;
  std::uint32_t next_pc_ = 0;
  std::optional<std::uint32_t> exit_;
};

}  // namespace detail

/// Executes one instruction. Precondition: !s.halted.
inline StepResult step(MachineState& s) { return detail::Executor(s).step(); }

// ---------------------------------------------------------------------------
// Whole runs

struct RunResult {
  std::variant<Exit, TrapInfo> end;
  std::vector<WriteEvent> events;
  std::set<BlockId> coverage;
  std::vector<std::uint32_t> output;
  std::uint64_t cycles = 0;
  std::uint64_t steps = 0;
  std::uint64_t announces_executed = 0;
  std::uint32_t final_announce_depth = 0;

  bool trapped() const { return std::holds_alternative<TrapInfo>(end); }
  const TrapInfo* trap() const { return std::get_if<TrapInfo>(&end); }
  std::optional<std::uint32_t> exit_code() const {
    if (auto e = std::get_if<Exit>(&end)) return e->code;
    return std::nullopt;
  }
  friend bool operator==(const RunResult&, const RunResult&) = default;
};

/// Runs `s` until it exits or traps. Throws BudgetExceeded past the budget.
inline RunResult run(MachineState& s) {
  RunResult r;
  if (s.halted) {
    r.end = Exit{s.exit_value};
  } else {
    for (;;) {
      if (s.steps >= s.options.step_budget)
        throw BudgetExceeded("step budget of " + std::to_string(s.options.step_budget) +
                             " exceeded");
      StepResult res = step(s);
      if (auto e = std::get_if<Exit>(&res)) { r.end = *e; break; }
      if (auto t = std::get_if<TrapInfo>(&res)) { r.end = *t; break; }
    }
  }
  r.events = s.events;
  r.coverage = s.coverage;
  r.output = s.output;
  r.cycles = s.cycles;
  r.steps = s.steps;
  r.announces_executed = s.announces_executed;
  r.final_announce_depth = s.announce_depth;
  return r;
}

inline RunResult run_program(const Program& p, const MemoryLayout& layout, const TestInput& input,
                             const MachineOptions& options = {}, MachineHooks hooks = {}) {
  MachineState s = load(p, layout, input, options);
  s.hooks = std::move(hooks);
  return run(s);
}

/// Runs with watchpoints installed; one WriteEvent per overlapping store, in
/// execution order, whether or not the stored value changed memory.
inline RunResult run_with_watchpoints(const Program& p, const MemoryLayout& layout,
                                      const TestInput& input, std::vector<Watchpoint> watchpoints,
                                      const MachineOptions& options = {}) {
  for (const auto& w : watchpoints)
    if (w.width != 1 && w.width != 4) throw Error("watchpoint width must be 1 or 4");
  MachineState s = load(p, layout, input, options);
  s.watchpoints = std::move(watchpoints);
  return run(s);
}

/// Executed blocks over all blocks, using leader analysis.
inline double coverage_fraction(const Program& p, const std::vector<std::set<BlockId>>& runs) {
  std::size_t total = 0;
  for (const auto& f : p.functions) {
    auto m = block_map(f);
    total += m.empty() ? 0 : m.back() + 1;
  }
  if (total == 0) return 1.0;
  std::set<BlockId> all;
  for (const auto& r : runs) all.insert(r.begin(), r.end());
  return static_cast<double>(all.size()) / static_cast<double>(total);
}

/// Formats a WriteEvent as `WIO=<fn>+<hexoff> ADDR=<hex> W=<n> VAL=<hex>`.
inline std::string format_event(const WriteEvent& e) {
  return "WIO=" + e.wio.str() + " ADDR=" + detail::hex(e.address) + " W=" +
         std::to_string(e.width) + " VAL=" + detail::hex(e.value);
}

inline std::string format_trap(const TrapInfo& t) {
  return "TRAP=" + std::string(trap_name(t.kind)) + " WIO=" + t.wio.str() + " ADDR=" +
         detail::hex(t.address);
}

}  // namespace proconda
