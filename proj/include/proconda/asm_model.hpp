#pragma once

// Assembly IR for the curated ARM subset: registers, operands, instructions,
// functions and data items, together with the textual parser and emitter.
//
// Every instruction occupies exactly four bytes, so the code location of an
// instruction is its function label plus 4 * index.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace proconda {

inline constexpr std::uint32_t kInstructionSize = 4;

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Syntax or semantic error while reading assembly text. Carries the 1-based
/// source line (0 when not attributable to a line).
class ParseError : public Error {
public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

class LocateError : public Error {
public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Registers

enum class Reg : std::uint8_t {
  r0, r1, r2, r3, r4, r5, r6, r7, r8, r9, r10, r11, r12, sp, lr, pc
};

inline constexpr std::size_t kRegisterCount = 16;

inline constexpr unsigned reg_index(Reg r) noexcept { return static_cast<unsigned>(r); }

inline std::string reg_name(Reg r) {
  switch (r) {
    case Reg::sp: return "sp";
    case Reg::lr: return "lr";
    case Reg::pc: return "pc";
    default: return "r" + std::to_string(reg_index(r));
  }
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::optional<Reg> parse_reg(std::string_view text) {
  const std::string s = lower(text);
  if (s == "sp") return Reg::sp;
  if (s == "lr") return Reg::lr;
  if (s == "pc") return Reg::pc;
  if (s == "ip") return Reg::r12;
  if (s == "fp") return Reg::r11;
  if (s.size() >= 2 && s[0] == 'r') {
    unsigned n = 0;
    auto [ptr, ec] = std::from_chars(s.data() + 1, s.data() + s.size(), n);
    if (ec == std::errc{} && ptr == s.data() + s.size() && n < kRegisterCount)
      return static_cast<Reg>(n);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Operands

struct Imm {
  std::int32_t value = 0;
  friend bool operator==(const Imm&, const Imm&) = default;
};

struct LabelRef {
  std::string name;
  friend bool operator==(const LabelRef&, const LabelRef&) = default;
};

/// `[base, #offset]`
struct Mem {
  Reg base = Reg::r0;
  std::int32_t offset = 0;
  friend bool operator==(const Mem&, const Mem&) = default;
};

/// `=label` or `=imm`; exactly one of the two is meaningful.
struct Literal {
  std::optional<std::string> label;
  std::int32_t value = 0;
  friend bool operator==(const Literal&, const Literal&) = default;
};

/// `{rA, rB, ...}` in strictly ascending register order.
struct RegList {
  std::vector<Reg> regs;
  friend bool operator==(const RegList&, const RegList&) = default;
  bool contains(Reg r) const { return std::find(regs.begin(), regs.end(), r) != regs.end(); }
  std::size_t slot_of(Reg r) const {
    return static_cast<std::size_t>(std::find(regs.begin(), regs.end(), r) - regs.begin());
  }
};

using Operand = std::variant<Reg, Imm, LabelRef, Mem, Literal, RegList>;

// ---------------------------------------------------------------------------
// Instructions

enum class Mnemonic : std::uint8_t {
  MOV, LDR, LDRB, STR, STRB, PUSH, POP, ADD, SUB, CMP,
  B, BEQ, BNE, BLT, BGE, BL, BX, BLX, SVC, NOP, ANNOUNCE_BEGIN, ANNOUNCE_END
};

inline constexpr std::string_view kMnemonicNames[] = {
    "MOV", "LDR", "LDRB", "STR", "STRB", "PUSH", "POP", "ADD", "SUB", "CMP", "B",
    "BEQ", "BNE", "BLT", "BGE", "BL", "BX", "BLX", "SVC", "NOP", "ANNOUNCE_BEGIN",
    "ANNOUNCE_END"};

inline std::string_view mnemonic_name(Mnemonic m) {
  return kMnemonicNames[static_cast<std::size_t>(m)];
}

inline std::optional<Mnemonic> parse_mnemonic(std::string_view text) {
  std::string up(text);
  std::transform(up.begin(), up.end(), up.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  for (std::size_t i = 0; i < std::size(kMnemonicNames); ++i)
    if (kMnemonicNames[i] == up) return static_cast<Mnemonic>(i);
  return std::nullopt;
}

inline bool is_conditional_branch(Mnemonic m) {
  return m == Mnemonic::BEQ || m == Mnemonic::BNE || m == Mnemonic::BLT || m == Mnemonic::BGE;
}

inline bool is_store(Mnemonic m) {
  return m == Mnemonic::STR || m == Mnemonic::STRB || m == Mnemonic::PUSH;
}

struct Instruction {
  Mnemonic op = Mnemonic::NOP;
  std::vector<Operand> operands;

  friend bool operator==(const Instruction&, const Instruction&) = default;

  std::uint32_t encoded_size() const noexcept { return kInstructionSize; }

  template <class T>
  const T& get(std::size_t i) const { return std::get<T>(operands.at(i)); }
  template <class T>
  bool holds(std::size_t i) const {
    return i < operands.size() && std::holds_alternative<T>(operands[i]);
  }

  /// Destination register for MOV/LDR/LDRB/ADD/SUB.
  std::optional<Reg> dest() const {
    switch (op) {
      case Mnemonic::MOV: case Mnemonic::LDR: case Mnemonic::LDRB:
      case Mnemonic::ADD: case Mnemonic::SUB:
        return get<Reg>(0);
      default: return std::nullopt;
    }
  }
};

inline Instruction make(Mnemonic op, std::vector<Operand> ops = {}) {
  return Instruction{op, std::move(ops)};
}

// ---------------------------------------------------------------------------
// Program structure

struct LocalLabel {
  std::string name;
  std::size_t index = 0;  // instruction the label precedes
  friend bool operator==(const LocalLabel&, const LocalLabel&) = default;
};

struct FunctionBody {
  std::string label;
  std::vector<Instruction> instructions;
  std::vector<LocalLabel> local_labels;  // sorted by index, then definition order

  friend bool operator==(const FunctionBody&, const FunctionBody&) = default;

  std::optional<std::size_t> local_index(std::string_view name) const {
    for (const auto& l : local_labels)
      if (l.name == name) return l.index;
    return std::nullopt;
  }
};

enum class Section : std::uint8_t { Data, Proconda };

/// One `.word` value: a number or the address of a label.
using Word = std::variant<std::int32_t, std::string>;

struct DataItem {
  std::string label;
  std::vector<Word> words;
  Section section = Section::Data;
  friend bool operator==(const DataItem&, const DataItem&) = default;
};

struct Program {
  std::vector<FunctionBody> functions;
  std::vector<DataItem> data;
  std::vector<std::string> globals;
  std::string entry = "main";

  friend bool operator==(const Program&, const Program&) = default;

  const FunctionBody* find_function(std::string_view name) const {
    for (const auto& f : functions)
      if (f.label == name) return &f;
    return nullptr;
  }
  const DataItem* find_data(std::string_view name) const {
    for (const auto& d : data)
      if (d.label == name) return &d;
    return nullptr;
  }
  std::size_t instruction_count() const {
    std::size_t n = 0;
    for (const auto& f : functions) n += f.instructions.size();
    return n;
  }
  bool has_proconda_section() const {
    return std::any_of(data.begin(), data.end(),
                       [](const DataItem& d) { return d.section == Section::Proconda; });
  }
};

// ---------------------------------------------------------------------------
// Code locations

/// Function label + byte offset: the identity of an instruction (the WIO for
/// writes). Ordered lexicographically on (function, offset).
struct CodeLocation {
  std::string function;
  std::uint32_t offset = 0;

  friend auto operator<=>(const CodeLocation&, const CodeLocation&) = default;
  friend bool operator==(const CodeLocation&, const CodeLocation&) = default;

  std::size_t index() const { return offset / kInstructionSize; }

  std::string str() const {
    std::ostringstream os;
    os << function << "+0x" << std::hex << offset;
    return os.str();
  }

  static CodeLocation at(std::string function, std::size_t index) {
    return {std::move(function), static_cast<std::uint32_t>(index * kInstructionSize)};
  }

  /// Parses `fn+0xOFF`.
  static CodeLocation parse(std::string_view text) {
    const auto plus = text.rfind('+');
    if (plus == std::string_view::npos || plus == 0)
      throw LocateError("malformed code location '" + std::string(text) + "'");
    std::string_view off = text.substr(plus + 1);
    int base = 10;
    if (off.size() > 2 && off[0] == '0' && (off[1] == 'x' || off[1] == 'X')) {
      off.remove_prefix(2);
      base = 16;
    }
    std::uint32_t value = 0;
    auto [ptr, ec] = std::from_chars(off.data(), off.data() + off.size(), value, base);
    if (ec != std::errc{} || ptr != off.data() + off.size())
      throw LocateError("malformed code location offset '" + std::string(text) + "'");
    return {std::string(text.substr(0, plus)), value};
  }
};

inline const Instruction& locate(const Program& p, const CodeLocation& loc) {
  const FunctionBody* f = p.find_function(loc.function);
  if (!f) throw LocateError("unknown function '" + loc.function + "'");
  if (loc.offset % kInstructionSize != 0)
    throw LocateError("offset " + std::to_string(loc.offset) + " is not a multiple of 4");
  if (loc.index() >= f->instructions.size())
    throw LocateError("offset " + std::to_string(loc.offset) + " is out of range for '" +
                      loc.function + "'");
  return f->instructions[loc.index()];
}

// ---------------------------------------------------------------------------
// Emission

namespace detail {

inline std::string hex(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

inline std::string format_operand(const Operand& op) {
  return std::visit(
      [](const auto& o) -> std::string {
        using T = std::decay_t<decltype(o)>;
        if constexpr (std::is_same_v<T, Reg>) {
          return reg_name(o);
        } else if constexpr (std::is_same_v<T, Imm>) {
          return "#" + std::to_string(o.value);
        } else if constexpr (std::is_same_v<T, LabelRef>) {
          return o.name;
        } else if constexpr (std::is_same_v<T, Mem>) {
          if (o.offset == 0) return "[" + reg_name(o.base) + "]";
          return "[" + reg_name(o.base) + ", #" + std::to_string(o.offset) + "]";
        } else if constexpr (std::is_same_v<T, Literal>) {
          return o.label ? "=" + *o.label : "=" + std::to_string(o.value);
        } else {
          std::string s = "{";
          for (std::size_t i = 0; i < o.regs.size(); ++i) {
            if (i) s += ", ";
            s += reg_name(o.regs[i]);
          }
          return s + "}";
        }
      },
      op);
}

}  // namespace detail

inline std::string format_instruction(const Instruction& ins) {
  std::string s(mnemonic_name(ins.op));
  for (std::size_t i = 0; i < ins.operands.size(); ++i) {
    s += i ? ", " : " ";
    s += detail::format_operand(ins.operands[i]);
  }
  return s;
}

inline std::string emit_program(const Program& p) {
  std::ostringstream os;
  os << "@ proconda assembly\n";
  if (!p.globals.empty()) {
    for (const auto& g : p.globals) os << "\t.global " << g << "\n";
  }
  if (!p.functions.empty()) {
    os << "\t.text\n";
    for (const auto& f : p.functions) {
      os << f.label << ":\n";
      for (std::size_t i = 0; i < f.instructions.size(); ++i) {
        for (const auto& l : f.local_labels)
          if (l.index == i) os << l.name << ":\n";
        os << "\t" << format_instruction(f.instructions[i]) << "\n";
      }
    }
  }
  auto emit_data = [&](Section section, std::string_view header) {
    bool first = true;
    for (const auto& d : p.data) {
      if (d.section != section) continue;
      if (first) os << "\t" << header << "\n";
      first = false;
      os << d.label << ":\n";
      if (d.words.empty()) continue;
      os << "\t.word ";
      for (std::size_t i = 0; i < d.words.size(); ++i) {
        if (i) os << ", ";
        if (auto v = std::get_if<std::int32_t>(&d.words[i]))
          os << *v;
        else
          os << std::get<std::string>(d.words[i]);
      }
      os << "\n";
    }
  };
  emit_data(Section::Data, ".data");
  emit_data(Section::Proconda, ".section .proconda");
  return os.str();
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline bool is_identifier(std::string_view s) {
  if (s.empty()) return false;
  auto head = static_cast<unsigned char>(s[0]);
  if (!(std::isalpha(head) || head == '_' || head == '.')) return false;
  return std::all_of(s.begin(), s.end(), [](unsigned char c) {
    return std::isalnum(c) || c == '_' || c == '.' || c == '$';
  });
}

inline bool is_local_label(std::string_view s) { return s.size() > 2 && s.substr(0, 2) == ".L"; }

inline std::optional<std::int64_t> parse_int(std::string_view s) {
  s = trim(s);
  bool neg = false;
  if (!s.empty() && (s[0] == '-' || s[0] == '+')) {
    neg = s[0] == '-';
    s.remove_prefix(1);
  }
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    s.remove_prefix(2);
    base = 16;
  }
  if (s.empty()) return std::nullopt;
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, base);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  if (v > 0xFFFFFFFFull) return std::nullopt;
  return neg ? -static_cast<std::int64_t>(v) : static_cast<std::int64_t>(v);
}

/// Accepts signed 32-bit values and unsigned ones up to 0xFFFFFFFF (wrapped).
inline std::optional<std::int32_t> parse_word(std::string_view s) {
  auto v = parse_int(s);
  if (!v || *v < INT32_MIN) return std::nullopt;
  return static_cast<std::int32_t>(static_cast<std::uint32_t>(*v));
}

/// Splits on commas that are not inside `[]` or `{}`.
inline std::vector<std::string_view> split_operands(std::string_view s) {
  std::vector<std::string_view> out;
  int depth = 0;
  std::size_t start = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '[' || s[i] == '{') ++depth;
    if (s[i] == ']' || s[i] == '}') --depth;
    if (s[i] == ',' && depth == 0) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  auto last = trim(s.substr(start));
  if (!last.empty() || !out.empty()) out.push_back(last);
  return out;
}

class Parser {
public:
  explicit Parser(std::string_view text) : text_(text) {}

  Program run() {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text_.size()) {
      auto nl = text_.find('\n', pos);
      if (nl == std::string_view::npos) nl = text_.size();
      ++line_no;
      line(text_.substr(pos, nl - pos), line_no);
      pos = nl + 1;
    }
    finish_function();
    link();
    return std::move(program_);
  }

private:
  enum class Mode { Text, Data, Proconda };

  struct PendingRef {
    std::string name;
    std::size_t line;
    std::string function;  // owning function for branch targets
    bool branch;
  };

  void line(std::string_view raw, std::size_t n) {
    if (auto at = raw.find('@'); at != std::string_view::npos) raw = raw.substr(0, at);
    std::string_view s = trim(raw);
    while (!s.empty()) {
      // Leading `label:` (possibly several).
      auto colon = s.find(':');
      if (colon != std::string_view::npos && is_identifier(trim(s.substr(0, colon))) &&
          s.substr(0, colon).find_first_of(" \t[{,#=") == std::string_view::npos) {
        define_label(std::string(trim(s.substr(0, colon))), n);
        s = trim(s.substr(colon + 1));
        continue;
      }
      break;
    }
    if (s.empty()) return;
    if (s[0] == '.') {
      directive(s, n);
      return;
    }
    if (mode_ != Mode::Text) throw ParseError(n, "instruction outside .text");
    if (!current_) throw ParseError(n, "instruction before any function label");
    instruction(s, n);
  }

  void define_label(std::string name, std::size_t n) {
    if (auto it = definitions_.find(name); it != definitions_.end())
      throw ParseError(n, "duplicate label '" + name + "' (first defined at line " +
                              std::to_string(it->second) + ")");
    definitions_[name] = n;
    if (mode_ == Mode::Text) {
      if (is_local_label(name)) {
        if (!current_) throw ParseError(n, "local label '" + name + "' outside a function");
        current_->local_labels.push_back({name, current_->instructions.size()});
        pending_local_.push_back({name, n});
      } else {
        finish_function();
        program_.functions.push_back(FunctionBody{name, {}, {}});
        current_ = &program_.functions.back();
      }
    } else {
      program_.data.push_back(
          DataItem{name, {}, mode_ == Mode::Data ? Section::Data : Section::Proconda});
      data_open_ = true;
    }
  }

  void finish_function() {
    if (current_) {
      for (const auto& [name, n] : pending_local_) {
        if (*current_->local_index(name) >= current_->instructions.size())
          throw ParseError(n, "label '" + name + "' does not precede an instruction");
      }
      if (current_->instructions.empty())
        throw ParseError(definitions_[current_->label],
                         "function '" + current_->label + "' has no instructions");
    }
    pending_local_.clear();
    current_ = nullptr;
  }

  void directive(std::string_view s, std::size_t n) {
    auto sp = s.find_first_of(" \t");
    std::string name = lower(s.substr(0, sp));
    std::string_view rest = sp == std::string_view::npos ? std::string_view{} : trim(s.substr(sp));
    if (name == ".text") {
      mode_ = Mode::Text;
      data_open_ = false;
    } else if (name == ".data") {
      finish_function();
      mode_ = Mode::Data;
      data_open_ = false;
    } else if (name == ".section") {
      if (rest != ".proconda") throw ParseError(n, "unsupported section '" + std::string(rest) + "'");
      finish_function();
      mode_ = Mode::Proconda;
      data_open_ = false;
    } else if (name == ".global" || name == ".globl") {
      if (!is_identifier(rest)) throw ParseError(n, "malformed .global");
      program_.globals.emplace_back(rest);
      global_lines_.push_back(n);
    } else if (name == ".word") {
      if (mode_ == Mode::Text || !data_open_) throw ParseError(n, ".word without a data label");
      for (auto item : split_operands(rest)) {
        if (item.empty()) throw ParseError(n, "empty .word value");
        if (auto v = parse_word(item)) {
          program_.data.back().words.emplace_back(*v);
        } else if (is_identifier(item)) {
          program_.data.back().words.emplace_back(std::string(item));
          refs_.push_back({std::string(item), n, {}, false});
        } else {
          throw ParseError(n, "bad .word value '" + std::string(item) + "'");
        }
      }
    } else {
      throw ParseError(n, "unknown directive '" + name + "'");
    }
  }

  Reg reg(std::string_view s, std::size_t n) {
    auto r = parse_reg(s);
    if (!r) throw ParseError(n, "expected register, got '" + std::string(s) + "'");
    return *r;
  }

  Imm imm(std::string_view s, std::size_t n) {
    if (s.empty() || s[0] != '#') throw ParseError(n, "expected immediate, got '" + std::string(s) + "'");
    auto v = parse_word(s.substr(1));
    if (!v) throw ParseError(n, "bad immediate '" + std::string(s) + "'");
    return Imm{*v};
  }

  Mem mem(std::string_view s, std::size_t n) {
    if (s.size() < 3 || s.front() != '[' || s.back() != ']')
      throw ParseError(n, "expected memory operand, got '" + std::string(s) + "'");
    auto parts = split_operands(s.substr(1, s.size() - 2));
    if (parts.empty() || parts.size() > 2) throw ParseError(n, "bad memory operand");
    Mem m{reg(parts[0], n), 0};
    if (parts.size() == 2) m.offset = imm(parts[1], n).value;
    return m;
  }

  RegList reglist(std::string_view s, std::size_t n) {
    if (s.size() < 3 || s.front() != '{' || s.back() != '}')
      throw ParseError(n, "expected register list, got '" + std::string(s) + "'");
    RegList list;
    for (auto part : split_operands(s.substr(1, s.size() - 2))) {
      Reg r = reg(part, n);
      if (!list.regs.empty() && reg_index(r) <= reg_index(list.regs.back()))
        throw ParseError(n, "register list must be strictly ascending");
      list.regs.push_back(r);
    }
    if (list.regs.empty()) throw ParseError(n, "empty register list");
    return list;
  }

  Operand reg_or_imm(std::string_view s, std::size_t n) {
    if (!s.empty() && s[0] == '#') return imm(s, n);
    return reg(s, n);
  }

  LabelRef label_ref(std::string_view s, std::size_t n, bool branch) {
    if (!is_identifier(s)) throw ParseError(n, "expected label, got '" + std::string(s) + "'");
    refs_.push_back({std::string(s), n, current_->label, branch});
    return LabelRef{std::string(s)};
  }

  void expect(const std::vector<std::string_view>& ops, std::size_t count, std::size_t n,
              std::string_view m) {
    if (ops.size() != count)
      throw ParseError(n, std::string(m) + " expects " + std::to_string(count) + " operand(s)");
  }

  void instruction(std::string_view s, std::size_t n) {
    auto sp = s.find_first_of(" \t");
    std::string_view word = s.substr(0, sp);
    auto m = parse_mnemonic(word);
    if (!m) throw ParseError(n, "unknown mnemonic '" + std::string(word) + "'");
    auto ops = sp == std::string_view::npos ? std::vector<std::string_view>{}
                                            : split_operands(trim(s.substr(sp)));
    Instruction ins{*m, {}};
    auto name = mnemonic_name(*m);
    switch (*m) {
      case Mnemonic::MOV: {
        expect(ops, 2, n, name);
        Reg d = reg(ops[0], n);
        if (d == Reg::pc) throw ParseError(n, "MOV into pc is not supported");
        ins.operands = {d, reg_or_imm(ops[1], n)};
        break;
      }
      case Mnemonic::LDR: {
        expect(ops, 2, n, name);
        Reg d = reg(ops[0], n);
        if (!ops[1].empty() && ops[1][0] == '=') {
          auto body = trim(ops[1].substr(1));
          if (d == Reg::pc) throw ParseError(n, "literal load into pc is not supported");
          if (auto v = parse_word(body)) {
            ins.operands = {d, Literal{std::nullopt, *v}};
          } else if (is_identifier(body)) {
            refs_.push_back({std::string(body), n, current_->label, false});
            ins.operands = {d, Literal{std::string(body), 0}};
          } else {
            throw ParseError(n, "bad literal '" + std::string(ops[1]) + "'");
          }
        } else {
          ins.operands = {d, mem(ops[1], n)};
        }
        break;
      }
      case Mnemonic::LDRB: {
        expect(ops, 2, n, name);
        Reg d = reg(ops[0], n);
        if (d == Reg::pc) throw ParseError(n, "LDRB into pc is not supported");
        ins.operands = {d, mem(ops[1], n)};
        break;
      }
      case Mnemonic::STR:
      case Mnemonic::STRB: {
        expect(ops, 2, n, name);
        Reg src = reg(ops[0], n);
        if (src == Reg::pc) throw ParseError(n, "storing pc is not supported");
        ins.operands = {src, mem(ops[1], n)};
        break;
      }
      case Mnemonic::PUSH:
      case Mnemonic::POP: {
        expect(ops, 1, n, name);
        RegList list = reglist(ops[0], n);
        if (list.contains(Reg::sp)) throw ParseError(n, "sp in register list");
        if (*m == Mnemonic::PUSH && list.contains(Reg::pc))
          throw ParseError(n, "PUSH of pc is not supported");
        ins.operands = {list};
        break;
      }
      case Mnemonic::ADD:
      case Mnemonic::SUB: {
        expect(ops, 3, n, name);
        ins.operands = {reg(ops[0], n), reg(ops[1], n), reg_or_imm(ops[2], n)};
        break;
      }
      case Mnemonic::CMP: {
        expect(ops, 2, n, name);
        ins.operands = {reg(ops[0], n), reg_or_imm(ops[1], n)};
        break;
      }
      case Mnemonic::B: case Mnemonic::BEQ: case Mnemonic::BNE: case Mnemonic::BLT:
      case Mnemonic::BGE: case Mnemonic::BL: {
        expect(ops, 1, n, name);
        ins.operands = {label_ref(ops[0], n, true)};
        break;
      }
      case Mnemonic::BX:
      case Mnemonic::BLX: {
        expect(ops, 1, n, name);
        ins.operands = {reg(ops[0], n)};
        break;
      }
      case Mnemonic::SVC: {
        expect(ops, 1, n, name);
        ins.operands = {imm(ops[0], n)};
        break;
      }
      case Mnemonic::NOP:
      case Mnemonic::ANNOUNCE_BEGIN:
      case Mnemonic::ANNOUNCE_END:
        expect(ops, 0, n, name);
        break;
    }
    current_->instructions.push_back(std::move(ins));
  }

  void link() {
    std::set<std::string> functions, data;
    for (const auto& f : program_.functions) functions.insert(f.label);
    for (const auto& d : program_.data) data.insert(d.label);
    for (const auto& ref : refs_) {
      if (ref.branch) {
        const FunctionBody* owner = program_.find_function(ref.function);
        if (functions.count(ref.name) || (owner && owner->local_index(ref.name))) continue;
        throw ParseError(ref.line, "unresolved branch target '" + ref.name + "'");
      }
      if (definitions_.count(ref.name) && !is_local_label(ref.name)) continue;
      if (functions.count(ref.name) || data.count(ref.name)) continue;
      throw ParseError(ref.line, "unresolved label '" + ref.name + "'");
    }
    for (std::size_t i = 0; i < program_.globals.size(); ++i)
      if (!definitions_.count(program_.globals[i]))
        throw ParseError(global_lines_[i], "unresolved .global '" + program_.globals[i] + "'");
  }

  std::string_view text_;
  Program program_;
  FunctionBody* current_ = nullptr;
  Mode mode_ = Mode::Text;
  bool data_open_ = false;
  std::map<std::string, std::size_t> definitions_;
  std::vector<std::pair<std::string, std::size_t>> pending_local_;
  std::vector<PendingRef> refs_;
  std::vector<std::size_t> global_lines_;
};

}  // namespace detail

/// Parses and links assembly text. Entry-label resolution is deferred to load
/// time so that an empty file parses to an empty Program.
inline Program parse_program(std::string_view text) { return detail::Parser(text).run(); }

}  // namespace proconda
