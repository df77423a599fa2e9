#pragma once

// JSON interchange for reports, graphs, suites and exploit cases.
// Key order is fixed (ordered_json) so output is byte-stable.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "proconda/harness.hpp"
#include "proconda/ident.hpp"
#include "proconda/rewrite.hpp"
#include "proconda/slice.hpp"

namespace proconda {

using Json = nlohmann::ordered_json;

class FormatError : public Error {
public:
  using Error::Error;
};

inline constexpr std::uint32_t kDefaultDisplayBase = 0x10A8;

/// `base` plus the byte offset of `loc` from the start of the code image.
inline std::uint32_t display_address(const Program& p, const CodeLocation& loc, std::uint32_t base) {
  std::uint32_t start = 0;
  for (const auto& f : p.functions) {
    if (f.label == loc.function) return base + start + loc.offset;
    start += static_cast<std::uint32_t>(f.instructions.size() * kInstructionSize);
  }
  throw LocateError("no function '" + loc.function + "'");
}

namespace detail {

inline Reg json_reg(const Json& j) {
  auto r = parse_reg(j.get<std::string>());
  if (!r) throw FormatError("bad register '" + j.get<std::string>() + "'");
  return *r;
}

inline std::uint32_t json_hex(const Json& j) {
  const std::string s = j.get<std::string>();
  try {
    return static_cast<std::uint32_t>(std::stoul(s, nullptr, 0));
  } catch (const std::exception&) {
    throw FormatError("bad address '" + s + "'");
  }
}

template <class Enum, std::size_t N>
Enum json_enum(const Json& j, const std::string_view (&names)[N]) {
  const std::string s = j.get<std::string>();
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<Enum>(i);
  throw FormatError("unknown value '" + s + "'");
}

inline constexpr std::string_view kConsumedKinds[] = {"register", "stack-slot", "memory"};
inline constexpr std::string_view kBaseKinds[] = {"stack", "label", "immediate", "return-address"};
inline constexpr std::string_view kLoadKinds[] = {"memory", "address", "constant"};
inline constexpr std::string_view kReasons[] = {"register-resident", "cross-function"};

inline Json opt_loc(const std::optional<CodeLocation>& l) { return l ? Json(l->str()) : Json(nullptr); }
inline std::optional<CodeLocation> opt_loc(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return CodeLocation::parse(j.get<std::string>());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ControlDataReport

inline Json to_json(const LoadSite& l) {
  Json base = {{"kind", detail::kBaseKinds[std::size_t(l.base.kind)]}, {"offset", l.base.offset}};
  if (l.base.kind == BaseExpr::Kind::Label) base["label"] = l.base.label;
  return {{"id", l.id()},
          {"loc", l.loc.str()},
          {"target", reg_name(l.target)},
          {"kind", load_kind_name(l.kind)},
          {"base", base},
          {"read_loc", detail::opt_loc(l.read_loc)},
          {"read_reg", reg_name(l.read_reg)},
          {"paired_store", detail::opt_loc(l.paired_store)}};
}

inline LoadSite load_site_from_json(const Json& j) {
  LoadSite l;
  l.loc = CodeLocation::parse(j.at("loc").get<std::string>());
  l.target = detail::json_reg(j.at("target"));
  l.kind = detail::json_enum<LoadKind>(j.at("kind"), detail::kLoadKinds);
  l.base.kind = detail::json_enum<BaseExpr::Kind>(j.at("base").at("kind"), detail::kBaseKinds);
  l.base.offset = j.at("base").at("offset").get<std::int32_t>();
  if (j.at("base").contains("label")) l.base.label = j.at("base").at("label").get<std::string>();
  l.read_loc = detail::opt_loc(j.at("read_loc"));
  l.read_reg = detail::json_reg(j.at("read_reg"));
  l.paired_store = detail::opt_loc(j.at("paired_store"));
  return l;
}

inline Json report_to_json(const ControlDataReport& r, const Program& p,
                           std::uint32_t display_base = kDefaultDisplayBase) {
  Json sites = Json::array();
  for (const auto& s : r.sites) {
    Json consumed = Json::array();
    for (const auto& c : s.consumed)
      consumed.push_back({{"kind", detail::kConsumedKinds[std::size_t(c.kind)]},
                          {"reg", reg_name(c.reg)},
                          {"offset", c.offset}});
    sites.push_back({{"loc", s.loc.str()},
                     {"display", detail::hex(display_address(p, s.loc, display_base))},
                     {"instruction", format_instruction(locate(p, s.loc))},
                     {"consumed", consumed}});
  }
  Json loads = Json::array();
  for (const auto& l : r.load_sites) loads.push_back(to_json(l));
  Json chains = Json::array();
  for (const auto& c : r.chains) {
    Json path = Json::array();
    for (const auto& l : c.path) path.push_back(l.str());
    chains.push_back({{"site", c.site.str()}, {"reg", reg_name(c.reg)}, {"load_site", c.load_site}, {"path", path}});
  }
  Json unresolved = Json::array();
  for (const auto& u : r.unresolved)
    unresolved.push_back({{"site", u.site.str()},
                          {"reg", reg_name(u.reg)},
                          {"reason", unresolved_reason_name(u.reason)},
                          {"at", u.at.str()}});
  return {{"sites", sites}, {"load_sites", loads}, {"chains", chains}, {"unresolved", unresolved}};
}

inline ControlDataReport report_from_json(const Json& j) {
  try {
    ControlDataReport r;
    for (const auto& s : j.at("sites")) {
      ControlFlowSite site{CodeLocation::parse(s.at("loc").get<std::string>()), {}};
      for (const auto& c : s.at("consumed"))
        site.consumed.push_back({detail::json_enum<Consumed::Kind>(c.at("kind"), detail::kConsumedKinds),
                                 detail::json_reg(c.at("reg")), c.at("offset").get<std::int32_t>()});
      r.sites.push_back(std::move(site));
    }
    for (const auto& l : j.at("load_sites")) r.load_sites.push_back(load_site_from_json(l));
    for (const auto& c : j.at("chains")) {
      Chain ch{CodeLocation::parse(c.at("site").get<std::string>()), detail::json_reg(c.at("reg")),
               c.at("load_site").get<std::string>(), {}};
      for (const auto& l : c.at("path")) ch.path.push_back(CodeLocation::parse(l.get<std::string>()));
      r.chains.push_back(std::move(ch));
    }
    for (const auto& u : j.at("unresolved"))
      r.unresolved.push_back({CodeLocation::parse(u.at("site").get<std::string>()), detail::json_reg(u.at("reg")),
                              detail::json_enum<UnresolvedReason>(u.at("reason"), detail::kReasons),
                              CodeLocation::parse(u.at("at").get<std::string>())});
    return r;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// SliceResult / DataSourceGraph

inline Json slice_to_json(const SliceResult& s, const Program& p, std::uint32_t display_base = kDefaultDisplayBase) {
  Json slots = Json::array();
  for (const auto& [id, slot] : s.graph.slots) {
    Json observed = Json::array();
    for (auto a : slot.observed_addresses) observed.push_back(detail::hex(a));
    slots.push_back({{"id", id},
                     {"return_address", slot.is_return_slot()},
                     {"width", slot.width},
                     {"observed", observed},
                     {"origin", to_json(slot.origin)}});
  }
  Json nodes = Json::array();
  for (const auto& w : s.graph.writers())
    nodes.push_back({{"wio", w.str()},
                     {"display", detail::hex(display_address(p, w, display_base))},
                     {"instruction", format_instruction(locate(p, w))}});
  Json edges = Json::array();
  for (const auto& e : s.graph.edges) edges.push_back({{"wio", e.wio.str()}, {"slot", e.slot}});
  Json runs = Json::array();
  for (const auto& r : s.records)
    runs.push_back({{"input", r.input}, {"exit", r.exit_code}, {"write_events", r.events}, {"blocks", r.blocks}});
  Json unreached = Json::array();
  for (const auto& u : s.unreached_slots) unreached.push_back(u);
  return {{"slots", slots},
          {"nodes", nodes},
          {"edges", edges},
          {"coverage", s.coverage},
          {"threshold", s.threshold},
          {"finalized", s.finalized},
          {"runs", runs},
          {"unreached_slots", unreached},
          {"diagnostic", s.diagnostic}};
}

inline SliceResult slice_from_json(const Json& j) {
  try {
    SliceResult s;
    for (const auto& js : j.at("slots")) {
      ControlDataSlot slot;
      slot.id = js.at("id").get<std::string>();
      slot.origin = load_site_from_json(js.at("origin"));
      slot.width = js.at("width").get<std::uint32_t>();
      for (const auto& a : js.at("observed")) slot.observed_addresses.insert(detail::json_hex(a));
      s.graph.slots[slot.id] = std::move(slot);
    }
    for (const auto& e : j.at("edges"))
      s.graph.edges.insert({CodeLocation::parse(e.at("wio").get<std::string>()), e.at("slot").get<std::string>()});
    s.coverage = j.at("coverage").get<double>();
    s.threshold = j.at("threshold").get<double>();
    s.finalized = j.at("finalized").get<bool>();
    for (const auto& r : j.at("runs"))
      s.records.push_back({r.at("input").get<std::string>(), r.at("exit").get<std::uint32_t>(),
                           r.at("write_events").get<std::size_t>(), r.at("blocks").get<std::size_t>()});
    s.runs = s.records.size();
    for (const auto& u : j.at("unreached_slots")) s.unreached_slots.push_back(u.get<std::string>());
    s.diagnostic = j.at("diagnostic").get<std::string>();
    return s;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed graph: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Rewrite

inline Json to_json(const RewriteReport& r) {
  return {{"mode", announce_mode_name(r.mode)},
          {"original_instructions", r.original_count},
          {"rewritten_instructions", r.rewritten_count},
          {"inserted_instructions", r.inserted_instructions},
          {"announce_pairs", r.announce_pairs},
          {"split_delta", r.split_delta},
          {"original_footprint", r.original_footprint},
          {"rewritten_footprint", r.rewritten_footprint},
          {"footprint_delta", r.footprint_delta},
          {"instr_delta_pct", r.instruction_delta_pct()},
          {"footprint_delta_pct", r.footprint_delta_pct()}};
}

inline Json to_json(const RelocationPlan& plan) {
  Json slots = Json::array();
  for (const auto& [id, s] : plan.slot_map)
    slots.push_back({{"slot", id}, {"placement", shadow_kind_name(s.kind)}, {"label", s.label}});
  Json ops = Json::array();
  for (const auto& op : plan.split_ops) {
    Json seq = Json::array();
    for (const auto& i : op.replacement) seq.push_back(format_instruction(i));
    ops.push_back({{"loc", op.loc.str()}, {"reason", op.reason}, {"announce_pairs", op.announce_pairs}, {"replacement", seq}});
  }
  Json notes = Json::array();
  for (const auto& n : plan.notes) notes.push_back(n);
  return {{"shadow_sp_slot", plan.shadow_sp_slot.empty() ? Json(nullptr) : Json(plan.shadow_sp_slot)},
          {"slots", slots},
          {"relocated_labels", plan.relocated_labels},
          {"fixed_slots", plan.fixed_slots},
          {"split_ops", ops},
          {"notes", notes}};
}

// ---------------------------------------------------------------------------
// Test inputs and suites
//
// A buffer is {"role": r, "text": "..."} or {"role": r, "hex": "41 42"}.
// Exploit buffers may instead list "pieces", each {"text"}, {"hex"},
// {"fill": "A", "count": n} or {"address_of": label}. Scalars are integers or
// {"address_of": label}.

inline std::vector<std::uint8_t> parse_hex_bytes(const std::string& hex) {
  std::vector<std::uint8_t> out;
  std::string digits;
  for (char c : hex)
    if (!std::isspace(static_cast<unsigned char>(c))) digits += c;
  if (digits.size() % 2) throw FormatError("odd number of hex digits");
  for (std::size_t i = 0; i < digits.size(); i += 2) {
    try {
      out.push_back(static_cast<std::uint8_t>(std::stoul(digits.substr(i, 2), nullptr, 16)));
    } catch (const std::exception&) {
      throw FormatError("bad hex byte '" + digits.substr(i, 2) + "'");
    }
  }
  return out;
}

inline std::vector<std::uint8_t> piece_bytes(const Json& j) {
  if (j.contains("text")) {
    const auto s = j.at("text").get<std::string>();
    return {s.begin(), s.end()};
  }
  if (j.contains("hex")) return parse_hex_bytes(j.at("hex").get<std::string>());
  if (j.contains("fill")) {
    const auto f = j.at("fill").get<std::string>();
    if (f.size() != 1) throw FormatError("fill must be a single character");
    return std::vector<std::uint8_t>(j.at("count").get<std::size_t>(), std::uint8_t(f[0]));
  }
  throw FormatError("buffer needs text, hex or fill");
}

inline TestInput input_from_json(const Json& j) {
  TestInput t;
  t.name = j.value("name", std::string{});
  for (const auto& b : j.value("buffers", Json::array())) t.buffers.push_back({b.at("role").get<std::string>(), piece_bytes(b)});
  for (const auto& s : j.value("scalars", Json::array())) t.scalars.push_back(s.get<std::int32_t>());
  return t;
}

inline bool printable(const std::vector<std::uint8_t>& bytes) {
  for (auto b : bytes)
    if (b < 0x20 || b > 0x7e) return false;
  return true;
}

inline Json to_json(const TestInput& t) {
  Json buffers = Json::array();
  for (const auto& b : t.buffers) {
    if (printable(b.bytes)) {
      buffers.push_back({{"role", b.role}, {"text", std::string(b.bytes.begin(), b.bytes.end())}});
    } else {
      static constexpr char kDigits[] = "0123456789abcdef";
      std::string hex;
      for (auto x : b.bytes) {
        if (!hex.empty()) hex += ' ';
        hex += kDigits[x >> 4];
        hex += kDigits[x & 15];
      }
      buffers.push_back({{"role", b.role}, {"hex", hex}});
    }
  }
  return {{"name", t.name}, {"buffers", buffers}, {"scalars", t.scalars}};
}

inline InputDomain domain_from_json(const Json& j) {
  InputDomain d;
  for (const auto& b : j.value("buffers", Json::array())) {
    const auto fill = b.value("fill", std::string("A"));
    d.buffers.push_back({b.at("role").get<std::string>(), b.at("capacity").get<std::size_t>(), fill.empty() ? 'A' : fill[0]});
  }
  for (const auto& s : j.value("scalars", Json::array()))
    d.scalars.push_back({s.value("min", INT32_MIN), s.value("max", INT32_MAX), s.value("nominal", 0)});
  return d;
}

/// `{"inputs": [...]}` plus an optional `"generate"` domain whose boundary
/// inputs are appended.
inline std::vector<TestInput> suite_from_json(const Json& j) {
  try {
    std::vector<TestInput> suite;
    for (const auto& i : j.value("inputs", Json::array())) suite.push_back(input_from_json(i));
    if (j.contains("generate"))
      for (auto& t : boundary_inputs(domain_from_json(j.at("generate")))) suite.push_back(std::move(t));
    for (std::size_t i = 0; i < suite.size(); ++i)
      if (suite[i].name.empty()) suite[i].name = "input-" + std::to_string(i);
    return suite;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed suite: ") + e.what());
  }
}

inline InputTemplate template_from_json(const Json& j) {
  InputTemplate t;
  t.name = j.value("name", std::string("exploit"));
  for (const auto& b : j.value("buffers", Json::array())) {
    BufferTemplate bt{b.at("role").get<std::string>(), {}};
    if (b.contains("pieces")) {
      for (const auto& piece : b.at("pieces")) {
        if (piece.contains("address_of")) bt.pieces.push_back({{}, piece.at("address_of").get<std::string>()});
        else bt.pieces.push_back({piece_bytes(piece), {}});
      }
    } else {
      bt.pieces.push_back({piece_bytes(b), {}});
    }
    t.buffers.push_back(std::move(bt));
  }
  for (const auto& s : j.value("scalars", Json::array())) {
    if (s.is_object()) t.scalars.push_back({0, s.at("address_of").get<std::string>()});
    else t.scalars.push_back({s.get<std::int32_t>(), {}});
  }
  return t;
}

// ---------------------------------------------------------------------------
// Exploit cases and matrix

/// Parses a case file. `load_program` maps the "program" path to a Program.
template <class Loader>
ExploitCase case_from_json(const Json& j, Loader&& load_program) {
  try {
    ExploitCase c;
    c.name = j.at("name").get<std::string>();
    c.program_file = j.at("program").get<std::string>();
    c.program = load_program(c.program_file);
    c.vuln_class = j.at("vuln_class").get<std::string>();
    if (c.vuln_class != "local-overflow" && c.vuln_class != "global-overflow" && c.vuln_class != "pointer-overwrite")
      throw FormatError("unknown vuln_class '" + c.vuln_class + "'");
    c.attacker_target = j.at("attacker_target").get<std::string>();
    c.benign = suite_from_json(j.at("benign"));
    c.exploit = template_from_json(j.at("exploit"));
    if (j.contains("expected_fault_wio") && !j.at("expected_fault_wio").is_null())
      c.expected_fault_wio = CodeLocation::parse(j.at("expected_fault_wio").get<std::string>());
    return c;
  } catch (const Json::exception& e) {
    throw FormatError(std::string("malformed case: ") + e.what());
  }
}

inline Json to_json(const ProtectedRun& r) {
  Json j = {{"outcome", outcome_name(r.outcome)}};
  if (r.outcome == Outcome::Completed) j["exit"] = r.exit_code;
  if (r.outcome == Outcome::Hijacked) j["pc"] = detail::hex(r.pc);
  if (r.trap) {
    j["trap"] = trap_name(r.trap->kind);
    j["wio"] = r.original_wio ? r.original_wio->str() : r.trap->wio.str();
    j["rewritten_wio"] = r.trap->wio.str();
    j["address"] = detail::hex(r.trap->address);
    j["protected_intact"] = r.protected_intact;
  }
  return j;
}

inline Json to_json(const ExploitMatrix& m) {
  Json rows = Json::array();
  for (const auto& r : m.rows) {
    rows.push_back({{"case", r.name},
                    {"vuln_class", r.vuln_class},
                    {"unprotected", to_json(r.unprotected)},
                    {"protected", to_json(r.protected_run)},
                    {"wio_correct", r.wio_correct},
                    {"coverage", r.coverage},
                    {"benign_inputs", r.benign_inputs},
                    {"false_positives", r.false_positives},
                    {"prevented", r.prevented()},
                    {"passed", r.passed()},
                    {"error", r.error}});
  }
  return {{"cases", rows},
          {"prevented", m.prevented()},
          {"total", m.rows.size()},
          {"false_positives", m.false_positives()},
          {"passed", m.passed()}};
}

inline std::string format_matrix(const ExploitMatrix& m) {
  auto describe = [](const ProtectedRun& r) {
    std::string s(outcome_name(r.outcome));
    if (r.trap) s += " " + std::string(trap_name(r.trap->kind));
    return s;
  };
  std::vector<std::vector<std::string>> cells{
      {"case", "class", "unprotected", "protected", "fault WIO", "benign FP", "prevented"}};
  for (const auto& r : m.rows) {
    cells.push_back({r.name, r.vuln_class, describe(r.unprotected), r.error.empty() ? describe(r.protected_run) : "error",
                     r.protected_run.original_wio ? r.protected_run.original_wio->str() : "-",
                     std::to_string(r.false_positives) + "/" + std::to_string(r.benign_inputs),
                     r.passed() ? "yes" : "NO"});
  }
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::string out;
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      out += row[i];
      if (i + 1 < row.size()) out += std::string(width[i] - row[i].size() + 2, ' ');
    }
    out += '\n';
  }
  for (const auto& r : m.rows)
    if (!r.error.empty()) out += r.name + ": " + r.error + '\n';
  out += std::to_string(m.prevented()) + "/" + std::to_string(m.rows.size()) + " prevented, " +
         std::to_string(m.false_positives()) + " false positive(s)\n";
  return out;
}

inline Json to_json(const OverheadReport& r) {
  return {{"inputs", r.inputs},
          {"cycles_unprotected", r.cycles_unprotected},
          {"cycles_nop", r.cycles_nop},
          {"cycles_syscall", r.cycles_syscall},
          {"announce_executions", r.announce_executions},
          {"protected_writes", r.protected_writes},
          {"expected_delta", r.expected_delta},
          {"identity_holds", r.identity_holds()},
          {"instr_delta_pct", r.instr_delta_pct},
          {"footprint_delta_pct", r.footprint_delta_pct}};
}

}  // namespace proconda
