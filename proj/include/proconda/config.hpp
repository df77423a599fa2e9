#pragma once

// Pipeline configuration: defaults < config file < PROCONDA_* env < flags.

#include <cstdint>
#include <string>

#include "proconda/harness.hpp"
#include "proconda/serialize.hpp"

namespace proconda {

inline constexpr std::string_view kEnvPrefix = "PROCONDA_";

struct PipelineConfig {
  MemoryLayout layout;
  CostModel cost;
  double coverage_threshold = 0.92;
  AnnounceMode mode = AnnounceMode::SimulatedSyscall;
  std::uint64_t step_budget = 10'000'000;
  std::uint32_t display_base = kDefaultDisplayBase;

  void validate() const {
    if (!(coverage_threshold > 0.0 && coverage_threshold <= 1.0))
      throw FormatError("coverage threshold must be in (0, 1]");
    if (step_budget == 0) throw FormatError("step budget must be positive");
    if (layout.page_size == 0 || layout.page_size % 4) throw FormatError("page size must be a positive multiple of 4");
    if (layout.code_pages == 0 || layout.proconda_pages == 0 || layout.input_pages == 0)
      throw FormatError("region page counts must be positive");
  }

  MachineOptions machine() const {
    MachineOptions m;
    m.cost = cost;
    m.step_budget = step_budget;
    return m;
  }

  PipelineOptions pipeline() const {
    PipelineOptions o;
    o.layout = layout;
    o.slice.coverage_threshold = coverage_threshold;
    o.slice.machine = machine();
    o.mode = mode;
    return o;
  }
};

inline AnnounceMode parse_mode(std::string_view s) {
  if (s == "syscall") return AnnounceMode::SimulatedSyscall;
  if (s == "nop") return AnnounceMode::NopBaseline;
  throw FormatError("mode must be 'syscall' or 'nop', got '" + std::string(s) + "'");
}

/// Integers may be JSON numbers or strings such as "0x8000".
inline std::uint64_t config_uint(const Json& j) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_string()) {
    try {
      return std::stoull(j.get<std::string>(), nullptr, 0);
    } catch (const std::exception&) {
    }
  }
  throw FormatError("expected a non-negative integer, got " + j.dump());
}

inline void apply_config(PipelineConfig& c, const Json& j) {
  static const char* known[] = {"mode", "coverage_threshold", "step_budget", "base_addr", "layout", "cost"};
  for (const auto& [k, v] : j.items())
    if (std::find(std::begin(known), std::end(known), k) == std::end(known))
      throw FormatError("unknown config key '" + k + "'");
  if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
  if (j.contains("coverage_threshold")) c.coverage_threshold = j.at("coverage_threshold").get<double>();
  if (j.contains("step_budget")) c.step_budget = config_uint(j.at("step_budget"));
  if (j.contains("base_addr")) c.display_base = static_cast<std::uint32_t>(config_uint(j.at("base_addr")));
  if (j.contains("layout")) {
    auto& L = c.layout;
    const std::pair<const char*, std::uint32_t*> fields[] = {
        {"page_size", &L.page_size},       {"code_base", &L.code_base},         {"code_pages", &L.code_pages},
        {"stack_size", &L.stack_size},     {"data_pages", &L.data_pages},       {"proconda_base", &L.proconda_base},
        {"proconda_pages", &L.proconda_pages}, {"input_pages", &L.input_pages}};
    for (const auto& [k, v] : j.at("layout").items()) {
      auto f = std::find_if(std::begin(fields), std::end(fields), [&](const auto& x) { return k == x.first; });
      if (f == std::end(fields)) throw FormatError("unknown layout key '" + k + "'");
      *f->second = static_cast<std::uint32_t>(config_uint(v));
    }
  }
  if (j.contains("cost")) {
    for (const auto& [k, v] : j.at("cost").items()) {
      if (k == "per_instruction") c.cost.per_instruction = config_uint(v);
      else if (k == "announce_syscall") c.cost.announce_cost_syscall = config_uint(v);
      else if (k == "announce_nop") c.cost.announce_cost_nop = config_uint(v);
      else throw FormatError("unknown cost key '" + k + "'");
    }
  }
}

}  // namespace proconda
