#pragma once

// `proconda` command line. Exit codes: 0 ok, 1 analysis failure, 2 coverage
// gate, 3 fault or hijack detected, 4 IO/parse error.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "proconda/config.hpp"
#include "proconda/harness.hpp"
#include "proconda/serialize.hpp"

namespace proconda {

enum ExitCode : int { kExitOk = 0, kExitAnalysis = 1, kExitCoverage = 2, kExitDetected = 3, kExitIo = 4 };

class IoError : public Error {
public:
  using Error::Error;
};

namespace cli {

namespace fs = std::filesystem;

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw IoError(path + ": cannot write");
}

inline Program load_program(const std::string& path) {
  const std::string text = read_file(path);
  try {
    return parse_program(text);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), path + ":" + std::to_string(e.line()) + ": " +
                                   std::string(e.what()).substr(std::string(e.what()).find(": ") + 2));
  }
}

inline Json load_json(const std::string& path) {
  try {
    return Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

inline void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") out << text;
  else write_file(path, text);
}

inline std::vector<ExploitCase> load_cases(const std::vector<std::string>& paths) {
  std::vector<std::string> files;
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      std::vector<std::string> found;
      for (const auto& e : fs::directory_iterator(p)) {
        const std::string name = e.path().filename().string();
        if (name.size() > 10 && name.ends_with(".case.json")) found.push_back(e.path().string());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else if (fs::exists(p)) {
      files.push_back(p);
    } else {
      throw IoError(p + ": no such file or directory");
    }
  }
  std::vector<ExploitCase> cases;
  for (const auto& f : files) {
    const fs::path dir = fs::path(f).parent_path();
    cases.push_back(case_from_json(load_json(f), [&](const std::string& prog) {
      return load_program((dir / prog).string());
    }));
  }
  return cases;
}

struct Flags {
  std::string config;
  std::string mode;
  double threshold = 0.0;
  std::string base_addr;
  std::uint64_t step_budget = 0;
};

inline PipelineConfig resolve_config(const Flags& f, const CLI::App& app) {
  PipelineConfig c;
  if (!f.config.empty()) apply_config(c, load_json(f.config));
  if (app.count("--mode")) c.mode = parse_mode(f.mode);
  if (app.count("--coverage-threshold")) c.coverage_threshold = f.threshold;
  if (app.count("--base-addr")) c.display_base = static_cast<std::uint32_t>(config_uint(Json(f.base_addr)));
  if (app.count("--step-budget")) c.step_budget = f.step_budget;
  c.validate();
  return c;
}

inline std::string format_overhead(const OverheadReport& r) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2);
  s << "inputs               " << r.inputs << "\n"
    << "cycles unprotected   " << r.cycles_unprotected << "\n"
    << "cycles nop build     " << r.cycles_nop << "\n"
    << "cycles syscall build " << r.cycles_syscall << "\n"
    << "protected writes     " << r.protected_writes << "\n"
    << "syscall - nop        " << (r.cycles_syscall - r.cycles_nop) << " (expected " << r.expected_delta << ", "
    << (r.identity_holds() ? "exact" : "MISMATCH") << ")\n"
    << "instruction delta    " << r.instr_delta_pct << "%\n"
    << "footprint delta      " << r.footprint_delta_pct << "%\n";
  return s.str();
}

}  // namespace cli

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"ProConDa: protect control data by checking who writes it"};
  app.require_subcommand(1);
  cli::Flags flags;
  app.add_option("--config", flags.config, "JSON configuration file")->envname("PROCONDA_CONFIG");
  app.add_option("--mode", flags.mode, "announce mode: syscall or nop")->envname("PROCONDA_MODE");
  app.add_option("--coverage-threshold", flags.threshold, "minimum basic-block coverage")
      ->envname("PROCONDA_COVERAGE_THRESHOLD");
  app.add_option("--base-addr", flags.base_addr, "display base for code addresses")->envname("PROCONDA_BASE_ADDR");
  app.add_option("--step-budget", flags.step_budget, "instruction budget per run")->envname("PROCONDA_STEP_BUDGET");

  std::string asm_path, out_path, report_path, suite_path, graph_path, input_path, target, rewrite_report, json_path;
  std::vector<std::string> case_paths;

  auto* analyze = app.add_subcommand("analyze", "phase 1: find control-flow sites and their load sites");
  analyze->add_option("program", asm_path)->required();
  analyze->add_option("-o,--output", out_path, "report file (default stdout)");

  auto* slice = app.add_subcommand("slice", "phase 2: build the Data Source Graph from a benign suite");
  slice->add_option("program", asm_path)->required();
  slice->add_option("--suite", suite_path)->required();
  slice->add_option("--report", report_path, "phase 1 report (recomputed when absent)");
  slice->add_option("-o,--output", out_path, "graph file (default stdout)");

  auto* rewrite = app.add_subcommand("rewrite", "phase 3: relocate control data and bracket legitimate writers");
  rewrite->add_option("program", asm_path)->required();
  auto* g = rewrite->add_option("--graph", graph_path, "graph from `slice`");
  rewrite->add_option("--suite", suite_path, "build the graph from this suite instead")->excludes(g);
  rewrite->add_option("--report", report_path, "phase 1 report (recomputed when absent)");
  rewrite->add_option("-o,--output", out_path, "rewritten assembly (default stdout)");
  rewrite->add_option("--rewrite-report", rewrite_report, "write the rewrite report here");

  auto* run = app.add_subcommand("run", "execute a program on one input");
  run->add_option("program", asm_path)->required();
  run->add_option("--input", input_path, "input file (default: no arguments)");
  run->add_option("--target", target, "attacker target label; reaching it counts as a hijack");

  auto* exploit = app.add_subcommand("exploit-test", "run the exploit matrix over case files or directories");
  exploit->add_option("cases", case_paths)->required();
  exploit->add_option("--json", json_path, "also write the matrix as JSON");

  auto* overhead = app.add_subcommand("overhead", "compare unprotected, NOP and syscall builds");
  overhead->add_option("program", asm_path)->required();
  overhead->add_option("--suite", suite_path)->required();
  overhead->add_option("--json", json_path, "also write the report as JSON");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  }

  try {
    const PipelineConfig config = cli::resolve_config(flags, app);
    const MemoryLayout& layout = config.layout;

    if (analyze->parsed()) {
      Program p = cli::load_program(asm_path);
      cli::emit(out_path, cli::dump(report_to_json(identify_control_data(p), p, config.display_base)), out);
      return kExitOk;
    }

    auto report_for = [&](const Program& p) {
      return report_path.empty() ? identify_control_data(p) : report_from_json(cli::load_json(report_path));
    };
    auto gate = [&](const SliceResult& s) {
      if (s.finalized) return false;
      err << "coverage gate: " << s.diagnostic << "\n";
      return true;
    };

    if (slice->parsed()) {
      Program p = cli::load_program(asm_path);
      ControlDataReport r = report_for(p);
      SliceResult s = build_dsg(p, layout, r, suite_from_json(cli::load_json(suite_path)), config.pipeline().slice);
      cli::emit(out_path, cli::dump(slice_to_json(s, p, config.display_base)), out);
      return gate(s) ? kExitCoverage : kExitOk;
    }

    if (rewrite->parsed()) {
      Program p = cli::load_program(asm_path);
      ControlDataReport r = report_for(p);
      SliceResult s;
      if (!graph_path.empty()) s = slice_from_json(cli::load_json(graph_path));
      else if (!suite_path.empty())
        s = build_dsg(p, layout, r, suite_from_json(cli::load_json(suite_path)), config.pipeline().slice);
      else throw FormatError("rewrite needs --graph or --suite");
      if (gate(s)) return kExitCoverage;
      RelocationPlan plan = plan_relocation(p, s.graph, r, layout);
      RewriteResult rw = instrument(p, plan, config.mode, layout);
      cli::emit(out_path, emit_program(rw.program), out);
      Json rep = to_json(rw.report);
      rep["plan"] = to_json(plan);
      if (!rewrite_report.empty()) cli::write_file(rewrite_report, cli::dump(rep));
      else if (!out_path.empty()) out << cli::dump(to_json(rw.report));
      return kExitOk;
    }

    if (run->parsed()) {
      Program p = cli::load_program(asm_path);
      TestInput in = input_path.empty() ? TestInput{} : input_from_json(cli::load_json(input_path));
      std::optional<std::uint32_t> t;
      if (!target.empty()) t = symbol_address(p, layout, target);
      ProtectedRun res = run_protected(p, layout, in, machine_options_for(config.mode, config.machine()), t);
      Json j = to_json(res);
      j["output"] = res.output;
      j["cycles"] = res.cycles;
      j["steps"] = res.steps;
      j["announces"] = res.announces;
      out << cli::dump(j);
      return res.outcome == Outcome::Completed ? kExitOk : kExitDetected;
    }

    if (exploit->parsed()) {
      ExploitMatrix m = run_exploit_matrix(cli::load_cases(case_paths), config.pipeline());
      out << format_matrix(m);
      if (!json_path.empty()) cli::write_file(json_path, cli::dump(to_json(m)));
      if (m.passed()) return kExitOk;
      for (const auto& row : m.rows)
        if (!row.error.empty()) return kExitAnalysis;
      return kExitDetected;
    }

    if (overhead->parsed()) {
      Program p = cli::load_program(asm_path);
      auto suite = suite_from_json(cli::load_json(suite_path));
      PipelineOptions po = config.pipeline();
      ProtectedBuild b = protect(p, suite, po);
      if (gate(b.slice)) return kExitCoverage;
      RewriteResult sys = instrument(p, b.plan, AnnounceMode::SimulatedSyscall, layout);
      RewriteResult nop = instrument(p, b.plan, AnnounceMode::NopBaseline, layout);
      OverheadReport r = measure_overhead(p, sys, nop, layout, suite, config.machine());
      out << cli::format_overhead(r);
      if (!json_path.empty()) cli::write_file(json_path, cli::dump(to_json(r)));
      return r.identity_holds() ? kExitOk : kExitAnalysis;
    }
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitAnalysis;
  }
  return kExitOk;
}

}  // namespace proconda
