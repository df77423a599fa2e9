#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "proconda/cli.hpp"
#include "test_support.hpp"

using namespace proconda;
using proconda::testing::corpus_path;
using proconda::testing::fixture_path;
using proconda::testing::read_text;

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

class Cli : public ::testing::Test {
protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("proconda_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string tmp(const std::string& name) const { return (dir_ / name).string(); }

  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(tmp(name), std::ios::binary) << text;
    return tmp(name);
  }

  // `env` is a prefix such as "PROCONDA_MODE=nop".
  CliResult run(const std::string& args, const std::string& env = "") const {
    const std::string err_file = tmp("stderr.txt");
    const std::string cmd = "env -u PROCONDA_MODE -u PROCONDA_CONFIG -u PROCONDA_COVERAGE_THRESHOLD "
                            "-u PROCONDA_BASE_ADDR -u PROCONDA_STEP_BUDGET " +
                            env + " " + PROCONDA_CLI_PATH + " " + args + " 2>" + err_file;
    CliResult o;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return o;
    char buf[4096];
    std::size_t n;
    while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) o.out.append(buf, n);
    const int status = pclose(pipe);
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.err = read_text(err_file);
    return o;
  }

  fs::path dir_;
};

std::string q(const std::string& s) { return "'" + s + "'"; }

}  // namespace

TEST_F(Cli, AnalyzeFindsTheReturnSite) {
  CliResult o = run("analyze " + q(corpus_path("strcpy.s")));
  ASSERT_EQ(o.code, 0) << o.err;
  Json j = Json::parse(o.out);
  EXPECT_EQ(j.at("sites").size(), 1u);
  EXPECT_EQ(o.out, read_text(fixture_path("strcpy.report.json")));
}

TEST_F(Cli, EmptyProgramGivesEmptyReport) {
  CliResult o = run("analyze " + q(write("empty.s", "")));
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_TRUE(Json::parse(o.out).at("sites").empty());
}

TEST_F(Cli, ParseErrorNamesTheLine) {
  CliResult o = run("analyze " + q(write("bad.s", "main:\n\tMOV r0, #1\n\tFROB r1, r2\n")));
  EXPECT_EQ(o.code, 4);
  EXPECT_NE(o.err.find("bad.s:3"), std::string::npos) << o.err;
  EXPECT_TRUE(o.out.empty());
}

TEST_F(Cli, MissingFileIsAnIoError) {
  CliResult o = run("analyze " + q(tmp("absent.s")));
  EXPECT_EQ(o.code, 4);
  EXPECT_NE(o.err.find("cannot open"), std::string::npos);
}

TEST_F(Cli, SliceMatchesTheGoldenGraph) {
  CliResult o = run("slice " + q(corpus_path("strcpy.s")) + " --suite " + q(corpus_path("strcpy.suite.json")));
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(o.out, read_text(fixture_path("strcpy.graph.json")));
  // Same result with an explicit report and an output file.
  CliResult o2 = run("slice " + q(corpus_path("strcpy.s")) + " --suite " + q(corpus_path("strcpy.suite.json")) +
                   " --report " + q(fixture_path("strcpy.report.json")) + " -o " + q(tmp("g.json")));
  ASSERT_EQ(o2.code, 0) << o2.err;
  EXPECT_EQ(read_text(tmp("g.json")), o.out);
}

TEST_F(Cli, NoControlDataGivesEmptyGraph) {
  const std::string prog = write("flat.s", "main:\n\tMOV r0, #4\n\tSVC #0\n");
  const std::string suite = write("flat.suite.json", R"({"inputs": [{"name": "x"}]})");
  CliResult o = run("slice " + q(prog) + " --suite " + q(suite));
  ASSERT_EQ(o.code, 0) << o.err;
  Json j = Json::parse(o.out);
  EXPECT_TRUE(j.at("slots").empty());
  EXPECT_TRUE(j.at("edges").empty());
}

TEST_F(Cli, UnderCoveringSuiteTripsTheGate) {
  CliResult o = run("slice " + q(corpus_path("local_overflow.s")) + " --suite " +
                  q(corpus_path("local_overflow.undercover.json")));
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("0.7778"), std::string::npos) << o.err;
  EXPECT_FALSE(Json::parse(o.out).at("finalized").get<bool>());

  CliResult r = run("rewrite " + q(corpus_path("local_overflow.s")) + " --suite " +
                  q(corpus_path("local_overflow.undercover.json")));
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(r.out.empty());

  CliResult lowered = run("--coverage-threshold 0.75 slice " + q(corpus_path("local_overflow.s")) + " --suite " +
                        q(corpus_path("local_overflow.undercover.json")));
  EXPECT_EQ(lowered.code, 0) << lowered.err;
}

TEST_F(Cli, RewriteMatchesTheGoldenText) {
  CliResult o = run("rewrite " + q(corpus_path("strcpy.s")) + " --graph " + q(fixture_path("strcpy.graph.json")) +
                  " --rewrite-report " + q(tmp("rw.json")));
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(o.out, read_text(fixture_path("strcpy.rewritten.s")));
  EXPECT_EQ(read_text(tmp("rw.json")), read_text(fixture_path("strcpy.rewrite.json")));

  CliResult viaSuite = run("rewrite " + q(corpus_path("strcpy.s")) + " --suite " + q(corpus_path("strcpy.suite.json")));
  EXPECT_EQ(viaSuite.out, o.out);

  CliResult neither = run("rewrite " + q(corpus_path("strcpy.s")));
  EXPECT_EQ(neither.code, 4);
}

TEST_F(Cli, RewrittenTextRoundTrips) {
  CliResult o = run("rewrite " + q(corpus_path("local_overflow.s")) + " --suite " +
                  q(corpus_path("local_overflow.suite.json")));
  ASSERT_EQ(o.code, 0) << o.err;
  Program p = parse_program(o.out);
  EXPECT_EQ(emit_program(p), o.out);
}

TEST_F(Cli, RunReportsFaultsWithExitThree) {
  CliResult empty = run("run " + q(write("empty.s", "")));
  EXPECT_EQ(empty.code, 0) << empty.err;
  EXPECT_EQ(Json::parse(empty.out).at("outcome"), "completed");

  const std::string rewritten = write("rw.s", read_text(fixture_path("strcpy.rewritten.s")));
  const std::string smash = write("smash.json", R"({"buffers": [{"role": "src", "text": "AAAAAAAAAAAAAAAA"}]})");
  CliResult o = run("run " + q(rewritten) + " --input " + q(smash));
  EXPECT_EQ(o.code, 3);
  Json j = Json::parse(o.out);
  EXPECT_EQ(j.at("outcome"), "faulted");
  EXPECT_EQ(j.at("trap"), "ProtectedWrite");
  EXPECT_EQ(j.at("address"), "0x8000");

  const std::string ok = write("ok.json", R"({"buffers": [{"role": "src", "text": "ab"}]})");
  EXPECT_EQ(run("run " + q(rewritten) + " --input " + q(ok)).code, 0);
}

TEST_F(Cli, ExploitTestOverTheCorpus) {
  CliResult o = run("exploit-test " + q(std::string(PROCONDA_CORPUS_DIR)) + " --json " + q(tmp("m.json")));
  ASSERT_EQ(o.code, 0) << o.err << o.out;
  EXPECT_NE(o.out.find("3/3 prevented, 0 false positive(s)"), std::string::npos) << o.out;
  Json j = Json::parse(read_text(tmp("m.json")));
  EXPECT_EQ(j.at("cases").size(), 3u);

  CliResult none = run("exploit-test " + q(dir_.string()));
  EXPECT_EQ(none.code, 0);
  EXPECT_NE(none.out.find("0/0 prevented"), std::string::npos);

  EXPECT_EQ(run("exploit-test " + q(tmp("missing"))).code, 4);
}

TEST_F(Cli, OverheadPrintsTheIdentity) {
  CliResult o = run("overhead " + q(corpus_path("call_heavy.s")) + " --suite " + q(corpus_path("call_heavy.suite.json")) +
                  " --json " + q(tmp("o.json")));
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_NE(o.out.find("exact"), std::string::npos);
  Json j = Json::parse(read_text(tmp("o.json")));
  EXPECT_EQ(j.at("protected_writes"), 31);
  EXPECT_EQ(j.at("cycles_syscall").get<std::uint64_t>() - j.at("cycles_nop").get<std::uint64_t>(), 2u * 31 * 6449);
}

TEST_F(Cli, ModePrecedence) {
  const std::string args = "rewrite " + q(corpus_path("strcpy.s")) + " --graph " + q(fixture_path("strcpy.graph.json"));
  const std::string cfg_nop = write("nop.json", R"({"mode": "nop"})");
  const std::string cfg_sys = write("sys.json", R"({"mode": "syscall"})");
  auto announces = [&](const CliResult& o) { return o.out.find("ANNOUNCE_BEGIN") != std::string::npos; };

  CliResult d = run(args);
  EXPECT_TRUE(announces(d));
  CliResult c = run("--config " + q(cfg_nop) + " " + args);
  EXPECT_FALSE(announces(c)) << c.out;
  CliResult e = run("--config " + q(cfg_nop) + " " + args, "PROCONDA_MODE=syscall");
  EXPECT_TRUE(announces(e));
  CliResult f = run("--config " + q(cfg_sys) + " --mode nop " + args, "PROCONDA_MODE=syscall");
  EXPECT_FALSE(announces(f));
  CliResult g = run(args, "PROCONDA_CONFIG=" + q(cfg_nop));
  EXPECT_FALSE(announces(g));
}

TEST_F(Cli, BadConfigurationIsRejected) {
  const std::string args = " analyze " + q(corpus_path("strcpy.s"));
  EXPECT_EQ(run("--mode turbo" + args).code, 4);
  EXPECT_EQ(run("--coverage-threshold 1.5" + args).code, 4);
  EXPECT_EQ(run("--config " + q(write("u.json", R"({"colour": 1})")) + args).code, 4);
  EXPECT_EQ(run("--config " + q(write("t.json", "{")) + args).code, 4);
  EXPECT_EQ(run(args, "PROCONDA_STEP_BUDGET=0").code, 4);
  EXPECT_EQ(run("frobnicate").code, 4);
}

TEST_F(Cli, BaseAddressMovesDisplayAddresses) {
  CliResult d = run("analyze " + q(corpus_path("strcpy.s")));
  CliResult b = run("--base-addr 0x2000 analyze " + q(corpus_path("strcpy.s")));
  CliResult e = run("analyze " + q(corpus_path("strcpy.s")), "PROCONDA_BASE_ADDR=0x2000");
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_NE(d.out, b.out);
  EXPECT_EQ(b.out, e.out);
  EXPECT_NE(b.out.find("0x202c"), std::string::npos) << b.out;
}

TEST_F(Cli, StepBudgetStopsRunaways) {
  const std::string loop = write("loop.s", "main:\n.Lspin:\n\tB .Lspin\n");
  CliResult o = run("--step-budget 500 run " + q(loop));
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.err.find("step budget of 500"), std::string::npos) << o.err;
}

TEST_F(Cli, OutputIsDeterministic) {
  const std::string args = "slice " + q(corpus_path("call_heavy.s")) + " --suite " + q(corpus_path("call_heavy.suite.json"));
  CliResult a = run(args);
  CliResult b = run(args);
  ASSERT_EQ(a.code, 0) << a.err;
  EXPECT_EQ(a.out, b.out);
}

TEST_F(Cli, InProcessEntryPointAgrees) {
  std::ostringstream out, err;
  const int code = run_cli({"analyze", corpus_path("strcpy.s")}, out, err);
  EXPECT_EQ(code, 0) << err.str();
  EXPECT_EQ(out.str(), read_text(fixture_path("strcpy.report.json")));
}
