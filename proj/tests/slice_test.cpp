#include <gtest/gtest.h>

#include "proconda/serialize.hpp"
#include "proconda/slice.hpp"
#include "test_support.hpp"

using namespace proconda;
using proconda::testing::Rng;
using proconda::testing::case_suite;
using proconda::testing::corpus;
using proconda::testing::oracle_edges;
using proconda::testing::suite_file;

namespace {

const MemoryLayout kLayout{};

}  // namespace

TEST(Slice, Fig1GraphHasOnlyThePushEdge) {
  Program p = proconda::testing::corpus_program("strcpy.s");
  auto report = identify_control_data(p);
  SliceResult r = build_dsg(p, kLayout, report, suite_file("strcpy.suite.json"));
  ASSERT_EQ(r.graph.slots.size(), 1u);
  const ControlDataSlot& slot = r.graph.slots.begin()->second;
  EXPECT_EQ(slot.id, "strcpy+0x20/pc");
  EXPECT_TRUE(slot.is_return_slot());
  EXPECT_EQ(slot.observed_addresses, (std::set<std::uint32_t>{0x7ff8}));
  ASSERT_EQ(r.graph.edges.size(), 1u);
  EXPECT_EQ(r.graph.edges.begin()->wio, (CodeLocation{"strcpy", 0x0}));
  EXPECT_TRUE(wio_permitted(r.graph, {"strcpy", 0x0}, slot.id));
  EXPECT_FALSE(wio_permitted(r.graph, {"strcpy", 0xc}, slot.id));
  EXPECT_THROW(wio_permitted(r.graph, {"strcpy", 0x0}, "nowhere/pc"), SliceError);
  EXPECT_DOUBLE_EQ(r.coverage, 1.0);
  EXPECT_TRUE(r.finalized);
  EXPECT_EQ(display_address(p, {"strcpy", 0x0}, kDefaultDisplayBase), 0x10B4u);
  EXPECT_EQ(display_address(p, {"strcpy", 0xc}, kDefaultDisplayBase), 0x10C0u);
}

TEST(Slice, Fig1GraphMatchesGoldenFile) {
  Program p = proconda::testing::corpus_program("strcpy.s");
  auto report = identify_control_data(p);
  SliceResult r = build_dsg(p, kLayout, report, suite_file("strcpy.suite.json"));
  EXPECT_EQ(slice_to_json(r, p).dump(2) + "\n", proconda::testing::read_text(proconda::testing::fixture_path("strcpy.graph.json")));
  EXPECT_EQ(slice_from_json(slice_to_json(r, p)), r);
}

TEST(Slice, CorpusGraphsEqualStoreTraceOracle) {
  for (const auto& c : corpus()) {
    Program p = proconda::testing::corpus_program(c.program);
    auto report = identify_control_data(p);
    SliceResult r = build_dsg(p, kLayout, report, c.suite, {0.0, {}});
    EXPECT_EQ(r.graph.edges, oracle_edges(p, report, c.suite)) << c.program;
  }
}

TEST(Slice, RandomProgramGraphsEqualStoreTraceOracle) {
  Rng rng(20261017);
  for (int i = 0; i < 150; ++i) {
    Program p = parse_program(proconda::testing::random_runnable_source(rng));
    auto report = identify_control_data(p);
    std::vector<TestInput> suite;
    for (int k = 0; k < 3; ++k)
      suite.push_back({"r" + std::to_string(k), {}, {proconda::testing::range(rng, -9, 9), proconda::testing::range(rng, -9, 9)}});
    SliceResult r = build_dsg(p, kLayout, report, suite, {0.0, {}});
    ASSERT_EQ(r.graph.edges, oracle_edges(p, report, suite)) << emit_program(p);
  }
}

TEST(Slice, ExploitCorpusWriters) {
  auto writers = [](const char* prog, const char* suite) {
    Program p = proconda::testing::corpus_program(prog);
    return build_dsg(p, kLayout, identify_control_data(p), case_suite(suite)).graph;
  };
  auto g = writers("global_overflow.s", "global_overflow.case.json");
  EXPECT_EQ(g.writers_of("main+0x44/r3"), (std::vector<CodeLocation>{{"main", 0x14}}));
  EXPECT_FALSE(wio_permitted(g, {"main", 0x28}, "main+0x44/r3"));
  auto q = writers("pointer_overwrite.s", "pointer_overwrite.case.json");
  EXPECT_EQ(q.writers_of("main+0x30/r3"), (std::vector<CodeLocation>{{"main", 0x18}}));
  EXPECT_FALSE(wio_permitted(q, {"main", 0x28}, "main+0x30/r3"));
}

TEST(Slice, AddingInputsNeverRemovesEdges) {
  Rng rng(7);
  for (const auto& c : corpus()) {
    Program p = proconda::testing::corpus_program(c.program);
    auto report = identify_control_data(p);
    auto full = build_dsg(p, kLayout, report, c.suite, {0.0, {}}).graph.edges;
    for (int t = 0; t < 4; ++t) {
      std::vector<TestInput> subset;
      for (const auto& in : c.suite)
        if (proconda::testing::coin(rng)) subset.push_back(in);
      if (subset.empty()) subset.push_back(c.suite.front());
      auto part = build_dsg(p, kLayout, report, subset, {0.0, {}}).graph.edges;
      EXPECT_TRUE(std::includes(full.begin(), full.end(), part.begin(), part.end())) << c.program;
    }
  }
}

TEST(Slice, Reproducible) {
  for (const auto& c : corpus()) {
    Program p = proconda::testing::corpus_program(c.program);
    auto report = identify_control_data(p);
    EXPECT_EQ(build_dsg(p, kLayout, report, c.suite), build_dsg(p, kLayout, report, c.suite)) << c.program;
  }
}

TEST(Slice, CoverageGate) {
  Program p = proconda::testing::corpus_program("local_overflow.s");
  auto report = identify_control_data(p);
  SliceResult under = build_dsg(p, kLayout, report, suite_file("local_overflow.undercover.json"));
  EXPECT_FALSE(under.finalized);
  EXPECT_DOUBLE_EQ(under.coverage, 7.0 / 9.0);
  EXPECT_NE(under.diagnostic.find("0.7778"), std::string::npos);
  SliceResult full = build_dsg(p, kLayout, report, suite_file("local_overflow.suite.json"));
  EXPECT_TRUE(full.finalized);
  EXPECT_DOUBLE_EQ(full.coverage, 1.0);
  SliceResult lax = build_dsg(p, kLayout, report, suite_file("local_overflow.undercover.json"), {0.75, {}});
  EXPECT_TRUE(lax.finalized);
}

TEST(Slice, Errors) {
  Program p = proconda::testing::corpus_program("strcpy.s");
  auto report = identify_control_data(p);
  EXPECT_THROW(build_dsg(p, kLayout, report, {}), SliceError);
  const std::string overflow = "AAAABBBBCCCC";
  TestInput bad{"overflow", {{"src", {overflow.begin(), overflow.end()}}}, {}};
  EXPECT_THROW(build_dsg(p, kLayout, report, {bad}), SliceError);
}

TEST(Slice, NoControlDataGivesEmptyGraph) {
  Program p = parse_program("main:\n\tMOV r0, #3\n\tSVC #0\n");
  SliceResult r = build_dsg(p, kLayout, identify_control_data(p), {TestInput{"noop", {}, {}}});
  EXPECT_TRUE(r.graph.slots.empty());
  EXPECT_TRUE(r.graph.edges.empty());
  EXPECT_TRUE(r.finalized);
}

TEST(Slice, UnreachedSlotsAreListed) {
  Program p = proconda::testing::corpus_program("local_overflow.s");
  SliceResult r = build_dsg(p, kLayout, identify_control_data(p), {TestInput{"empty", {{"name", {}}}, {}}}, {0.0, {}});
  EXPECT_EQ(r.unreached_slots, (std::vector<std::string>{"copy_name+0x24/pc"}));
}

TEST(Slice, BoundaryValues) {
  EXPECT_EQ(scalar_boundaries({}),
            (std::vector<std::int32_t>{INT32_MIN, INT32_MIN + 1, 0, INT32_MAX - 1, INT32_MAX}));
  EXPECT_EQ(scalar_boundaries({0, 16, 4}), (std::vector<std::int32_t>{0, 1, 15, 16}));
  EXPECT_EQ(scalar_boundaries({5, 5, 5}), (std::vector<std::int32_t>{5}));
  EXPECT_EQ(scalar_boundaries({-3, 3, 0}), (std::vector<std::int32_t>{-3, -2, 0, 2, 3}));
  EXPECT_EQ(buffer_boundaries({"b", 4, 'x'}), (std::vector<std::size_t>{0, 1, 3, 4}));
  EXPECT_EQ(buffer_boundaries({"b", 0, 'x'}), (std::vector<std::size_t>{0}));

  InputDomain d{{{"src", 3, 'a'}}, {{0, 7, 2}}};
  auto inputs = boundary_inputs(d);
  ASSERT_EQ(inputs.size(), 8u);
  EXPECT_EQ(inputs[0].name, "src-len0");
  EXPECT_TRUE(inputs[0].buffers[0].bytes.empty());
  EXPECT_EQ(inputs[0].scalars, (std::vector<std::int32_t>{2}));
  EXPECT_EQ(inputs[3].buffers[0].bytes, (std::vector<std::uint8_t>{'a', 'a', 'a'}));
  EXPECT_EQ(inputs[4].name, "s0=0");
  EXPECT_EQ(inputs[4].buffers[0].bytes.size(), 2u);
  EXPECT_EQ(inputs[7].scalars, (std::vector<std::int32_t>{7}));
  EXPECT_EQ(boundary_inputs({}).size(), 1u);
}
