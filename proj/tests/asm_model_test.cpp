#include <gtest/gtest.h>

#include "proconda/asm_model.hpp"
#include "test_support.hpp"

using namespace proconda;
using proconda::testing::Rng;

namespace {

std::size_t count_lines_containing(const std::string& text, const std::string& needle) {
  std::size_t n = 0, pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    ++n;
    pos += needle.size();
  }
  return n;
}

std::size_t error_line(std::string_view text) {
  try {
    parse_program(text);
  } catch (const ParseError& e) {
    return e.line();
  }
  return 0;
}

}  // namespace

TEST(AsmModel, ParsesStrcpyCorpus) {
  Program p = proconda::testing::corpus_program("strcpy.s");
  ASSERT_EQ(p.functions.size(), 2u);
  EXPECT_EQ(p.functions[0].label, "main");
  EXPECT_EQ(p.functions[1].label, "strcpy");
  EXPECT_EQ(p.functions[1].instructions.size(), 9u);
  EXPECT_EQ(p.functions[1].local_index(".Lcopy"), 2u);
  EXPECT_EQ(format_instruction(locate(p, CodeLocation::parse("strcpy+0xc"))), "STRB r3, [r2]");
  EXPECT_EQ(format_instruction(locate(p, {"strcpy", 0x20})), "POP {r3, pc}");
  EXPECT_EQ(p.globals, std::vector<std::string>{"main"});
}

TEST(AsmModel, EmptyInputIsEmptyProgram) {
  Program p = parse_program("");
  EXPECT_TRUE(p.functions.empty());
  EXPECT_TRUE(p.data.empty());
  EXPECT_EQ(parse_program(emit_program(p)), p);
  EXPECT_EQ(parse_program("  @ only a comment\n\n"), p);
}

TEST(AsmModel, PushEmitsOneLine) {
  Program p = parse_program("main:\n  push {r3, lr}\n  pop {r3, pc}\n");
  std::string text = emit_program(p);
  EXPECT_EQ(count_lines_containing(text, "PUSH {r3, lr}\n"), 1u);
  EXPECT_EQ(count_lines_containing(text, "PUSH"), 1u);
  EXPECT_EQ(count_lines_containing(text, "POP {r3, pc}\n"), 1u);
}

TEST(AsmModel, AcceptsAliasesAndMixedCase) {
  Program p = parse_program("main:\n\tMov FP, #0x10\n\tadd ip, fp, #-3\n\tBx LR\n");
  const auto& f = p.functions[0];
  EXPECT_EQ(f.instructions[0].get<Reg>(0), Reg::r11);
  EXPECT_EQ(f.instructions[0].get<Imm>(1).value, 16);
  EXPECT_EQ(f.instructions[1].get<Reg>(0), Reg::r12);
  EXPECT_EQ(f.instructions[1].get<Imm>(2).value, -3);
}

TEST(AsmModel, DataWordsMayReferenceLabels) {
  Program p = parse_program("main:\n\tNOP\n\t.data\nptr:\n\t.word main, 7, -1\n");
  ASSERT_EQ(p.data.size(), 1u);
  EXPECT_EQ(p.data[0].words[0], Word{std::string("main")});
  EXPECT_EQ(p.data[0].words[2], Word{-1});
}

TEST(AsmModel, RoundTripRandomPrograms) {
  Rng rng(0xA5A5);
  for (int i = 0; i < 1000; ++i) {
    Program p = proconda::testing::random_syntactic_program(rng);
    std::string text = emit_program(p);
    Program q = parse_program(text);
    ASSERT_EQ(q, p) << text;
    ASSERT_EQ(emit_program(q), text);
  }
}

TEST(AsmModel, LocateSweepMatchesInstructionIndex) {
  Rng rng(17);
  for (int round = 0; round < 50; ++round) {
    Program p = proconda::testing::random_syntactic_program(rng);
    for (const auto& f : p.functions) {
      const std::uint32_t n = static_cast<std::uint32_t>(f.instructions.size());
      for (std::uint32_t off = 0; off < 4 * n + 12; ++off) {
        CodeLocation loc{f.label, off};
        if (off % 4 == 0 && off / 4 < n) {
          EXPECT_EQ(&locate(p, loc), &f.instructions[off / 4]);
        } else {
          EXPECT_THROW(locate(p, loc), LocateError) << loc.str();
        }
      }
    }
  }
  Program p = parse_program("main:\n\tNOP\n");
  EXPECT_THROW(locate(p, {"nope", 0}), LocateError);
}

TEST(AsmModel, CodeLocationTextRoundTrip) {
  CodeLocation loc{"strcpy", 0x1c};
  EXPECT_EQ(loc.str(), "strcpy+0x1c");
  EXPECT_EQ(CodeLocation::parse(loc.str()), loc);
  EXPECT_EQ(CodeLocation::parse("f+12"), (CodeLocation{"f", 12}));
  EXPECT_THROW(CodeLocation::parse("f"), LocateError);
  EXPECT_THROW(CodeLocation::parse("f+0xzz"), LocateError);
  EXPECT_LT((CodeLocation{"a", 8}), (CodeLocation{"b", 0}));
  EXPECT_LT((CodeLocation{"a", 4}), (CodeLocation{"a", 8}));
}

TEST(AsmModel, SyntaxErrorsCarryLineNumbers) {
  EXPECT_EQ(error_line("main:\n\tNOP\n\tMOV r0\n"), 3u);
  EXPECT_EQ(error_line("main:\n\tFROB r0, r1\n"), 2u);
  EXPECT_EQ(error_line("main:\n\tNOP\n\n\tLDR r0, [r1, #4\n"), 4u);
  EXPECT_EQ(error_line("main:\n\tB nowhere\n"), 2u);
  EXPECT_EQ(error_line("main:\n\tLDR r0, =missing\n"), 2u);
  EXPECT_EQ(error_line("main:\n\tPUSH {r4, r3}\n"), 2u);
  EXPECT_EQ(error_line("main:\n\tMOV pc, r0\n"), 2u);
  EXPECT_EQ(error_line("main:\n\tPUSH {r4, pc}\n"), 2u);
  EXPECT_EQ(error_line("main:\n\tPOP {sp}\n"), 2u);
  EXPECT_EQ(error_line("\tNOP\n"), 1u);
  EXPECT_EQ(error_line("main:\n\tNOP\n\t.bss\n"), 3u);
}

TEST(AsmModel, UnknownMnemonicIsNamed) {
  try {
    parse_program("main:\n\tXYZZY r0\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("XYZZY"), std::string::npos);
  }
}

TEST(AsmModel, DuplicateLabelNamesBothDefinitions) {
  try {
    parse_program("main:\n\tNOP\nhelper:\n\tNOP\nhelper:\n\tNOP\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 5u);
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
}

TEST(AsmModel, LocalLabelsAreFunctionScopedForBranches) {
  EXPECT_EQ(error_line("main:\n.La:\n\tNOP\nother:\n\tB .La\n"), 5u);
}
