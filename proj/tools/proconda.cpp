#include <iostream>
#include <string>
#include <vector>

#include "proconda/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return proconda::run_cli(args, std::cout, std::cerr);
}
