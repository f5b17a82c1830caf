#include <iostream>
#include <string>
#include <vector>

#include "nap_cli/commands.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv + 1, argv + argc);
  return nap::cli::run(args, std::cout, std::cerr);
}
