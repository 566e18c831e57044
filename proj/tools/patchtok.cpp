#include <iostream>
#include <string>
#include <vector>

#include "patchtok/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return patchtok::cli::run(args, std::cout, std::cerr);
}
