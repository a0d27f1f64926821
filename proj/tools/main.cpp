#include <iostream>
#include <string>
#include <vector>

#include "calip/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return calip::cli::run(args, std::cout, std::cerr);
}
