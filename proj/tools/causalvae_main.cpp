#include <iostream>
#include <string>
#include <vector>

#include "causalvae/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return causalvae::cli::run(args, std::cout, std::cerr);
}
