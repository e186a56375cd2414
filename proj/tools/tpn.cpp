#include <iostream>

#include "tpn/cli.hpp"

int main(int argc, char** argv) {
  return tpn::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
