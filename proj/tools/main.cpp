#include <iostream>

#include "dscm/cli.hpp"

int main(int argc, char** argv) {
  dscm::cli::tune_allocator();
  return dscm::cli::run(argc, argv, std::cout, std::cerr);
}
