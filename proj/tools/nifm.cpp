#include <iostream>

#include "nifm/cli.hpp"

int main(int argc, char** argv) { return nifm::cli::main(argc, argv, std::cout, std::cerr); }
