#include <iostream>

#include "ccnf_cli.hpp"

int main(int argc, char** argv) { return ccnf::cli::run_cli(argc, argv, std::cout, std::cerr); }
