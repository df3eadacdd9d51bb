#include <iostream>

#include "uwbcal/cli.hpp"

int main(int argc, char** argv) { return uwbcal::run_cli(argc, argv, std::cout, std::cerr); }
