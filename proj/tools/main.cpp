#include <iostream>

#include "convbert/cli.hpp"

int main(int argc, char** argv) { return convbert::run_cli(argc, argv, std::cout, std::cerr); }
