#include <iostream>

#include "mdg/cli.hpp"

int main(int argc, char** argv) { return mdg::run_cli(argc, argv, std::cout, std::cerr); }
