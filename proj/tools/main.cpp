#include <iostream>

#include "moesplit/cli.hpp"

int main(int argc, char** argv) { return moesplit::run_cli(argc, argv, std::cout, std::cerr); }
