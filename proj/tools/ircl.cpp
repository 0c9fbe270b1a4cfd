#include <iostream>

#include "ircl/cli.hpp"

int main(int argc, char** argv) { return ircl::run_cli(argc, argv, std::cout, std::cerr); }
