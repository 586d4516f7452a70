#include <iostream>

#include "ttmg/cli.hpp"

int main(int argc, char** argv) { return ttmg::cli::run(argc, argv, std::cout, std::cerr); }
