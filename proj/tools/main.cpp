#include <iostream>

#include "diffnas/cli.hpp"

int main(int argc, char** argv) { return diffnas::cli::run(argc, argv, std::cout, std::cerr); }
