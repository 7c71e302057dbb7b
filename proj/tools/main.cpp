#include <iostream>

#include "gradselect/cli.hpp"

int main(int argc, char** argv) { return gradselect::run_cli(argc, argv, std::cout, std::cerr); }
