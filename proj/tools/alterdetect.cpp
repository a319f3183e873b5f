#include <iostream>

#include "alterdetect/cli.hpp"

int main(int argc, char** argv) { return alterdetect::cli_main(argc, argv, std::cout, std::cerr); }
