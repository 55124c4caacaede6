#include <iostream>

#include "gpfi/cli.hpp"

int main(int argc, char** argv) { return gpfi::cli::run(argc, argv, std::cout, std::cerr); }
