#include <iostream>

#include "ktransfer/cli.hpp"

int main(int argc, char** argv) { return ktransfer::cli::run(argc, argv, std::cout, std::cerr); }
