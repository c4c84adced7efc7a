#include <iostream>

#include "daptkit/cli.hpp"

int main(int argc, char** argv) { return daptkit::cli::run(argc, argv, std::cout, std::cerr); }
