#include <iostream>

#include "emkd/cli.hpp"

int main(int argc, char** argv) { return emkd::cli::run(argc, argv, std::cout, std::cerr); }
