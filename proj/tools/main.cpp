#include <iostream>

#include "watk_cli.hpp"

int main(int argc, char** argv) { return watk::cli::run({argv, argv + argc}, std::cerr); }
