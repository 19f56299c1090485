#include <iostream>

#include "mmchat/cli.hpp"

int main(int argc, char** argv) { return mmchat::cli::run(argc, argv, std::cout, std::cerr); }
