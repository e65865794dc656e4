#include <iostream>
#include <string>
#include <vector>

#include "arbortune/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return arbortune::run_command(args, std::cout, std::cerr);
}
