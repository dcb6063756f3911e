#include <iostream>

#include "merba/cli.hpp"

int main(int argc, char** argv) {
    return merba::cli_run(argc, argv, std::cout, std::cerr);
}
