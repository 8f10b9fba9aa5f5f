#include "pnet/cli.hpp"

#include <iostream>

int main(int argc, char** argv)
{
    return pnet::cli_dispatch(argc, argv, std::cout, std::cerr);
}
