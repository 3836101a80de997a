#include <iostream>

#include <cvxdistill/cli.hpp>

int main(int argc, char** argv)
{
    return cvxdistill::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
}
