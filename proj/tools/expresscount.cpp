#include <iostream>

#include "expresscount/cli.hpp"

int main(int argc, char** argv) { return expresscount::dispatch(argc, argv, std::cout, std::cerr); }
