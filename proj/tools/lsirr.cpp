#include "lsirr/cli.hpp"

int main(int argc, char** argv) { return lsirr::cli::main(argc, argv); }
