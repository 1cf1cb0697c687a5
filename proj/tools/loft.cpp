#include "loft/cli.hpp"

int main(int argc, char** argv) { return loft::cli::cli_dispatch(argc, argv); }
