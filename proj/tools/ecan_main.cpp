#include "ecan/cli.hpp"

int main(int argc, char** argv) { return ecan::cli::run_cli(argc, argv); }
