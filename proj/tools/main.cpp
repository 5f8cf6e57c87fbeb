#include "arvsr/cli/cli.hpp"

int main(int argc, char** argv) { return arvsr::run_cli(argc, argv); }
