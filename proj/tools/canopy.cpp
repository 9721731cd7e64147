#include "canopy/cli.hpp"

int main(int argc, char** argv) { return canopy::cli::main(argc, argv); }
