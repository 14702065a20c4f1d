#include "bltlab/cli.hpp"

int main(int argc, char** argv) { return bltlab::cli::run(argc, argv); }
