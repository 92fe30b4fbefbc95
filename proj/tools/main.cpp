#include "hma/cli.hpp"

int main(int argc, char** argv) { return hma::cli::run(argc, argv); }
