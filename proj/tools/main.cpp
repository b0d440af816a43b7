#include "imccd/cli.hpp"

int main(int argc, char** argv) { return imccd::cli::run(argc, argv); }
