#include "cwat/cli.hpp"

int main(int argc, char** argv) { return cwat::cli::run(argc, argv); }
