#include "fairmask/cli.hpp"

int main(int argc, char** argv) { return fairmask::cli::run_cli(argc, argv); }
