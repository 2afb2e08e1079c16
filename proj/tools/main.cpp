#include "dosediff/cli.hpp"

int main(int argc, char** argv) { return dosediff::io::run_cli(argc, argv); }
