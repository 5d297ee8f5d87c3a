#include "spincav/cli.hpp"

int main(int argc, char** argv) { return spincav::run_cli(argc, argv); }
