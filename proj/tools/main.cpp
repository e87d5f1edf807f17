#include "sled/cli.hpp"

int main(int argc, char** argv) { return sled::run_cli(argc, argv); }
