#include "hydronet/cli.hpp"

int main(int argc, char** argv) { return hydronet::run_cli(argc, argv); }
