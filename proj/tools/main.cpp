#include "dmu/cli.hpp"

int main(int argc, char** argv) { return dmu::run_cli(argc, argv); }
