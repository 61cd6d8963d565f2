#include "dehaze/cli.hpp"

int main(int argc, char** argv) { return dehaze::run_cli(argc, argv); }
