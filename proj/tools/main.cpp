#include "rhoflow/cli.hpp"

int main(int argc, char** argv) { return rhoflow::run_cli(argc, argv); }
