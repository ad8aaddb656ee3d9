#include "icsrec/cli.hpp"

int main(int argc, char** argv) { return icsrec::run_cli(argc, argv); }
