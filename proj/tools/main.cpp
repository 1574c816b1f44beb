#include "accvit/cli.hpp"

int main(int argc, char** argv) { return accvit::cli::run_main(argc, argv); }
