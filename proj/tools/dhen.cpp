#include "dhen/cli.hpp"

int main(int argc, char** argv) { return dhen::cli::run(argc, argv); }
