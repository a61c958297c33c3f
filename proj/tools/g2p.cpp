#include "g2p/cli.hpp"

int main(int argc, char** argv) { return g2p::cli::run(argc, argv); }
