#include "statfuse/cli.hpp"

int main(int argc, char** argv) { return statfuse::cli::run(argc, argv); }
