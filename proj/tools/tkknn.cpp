#include "tkknn/cli.hpp"

int main(int argc, char** argv) { return tkknn::cli::run(argc, argv); }
