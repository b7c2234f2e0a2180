#include "hulm/cli.hpp"

int main(int argc, char** argv) { return hulm::cli::run(argc, argv); }
