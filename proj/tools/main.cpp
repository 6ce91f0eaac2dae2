#include "poroperm/cli.hpp"

int main(int argc, char** argv) { return poroperm::cli::run(argc, argv); }
