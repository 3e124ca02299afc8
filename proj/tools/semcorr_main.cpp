#include "semcorr/cli.hpp"

int main(int argc, char** argv) { return semcorr::run_command(argc, argv); }
