#include "commands.hpp"

int main(int argc, char** argv) { return tdaens::cli::run(argc, argv); }
