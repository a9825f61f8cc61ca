#include "sal3sd/cli.hpp"

int main(int argc, char** argv) { return sal3sd::cli::run(argc, argv); }
