#include "terrapose/cli.hpp"

int main(int argc, char** argv) { return terrapose::cli::run(argc, argv); }
