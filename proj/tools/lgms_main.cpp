#include "lgms/cli.hpp"

int main(int argc, char** argv) { return lgms::cli::run(argc, argv); }
