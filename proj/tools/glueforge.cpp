#include <glueforge/cli.hpp>

int main(int argc, char** argv) { return glueforge::cli_dispatch(argc, argv); }
