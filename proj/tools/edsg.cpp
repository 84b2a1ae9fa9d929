#include "edsg/cli.hpp"

int main(int argc, char** argv) { return edsg::run_cli(argc, argv); }
