#include "mfpnet/cli.hpp"

int main(int argc, char** argv) { return mfpnet::run(argc, argv); }
