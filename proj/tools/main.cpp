#include "wayrvs/cli.hpp"

int main(int argc, char** argv) { return wayrvs::run(argc, argv); }
