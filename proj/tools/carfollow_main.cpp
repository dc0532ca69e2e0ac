#include "carfollow/workflows.hpp"

int main(int argc, char** argv) { return carfollow::cli::cli_main(argc, argv); }
