#include "maskgrid/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return maskgrid::cli::run(args);
}
