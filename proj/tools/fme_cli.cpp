#include <string>
#include <vector>

#include "fme/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return fme::cli::run(args);
}
