#include <string>
#include <vector>

#include "desklm/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return desklm::cli::dispatch(args);
}
