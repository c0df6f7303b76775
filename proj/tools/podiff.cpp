#include <vector>

#include "podiff/cli.hpp"

int main(int argc, char** argv) {
    return podiff::run_command(std::vector<std::string>(argv + 1, argv + argc));
}
