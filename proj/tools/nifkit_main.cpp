#include <string>
#include <vector>

#include "nifkit/cli.hpp"

int main(int argc, char** argv) {
    return nifkit::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
