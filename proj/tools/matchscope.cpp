#include <string>
#include <vector>

#include "matchscope/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return matchscope::cli::run(args);
}
