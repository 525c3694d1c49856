#include <vector>

#include "gradflow/harness.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return gradflow::run_cli(args);
}
