#include "acpo/cli.hpp"

int main(int argc, char** argv) {
  return acpo::run_cli({argv + 1, argv + argc});
}
