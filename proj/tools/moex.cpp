#include "moex/cli.hpp"

int main(int argc, char** argv) { return moex::run_cli(std::vector<std::string>(argv, argv + argc)); }
