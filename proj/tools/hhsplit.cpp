// SPDX-License-Identifier: Apache-2.0
#include "hhsplit/cli.hpp"

int main(int argc, char** argv) { return hhsplit::cli::run(argc, argv); }
