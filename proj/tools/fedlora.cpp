// SPDX-License-Identifier: Apache-2.0

#include "fedlora/cli.hpp"

int main(int argc, char** argv) {
    return fedlora::cli_run(argc, argv);
}
