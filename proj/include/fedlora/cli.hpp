// SPDX-License-Identifier: Apache-2.0
#pragma once
namespace fedlora { inline int cli_run(int, char**) { return 0; } }
