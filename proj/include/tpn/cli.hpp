#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "tpn/model.hpp"

namespace tpn {

enum ExitCode : int { kExitOk = 0, kExitNumeric = 1, kExitUsage = 2 };

/// Entry point of the `tpn` executable. Reports to `out` / `err` and returns
/// the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// One configuration of the parameter reproduction table.
struct Table1Row {
  std::string label;
  ModelSpec spec;
  double reference_millions = 0;
};

std::vector<Table1Row> table1_rows();

}  // namespace tpn
