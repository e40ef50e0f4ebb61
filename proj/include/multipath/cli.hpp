#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace multipath::cli {

/// Runs one command. `args` excludes the program name. Returns the process
/// exit status: 0 on success, 2 on usage errors, 1 on any other failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Name of the environment variable holding the default data directory.
inline constexpr const char* kDataDirVariable = "MULTIPATH_DATA_DIR";

}  // namespace multipath::cli
