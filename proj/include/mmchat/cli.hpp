#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mmchat::cli {

// Exit codes: 0 success, 1 operational failure, 2 usage error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

// `args` excludes the program name. Relative paths resolve against --workdir
// (default: the current directory).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

// FNV-1a of a file's bytes as 16 hex digits; used for run manifests.
std::string file_fingerprint(const std::string& path);

}  // namespace mmchat::cli
