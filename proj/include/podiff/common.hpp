#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

namespace podiff {

// Log verbosity, controlled by the PODIFF_LOG environment variable
// (error, warn, info, debug). Messages go to stderr only.
enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

LogLevel log_level();
void log(LogLevel level, const std::string& msg);

inline void log_info(const std::string& msg) { log(LogLevel::Info, msg); }
inline void log_warn(const std::string& msg) { log(LogLevel::Warn, msg); }
inline void log_debug(const std::string& msg) { log(LogLevel::Debug, msg); }

// Deterministic stream-splitting: derive an independent seed from a base
// seed and a stream index (splitmix64 over the pair).
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed) { return Rng(seed); }

// Write-temp-then-rename so interrupted runs never leave a partial file
// at the declared path.
void atomic_write_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace podiff
