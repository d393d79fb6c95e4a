// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace fedlora {

// Error taxonomy. Each category maps to a distinct process exit code so that
// scripted callers can tell a bad config from bad data or a numerical blowup.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
// Broken internal contract (tape reuse, double mask registration, ...).
struct LogicError : std::logic_error {
    explicit LogicError(const std::string& msg) : std::logic_error(msg) {}
};

enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 1,
    kExitConfig = 2,
    kExitData = 3,
    kExitNumeric = 4,
    kExitIo = 5,
    kExitInternal = 6,
};

// Shortest decimal form that round-trips an IEEE754 double bit-exactly.
inline std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Compact form for report CSVs (stable across reruns of the same binary).
inline std::string fmt_g9(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed: " + path);
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << content;
    out.flush();
    if (!out) throw IoError("write failed: " + path);
}

inline void ensure_dir(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) throw IoError("cannot create directory " + path + ": " + ec.message());
}

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

// Runs fn(0..n-1) on up to `workers` threads with a static index partition.
// Tasks must be independent; slot-indexed outputs keep results identical for
// any worker count.
inline void parallel_for(size_t n, size_t workers, const std::function<void(size_t)>& fn) {
    if (n == 0) return;
    if (workers <= 1 || n == 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    size_t nthreads = std::min(workers, n);
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(nthreads);
    pool.reserve(nthreads);
    for (size_t t = 0; t < nthreads; ++t) {
        pool.emplace_back([&, t]() {
            try {
                for (size_t i = t; i < n; i += nthreads) fn(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace fedlora
