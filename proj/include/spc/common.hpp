#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace spc {

inline constexpr const char* kVersion = "1.0.0";

// Error taxonomy maps onto process exit codes in the CLI:
// ConfigError -> 2, DataError -> 3, DivergenceError -> 4.
class Error : public std::runtime_error {
  public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
  public:
    explicit ShapeError(const std::string& msg) : Error("shape: " + msg) {}
};

class TapeError : public Error {
  public:
    explicit TapeError(const std::string& msg) : Error("tape: " + msg) {}
};

class ConfigError : public Error {
  public:
    explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

class DataError : public Error {
  public:
    explicit DataError(const std::string& msg) : Error("data: " + msg) {}
};

class DivergenceError : public Error {
  public:
    explicit DivergenceError(const std::string& msg) : Error("divergence: " + msg) {}
};

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int extent : shape) {
        if (extent <= 0) throw ShapeError("non-positive extent " + std::to_string(extent));
        n *= static_cast<std::size_t>(extent);
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Global worker-count setting (CLI --threads).  1 means fully serial
// execution; results are bit-identical for any value because every parallel
// loop in the library writes disjoint outputs and reduces in index order.
inline int& max_threads() {
    static int n = 1;
    return n;
}

// Runs fn(i) for i in [0, total).  With max_threads() == 1 (the default)
// this is a plain loop.  Otherwise the index range is split into contiguous
// chunks, one per worker; fn must write only to locations owned by index i.
// The first exception (by worker index) is rethrown on the caller's thread.
template <class Fn>
void parallel_for(std::size_t total, Fn&& fn) {
    const int workers = max_threads();
    if (workers <= 1 || total <= 1) {
        for (std::size_t i = 0; i < total; ++i) fn(i);
        return;
    }
    const std::size_t n = static_cast<std::size_t>(workers) < total
                              ? static_cast<std::size_t>(workers)
                              : total;
    const std::size_t chunk = (total + n - 1) / n;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(n);
    pool.reserve(n);
    for (std::size_t w = 0; w < n; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = lo + chunk < total ? lo + chunk : total;
        pool.emplace_back([&fn, &errors, w, lo, hi] {
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace spc
