#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mplex {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Error families. Callers that only care about success/failure can catch
// mplex::Error; the CLI maps ConfigError to exit code 2, everything else to 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct RangeError : Error {
    using Error::Error;
};
struct ParameterError : Error {
    using Error::Error;
};
struct InvariantError : Error {
    using Error::Error;
};
struct DegenerateDistributionError : Error {
    using Error::Error;
};
struct LengthError : Error {
    using Error::Error;
};
struct ReplayMismatchError : Error {
    using Error::Error;
};
struct StaleBatchError : Error {
    using Error::Error;
};
struct DivergenceError : Error {
    using Error::Error;
};
struct SchemaError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};

inline int hardware_threads() {
    const unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

// Runs fn(i) for i in [0, n). Each index must write only its own output slot;
// results are then independent of the thread count.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    if (threads <= 0) {
        threads = hardware_threads();
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) {
                    fn(i);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace mplex
