#ifndef BFDA_PARALLEL_HPP
#define BFDA_PARALLEL_HPP

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace bfda {

/**
 * Runs `fun(i)` for i in [0, n) over a fixed number of worker threads.
 * Each index is handled exactly once; the first exception thrown is rethrown after all workers join.
 */
template<class Function_>
void parallel_for(std::size_t n, Function_ fun, std::size_t nthreads = 0) {
    if (nthreads == 0) nthreads = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    nthreads = std::min(nthreads, n);
    if (nthreads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fun(i);
        return;
    }

    std::exception_ptr failure;
    std::mutex failure_lock;
    std::vector<std::thread> workers;
    workers.reserve(nthreads);
    const std::size_t chunk = (n + nthreads - 1) / nthreads;
    for (std::size_t t = 0; t < nthreads; ++t) {
        const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
        workers.emplace_back([&, lo, hi]() {
            try {
                for (std::size_t i = lo; i < hi; ++i) fun(i);
            } catch (...) {
                std::lock_guard lock(failure_lock);
                if (!failure) failure = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    if (failure) std::rethrow_exception(failure);
}

}

#endif
