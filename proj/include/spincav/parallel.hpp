#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <span>
#include <thread>
#include <vector>

namespace spincav {

/// Resolves a worker-count request; values < 1 mean "available parallelism".
inline int resolve_workers(int requested) {
  if (requested >= 1) return requested;
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

/// Runs body(begin, end, worker) over [0, n) split into contiguous disjoint
/// chunks. The partition only decides who computes a slot, never how, so
/// results are independent of the worker count.
template <typename Body>
void parallel_for(std::size_t n, int workers, Body&& body) {
  const auto w = static_cast<std::size_t>(std::max(1, resolve_workers(workers)));
  const std::size_t nw = std::min(w, std::max<std::size_t>(n, 1));
  if (nw <= 1) {
    body(std::size_t{0}, n, 0);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(nw);
  const std::size_t chunk = (n + nw - 1) / nw;
  for (std::size_t t = 0; t < nw; ++t) {
    const std::size_t b = t * chunk;
    const std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    threads.emplace_back([&, b, e, t] {
      try {
        body(b, e, static_cast<int>(t));
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
}

/// Pairwise (tree) summation with a fixed split rule.
/// `zero` is returned for an empty range.
template <typename T>
T pairwise_sum(std::span<const T> values, const T& zero) {
  constexpr std::size_t kLeaf = 8;
  if (values.empty()) return zero;
  if (values.size() <= kLeaf) {
    T acc = values[0];
    for (std::size_t k = 1; k < values.size(); ++k) acc += values[k];
    return acc;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half), zero) + pairwise_sum(values.subspan(half), zero);
}

}  // namespace spincav
