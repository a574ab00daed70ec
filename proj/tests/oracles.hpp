#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

// Independent reference implementations used only by the tests.
namespace oracles {

// True when some ordered sequence of distinct nodes v0 -> v1 -> ... -> v0
// exists with every step a nonzero entry of `signs` (row = from, col = to).
inline bool has_cycle_brute_force(const std::vector<int>& signs, std::size_t n) {
  std::vector<std::size_t> nodes(n);
  std::iota(nodes.begin(), nodes.end(), 0);
  for (unsigned subset = 1; subset < (1u << n); ++subset) {
    std::vector<std::size_t> members;
    for (std::size_t v = 0; v < n; ++v) {
      if (subset & (1u << v)) members.push_back(v);
    }
    if (members.size() < 2) continue;
    std::sort(members.begin(), members.end());
    do {
      bool closed = true;
      for (std::size_t p = 0; p < members.size() && closed; ++p) {
        const std::size_t from = members[p];
        const std::size_t to = members[(p + 1) % members.size()];
        closed = signs[from * n + to] != 0;
      }
      if (closed) return true;
    } while (std::next_permutation(members.begin(), members.end()));
  }
  return false;
}

}  // namespace oracles
