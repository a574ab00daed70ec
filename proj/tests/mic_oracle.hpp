#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <vector>

namespace mic_oracle {

// Brute force over every pair of contiguous partitions of the distinct x and
// y levels, with 2-D prefix sums for the cell counts.
struct BruteForce {
  std::map<std::pair<std::size_t, std::size_t>, double> entries;  // (x bins, y bins) -> normalized MI
};

inline BruteForce brute_force_matrix(const std::vector<double>& xs, const std::vector<double>& ys, std::size_t budget,
                              std::size_t cap) {
  std::vector<double> lx(xs), ly(ys);
  std::sort(lx.begin(), lx.end());
  lx.erase(std::unique(lx.begin(), lx.end()), lx.end());
  std::sort(ly.begin(), ly.end());
  ly.erase(std::unique(ly.begin(), ly.end()), ly.end());
  const std::size_t nx = lx.size(), ny = ly.size();
  std::vector<std::vector<double>> pre(nx + 1, std::vector<double>(ny + 1, 0.0));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto a = std::lower_bound(lx.begin(), lx.end(), xs[i]) - lx.begin();
    const auto b = std::lower_bound(ly.begin(), ly.end(), ys[i]) - ly.begin();
    pre[a + 1][b + 1] += 1.0;
  }
  for (std::size_t a = 1; a <= nx; ++a) {
    for (std::size_t b = 1; b <= ny; ++b) pre[a][b] += pre[a - 1][b] + pre[a][b - 1] - pre[a - 1][b - 1];
  }
  const double n = static_cast<double>(xs.size());
  auto cell = [&](std::size_t a0, std::size_t a1, std::size_t b0, std::size_t b1) {
    return pre[a1][b1] - pre[a0][b1] - pre[a1][b0] + pre[a0][b0];
  };
  // all cut sets of size c from positions 1..levels-1, as bounds 0 < ... < levels
  std::function<void(std::size_t, std::size_t, std::vector<std::size_t>&, std::vector<std::vector<std::size_t>>&)>
      gen = [&](std::size_t levels, std::size_t c, std::vector<std::size_t>& cur,
                std::vector<std::vector<std::size_t>>& out) {
        if (cur.size() == c + 1) {
          auto b = cur;
          b.push_back(levels);
          out.push_back(b);
          return;
        }
        for (std::size_t p = cur.back() + 1; p + (c + 1 - cur.size()) <= levels; ++p) {
          cur.push_back(p);
          gen(levels, c, cur, out);
          cur.pop_back();
        }
      };
  BruteForce bf;
  for (std::size_t x = 2; x <= cap; ++x) {
    for (std::size_t y = 2; y <= cap && x * y <= budget; ++y) {
      std::vector<std::vector<std::size_t>> xcuts, ycuts;
      std::vector<std::size_t> start{0};
      gen(nx, std::min(x - 1, nx - 1), start, xcuts);
      start = {0};
      gen(ny, std::min(y - 1, ny - 1), start, ycuts);
      double best = 0.0;
      for (const auto& cx : xcuts) {
        for (const auto& cy : ycuts) {
          double mi = 0.0;
          for (std::size_t i = 0; i + 1 < cx.size(); ++i) {
            const double px = cell(cx[i], cx[i + 1], 0, ny) / n;
            for (std::size_t j = 0; j + 1 < cy.size(); ++j) {
              const double pxy = cell(cx[i], cx[i + 1], cy[j], cy[j + 1]) / n;
              if (pxy == 0.0) continue;
              const double py = cell(0, nx, cy[j], cy[j + 1]) / n;
              mi += pxy * std::log(pxy / (px * py));
            }
          }
          best = std::max(best, mi);
        }
      }
      bf.entries[{x, y}] = best / std::log(static_cast<double>(std::min(x, y)));
    }
  }
  return bf;
}

}  // namespace mic_oracle
