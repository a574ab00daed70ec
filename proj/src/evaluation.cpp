#include "causalvae/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>

#include "causalvae/scm.hpp"

namespace causalvae::evaluation {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Row label per point after splitting the sorted values into `bins` groups
// of roughly equal size. Tied values always share a group.
std::vector<std::size_t> equipartition(const std::vector<double>& values, const std::vector<std::size_t>& order,
                                       std::size_t bins) {
  const std::size_t n = values.size();
  std::vector<std::size_t> label(n, 0);
  std::size_t bin = 0;
  std::size_t current = 0;
  double desired = static_cast<double>(n) / static_cast<double>(bins);
  std::size_t j = 0;
  while (j < n) {
    std::size_t s = 1;
    while (j + s < n && values[order[j + s]] == values[order[j]]) ++s;
    const double with = std::abs(static_cast<double>(current + s) - desired);
    const double without = std::abs(static_cast<double>(current) - desired);
    if (current != 0 && with >= without && bin + 1 < bins) {
      ++bin;
      current = 0;
      desired = static_cast<double>(n - j) / static_cast<double>(bins - bin);
    }
    for (std::size_t q = j; q < j + s; ++q) label[order[q]] = bin;
    current += s;
    j += s;
  }
  return label;
}

std::vector<std::size_t> sorted_order(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return order;
}

double entropy_of_counts(const std::vector<std::size_t>& counts, double total) {
  double h = 0.0;
  for (std::size_t c : counts) {
    if (c > 0) {
      const double p = static_cast<double>(c) / total;
      h -= p * std::log(p);
    }
  }
  return h;
}

// Column blocks along the optimized axis: each block holds a run of
// consecutive points (in sorted order) and its per-row counts.
struct Blocks {
  std::vector<std::vector<std::size_t>> row_counts;
};

// Consecutive points with the same row label merge into one clump; tied
// values that straddle rows form a clump of their own.
Blocks clumps(const std::vector<double>& xs, const std::vector<std::size_t>& order,
              const std::vector<std::size_t>& rows, std::size_t num_rows) {
  Blocks b;
  const std::size_t n = xs.size();
  long last_label = std::numeric_limits<long>::min();
  std::size_t j = 0;
  long unique = -1;
  while (j < n) {
    std::size_t s = 1;
    bool mixed = false;
    while (j + s < n && xs[order[j + s]] == xs[order[j]]) {
      mixed = mixed || rows[order[j + s]] != rows[order[j]];
      ++s;
    }
    const long label = mixed ? unique-- : static_cast<long>(rows[order[j]]);
    if (label != last_label || label < 0) b.row_counts.emplace_back(num_rows, 0);
    for (std::size_t q = j; q < j + s; ++q) ++b.row_counts.back()[rows[order[q]]];
    last_label = label;
    j += s;
  }
  return b;
}

// Merges clumps into at most `target` superclumps of roughly equal size.
Blocks superclumps(const Blocks& in, std::size_t target) {
  if (in.row_counts.size() <= target) return in;
  std::vector<double> sizes;
  for (const auto& c : in.row_counts) sizes.push_back(static_cast<double>(std::accumulate(c.begin(), c.end(), 0u)));
  const double total = std::accumulate(sizes.begin(), sizes.end(), 0.0);
  Blocks out;
  const std::size_t num_rows = in.row_counts.front().size();
  double current = 0.0;
  double desired = total / static_cast<double>(target);
  double remaining = total;
  std::size_t made = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (out.row_counts.empty() ||
        (current != 0.0 && std::abs(current + sizes[i] - desired) >= std::abs(current - desired) &&
         made + 1 < target)) {
      if (!out.row_counts.empty()) {
        ++made;
        desired = remaining / static_cast<double>(target - made);
      }
      out.row_counts.emplace_back(num_rows, 0);
      current = 0.0;
    }
    for (std::size_t r = 0; r < num_rows; ++r) out.row_counts.back()[r] += in.row_counts[i][r];
    current += sizes[i];
    remaining -= sizes[i];
  }
  return out;
}

// best[l] = max mutual information over partitions of the blocks into at most
// l contiguous columns, for l = 0..max_cols (entries 0 and 1 unused). The
// row partition is fixed, so I = H(rows) - min sum_col (n_col / N) H(rows | col),
// which the column DP minimizes exactly.
std::vector<double> optimize_columns(const Blocks& blocks, std::size_t max_cols, double n) {
  const std::size_t m = blocks.row_counts.size();
  const std::size_t num_rows = blocks.row_counts.front().size();
  std::vector<std::vector<std::size_t>> prefix(m + 1, std::vector<std::size_t>(num_rows, 0));
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t r = 0; r < num_rows; ++r) prefix[t + 1][r] = prefix[t][r] + blocks.row_counts[t][r];
  }
  std::vector<std::size_t> total_rows = prefix[m];
  const double h_rows = entropy_of_counts(total_rows, n);

  std::vector<double> cost((m + 1) * (m + 1), 0.0);
  std::vector<std::size_t> counts(num_rows);
  for (std::size_t s = 0; s < m; ++s) {
    for (std::size_t t = s + 1; t <= m; ++t) {
      std::size_t tot = 0;
      for (std::size_t r = 0; r < num_rows; ++r) {
        counts[r] = prefix[t][r] - prefix[s][r];
        tot += counts[r];
      }
      cost[s * (m + 1) + t] = static_cast<double>(tot) / n * entropy_of_counts(counts, static_cast<double>(tot));
    }
  }

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  for (std::size_t t = 1; t <= m; ++t) prev[t] = cost[t];
  std::vector<double> best(max_cols + 1, 0.0);
  double best_cond = prev[m];
  for (std::size_t l = 2; l <= max_cols; ++l) {
    std::fill(cur.begin(), cur.end(), inf);
    for (std::size_t t = l; t <= m; ++t) {
      double v = inf;
      for (std::size_t s = l - 1; s < t; ++s) v = std::min(v, prev[s] + cost[s * (m + 1) + t]);
      cur[t] = v;
    }
    best_cond = std::min(best_cond, cur[m]);
    best[l] = std::max(0.0, h_rows - best_cond);
    std::swap(prev, cur);
  }
  return best;
}

std::size_t grid_budget(std::size_t n, const MicOptions& o) {
  if (o.budget) return *o.budget;
  return std::max<std::size_t>(4, static_cast<std::size_t>(std::floor(std::pow(static_cast<double>(n), o.alpha))));
}

void validate(const std::vector<double>& xs, const std::vector<double>& ys, const MicOptions& o) {
  if (xs.size() != ys.size()) throw EvaluationError("mic: inputs have different lengths");
  if (xs.size() < kMinSamples) {
    throw EvaluationError("mic: need at least " + std::to_string(kMinSamples) + " samples, got " +
                          std::to_string(xs.size()));
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw EvaluationError("mic: inputs must be finite");
  }
  if (o.axis_cap < 2) throw EvaluationError("mic: axis cap must be at least 2");
  if (!(o.clump_factor >= 1.0)) throw EvaluationError("mic: clump factor must be at least 1");
}

bool constant(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

// Fills entries[x_bins - 2][y_bins - 2] with the heuristic search that
// equipartitions `rows_axis` and optimizes columns on `cols_axis`.
void heuristic_orientation(const std::vector<double>& cols_axis, const std::vector<double>& rows_axis,
                           std::size_t budget, const MicOptions& o, bool transpose,
                           std::vector<std::vector<double>>& entries) {
  const double n = static_cast<double>(cols_axis.size());
  const auto col_order = sorted_order(cols_axis);
  const auto row_order = sorted_order(rows_axis);
  for (std::size_t y = 2; y <= o.axis_cap && 2 * y <= budget; ++y) {
    const std::size_t max_cols = std::min(o.axis_cap, budget / y);
    const auto rows = equipartition(rows_axis, row_order, y);
    const Blocks c = clumps(cols_axis, col_order, rows, y);
    const auto target = static_cast<std::size_t>(std::floor(o.clump_factor * static_cast<double>(max_cols)));
    const Blocks sc = superclumps(c, std::max(target, max_cols));
    const auto best = optimize_columns(sc, max_cols, n);
    for (std::size_t x = 2; x <= max_cols; ++x) {
      const double v = best[x] / std::log(static_cast<double>(std::min(x, y)));
      double& slot = transpose ? entries[y - 2][x - 2] : entries[x - 2][y - 2];
      if (std::isnan(slot) || v > slot) slot = v;
    }
  }
}

void enumerate_cuts(std::size_t candidates, std::size_t cuts, std::size_t start, std::vector<std::size_t>& chosen,
                    const std::function<void()>& visit) {
  if (chosen.size() == cuts) {
    visit();
    return;
  }
  for (std::size_t c = start; c + (cuts - chosen.size()) <= candidates; ++c) {
    chosen.push_back(c);
    enumerate_cuts(candidates, cuts, c + 1, chosen, visit);
    chosen.pop_back();
  }
}

// Every contiguous row partition of the distinct y values, columns by exact DP
// over the distinct x values.
void exhaustive_search(const std::vector<double>& xs, const std::vector<double>& ys, std::size_t budget,
                       const MicOptions& o, std::vector<std::vector<double>>& entries) {
  const double n = static_cast<double>(xs.size());
  const auto x_order = sorted_order(xs);
  const auto y_order = sorted_order(ys);
  // rank of each point's y among distinct values
  std::vector<std::size_t> y_rank(ys.size());
  std::size_t distinct = 0;
  for (std::size_t j = 0; j < y_order.size(); ++j) {
    if (j > 0 && ys[y_order[j]] != ys[y_order[j - 1]]) ++distinct;
    y_rank[y_order[j]] = distinct;
  }
  const std::size_t levels = distinct + 1;
  for (std::size_t y = 2; y <= o.axis_cap && 2 * y <= budget; ++y) {
    const std::size_t max_cols = std::min(o.axis_cap, budget / y);
    const std::size_t cuts = std::min(y - 1, levels - 1);
    std::vector<double> best(max_cols + 1, 0.0);
    std::vector<std::size_t> chosen;
    std::vector<std::size_t> rows(xs.size());
    enumerate_cuts(levels - 1, cuts, 0, chosen, [&] {
      for (std::size_t i = 0; i < xs.size(); ++i) {
        // cut c separates level c from level c + 1
        rows[i] = static_cast<std::size_t>(std::lower_bound(chosen.begin(), chosen.end(), y_rank[i]) - chosen.begin());
      }
      // individual distinct x values as blocks
      Blocks b;
      for (std::size_t j = 0; j < x_order.size(); ++j) {
        if (j == 0 || xs[x_order[j]] != xs[x_order[j - 1]]) b.row_counts.emplace_back(y, 0);
        ++b.row_counts.back()[rows[x_order[j]]];
      }
      const auto mi = optimize_columns(b, max_cols, n);
      for (std::size_t x = 2; x <= max_cols; ++x) best[x] = std::max(best[x], mi[x]);
    });
    for (std::size_t x = 2; x <= max_cols; ++x) {
      entries[x - 2][y - 2] = best[x] / std::log(static_cast<double>(std::min(x, y)));
    }
  }
}

}  // namespace

CharacteristicMatrix characteristic_matrix(const std::vector<double>& xs, const std::vector<double>& ys,
                                           const MicOptions& options) {
  validate(xs, ys, options);
  CharacteristicMatrix m;
  m.budget = grid_budget(xs.size(), options);
  if (m.budget < 4) throw EvaluationError("mic: grid budget must allow at least a 2x2 grid");
  const std::size_t side = std::min(options.axis_cap, m.budget / 2);
  m.entries.assign(side - 1, std::vector<double>(side - 1, std::numeric_limits<double>::quiet_NaN()));
  if (constant(xs) || constant(ys)) {
    for (std::size_t x = 2; x <= side; ++x) {
      for (std::size_t y = 2; y <= side && x * y <= m.budget; ++y) m.entries[x - 2][y - 2] = 0.0;
    }
    return m;
  }
  if (options.exhaustive) {
    exhaustive_search(xs, ys, m.budget, options, m.entries);
  } else {
    heuristic_orientation(xs, ys, m.budget, options, false, m.entries);
    heuristic_orientation(ys, xs, m.budget, options, true, m.entries);
  }
  return m;
}

MicResult mine_statistics(const std::vector<double>& xs, const std::vector<double>& ys, const MicOptions& options) {
  const CharacteristicMatrix m = characteristic_matrix(xs, ys, options);
  MicResult r;
  r.degenerate = constant(xs) || constant(ys);
  if (r.degenerate) return r;
  std::vector<double> values;
  for (const auto& row : m.entries) {
    for (double v : row) {
      if (!std::isnan(v)) values.push_back(v);
    }
  }
  // Summing in sorted order keeps tic(x, y) == tic(y, x) to the last bit.
  std::sort(values.begin(), values.end());
  const double sum = std::accumulate(values.begin(), values.end(), 0.0);
  r.mic = values.empty() ? 0.0 : std::min(values.back(), 1.0);
  r.tic = values.empty() ? 0.0 : std::min(sum / static_cast<double>(values.size()), 1.0);
  return r;
}

double mic(const std::vector<double>& xs, const std::vector<double>& ys, const MicOptions& options) {
  return mine_statistics(xs, ys, options).mic;
}

double tic(const std::vector<double>& xs, const std::vector<double>& ys, const MicOptions& options) {
  return mine_statistics(xs, ys, options).tic;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw EvaluationError("correlation: inputs have different lengths");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::size_t graph_shd(const ad::Tensor& learned, const std::vector<std::vector<bool>>& truth, double threshold) {
  const auto edges = scm::pruned_mask(learned, threshold);
  const std::size_t n = edges.size();
  if (truth.size() != n) throw EvaluationError("graph_shd: graphs have different sizes");
  std::size_t shd = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (truth[i].size() != n) throw EvaluationError("graph_shd: true graph is not square");
    for (std::size_t j = i + 1; j < n; ++j) {
      if (edges[i][j] != truth[i][j] || edges[j][i] != truth[j][i]) ++shd;
    }
  }
  return shd;
}

std::size_t graph_shd(const ad::Tensor& learned, const std::vector<std::pair<std::size_t, std::size_t>>& truth,
                      double threshold) {
  const std::size_t n = learned.dim(0);
  std::vector<std::vector<bool>> g(n, std::vector<bool>(n, false));
  for (const auto& [from, to] : truth) {
    if (from >= n || to >= n) throw EvaluationError("graph_shd: true edge out of range");
    g[from][to] = true;
  }
  return graph_shd(learned, g, threshold);
}

Alignment compute_alignment(const vae::Model& model, const dataset::Split& split,
                            const std::vector<std::string>& concepts) {
  const vae::ModelConfig& c = model.config;
  if (concepts.size() != c.n) {
    throw EvaluationError("dataset has " + std::to_string(concepts.size()) + " concepts but the model has " +
                          std::to_string(c.n));
  }
  if (split.image_size() != c.image_size()) {
    throw EvaluationError("split image size " + std::to_string(split.image_size()) + " does not match the model (" +
                          std::to_string(c.image_size()) + ")");
  }
  const std::size_t count = split.count;
  const std::size_t d = c.image_size();
  const std::size_t n = c.n;
  const std::size_t k = c.k;
  std::vector<double> z_all(count * n * k);
  ad::NoGradGuard guard;
  const ad::Tensor a = model.effective_adjacency();
  constexpr std::size_t kBatch = 256;
  for (std::size_t begin = 0; begin < count; begin += kBatch) {
    const std::size_t end = std::min(count, begin + kBatch);
    std::vector<double> x(split.images.begin() + static_cast<std::ptrdiff_t>(begin * d),
                          split.images.begin() + static_cast<std::ptrdiff_t>(end * d));
    std::vector<double> u(split.labels.begin() + static_cast<std::ptrdiff_t>(begin * n),
                          split.labels.begin() + static_cast<std::ptrdiff_t>(end * n));
    const vae::Encoding enc = vae::encode(model, ad::Tensor::from({end - begin, d}, std::move(x)),
                                          ad::Tensor::from({end - begin, n}, std::move(u)));
    const ad::Tensor z = scm::causal_layer(enc.mu, a);
    std::copy(z.values().begin(), z.values().end(), z_all.begin() + static_cast<std::ptrdiff_t>(begin * n * k));
  }

  Alignment out;
  out.concepts = concepts;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> label(count), label_norm(count);
    for (std::size_t b = 0; b < count; ++b) {
      label[b] = split.labels_raw[b * n + i];
      label_norm[b] = split.labels[b * n + i];
    }
    std::size_t best_s = 0;
    double best_r = 0.0;
    std::vector<double> best_z;
    for (std::size_t s = 0; s < k; ++s) {
      std::vector<double> zs(count);
      for (std::size_t b = 0; b < count; ++b) zs[b] = z_all[(b * n + i) * k + s];
      const double r = correlation(zs, label_norm);
      if (s == 0 || std::abs(r) > std::abs(best_r)) {
        best_s = s;
        best_r = r;
        best_z = std::move(zs);
      }
    }
    out.labels.push_back(std::move(label));
    out.latents.push_back(std::move(best_z));
    out.subdimension.push_back(best_s);
    out.correlation.push_back(best_r);
  }
  return out;
}

json MetricReport::to_json() const {
  json per = json::array();
  for (std::size_t i = 0; i < concepts.size(); ++i) per.push_back({{"concept", concepts[i]}, {"mic", mic[i]}, {"tic", tic[i]}});
  return {{"concepts", per}, {"mean_mic", mean_mic}, {"mean_tic", mean_tic}, {"shd", shd}, {"edges", edges}};
}

MetricReport evaluate_alignment(const Alignment& alignment, const vae::Model& model,
                                const std::vector<std::vector<bool>>& true_graph, double prune_threshold,
                                const MicOptions& options) {
  MetricReport r;
  r.concepts = alignment.concepts;
  for (std::size_t i = 0; i < alignment.concepts.size(); ++i) {
    const MicResult s = mine_statistics(alignment.labels[i], alignment.latents[i], options);
    r.mic.push_back(s.mic);
    r.tic.push_back(s.tic);
  }
  const double n = static_cast<double>(r.mic.size());
  r.mean_mic = std::accumulate(r.mic.begin(), r.mic.end(), 0.0) / n;
  r.mean_tic = std::accumulate(r.tic.begin(), r.tic.end(), 0.0) / n;
  const ad::Tensor a = model.effective_adjacency().detach();
  r.shd = graph_shd(a, true_graph, prune_threshold);
  for (const auto& e : scm::pruned_edges(a, prune_threshold)) {
    r.edges.push_back({{"from", alignment.concepts.at(e.from)}, {"to", alignment.concepts.at(e.to)}, {"weight", e.weight}});
  }
  return r;
}

MetricReport evaluate_alignment(const vae::Model& model, const fs::path& dataset_dir, double prune_threshold,
                                const std::string& split, const MicOptions& options) {
  const dataset::Manifest manifest = dataset::read_manifest(dataset_dir);
  if (manifest.concepts.size() != model.config.n) {
    throw EvaluationError("dataset has " + std::to_string(manifest.concepts.size()) + " concepts but the model has " +
                          std::to_string(model.config.n));
  }
  const dataset::Split data = dataset::load_split(dataset_dir, split, model.config.pool);
  const Alignment alignment = compute_alignment(model, data, manifest.concepts);
  std::vector<std::vector<bool>> truth(model.config.n, std::vector<bool>(model.config.n, false));
  for (const auto& [from, to] : manifest.true_graph) truth.at(from).at(to) = true;
  return evaluate_alignment(alignment, model, truth, prune_threshold, options);
}

MeanSe mean_se(const std::vector<double>& values) {
  if (values.empty()) throw EvaluationError("mean_se: no values");
  const double m = static_cast<double>(values.size());
  MeanSe r;
  r.mean = std::accumulate(values.begin(), values.end(), 0.0) / m;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.se = std::sqrt(ss / (m - 1.0)) / std::sqrt(m);
  }
  return r;
}

SeedSummary summarize_seeds(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw EvaluationError("summarize_seeds: no reports");
  SeedSummary s;
  s.concepts = reports.front().concepts;
  for (std::size_t i = 0; i < s.concepts.size(); ++i) {
    std::vector<double> mics, tics;
    for (const auto& r : reports) {
      if (r.concepts != s.concepts) throw EvaluationError("summarize_seeds: reports disagree on concepts");
      mics.push_back(r.mic.at(i));
      tics.push_back(r.tic.at(i));
    }
    s.mic.push_back(mean_se(mics));
    s.tic.push_back(mean_se(tics));
  }
  std::vector<double> mm, mt, shd;
  for (const auto& r : reports) {
    mm.push_back(r.mean_mic);
    mt.push_back(r.mean_tic);
    shd.push_back(static_cast<double>(r.shd));
  }
  s.mean_mic = mean_se(mm);
  s.mean_tic = mean_se(mt);
  s.shd = mean_se(shd);
  return s;
}

json SeedSummary::to_json() const {
  auto pair = [](const MeanSe& v) { return json{{"mean", v.mean}, {"se", v.se}}; };
  json per = json::array();
  for (std::size_t i = 0; i < concepts.size(); ++i) {
    per.push_back({{"concept", concepts[i]}, {"mic", pair(mic[i])}, {"tic", pair(tic[i])}});
  }
  return {{"concepts", per}, {"mean_mic", pair(mean_mic)}, {"mean_tic", pair(mean_tic)}, {"shd", pair(shd)}};
}

void export_alignment_scatter(const Alignment& alignment, const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw dataset::IoError("cannot write " + path.string());
  os << "concept,u,z\n" << std::setprecision(17);
  for (std::size_t i = 0; i < alignment.concepts.size(); ++i) {
    for (std::size_t b = 0; b < alignment.labels[i].size(); ++b) {
      os << alignment.concepts[i] << ',' << alignment.labels[i][b] << ',' << alignment.latents[i][b] << '\n';
    }
  }
  if (!os.flush()) throw dataset::IoError("write failed for " + path.string());
}

}  // namespace causalvae::evaluation
