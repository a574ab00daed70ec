#include "causalvae/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "causalvae/binary_io.hpp"
#include "causalvae/rng.hpp"

namespace causalvae::dataset {

namespace fs = std::filesystem;
using json = nlohmann::json;
using binary_io::FormatError;

namespace {

constexpr std::uint64_t kSplitStream = 0xffffffffffffffffULL;

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  return os;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return is;
}

json graph_to_json(const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
  json out = json::array();
  for (const auto& [from, to] : edges) out.push_back({from, to});
  return out;
}

json ranges_json(scene::SceneKind kind) {
  if (kind == scene::SceneKind::pendulum) {
    const double a = scene::pendulum_geometry::kAngleLimit;
    return {{"pendulum_angle", {-a, a}}, {"light_angle", {-a, a}}};
  }
  using namespace scene::flow_geometry;
  return {{"ball_size", {kBallMin, kBallMax}},
          {"water_level", {kLevelMin, kLevelMax}},
          {"hole_position", {kHoleMin, kHoleMax}},
          {"gravity_noise_variance", kGravityNoiseVariance}};
}

}  // namespace

std::vector<double> Manifest::normalize(const std::vector<double>& raw) const {
  std::vector<double> out(raw.size());
  const std::size_t n_c = label_mean.size();
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - label_mean[i % n_c]) / label_std[i % n_c];
  return out;
}

std::vector<double> Manifest::denormalize(const std::vector<double>& normalized) const {
  std::vector<double> out(normalized.size());
  const std::size_t n_c = label_mean.size();
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    out[i] = normalized[i] * label_std[i % n_c] + label_mean[i % n_c];
  }
  return out;
}

scene::LabeledSample generate_sample(scene::SceneKind kind, std::uint64_t seed, std::size_t index) {
  std::mt19937_64 rng = stream_rng(seed, index);
  return scene::sample_scene(kind, rng);
}

void assign_splits(std::size_t n, std::uint64_t seed, const std::vector<double>& fractions,
                   std::vector<std::size_t>& train, std::vector<std::size_t>& test) {
  if (n == 0) throw std::invalid_argument("dataset size must be at least 1");
  if (fractions.size() != 2) throw std::invalid_argument("expected two split fractions (train, test)");
  for (double f : fractions) {
    if (!(f >= 0.0) || !std::isfinite(f)) throw std::invalid_argument("split fractions must be non-negative");
  }
  if (std::abs(fractions[0] + fractions[1] - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must sum to 1");
  }
  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fractions[0]));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng = stream_rng(seed, kSplitStream);
  std::shuffle(order.begin(), order.end(), rng);
  train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
}

Manifest generate_dataset(scene::SceneKind kind, std::size_t n, std::uint64_t seed,
                          const std::vector<double>& fractions, const fs::path& dir) {
  std::vector<std::size_t> train_idx, test_idx;
  assign_splits(n, seed, fractions, train_idx, test_idx);

  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create dataset directory " + dir.string());

  const std::size_t n_c = scene::kConcepts;
  const std::size_t n_p = scene::param_names(kind).size();
  const std::size_t image_size = scene::kImageSize * scene::kImageSize * scene::kChannels;
  std::vector<bool> is_train(n, false);
  for (auto i : train_idx) is_train[i] = true;

  std::ofstream train_os = open_out(dir / "train.bin");
  std::ofstream test_os = open_out(dir / "test.bin");
  auto image_header = [&](std::ostream& os, std::size_t count) {
    binary_io::write_header(os, {count, scene::kImageSize, scene::kImageSize, scene::kChannels});
  };
  image_header(train_os, train_idx.size());
  image_header(test_os, test_idx.size());

  std::vector<double> raw(n * n_c);
  std::vector<double> params(n * n_p);
  for (std::size_t i = 0; i < n; ++i) {
    scene::LabeledSample s = generate_sample(kind, seed, i);
    if (s.image.pixels.size() != image_size) throw std::logic_error("renderer produced a wrong-sized image");
    binary_io::write_values(is_train[i] ? train_os : test_os, s.image.pixels);
    std::copy(s.labels.begin(), s.labels.end(), raw.begin() + static_cast<std::ptrdiff_t>(i * n_c));
    std::copy(s.params.begin(), s.params.end(), params.begin() + static_cast<std::ptrdiff_t>(i * n_p));
  }

  Manifest m;
  m.kind = kind;
  m.n = n;
  m.seed = seed;
  m.fractions = fractions;
  m.n_train = train_idx.size();
  m.n_test = test_idx.size();
  m.concepts = scene::concept_names(kind);
  m.params = scene::param_names(kind);
  m.true_graph = scene::true_graph(kind);
  m.label_mean.assign(n_c, 0.0);
  m.label_std.assign(n_c, 1.0);
  m.label_min.assign(n_c, 0.0);
  m.label_max.assign(n_c, 0.0);
  const std::vector<std::size_t>& stats_idx = train_idx.empty() ? test_idx : train_idx;
  for (std::size_t c = 0; c < n_c; ++c) {
    double sum = 0.0;
    double lo = raw[stats_idx.front() * n_c + c];
    double hi = lo;
    for (auto i : stats_idx) {
      const double v = raw[i * n_c + c];
      sum += v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double mean = sum / static_cast<double>(stats_idx.size());
    double ss = 0.0;
    for (auto i : stats_idx) ss += (raw[i * n_c + c] - mean) * (raw[i * n_c + c] - mean);
    const double sd = std::sqrt(ss / static_cast<double>(stats_idx.size()));
    m.label_mean[c] = mean;
    m.label_std[c] = sd > 0.0 ? sd : 1.0;
    m.label_min[c] = lo;
    m.label_max[c] = hi;
  }

  auto write_tail = [&](std::ostream& os, const std::vector<std::size_t>& idx) {
    std::vector<double> r, z, p, ix;
    for (auto i : idx) {
      for (std::size_t c = 0; c < n_c; ++c) {
        r.push_back(raw[i * n_c + c]);
        z.push_back((raw[i * n_c + c] - m.label_mean[c]) / m.label_std[c]);
      }
      for (std::size_t c = 0; c < n_p; ++c) p.push_back(params[i * n_p + c]);
      ix.push_back(static_cast<double>(i));
    }
    binary_io::write_array(os, {idx.size(), n_c}, r);
    binary_io::write_array(os, {idx.size(), n_c}, z);
    binary_io::write_array(os, {idx.size(), n_p}, p);
    binary_io::write_array(os, {idx.size()}, ix);
    if (!os.flush()) throw IoError("write failed");
  };
  write_tail(train_os, train_idx);
  write_tail(test_os, test_idx);

  json j;
  j["format_version"] = m.format_version;
  j["kind"] = scene::to_string(kind);
  j["n"] = n;
  j["seed"] = seed;
  j["fractions"] = fractions;
  j["counts"] = {{"train", m.n_train}, {"test", m.n_test}};
  j["image_shape"] = {scene::kImageSize, scene::kImageSize, scene::kChannels};
  j["concepts"] = m.concepts;
  j["params"] = m.params;
  j["ranges"] = ranges_json(kind);
  j["normalization"] = {{"mean", m.label_mean}, {"std", m.label_std}};
  j["label_range"] = {{"min", m.label_min}, {"max", m.label_max}};
  j["true_graph"] = graph_to_json(m.true_graph);
  j["files"] = {{"train", "train.bin"}, {"test", "test.bin"}};
  if (kind == scene::SceneKind::flow) {
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i) g[i] = params[i * n_p + 3];
    j["gravity_by_index"] = g;
  }
  std::ofstream ms = open_out(dir / "manifest.json");
  ms << j.dump(2) << "\n";
  if (!ms.flush()) throw IoError("write failed for manifest");
  return m;
}

Manifest read_manifest(const fs::path& dir) {
  std::ifstream is = open_in(dir / "manifest.json");
  json j;
  try {
    is >> j;
    Manifest m;
    m.format_version = j.at("format_version").get<int>();
    if (m.format_version != 1) throw FormatError("unsupported dataset format version");
    m.kind = scene::parse_kind(j.at("kind").get<std::string>());
    m.n = j.at("n").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.fractions = j.at("fractions").get<std::vector<double>>();
    m.n_train = j.at("counts").at("train").get<std::size_t>();
    m.n_test = j.at("counts").at("test").get<std::size_t>();
    m.concepts = j.at("concepts").get<std::vector<std::string>>();
    m.params = j.at("params").get<std::vector<std::string>>();
    m.label_mean = j.at("normalization").at("mean").get<std::vector<double>>();
    m.label_std = j.at("normalization").at("std").get<std::vector<double>>();
    m.label_min = j.at("label_range").at("min").get<std::vector<double>>();
    m.label_max = j.at("label_range").at("max").get<std::vector<double>>();
    for (const auto& e : j.at("true_graph")) m.true_graph.emplace_back(e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>());
    return m;
  } catch (const json::exception& e) {
    throw FormatError("malformed dataset manifest in " + dir.string() + ": " + e.what());
  }
}

Split load_split(const fs::path& dir, const std::string& split, std::size_t pool, std::size_t limit) {
  if (split != "train" && split != "test") throw std::invalid_argument("split must be train or test");
  const Manifest m = read_manifest(dir);
  std::ifstream is = open_in(dir / (split + ".bin"));
  const auto dims = binary_io::read_header(is);
  if (dims.size() != 4 || dims[1] != scene::kImageSize || dims[2] != scene::kImageSize ||
      dims[3] != scene::kChannels) {
    throw FormatError("unexpected image array shape in " + split + ".bin");
  }
  const std::size_t total = dims[0];
  Split s;
  s.count = limit == 0 ? total : std::min(limit, total);
  scene::Image buffer = scene::Image::blank(scene::kImageSize, scene::kImageSize, scene::kChannels, 0.0);
  for (std::size_t i = 0; i < s.count; ++i) {
    binary_io::read_values(is, buffer.pixels);
    scene::Image pooled = scene::average_pool(buffer, pool);
    if (i == 0) {
      s.height = pooled.height;
      s.width = pooled.width;
      s.channels = pooled.channels;
      s.images.reserve(s.count * pooled.pixels.size());
    }
    s.images.insert(s.images.end(), pooled.pixels.begin(), pooled.pixels.end());
  }
  if (s.count < total) {
    is.seekg(static_cast<std::streamoff>((total - s.count) * buffer.pixels.size() * sizeof(double)), std::ios::cur);
  }
  const std::size_t n_c = m.concepts.size();
  const std::size_t n_p = m.params.size();
  auto head = [&](std::vector<double> v, std::size_t width) {
    v.resize(s.count * width);
    return v;
  };
  s.labels_raw = head(binary_io::read_array(is, {total, n_c}), n_c);
  s.labels = head(binary_io::read_array(is, {total, n_c}), n_c);
  s.params = head(binary_io::read_array(is, {total, n_p}), n_p);
  const auto ix = head(binary_io::read_array(is, {total}), 1);
  for (double v : ix) s.index.push_back(static_cast<std::size_t>(v));
  return s;
}

}  // namespace causalvae::dataset
