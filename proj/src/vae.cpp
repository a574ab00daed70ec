#include "causalvae/vae.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "causalvae/binary_io.hpp"
#include "causalvae/rng.hpp"

namespace causalvae::vae {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ad::Shape;

namespace {

constexpr std::uint64_t kEncoderStream = 1;
constexpr std::uint64_t kMaskStream = 2;
constexpr std::uint64_t kDecoderStream = 16;

void require(bool ok, const std::string& what) {
  if (!ok) throw ad::ShapeError(what);
}

}  // namespace

std::string to_string(PriorMode mode) { return mode == PriorMode::unit ? "unit" : "abs_u"; }

PriorMode parse_prior_mode(const std::string& name) {
  if (name == "unit") return PriorMode::unit;
  if (name == "abs_u") return PriorMode::abs_u;
  throw std::invalid_argument("unknown prior mode '" + name + "' (expected unit or abs_u)");
}

std::string to_string(Variant variant) { return variant == Variant::supervised ? "supervised" : "unsup"; }

Variant parse_variant(const std::string& name) {
  if (name == "supervised") return Variant::supervised;
  if (name == "unsup") return Variant::unsup;
  throw std::invalid_argument("unknown model variant '" + name + "'");
}

ModelConfig ModelConfig::appendix() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.pool = 4;
  c.height = 24;
  c.width = 24;
  c.encoder_hidden = {256, 128};
  c.decoder_hidden = {64, 64, 256};
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.pool = 24;
  c.height = 4;
  c.width = 4;
  c.encoder_hidden = {8};
  c.decoder_hidden = {6};
  c.mask_hidden = 4;
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "appendix") return appendix();
  if (name == "desk") return desk();
  if (name == "tiny") return tiny();
  throw std::invalid_argument("unknown model preset '" + name + "' (expected appendix, desk or tiny)");
}

json ModelConfig::to_json() const {
  return {{"n", n},
          {"k", k},
          {"pool", pool},
          {"height", height},
          {"width", width},
          {"channels", channels},
          {"encoder_hidden", encoder_hidden},
          {"decoder_hidden", decoder_hidden},
          {"mask_hidden", mask_hidden},
          {"variant", vae::to_string(variant)},
          {"prior_mode", vae::to_string(prior_mode)},
          {"prior_floor", prior_floor},
          {"sigma_xi", sigma_xi},
          {"adjacency_init", adjacency_init}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.n = j.at("n").get<std::size_t>();
  c.k = j.at("k").get<std::size_t>();
  c.pool = j.at("pool").get<std::size_t>();
  c.height = j.at("height").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.encoder_hidden = j.at("encoder_hidden").get<std::vector<std::size_t>>();
  c.decoder_hidden = j.at("decoder_hidden").get<std::vector<std::size_t>>();
  c.mask_hidden = j.at("mask_hidden").get<std::size_t>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.prior_mode = parse_prior_mode(j.at("prior_mode").get<std::string>());
  c.prior_floor = j.at("prior_floor").get<double>();
  c.sigma_xi = j.at("sigma_xi").get<double>();
  c.adjacency_init = j.at("adjacency_init").get<double>();
  return c;
}

Mlp Mlp::init(const std::vector<std::size_t>& widths, std::mt19937_64& rng, double last_gain) {
  Mlp m;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t in = widths[l];
    const std::size_t out = widths[l + 1];
    const double gain = (l + 2 == widths.size()) ? last_gain : 1.0;
    std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(in)));
    std::vector<double> w(in * out);
    for (double& v : w) v = dist(rng);
    m.layers.push_back({Tensor::parameter({in, out}, std::move(w)), Tensor::parameter({out}, std::vector<double>(out))});
  }
  return m;
}

Tensor Mlp::forward(const Tensor& x) const {
  Tensor h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    h = ad::add(ad::matmul(h, layers[l].w), layers[l].b);
    if (l + 1 < layers.size()) h = ad::elu(h);
  }
  return h;
}

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  if (config.n < 1 || config.k < 1) throw std::invalid_argument("model needs n >= 1 and k >= 1");
  if (config.height * config.pool != 96 || config.width * config.pool != 96) {
    throw std::invalid_argument("model resolution does not match 96x96 inputs at pool " + std::to_string(config.pool));
  }
  Model m;
  m.config = config;
  const std::size_t n = config.n;
  const std::size_t k = config.k;

  std::vector<std::size_t> enc{config.image_size() + (config.encoder_uses_labels() ? n : 0)};
  enc.insert(enc.end(), config.encoder_hidden.begin(), config.encoder_hidden.end());
  enc.push_back(2 * n * k);
  std::mt19937_64 enc_rng = stream_rng(seed, kEncoderStream);
  m.encoder = Mlp::init(enc, enc_rng, 0.1);

  std::vector<std::size_t> dec{k};
  dec.insert(dec.end(), config.decoder_hidden.begin(), config.decoder_hidden.end());
  dec.push_back(config.image_size());
  for (std::size_t i = 0; i < n; ++i) {
    std::mt19937_64 rng = stream_rng(seed, kDecoderStream + i);
    m.decoder.push_back(Mlp::init(dec, rng, 1.0 / std::sqrt(static_cast<double>(n))));
  }

  std::vector<double> a(n * n, config.adjacency_init);
  for (std::size_t i = 0; i < n; ++i) a[i * n + i] = 0.0;
  m.adjacency = Tensor::parameter({n, n}, std::move(a));
  std::mt19937_64 mask_rng = stream_rng(seed, kMaskStream);
  m.mask = scm::MaskParams::init(n, k, std::max(config.mask_hidden, k), mask_rng);
  return m;
}

Tensor Model::effective_adjacency() const {
  const std::size_t n = config.n;
  std::vector<double> off(n * n, 1.0);
  for (std::size_t i = 0; i < n; ++i) off[i * n + i] = 0.0;
  return ad::mul(adjacency, Tensor::from({n, n}, std::move(off)));
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : encoder.layers) {
    out.push_back(l.w);
    out.push_back(l.b);
  }
  for (const auto& branch : decoder) {
    for (const auto& l : branch.layers) {
      out.push_back(l.w);
      out.push_back(l.b);
    }
  }
  out.push_back(adjacency);
  for (const auto& t : mask.parameters()) out.push_back(t);
  return out;
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < encoder.layers.size(); ++l) {
    out.push_back("encoder." + std::to_string(l) + ".w");
    out.push_back("encoder." + std::to_string(l) + ".b");
  }
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    for (std::size_t l = 0; l < decoder[i].layers.size(); ++l) {
      const std::string p = "decoder." + std::to_string(i) + "." + std::to_string(l);
      out.push_back(p + ".w");
      out.push_back(p + ".b");
    }
  }
  out.push_back("adjacency");
  for (std::size_t i = 0; i < mask.n; ++i) {
    for (const char* s : {"w1", "b1", "w2", "b2"}) out.push_back("mask." + std::to_string(i) + "." + s);
  }
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& t : parameters()) total += t.size();
  return total;
}

Model Model::with_parameters(const std::vector<Tensor>& params) const {
  if (params.size() != parameters().size()) throw std::invalid_argument("with_parameters: wrong parameter count");
  Model m = *this;
  std::size_t p = 0;
  for (auto& l : m.encoder.layers) {
    l.w = params[p++];
    l.b = params[p++];
  }
  for (auto& branch : m.decoder) {
    for (auto& l : branch.layers) {
      l.w = params[p++];
      l.b = params[p++];
    }
  }
  m.adjacency = params[p++];
  for (std::size_t i = 0; i < m.mask.n; ++i) {
    m.mask.w1[i] = params[p++];
    m.mask.b1[i] = params[p++];
    m.mask.w2[i] = params[p++];
    m.mask.b2[i] = params[p++];
  }
  return m;
}

Encoding encode(const Model& model, const Tensor& x, const Tensor& u) {
  const ModelConfig& c = model.config;
  require(x.rank() == 2 && x.dim(1) == c.image_size(),
          "encode: x " + ad::to_string(x.shape()) + " expected [B," + std::to_string(c.image_size()) + "]");
  const std::size_t b = x.dim(0);
  Tensor input = x;
  if (c.encoder_uses_labels()) {
    require(u.defined() && u.rank() == 2 && u.dim(0) == b && u.dim(1) == c.n,
            "encode: labels must be [B," + std::to_string(c.n) + "]");
    input = ad::concat({x, u}, 1);
  }
  Tensor out = model.encoder.forward(input);
  const std::size_t nk = c.n * c.k;
  for (double v : out.values()) {
    if (!std::isfinite(v)) throw NumericalError("encode: non-finite activation");
  }
  return {ad::reshape(ad::slice(out, 1, 0, nk), {b, c.n, c.k}), ad::reshape(ad::slice(out, 1, nk, 2 * nk), {b, c.n, c.k})};
}

Tensor reparameterize(const Tensor& mu, const Tensor& logvar, std::mt19937_64& rng) {
  require(mu.shape() == logvar.shape(), "reparameterize: mu " + ad::to_string(mu.shape()) + " vs logvar " +
                                            ad::to_string(logvar.shape()));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> noise(mu.size());
  for (double& v : noise) v = normal(rng);
  return ad::add(mu, ad::mul(ad::exp(ad::scale(logvar, 0.5)), Tensor::from(mu.shape(), std::move(noise))));
}

Tensor decode(const Model& model, const Tensor& z) {
  const ModelConfig& c = model.config;
  require(z.rank() == 3 && z.dim(1) == c.n && z.dim(2) == c.k,
          "decode: z " + ad::to_string(z.shape()) + " expected [B," + std::to_string(c.n) + "," + std::to_string(c.k) + "]");
  Tensor logits;
  for (std::size_t i = 0; i < c.n; ++i) {
    Tensor part = model.decoder[i].forward(ad::select(z, 1, i));
    logits = logits.defined() ? ad::add(logits, part) : part;
  }
  return ad::sigmoid(logits);
}

Tensor kl_eps(const Tensor& mu, const Tensor& logvar) {
  require(mu.shape() == logvar.shape() && mu.rank() >= 1, "kl_eps: shape mismatch");
  Tensor terms = ad::sub(ad::add(ad::exp(logvar), ad::square(mu)), ad::add_scalar(logvar, 1.0));
  return ad::scale(ad::sum(terms), 0.5 / static_cast<double>(mu.dim(0)));
}

Tensor prior_variance(const Tensor& u, PriorMode mode, double floor) {
  if (mode == PriorMode::unit) return Tensor::full(u.shape(), 1.0);
  if (!(floor > 0.0)) throw std::invalid_argument("prior variance floor must be positive");
  return ad::add_scalar(ad::abs(u), floor);
}

Tensor kl_z(const Tensor& mu, const Tensor& logvar, const Tensor& adjacency, const Tensor& u, PriorMode mode,
            double floor) {
  require(mu.shape() == logvar.shape() && mu.rank() == 3, "kl_z: mu/logvar must share a [B,n,k] shape");
  const std::size_t b = mu.dim(0);
  const std::size_t n = mu.dim(1);
  const std::size_t k = mu.dim(2);
  require(adjacency.rank() == 2 && adjacency.dim(0) == n && adjacency.dim(1) == n, "kl_z: adjacency does not match n");
  require(u.rank() == 2 && u.dim(0) == b && u.dim(1) == n, "kl_z: labels must be [B,n]");

  // q(z) per sub-dimension: N(C mu, C diag(sigma^2) C^T) with C = (I - A^T)^-1
  Tensor i_minus_at = ad::sub(Tensor::eye(n), ad::transpose(adjacency));
  Tensor c = scm::causal_matrix(adjacency);
  Tensor mean = ad::matmul(c, mu);
  Tensor cov_diag = ad::matmul(ad::square(c), ad::exp(logvar));
  Tensor log_det_ima = ad::log_abs_det(i_minus_at);

  Tensor v = ad::reshape(prior_variance(u, mode, floor), {b, n, 1});
  Tensor pm = ad::reshape(u, {b, n, 1});
  Tensor quad = ad::div(ad::add(cov_diag, ad::square(ad::sub(mean, pm))), v);
  Tensor elementwise = ad::sub(ad::add(quad, ad::log(v)), ad::add_scalar(logvar, 1.0));
  Tensor total = ad::add(ad::scale(ad::sum(elementwise), 1.0 / static_cast<double>(b)),
                         ad::scale(log_det_ima, 2.0 * static_cast<double>(k)));
  Tensor out = ad::scale(total, 0.5);
  if (!std::isfinite(out.item())) {
    std::ostringstream os;
    os << "kl_z: covariance of q(z) is not numerically positive definite (log|det(I - A^T)| = "
       << log_det_ima.item() << ")";
    throw NumericalError(os.str());
  }
  return out;
}

Tensor reconstruction_log_likelihood(const Tensor& x, const Tensor& x_hat, double sigma_xi) {
  require(x.shape() == x_hat.shape() && x.rank() == 2, "reconstruction: shape mismatch " + ad::to_string(x.shape()) +
                                                           " vs " + ad::to_string(x_hat.shape()));
  const double scale = -1.0 / (2.0 * sigma_xi * sigma_xi * static_cast<double>(x.dim(0)));
  return ad::scale(ad::sum(ad::square(ad::sub(x, x_hat))), scale);
}

ElboResult elbo(const Model& model, const Tensor& x, const Tensor& u, std::mt19937_64& rng) {
  ElboResult r;
  r.encoding = encode(model, x, u);
  Tensor a = model.effective_adjacency();
  r.eps = reparameterize(r.encoding.mu, r.encoding.logvar, rng);
  r.z = scm::causal_layer(r.eps, a);
  r.x_hat = decode(model, r.z);
  r.recon = reconstruction_log_likelihood(x, r.x_hat, model.config.sigma_xi);
  r.kl_eps = kl_eps(r.encoding.mu, r.encoding.logvar);
  r.elbo = ad::sub(r.recon, r.kl_eps);
  if (model.config.variant == Variant::supervised) {
    r.kl_z = kl_z(r.encoding.mu, r.encoding.logvar, a, u, model.config.prior_mode, model.config.prior_floor);
    r.elbo = ad::sub(r.elbo, r.kl_z);
  }
  return r;
}

void save_checkpoint(const Model& model, const fs::path& dir, const json& extra) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw CheckpointError("cannot create checkpoint directory " + dir.string());
  const auto params = model.parameters();
  const auto names = model.parameter_names();
  json shapes = json::array();
  // Write to temporaries first so an interrupted save never leaves a torn checkpoint.
  {
    std::ofstream os(dir / "params.bin.tmp", std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + (dir / "params.bin").string());
    for (std::size_t i = 0; i < params.size(); ++i) {
      std::vector<std::uint64_t> dims(params[i].shape().begin(), params[i].shape().end());
      binary_io::write_array(os, dims, params[i].values());
      shapes.push_back({{"name", names[i]}, {"shape", params[i].shape()}});
    }
    if (!os.flush()) throw CheckpointError("write failed for params.bin");
  }
  json j;
  j["format_version"] = 1;
  j["variant"] = to_string(model.config.variant);
  j["model"] = model.config.to_json();
  j["parameters"] = shapes;
  j["extra"] = extra;
  {
    std::ofstream ms(dir / "manifest.json.tmp", std::ios::trunc);
    ms << j.dump(2) << "\n";
    if (!ms.flush()) throw CheckpointError("write failed for manifest.json");
  }
  fs::rename(dir / "params.bin.tmp", dir / "params.bin");
  fs::rename(dir / "manifest.json.tmp", dir / "manifest.json");
}

Model load_checkpoint(const fs::path& dir, json* extra) {
  std::ifstream ms(dir / "manifest.json");
  if (!ms) throw CheckpointError("no checkpoint manifest in " + dir.string());
  json j;
  try {
    ms >> j;
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (j.value("format_version", 0) != 1) throw CheckpointError("unsupported checkpoint format version");
  Model model = Model::init(ModelConfig::from_json(j.at("model")), 0);
  auto params = model.parameters();
  const auto names = model.parameter_names();
  const auto& listed = j.at("parameters");
  if (listed.size() != params.size()) throw CheckpointError("checkpoint parameter count does not match the model");
  std::ifstream is(dir / "params.bin", std::ios::binary);
  if (!is) throw CheckpointError("missing params.bin in " + dir.string());
  try {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (listed[i].at("name").get<std::string>() != names[i]) throw CheckpointError("parameter order mismatch");
      std::vector<std::uint64_t> dims(params[i].shape().begin(), params[i].shape().end());
      const auto values = binary_io::read_array(is, dims);
      auto dst = params[i].mutable_values();
      std::copy(values.begin(), values.end(), dst.begin());
    }
  } catch (const binary_io::FormatError& e) {
    throw CheckpointError(std::string("corrupt params.bin: ") + e.what());
  }
  if (extra != nullptr) *extra = j.value("extra", json::object());
  return model;
}

}  // namespace causalvae::vae
