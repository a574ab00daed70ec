#include "causalvae/service.hpp"

#include <httplib.h>

#include <charconv>
#include <cmath>

#include "causalvae/codec.hpp"
#include "causalvae/scm.hpp"

namespace causalvae::service {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ad::Tensor;

namespace {

struct BadRequest : std::runtime_error {
  BadRequest(std::string field_name, const std::string& message)
      : std::runtime_error(message), field(std::move(field_name)) {}
  std::string field;
};

struct NotFound : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Response error(int status, const std::string& message, json extra = json::object()) {
  extra["error"] = message;
  return {status, extra};
}

std::string image_png_base64(const double* data, const vae::ModelConfig& c) {
  scene::Image im = scene::Image::blank(c.height, c.width, c.channels, 0.0);
  std::copy(data, data + c.image_size(), im.pixels.begin());
  return codec::base64_encode(codec::encode_png(im));
}

std::string tensor_png_base64(const Tensor& image, const vae::ModelConfig& c) {
  return image_png_base64(image.values().data(), c);
}

json latents_json(const Tensor& z) {
  const std::size_t n = z.dim(1), k = z.dim(2);
  json out = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    json row = json::array();
    for (std::size_t s = 0; s < k; ++s) row.push_back(z.at(i * k + s));
    out.push_back(row);
  }
  return out;
}

std::size_t parse_sample_index(const ServiceState& s, const json& v, const std::string& field) {
  if (!v.is_number_integer() || v.get<long long>() < 0) throw BadRequest(field, "must be a non-negative integer");
  const auto idx = v.get<std::size_t>();
  if (idx >= s.samples.count) {
    throw NotFound("sample " + std::to_string(idx) + " not found; the test split has " +
                   std::to_string(s.samples.count) + " samples");
  }
  return idx;
}

std::size_t parse_concept(const ServiceState& s, const json& body) {
  if (!body.contains("concept")) throw BadRequest("concept", "is required");
  const json& v = body.at("concept");
  const auto& names = s.manifest.concepts;
  if (v.is_string()) {
    const auto it = std::find(names.begin(), names.end(), v.get<std::string>());
    if (it == names.end()) throw BadRequest("concept", "unknown concept name '" + v.get<std::string>() + "'");
    return static_cast<std::size_t>(it - names.begin());
  }
  if (v.is_number_integer() && v.get<long long>() >= 0 && v.get<std::size_t>() < names.size()) {
    return v.get<std::size_t>();
  }
  throw BadRequest("concept", "must be a concept name or an index below " + std::to_string(names.size()));
}

std::vector<double> parse_value(const json& v, std::size_t k, const std::string& field) {
  std::vector<double> out;
  if (v.is_number()) {
    out.push_back(v.get<double>());
  } else if (v.is_array() && v.size() == k) {
    for (const auto& e : v) {
      if (!e.is_number()) throw BadRequest(field, "entries must be numbers");
      out.push_back(e.get<double>());
    }
  } else {
    throw BadRequest(field, "must be a number or an array of " + std::to_string(k) + " numbers");
  }
  for (double d : out) {
    if (!std::isfinite(d)) throw BadRequest(field, "must be finite");
  }
  return out;
}

json parse_body(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error& e) {
    throw BadRequest("body", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw BadRequest("body", "must be a JSON object");
  return j;
}

struct Input {
  Tensor x;  // [1, D]
  Tensor u;  // [1, n]
};

Input sample_input(const ServiceState& s, std::size_t idx) {
  const std::size_t d = s.samples.image_size();
  const std::size_t n = s.manifest.concepts.size();
  const auto x0 = s.samples.images.begin() + static_cast<std::ptrdiff_t>(idx * d);
  const auto u0 = s.samples.labels.begin() + static_cast<std::ptrdiff_t>(idx * n);
  return {Tensor::from({1, d}, std::vector<double>(x0, x0 + static_cast<std::ptrdiff_t>(d))),
          Tensor::from({1, n}, std::vector<double>(u0, u0 + static_cast<std::ptrdiff_t>(n)))};
}

// Request input: either a stored test sample or an uploaded PNG with raw labels.
Input request_input(const ServiceState& s, const json& body) {
  if (body.contains("sample_idx")) return sample_input(s, parse_sample_index(s, body.at("sample_idx"), "sample_idx"));
  if (!body.contains("image")) throw BadRequest("sample_idx", "either sample_idx or image is required");
  const vae::ModelConfig& c = s.model.config;
  if (!body.at("image").is_string()) throw BadRequest("image", "must be a base64 PNG string");
  scene::Image im;
  try {
    im = codec::decode_png(codec::base64_decode(body.at("image").get<std::string>()));
  } catch (const codec::CodecError& e) {
    throw BadRequest("image", e.what());
  }
  if (im.channels != c.channels) throw BadRequest("image", "expected " + std::to_string(c.channels) + " channels");
  if (im.height == c.height * c.pool && im.width == c.width * c.pool && c.pool > 1) {
    im = scene::average_pool(im, c.pool);
  }
  if (im.height != c.height || im.width != c.width) {
    throw BadRequest("image", "expected " + std::to_string(c.height) + "x" + std::to_string(c.width) + " or " +
                                  std::to_string(c.height * c.pool) + "x" + std::to_string(c.width * c.pool) +
                                  " pixels");
  }
  const std::size_t n = s.manifest.concepts.size();
  std::vector<double> raw(n, 0.0);
  if (body.contains("labels")) {
    const json& l = body.at("labels");
    if (!l.is_array() || l.size() != n) throw BadRequest("labels", "must be an array of " + std::to_string(n) + " numbers");
    for (std::size_t i = 0; i < n; ++i) {
      if (!l[i].is_number()) throw BadRequest("labels", "entries must be numbers");
      raw[i] = l[i].get<double>();
    }
    raw = s.manifest.normalize(raw);
  } else if (c.encoder_uses_labels()) {
    throw BadRequest("labels", "raw labels are required with an uploaded image for this model");
  }
  return {Tensor::from({1, c.image_size()}, std::move(im.pixels)), Tensor::from({1, n}, std::move(raw))};
}

intervention::DoRequest do_request(const ServiceState& s, const json& body) {
  intervention::DoRequest r;
  r.concept_index = parse_concept(s, body);
  if (body.contains("deterministic")) {
    if (!body.at("deterministic").is_boolean()) throw BadRequest("deterministic", "must be a boolean");
    r.deterministic = body.at("deterministic").get<bool>();
  }
  if (body.contains("seed")) {
    if (!body.at("seed").is_number_unsigned()) throw BadRequest("seed", "must be a non-negative integer");
    r.seed = body.at("seed").get<std::uint64_t>();
  }
  if (body.contains("variance_scale")) {
    if (!body.at("variance_scale").is_number() || body.at("variance_scale").get<double>() < 0.0) {
      throw BadRequest("variance_scale", "must be a non-negative number");
    }
    r.variance_scale = body.at("variance_scale").get<double>();
  }
  return r;
}

const intervention::PrunedGraph& require_graph(const ServiceState& s) {
  if (!s.graph) throw intervention::InterventionError("pruned causal graph has a directed cycle");
  return *s.graph;
}

// Maps exceptions to status codes in one place.
template <typename F>
Response guarded(F&& f) {
  try {
    return f();
  } catch (const BadRequest& e) {
    return error(400, e.what(), {{"field", e.field}});
  } catch (const NotFound& e) {
    return error(404, e.what());
  } catch (const intervention::InterventionError& e) {
    return error(500, e.what(), {{"code", "cyclic_graph"}});
  } catch (const ad::SingularMatrixError& e) {
    return error(500, e.what(), {{"code", "singular_matrix"}});
  } catch (const vae::NumericalError& e) {
    return error(500, e.what(), {{"code", "numerical"}});
  } catch (const std::exception& e) {
    return error(500, e.what(), {{"code", "internal"}});
  }
}

}  // namespace

ServiceState ServiceState::load(const fs::path& checkpoint_dir, const std::optional<fs::path>& dataset_dir,
                                std::optional<double> threshold) {
  ServiceState s;
  s.checkpoint_dir = checkpoint_dir;
  s.model = vae::load_checkpoint(checkpoint_dir, &s.checkpoint_extra);
  if (dataset_dir) {
    s.dataset_dir = *dataset_dir;
  } else {
    const json* path = nullptr;
    if (s.checkpoint_extra.contains("dataset") && s.checkpoint_extra.at("dataset").contains("path")) {
      path = &s.checkpoint_extra.at("dataset").at("path");
    }
    if (!path || !path->is_string()) throw dataset::IoError("checkpoint does not record a dataset; pass one explicitly");
    s.dataset_dir = path->get<std::string>();
  }
  s.prune_threshold = threshold.value_or(s.checkpoint_extra.value("prune_threshold", 0.3));
  s.manifest = dataset::read_manifest(s.dataset_dir);
  if (s.manifest.concepts.size() != s.model.config.n) {
    throw dataset::IoError("dataset has " + std::to_string(s.manifest.concepts.size()) +
                           " concepts but the checkpoint has " + std::to_string(s.model.config.n));
  }
  s.samples = dataset::load_split(s.dataset_dir, "test", s.model.config.pool);
  try {
    s.graph = intervention::prune_graph(s.model, s.prune_threshold);
  } catch (const intervention::InterventionError&) {
    s.graph.reset();
  }
  return s;
}

Response handle_health(const ServiceState& s) {
  return {200,
          {{"status", "ok"},
           {"variant", vae::to_string(s.model.config.variant)},
           {"kind", scene::to_string(s.manifest.kind)},
           {"samples", s.samples.count},
           {"acyclic", s.graph.has_value()}}};
}

Response handle_concepts(const ServiceState& s) {
  json concepts = json::array();
  for (std::size_t i = 0; i < s.manifest.concepts.size(); ++i) {
    concepts.push_back({{"index", i},
                        {"name", s.manifest.concepts[i]},
                        {"range", {{"min", s.manifest.label_min.at(i)}, {"max", s.manifest.label_max.at(i)}}}});
  }
  json edges = json::array();
  for (const auto& e : scm::pruned_edges(s.model.effective_adjacency().detach(), s.prune_threshold)) {
    edges.push_back({{"from", s.manifest.concepts.at(e.from)},
                     {"to", s.manifest.concepts.at(e.to)},
                     {"from_index", e.from},
                     {"to_index", e.to},
                     {"weight", e.weight}});
  }
  return {200,
          {{"kind", scene::to_string(s.manifest.kind)},
           {"concepts", concepts},
           {"edges", edges},
           {"prune_threshold", s.prune_threshold},
           {"acyclic", s.graph.has_value()}}};
}

Response handle_sample(const ServiceState& s, const std::string& index_text) {
  return guarded([&] {
    std::size_t idx = 0;
    const auto [ptr, ec] = std::from_chars(index_text.data(), index_text.data() + index_text.size(), idx);
    if (ec != std::errc() || ptr != index_text.data() + index_text.size()) {
      throw BadRequest("idx", "sample index must be a non-negative integer");
    }
    const std::size_t sample = parse_sample_index(s, json(idx), "idx");
    const Input in = sample_input(s, sample);
    ad::NoGradGuard guard;
    const Tensor z = intervention::infer_latents(s.model, in.x, in.u, intervention::DoRequest{});
    const Tensor recon = vae::decode(s.model, z);
    const std::size_t n = s.manifest.concepts.size();
    const auto raw = s.samples.labels_raw.begin() + static_cast<std::ptrdiff_t>(sample * n);
    const auto norm = s.samples.labels.begin() + static_cast<std::ptrdiff_t>(sample * n);
    return Response{200,
                    {{"sample_idx", sample},
                     {"generation_index", s.samples.index.at(sample)},
                     {"image", image_png_base64(in.x.values().data(), s.model.config)},
                     {"reconstruction", tensor_png_base64(recon, s.model.config)},
                     {"labels", std::vector<double>(raw, raw + static_cast<std::ptrdiff_t>(n))},
                     {"labels_normalized", std::vector<double>(norm, norm + static_cast<std::ptrdiff_t>(n))},
                     {"latents", latents_json(z)}}};
  });
}

Response handle_intervene(const ServiceState& s, const std::string& body_text) {
  return guarded([&] {
    const json body = parse_body(body_text);
    const Input in = request_input(s, body);
    intervention::DoRequest req = do_request(s, body);
    if (!body.contains("value")) throw BadRequest("value", "is required");
    req.value = parse_value(body.at("value"), s.model.config.k, "value");
    const auto& graph = require_graph(s);
    ad::NoGradGuard guard;
    const Tensor z_before = intervention::infer_latents(s.model, in.x, in.u, req);
    const Tensor z_after = intervention::apply_do(s.model, graph, z_before, req.concept_index, req.value);
    json changed = json::array();
    const std::size_t k = s.model.config.k;
    for (std::size_t i = 0; i < s.model.config.n; ++i) {
      for (std::size_t q = 0; q < k; ++q) {
        if (z_after.at(i * k + q) != z_before.at(i * k + q)) {
          changed.push_back(s.manifest.concepts[i]);
          break;
        }
      }
    }
    return Response{200,
                    {{"concept", s.manifest.concepts[req.concept_index]},
                     {"image", tensor_png_base64(vae::decode(s.model, z_after), s.model.config)},
                     {"reconstruction", tensor_png_base64(vae::decode(s.model, z_before), s.model.config)},
                     {"z_before", latents_json(z_before)},
                     {"z_after", latents_json(z_after)},
                     {"changed", changed},
                     {"deterministic", req.deterministic},
                     {"propagation", "topological pass over descendants, residuals kept"}}};
  });
}

Response handle_traverse(const ServiceState& s, const std::string& body_text) {
  return guarded([&] {
    const json body = parse_body(body_text);
    const Input in = request_input(s, body);
    const intervention::DoRequest req = do_request(s, body);
    if (!body.contains("values") || !body.at("values").is_array()) {
      throw BadRequest("values", "must be an array");
    }
    std::vector<std::vector<double>> values;
    for (const auto& v : body.at("values")) values.push_back(parse_value(v, s.model.config.k, "values"));
    const auto& graph = require_graph(s);
    ad::NoGradGuard guard;
    const Tensor z = intervention::infer_latents(s.model, in.x, in.u, req);
    json images = json::array();
    std::vector<scene::Image> frames;
    const vae::ModelConfig& c = s.model.config;
    for (const auto& v : values) {
      const Tensor im = vae::decode(s.model, intervention::apply_do(s.model, graph, z, req.concept_index, v));
      images.push_back(tensor_png_base64(im, c));
      frames.push_back(scene::Image::blank(c.height, c.width, c.channels, 0.0));
      std::copy(im.values().begin(), im.values().end(), frames.back().pixels.begin());
    }
    json out{{"concept", s.manifest.concepts[req.concept_index]}, {"images", images}};
    out["strip"] = frames.empty() ? json(nullptr)
                                  : json(codec::base64_encode(codec::encode_png(codec::horizontal_strip(frames))));
    return Response{200, out};
  });
}

struct Server::Impl {
  explicit Impl(const ServiceState& s) : state(s) {}
  const ServiceState& state;
  httplib::Server http;
};

namespace {

void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

}  // namespace

Server::Server(const ServiceState& state) : impl_(std::make_unique<Impl>(state)) {
  auto& http = impl_->http;
  const ServiceState& s = impl_->state;
  http.Get("/health", [&s](const httplib::Request&, httplib::Response& res) { reply(res, handle_health(s)); });
  http.Get("/concepts", [&s](const httplib::Request&, httplib::Response& res) { reply(res, handle_concepts(s)); });
  http.Get(R"(/sample/([^/]+))", [&s](const httplib::Request& req, httplib::Response& res) {
    reply(res, handle_sample(s, req.matches[1]));
  });
  http.Post("/intervene", [&s](const httplib::Request& req, httplib::Response& res) {
    reply(res, handle_intervene(s, req.body));
  });
  http.Post("/traverse", [&s](const httplib::Request& req, httplib::Response& res) {
    reply(res, handle_traverse(s, req.body));
  });
  http.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "unknown error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    reply(res, error(500, what, {{"code", "internal"}}));
  });
}

Server::~Server() = default;

int Server::bind_to_any_port(const std::string& host) { return impl_->http.bind_to_any_port(host); }
bool Server::bind(const std::string& host, int port) { return impl_->http.bind_to_port(host, port); }
bool Server::listen_after_bind() { return impl_->http.listen_after_bind(); }
void Server::stop() { impl_->http.stop(); }
void Server::wait_until_ready() const { impl_->http.wait_until_ready(); }

}  // namespace causalvae::service
