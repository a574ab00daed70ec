#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "causalvae/dataset.hpp"
#include "causalvae/intervention.hpp"
#include "causalvae/vae.hpp"

namespace causalvae::service {

// Everything a request may read. Built once and never modified afterwards,
// so handlers can run concurrently against one instance.
struct ServiceState {
  std::filesystem::path checkpoint_dir;
  std::filesystem::path dataset_dir;
  vae::Model model;
  nlohmann::json checkpoint_extra;
  dataset::Manifest manifest;
  dataset::Split samples;  // test split at the model's resolution
  double prune_threshold = 0.3;
  std::optional<intervention::PrunedGraph> graph;  // empty when the pruned graph is cyclic

  // dataset_dir and threshold default to the values recorded in the checkpoint.
  static ServiceState load(const std::filesystem::path& checkpoint_dir,
                           const std::optional<std::filesystem::path>& dataset_dir = std::nullopt,
                           std::optional<double> threshold = std::nullopt);
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

Response handle_health(const ServiceState& state);
Response handle_concepts(const ServiceState& state);
Response handle_sample(const ServiceState& state, const std::string& index_text);
Response handle_intervene(const ServiceState& state, const std::string& body);
Response handle_traverse(const ServiceState& state, const std::string& body);

class Server {
 public:
  explicit Server(const ServiceState& state);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds to a free port and returns it.
  int bind_to_any_port(const std::string& host);
  bool bind(const std::string& host, int port);
  // Blocks until stop() is called.
  bool listen_after_bind();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace causalvae::service
