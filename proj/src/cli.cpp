#include "causalvae/cli.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "causalvae/codec.hpp"
#include "causalvae/dataset.hpp"
#include "causalvae/evaluation.hpp"
#include "causalvae/scm.hpp"
#include "causalvae/service.hpp"
#include "causalvae/trainer.hpp"

#ifndef CAUSALVAE_VERSION
#define CAUSALVAE_VERSION "unknown"
#endif

namespace causalvae::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

json versions() {
  return {{"causalvae", CAUSALVAE_VERSION},
          {"compiler", __VERSION__},
          {"cplusplus", __cplusplus},
          {"nlohmann_json",
           std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
               std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"cli11", CLI11_VERSION},
          {"cpp_httplib", CPPHTTPLIB_VERSION}};
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw dataset::IoError("cannot write " + path.string());
  os << j.dump(2) << "\n";
  if (!os.flush()) throw dataset::IoError("write failed for " + path.string());
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os || !os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw dataset::IoError("cannot write " + path.string());
  }
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw UsageError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file " + path + " must hold a JSON object");
  return j;
}

std::vector<double> parse_split(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw UsageError("--split must look like 6:1");
  double a = 0.0, b = 0.0;
  try {
    a = std::stod(text.substr(0, colon));
    b = std::stod(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw UsageError("--split must look like 6:1");
  }
  if (!(a > 0.0) || !(b > 0.0)) throw UsageError("--split parts must be positive");
  return {a / (a + b), b / (a + b)};
}

json concept_json(const std::string& text) {
  if (!text.empty() && std::all_of(text.begin(), text.end(), [](char c) { return std::isdigit(c); })) {
    return std::stoul(text);
  }
  return text;
}

json value_json(const std::vector<double>& v) { return v.size() == 1 ? json(v[0]) : json(v); }

// Base64 PNG from a service response to a file.
void save_png(const fs::path& path, const json& b64) { write_file(path, codec::base64_decode(b64.get<std::string>())); }

int status_to_exit(int status) { return status == 400 || status == 404 ? kExitUsage : kExitFailure; }

}  // namespace

int run(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Causal disentangled VAE: data generation, training, evaluation and interventions", "causalvae"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  std::string config_path;
  std::string out_path;
  auto* seed_opt = app.add_option("--seed", seed, "Random seed");
  app.add_option("--config", config_path, "JSON file with default option values")->check(CLI::ExistingFile);
  app.add_option("--out", out_path, "Output directory or file");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  std::string kind = "pendulum";
  std::size_t n = 7000;
  std::string split = "6:1";
  gen->add_option("--kind", kind, "Scene kind")->check(CLI::IsMember({"pendulum", "flow"}));
  gen->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--split", split, "train:test ratio");

  // shared model/data options
  std::string dataset_dir;
  std::string checkpoint_dir;
  double threshold = 0.3;
  auto add_dataset = [&](CLI::App* sub) { return sub->add_option("--dataset", dataset_dir, "Dataset directory")->check(CLI::ExistingDirectory); };
  auto add_checkpoint = [&](CLI::App* sub) {
    return sub->add_option("--checkpoint", checkpoint_dir, "Checkpoint directory")->check(CLI::ExistingDirectory)->required();
  };
  auto add_threshold = [&](CLI::App* sub) { return sub->add_option("--threshold", threshold, "Edge pruning threshold"); };

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "Learn the causal graph from labels alone");
  std::size_t pretrain_rounds = 200;
  add_dataset(pretrain);
  add_threshold(pretrain);
  pretrain->add_option("--pretrain-epochs", pretrain_rounds, "Augmented Lagrangian rounds")->check(CLI::PositiveNumber);

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  trainer::TrainConfig tc;
  add_dataset(train);
  auto* o_alpha = train->add_option("--alpha", tc.alpha, "Weight of the DAG constraint");
  auto* o_beta = train->add_option("--beta", tc.beta, "Weight of the label constraint");
  auto* o_gamma = train->add_option("--gamma", tc.gamma, "Weight of the mask constraint");
  auto* o_epochs = train->add_option("--epochs", tc.epochs, "Training epochs");
  auto* o_pre = train->add_option("--pretrain-epochs", tc.pretrain_epochs, "Graph pretraining rounds");
  auto* o_batch = train->add_option("--batch", tc.batch, "Batch size");
  auto* o_lr = train->add_option("--lr", tc.lr, "Adam learning rate");
  auto* o_unsup = train->add_flag("--unsup", tc.unsup, "Train the unsupervised ablation");
  auto* o_preset = train->add_option("--preset", tc.model_preset, "Model preset")->check(CLI::IsMember({"appendix", "desk", "tiny"}));
  auto* o_limit = train->add_option("--train-limit", tc.train_limit, "Use only the first N training images");
  std::string prior = "abs_u";
  auto* o_prior = train->add_option("--prior", prior, "Prior variance mode")->check(CLI::IsMember({"abs_u", "unit"}));
  auto* o_thr = add_threshold(train);

  // eval
  auto* eval = app.add_subcommand("eval", "Alignment metrics and graph distance");
  std::string eval_split = "test";
  std::string scatter;
  add_checkpoint(eval);
  add_dataset(eval);
  auto* eval_thr = add_threshold(eval);
  eval->add_option("--split", eval_split, "Split to score")->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--scatter", scatter, "Write (concept, u, z) rows to this file");

  // intervene / traverse
  auto* intervene = app.add_subcommand("intervene", "Counterfactual image under do(z_i := v)");
  auto* traverse = app.add_subcommand("traverse", "Image strip over a sweep of intervention values");
  std::size_t sample = 0;
  std::string concept_text;
  std::vector<double> values;
  bool stochastic = false;
  double variance_scale = 0.1;
  CLI::Option* do_thr[2];
  int i = 0;
  for (auto* sub : {intervene, traverse}) {
    add_checkpoint(sub);
    add_dataset(sub);
    do_thr[i++] = add_threshold(sub);
    sub->add_option("--sample", sample, "Test-split sample index");
    sub->add_option("--concept", concept_text, "Concept name or index")->required();
    sub->add_flag("--stochastic", stochastic, "Sample the latent instead of using the mean");
    sub->add_option("--variance-scale", variance_scale, "Variance factor in stochastic mode");
  }
  intervene->add_option("--value", values, "Scalar or k comma-separated values")->delimiter(',')->required();
  traverse->add_option("--values", values, "Comma-separated sweep values")->delimiter(',')->required();

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP service for interventions");
  int port = 8080;
  std::string host = "127.0.0.1";
  add_checkpoint(serve);
  add_dataset(serve);
  auto* serve_thr = add_threshold(serve);
  serve->add_option("--port", port, "TCP port")->check(CLI::Range(1, 65535));
  serve->add_option("--host", host, "Bind address");

  std::vector<const char*> raw;
  raw.reserve(argv.size());
  for (const auto& a : argv) raw.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(raw.size()), raw.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  const std::string started = utc_now();
  fs::path manifest_dir;
  json effective;

  auto finish = [&](int code) {
    if (!manifest_dir.empty()) {
      json m{{"command", command},
             {"argv", argv},
             {"seed", seed},
             {"config", effective},
             {"versions", versions()},
             {"started_at", started},
             {"finished_at", utc_now()},
             {"exit_code", code}};
      try {
        write_json(manifest_dir / "run_manifest.json", m);
      } catch (const std::exception& e) {
        err << "warning: " << e.what() << "\n";
      }
    }
    return code;
  };

  auto optional_threshold = [&](CLI::Option* o) { return o->count() ? std::optional<double>(threshold) : std::nullopt; };
  auto optional_dataset = [&]() {
    return dataset_dir.empty() ? std::nullopt : std::optional<fs::path>(dataset_dir);
  };

  try {
    const json config = load_config(config_path);
    if (!seed_opt->count() && config.contains("seed")) seed = config.at("seed").get<std::uint64_t>();
    if (out_path.empty() && config.contains("out")) out_path = config.at("out").get<std::string>();
    if (dataset_dir.empty() && config.contains("dataset")) dataset_dir = config.at("dataset").get<std::string>();

    if (command == "gen") {
      if (out_path.empty()) throw UsageError("gen needs --out");
      const auto fractions = parse_split(split);
      effective = {{"kind", kind}, {"n", n}, {"split", split}, {"seed", seed}, {"out", out_path}};
      manifest_dir = out_path;
      const auto m = dataset::generate_dataset(scene::parse_kind(kind), n, seed, fractions, out_path);
      out << json{{"kind", kind}, {"n", n}, {"n_train", m.n_train}, {"n_test", m.n_test}, {"out", out_path}}.dump()
          << "\n";
      return finish(kExitOk);
    }

    if (command == "pretrain") {
      if (dataset_dir.empty()) throw UsageError("pretrain needs --dataset");
      const auto manifest = dataset::read_manifest(dataset_dir);
      // only the labels are needed, so pool each image down to a single pixel
      const auto data = dataset::load_split(dataset_dir, "train", 96);
      trainer::PretrainConfig pc;
      pc.max_rounds = pretrain_rounds;
      pc.throw_on_failure = false;
      effective = {{"dataset", dataset_dir}, {"rounds", pretrain_rounds}, {"threshold", threshold}};
      if (!out_path.empty()) manifest_dir = out_path;
      const auto r = trainer::pretrain_graph(data.labels, manifest.concepts.size(), pc);
      const std::size_t nc = manifest.concepts.size();
      const ad::Tensor a = ad::Tensor::from({nc, nc}, r.adjacency);
      json edges = json::array();
      for (const auto& e : scm::pruned_edges(a, threshold)) {
        edges.push_back({{"from", manifest.concepts[e.from]}, {"to", manifest.concepts[e.to]}, {"weight", e.weight}});
      }
      json rounds = json::array();
      for (const auto& rd : r.rounds) rounds.push_back({{"round", rd.round}, {"h", rd.h}, {"l_u", rd.l_u}, {"lambda", rd.lambda}, {"c", rd.c}});
      const json report{{"converged", r.converged},
                        {"adjacency", r.adjacency},
                        {"edges", edges},
                        {"shd", evaluation::graph_shd(a, manifest.true_graph, threshold)},
                        {"rounds", rounds}};
      if (!out_path.empty()) write_json(fs::path(out_path) / "pretrain.json", report);
      out << report.dump() << "\n";
      if (!r.converged) {
        err << "error: H(A) = " << (r.rounds.empty() ? 0.0 : r.rounds.back().h) << " still above tolerance after "
            << r.rounds.size() << " rounds\n";
        return finish(kExitFailure);
      }
      return finish(kExitOk);
    }

    if (command == "train") {
      trainer::TrainConfig cfg = config.contains("train") ? trainer::TrainConfig::from_json(config.at("train")) : tc;
      if (o_alpha->count()) cfg.alpha = tc.alpha;
      if (o_beta->count()) cfg.beta = tc.beta;
      if (o_gamma->count()) cfg.gamma = tc.gamma;
      if (o_epochs->count()) cfg.epochs = tc.epochs;
      if (o_pre->count()) cfg.pretrain_epochs = tc.pretrain_epochs;
      if (o_batch->count()) cfg.batch = tc.batch;
      if (o_lr->count()) cfg.lr = tc.lr;
      if (o_unsup->count()) cfg.unsup = tc.unsup;
      if (o_preset->count()) cfg.model_preset = tc.model_preset;
      if (o_limit->count()) cfg.train_limit = tc.train_limit;
      if (o_prior->count()) cfg.prior_mode = vae::parse_prior_mode(prior);
      if (o_thr->count()) cfg.prune_threshold = threshold;
      if (seed_opt->count() || config.contains("seed")) cfg.seed = seed;
      if (dataset_dir.empty()) throw UsageError("train needs --dataset or a config file naming one");
      if (out_path.empty()) throw UsageError("train needs --out");
      effective = {{"dataset", dataset_dir}, {"out", out_path}, {"train", cfg.to_json()}};
      manifest_dir = out_path;
      auto progress = [&](const trainer::EpochRecord& e) {
        out << json{{"epoch", e.epoch}, {"loss", e.loss}, {"recon", e.recon}, {"h", e.h}, {"wall_seconds", e.wall_seconds}}.dump()
            << "\n"
            << std::flush;
      };
      const auto result = cfg.unsup ? trainer::train_unsup_ablation(dataset_dir, cfg, out_path, progress)
                                    : trainer::train(dataset_dir, cfg, out_path, progress);
      const auto manifest = dataset::read_manifest(dataset_dir);
      const ad::Tensor a = result.model.effective_adjacency().detach();
      out << json{{"checkpoint", (fs::path(out_path) / "checkpoint").string()},
                  {"epochs", result.epochs.size()},
                  {"final_loss", result.epochs.empty() ? 0.0 : result.epochs.back().loss},
                  {"shd", evaluation::graph_shd(a, manifest.true_graph, cfg.prune_threshold)}}
                 .dump()
          << "\n";
      return finish(kExitOk);
    }

    if (command == "eval") {
      const auto state = service::ServiceState::load(checkpoint_dir, optional_dataset(), optional_threshold(eval_thr));
      effective = {{"checkpoint", checkpoint_dir},
                   {"dataset", state.dataset_dir.string()},
                   {"split", eval_split},
                   {"threshold", state.prune_threshold}};
      if (!out_path.empty()) manifest_dir = fs::path(out_path).parent_path().empty() ? fs::path(".") : fs::path(out_path).parent_path();
      const auto data = eval_split == "test" ? state.samples : dataset::load_split(state.dataset_dir, eval_split, state.model.config.pool);
      const auto alignment = evaluation::compute_alignment(state.model, data, state.manifest.concepts);
      std::vector<std::vector<bool>> truth(state.model.config.n, std::vector<bool>(state.model.config.n, false));
      for (const auto& [f, t] : state.manifest.true_graph) truth[f][t] = true;
      const auto report = evaluation::evaluate_alignment(alignment, state.model, truth, state.prune_threshold);
      json j = report.to_json();
      j["subdimension"] = alignment.subdimension;
      j["correlation"] = alignment.correlation;
      if (!out_path.empty()) write_json(out_path, j);
      if (!scatter.empty()) evaluation::export_alignment_scatter(alignment, scatter);
      out << j.dump(2) << "\n";
      return finish(kExitOk);
    }

    if (command == "intervene" || command == "traverse") {
      const bool single = command == "intervene";
      const auto state = service::ServiceState::load(checkpoint_dir, optional_dataset(), optional_threshold(do_thr[single ? 0 : 1]));
      json body{{"sample_idx", sample}, {"concept", concept_json(concept_text)}, {"deterministic", !stochastic},
                {"variance_scale", variance_scale}, {"seed", seed}};
      if (single) {
        body["value"] = value_json(values);
      } else {
        json sweep = json::array();
        for (double v : values) sweep.push_back(v);
        body["values"] = sweep;
      }
      effective = body;
      effective["checkpoint"] = checkpoint_dir;
      effective["dataset"] = state.dataset_dir.string();
      if (!out_path.empty()) manifest_dir = out_path;
      const auto r = single ? service::handle_intervene(state, body.dump()) : service::handle_traverse(state, body.dump());
      if (r.status != 200) {
        err << "error: " << r.body.value("error", "request failed") << "\n";
        return finish(status_to_exit(r.status));
      }
      json summary = r.body;
      if (single) {
        summary.erase("image");
        summary.erase("reconstruction");
        if (!out_path.empty()) {
          save_png(fs::path(out_path) / "counterfactual.png", r.body.at("image"));
          save_png(fs::path(out_path) / "reconstruction.png", r.body.at("reconstruction"));
        }
      } else {
        summary.erase("images");
        summary.erase("strip");
        summary["frames"] = r.body.at("images").size();
        if (!out_path.empty()) {
          for (std::size_t f = 0; f < r.body.at("images").size(); ++f) {
            save_png(fs::path(out_path) / ("frame_" + std::to_string(f) + ".png"), r.body.at("images")[f]);
          }
          if (!r.body.at("strip").is_null()) save_png(fs::path(out_path) / "strip.png", r.body.at("strip"));
        }
      }
      out << summary.dump() << "\n";
      return finish(kExitOk);
    }

    if (command == "serve") {
      const auto state = service::ServiceState::load(checkpoint_dir, optional_dataset(), optional_threshold(serve_thr));
      service::Server server(state);
      if (!server.bind(host, port)) {
        err << "error: cannot bind " << host << ":" << port << "\n";
        return kExitFailure;
      }
      out << "listening on http://" << host << ":" << port << "\n" << std::flush;
      return server.listen_after_bind() ? kExitOk : kExitFailure;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n\n" << sub->help();
    return finish(kExitUsage);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return finish(kExitFailure);
  }
  return kExitUsage;
}

}  // namespace causalvae::cli
