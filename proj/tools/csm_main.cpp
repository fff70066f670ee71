// csm: cross-space mapping retrieval engine CLI.
//
// Subcommands: gen-data, train, index, search, evaluate, report, gradcheck.
// Exit codes: 0 success, 1 usage error, 2 data error. All randomness flows
// from explicit seeds; no environment variables are consulted.
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "csm/csm.hpp"
#include "csm/gradcheck.hpp"

namespace {

struct TrainFileConfig {
  csm::TrainerConfig trainer;
  csm::NetworkSpec network;
  bool has_network = false;
};

TrainFileConfig load_train_config(const std::string& path) {
  TrainFileConfig out;
  if (path.empty()) return out;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(csm::read_text_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw csm::ConfigError(path + ": " + e.what());
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "trainer" && it.key() != "network") {
      throw csm::ConfigError(path + ": unknown top-level field '" + it.key() + "'");
    }
  }
  if (j.contains("trainer")) out.trainer = j.at("trainer").get<csm::TrainerConfig>();
  if (j.contains("network")) {
    out.network = j.at("network").get<csm::NetworkSpec>();
    out.has_network = true;
  }
  return out;
}

int run_gen_data(const std::string& config_path, std::uint64_t seed, const std::string& out_dir) {
  csm::GenerationConfig config;
  if (!config_path.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(csm::read_text_file(config_path));
    } catch (const nlohmann::json::exception& e) {
      throw csm::ConfigError(config_path + ": " + e.what());
    }
    config = j.get<csm::GenerationConfig>();
  }
  const auto ds = csm::generate_dataset(config, seed);
  csm::write_dataset(out_dir, ds);
  std::size_t spurious = 0;
  for (char s : ds.click_spurious) spurious += s;
  std::cout << "wrote " << ds.images.size() << " images, " << ds.query_texts.size()
            << " queries, " << ds.clicks.size() << " clicks (" << spurious << " spurious) to "
            << out_dir << "\n";
  return 0;
}

int run_train(const std::string& data_dir, const std::string& config_path,
              const std::string& out_path, const std::string& history_path) {
  const auto cfg = load_train_config(config_path);
  const auto dataset = csm::read_dataset(data_dir);
  const csm::NetworkSpec network =
      cfg.has_network ? cfg.network : csm::default_network_spec(cfg.trainer.embedding_dim);
  auto result = csm::train(dataset.train_view(), cfg.trainer, network);

  csm::ModelCheckpoint cp;
  cp.model = std::move(result.model);
  cp.seed = cfg.trainer.seed;
  {
    const std::string dump = nlohmann::json(cfg.trainer).dump();
    cp.train_config_digest = csm::hex64(csm::fnv1a64(dump.data(), dump.size()));
  }
  csm::save_checkpoint(out_path, cp);

  std::string history;
  for (const auto& rec : result.history) {
    nlohmann::json j{{"epoch", rec.epoch},
                     {"mean_train_margin", rec.mean_train_margin},
                     {"mean_validation_margin", rec.mean_validation_margin},
                     {"learning_rate", rec.learning_rate},
                     {"wall_time_s", rec.wall_time_s}};
    history += j.dump() + "\n";
  }
  const std::string hpath = history_path.empty() ? out_path + ".history.jsonl" : history_path;
  csm::write_text_file(hpath, history);

  std::cout << "trained " << result.history.size() << " evaluations; final validation margin "
            << (result.history.empty() ? 0.0 : result.history.back().mean_validation_margin)
            << "; checkpoint " << out_path << "\n";
  return 0;
}

int run_index(const std::string& model_path, const std::string& images_dir,
              const std::string& out_path) {
  const auto loaded = csm::load_checkpoint(model_path);
  const auto index = csm::build_index(loaded, images_dir);
  csm::save_index(out_path, index);
  std::cout << "indexed " << index.ids.size() << " images (d=" << index.dim << ") to "
            << out_path << "\n";
  return 0;
}

int run_search(const std::string& model_path, const std::string& index_path,
               const std::string& query, int k, std::uint64_t seed) {
  const auto loaded = csm::load_checkpoint(model_path);
  const auto index = csm::load_index(index_path);
  const auto ranked = csm::search(loaded, index, query, k, seed);
  if (ranked.oov) std::cout << "# oov: random ranking fallback\n";
  for (std::size_t i = 0; i < ranked.entries.size(); ++i) {
    std::cout << (i + 1) << "\t" << ranked.entries[i].first << "\t" << ranked.entries[i].second
              << "\n";
  }
  return 0;
}

int run_evaluate(const std::string& model_path, const std::string& index_path,
                 const std::string& judgments_path, const std::string& queries_path,
                 const std::string& train_queries_path, const std::string& out_path,
                 std::uint64_t seed, int n) {
  const auto loaded = csm::load_checkpoint(model_path);
  const auto index = csm::load_index(index_path);
  const auto judgments = csm::read_judgments(judgments_path);

  std::map<std::string, std::string> query_texts;
  for (const auto& line : csm::detail::read_lines(queries_path)) {
    const auto fields = csm::detail::split_tsv_line(line);
    if (fields.size() != 2) {
      throw csm::DataError(queries_path + ": malformed line '" + line + "'");
    }
    query_texts[fields[0]] = fields[1];
  }

  csm::EvalOptions options;
  options.n = n;
  options.seed = seed;
  if (!train_queries_path.empty()) {
    for (const auto& line : csm::detail::read_lines(train_queries_path)) {
      const auto fields = csm::detail::split_tsv_line(line);
      options.training_queries.push_back(fields.size() == 2 ? fields[1] : fields[0]);
    }
  }
  const auto results = csm::evaluate(loaded, index, judgments, query_texts, options);
  csm::write_text_file(out_path, nlohmann::json(results).dump(2) + "\n");
  std::cout << "queries " << results.per_query.size() << "\n"
            << "mean dcg" << results.n << "  model " << results.mean_model << "  ideal "
            << results.mean_ideal << "  random " << results.mean_random << "\n"
            << "report " << out_path << "\n";
  return 0;
}

int run_report(const std::string& eval_path, const std::string& out_dir) {
  csm::EvalResults results;
  try {
    results = nlohmann::json::parse(csm::read_text_file(eval_path)).get<csm::EvalResults>();
  } catch (const nlohmann::json::exception& e) {
    throw csm::DataError(eval_path + ": " + e.what());
  }
  csm::analysis_report(results, out_dir);
  std::cout << "wrote analysis.json, dcg_by_length.svg, match_types.svg to " << out_dir << "\n";
  return 0;
}

int run_gradcheck(const std::string& config_path) {
  const double tol = 1e-4;
  bool all_passed = true;
  auto run_net_check = [&](const std::string& name, const csm::NetworkSpec& spec,
                           const std::vector<int>& input_shape, double tolerance) {
    const auto report = csm::gradient_check(spec, input_shape, tolerance, 42);
    all_passed = all_passed && report.passed;
    std::cout << (report.passed ? "[PASS] " : "[FAIL] ") << name << ": max rel error "
              << report.max_rel_error << " over " << report.layers.size() << " layers\n";
  };

  using csm::ConvSpec;
  using csm::FcSpec;
  using csm::LcnSpec;
  using csm::MaxPoolSpec;
  run_net_check("conv", {{ConvSpec{4, 3, 1, 1, false}}}, {3, 8, 8}, tol);
  run_net_check("conv+relu", {{ConvSpec{4, 3, 1, 1, true}}}, {3, 8, 8}, tol);
  run_net_check("conv+stride", {{ConvSpec{4, 3, 2, 0, true}}}, {3, 9, 9}, tol);
  run_net_check("conv->maxpool", {{ConvSpec{4, 3, 1, 1, true}, MaxPoolSpec{2, 2}}}, {3, 8, 8},
                tol);
  run_net_check("conv->lcn", {{ConvSpec{6, 3, 1, 1, true}, LcnSpec{}}}, {3, 8, 8}, tol);
  run_net_check("fc", {{FcSpec{8, false}}}, {3, 6, 6}, tol);
  run_net_check("fc+relu->fc", {{FcSpec{12, true}, FcSpec{4, false}}}, {3, 6, 6}, tol);
  run_net_check("paper-shaped stack",
                {{ConvSpec{4, 5, 1, 2, true}, MaxPoolSpec{2, 2}, LcnSpec{},
                  ConvSpec{6, 3, 1, 1, true}, MaxPoolSpec{2, 2}, LcnSpec{},
                  ConvSpec{6, 3, 1, 1, true}, ConvSpec{6, 3, 1, 1, true},
                  ConvSpec{6, 3, 1, 1, true}, MaxPoolSpec{2, 2}, FcSpec{16, true},
                  FcSpec{8, false}}},
                {3, 16, 16}, tol);
  // A purely linear network should agree with finite differences almost
  // exactly.
  run_net_check("linear-only", {{ConvSpec{4, 3, 1, 1, false}, FcSpec{6, false}}}, {3, 8, 8},
                1e-7);

  const auto pipeline = csm::margin_pipeline_gradient_check(4, tol, 11);
  all_passed = all_passed && pipeline.passed;
  std::cout << (pipeline.passed ? "[PASS] " : "[FAIL] ")
            << "end-to-end margin loss (d=4): max rel error " << pipeline.max_rel_error
            << " over " << pipeline.params_checked << " parameters\n";

  if (!config_path.empty()) {
    const auto cfg = load_train_config(config_path);
    const csm::NetworkSpec network =
        cfg.has_network ? cfg.network : csm::default_network_spec(cfg.trainer.embedding_dim);
    run_net_check("configured network @3x16x16", network, {3, 16, 16}, tol);
  }
  std::cout << (all_passed ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return all_passed ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-space mapping image retrieval"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path, model_path, images_dir, index_path, query;
  std::string judgments_path, queries_path, train_queries_path, eval_path, history_path;
  std::uint64_t seed = 0;
  int k = 25;
  int n = 25;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic clickthrough dataset");
  gen->add_option("--config", config_path, "generation config JSON");
  gen->add_option("--seed", seed, "generation seed")->default_val(0);
  gen->add_option("--out", out_path, "output dataset directory")->required();

  auto* train = app.add_subcommand("train", "train a model on a dataset directory");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--config", config_path, "train config JSON ({\"trainer\":..,\"network\":..})");
  train->add_option("--out", out_path, "output checkpoint (.csm)")->required();
  train->add_option("--history", history_path, "history JSONL path (default <out>.history.jsonl)");

  auto* index_cmd = app.add_subcommand("index", "embed a directory of images");
  index_cmd->add_option("--model", model_path, "checkpoint path")->required();
  index_cmd->add_option("--images", images_dir, "directory of .ten images")->required();
  index_cmd->add_option("--out", out_path, "output index path")->required();

  auto* search_cmd = app.add_subcommand("search", "rank indexed images for a query");
  search_cmd->add_option("--model", model_path, "checkpoint path")->required();
  search_cmd->add_option("--index", index_path, "index path")->required();
  search_cmd->add_option("--query", query, "query text")->required();
  search_cmd->add_option("--k", k, "results to return")->default_val(25);
  search_cmd->add_option("--seed", seed, "seed for the oov fallback")->default_val(0);

  auto* eval_cmd = app.add_subcommand("evaluate", "score rankings against judgments");
  eval_cmd->add_option("--model", model_path, "checkpoint path")->required();
  eval_cmd->add_option("--index", index_path, "index path")->required();
  eval_cmd->add_option("--judgments", judgments_path, "judgments.tsv")->required();
  eval_cmd->add_option("--queries", queries_path, "queries.tsv with the judged query texts")
      ->required();
  eval_cmd->add_option("--train-queries", train_queries_path,
                       "training queries.tsv for match-type classification");
  eval_cmd->add_option("--out", out_path, "output report JSON")->required();
  eval_cmd->add_option("--seed", seed, "seed for the random ranker")->default_val(0);
  eval_cmd->add_option("--n", n, "ranking depth for DCG")->default_val(25);

  auto* report_cmd = app.add_subcommand("report", "render analysis from an evaluation report");
  report_cmd->add_option("--eval", eval_path, "report JSON from evaluate")->required();
  report_cmd->add_option("--out", out_path, "output directory")->required();

  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck_cmd->add_option("--config", config_path, "train config JSON (optional)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return run_gen_data(config_path, seed, out_path);
    if (train->parsed()) return run_train(data_dir, config_path, out_path, history_path);
    if (index_cmd->parsed()) return run_index(model_path, images_dir, out_path);
    if (search_cmd->parsed()) return run_search(model_path, index_path, query, k, seed);
    if (eval_cmd->parsed()) {
      return run_evaluate(model_path, index_path, judgments_path, queries_path,
                          train_queries_path, out_path, seed, n);
    }
    if (report_cmd->parsed()) return run_report(eval_path, out_path);
    if (gradcheck_cmd->parsed()) return run_gradcheck(config_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
