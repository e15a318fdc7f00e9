// rsid: Semantic-ID tokenization pipeline in one binary.
//
// Subcommands cover the full flow: stats / famae-train / famae-eval /
// extract / quantize / diagnose / bound-check / cost. Exit codes: 0 on
// success, 1 on runtime failure, 2 on usage or config errors.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rsid/common.hpp"
#include "rsid/data.hpp"
#include "rsid/diagnostics.hpp"
#include "rsid/famae.hpp"
#include "rsid/gaoq.hpp"

namespace {

using nlohmann::json;

std::vector<std::size_t> parse_size_list(const std::string& text,
                                         const std::string& what) {
  std::vector<std::size_t> out;
  if (text.empty() || text == "auto") return out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(part, &used);
      if (used != part.size() || v <= 0) throw rsid::Error("");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw rsid::Error("bad " + what + " entry: '" + part + "'");
    }
  }
  return out;
}

std::vector<std::string> parse_name_list(const std::string& text) {
  std::vector<std::string> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(part);
  return out;
}

void echo_config(CLI::App& app) {
  for (CLI::App* sub : app.get_subcommands()) {
    const std::string dump = sub->config_to_str(true, false);
    std::istringstream iss(dump);
    std::string line;
    while (std::getline(iss, line))
      if (!line.empty())
        std::cerr << "[rsid] config " << sub->get_name() << "." << line
                  << '\n';
  }
}

struct DataArgs {
  std::string items_path;
  std::string sequences_path;
  std::string fields;
  std::size_t max_len = 32;
};

void add_data_flags(CLI::App* cmd, DataArgs& args, bool need_sequences) {
  cmd->add_option("--items", args.items_path, "Item TSV file")->required();
  auto* seq = cmd->add_option("--sequences", args.sequences_path,
                              "Sequence TSV file");
  if (need_sequences) seq->required();
  cmd->add_option("--fields", args.fields,
                  "Comma-separated field names (column 0 is the item ID)");
  cmd->add_option("--max-len", args.max_len, "Sliding window length")
      ->capture_default_str();
}

struct ModelArgs {
  rsid::famae::ModelConfig model;
  rsid::famae::TrainConfig train;
  std::string field_weights;
  int threads = 0;
};

void add_model_flags(CLI::App* cmd, ModelArgs& args) {
  cmd->add_option("--dim", args.model.dim)->capture_default_str();
  cmd->add_option("--layers", args.model.layers)->capture_default_str();
  cmd->add_option("--heads", args.model.heads)->capture_default_str();
  cmd->add_option("--ffn", args.model.ffn_dim)->capture_default_str();
  cmd->add_option("--dropout", args.model.dropout)->capture_default_str();
  cmd->add_option("--negatives", args.model.negatives)->capture_default_str();
  cmd->add_option("--seed", args.model.seed)->capture_default_str();
  cmd->add_option("--field-weights", args.field_weights,
                  "Comma-separated per-field loss weights");
  cmd->add_option("--lr", args.train.lr)->capture_default_str();
  cmd->add_option("--weight-decay", args.train.weight_decay)
      ->capture_default_str();
  cmd->add_option("--batch", args.train.batch_size)->capture_default_str();
  cmd->add_option("--epochs", args.train.epochs)->capture_default_str();
  cmd->add_option("--patience", args.train.patience)->capture_default_str();
  cmd->add_option("--eval-k", args.train.eval_k)->capture_default_str();
  cmd->add_option("--stride", args.train.stride)->capture_default_str();
  cmd->add_option("--threads", args.threads,
                  "Worker threads (0: RSID_THREADS or 1)")
      ->capture_default_str();
}

std::vector<double> parse_weights(const std::string& text) {
  std::vector<double> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(std::stod(part));
  return out;
}

int cmd_stats(const DataArgs& data) {
  const auto items = rsid::load_items(data.items_path,
                                      parse_name_list(data.fields));
  json j;
  j["items"] = items.item_count;
  j["fields"] = items.schema.field_names;
  j["vocab_sizes"] = items.schema.vocab_sizes;
  if (!data.sequences_path.empty()) {
    const auto seqs =
        rsid::load_sequences(data.sequences_path, items, data.max_len);
    const auto split = rsid::leave_one_out_split(seqs);
    j["users"] = seqs.sequences.size();
    j["windows"] = rsid::enumerate_windows(seqs).count();
    j["train_windows"] = split.train.count();
    j["valid_windows"] = split.valid.count();
    j["test_windows"] = split.test.count();
  }
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_famae_train(const DataArgs& data, ModelArgs& args,
                    const std::string& out_path, const std::string& log_path,
                    bool no_holdout) {
  const auto items = rsid::load_items(data.items_path,
                                      parse_name_list(data.fields));
  const auto seqs =
      rsid::load_sequences(data.sequences_path, items, data.max_len);
  args.model.max_len = data.max_len;
  args.model.field_weights = parse_weights(args.field_weights);
  args.train.threads = rsid::resolve_threads(args.threads);
  args.train.holdout = !no_holdout;

  const auto result =
      rsid::famae::train(items, seqs, args.model, args.train);

  if (!log_path.empty()) {
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw rsid::Error("cannot open for writing: " + log_path);
    for (const auto& e : result.history) {
      json j;
      j["epoch"] = e.epoch;
      j["loss"] = e.loss;
      j["lr"] = e.lr;
      if (e.metric1 >= 0.0) j["metric1_recall"] = e.metric1;
      if (e.metric2 >= 0.0) j["metric2_recall"] = e.metric2;
      log << j.dump() << '\n';
    }
  }
  rsid::famae::save_checkpoint(result.params, out_path);
  if (result.diverged) {
    std::cerr << "[rsid] training diverged: " << result.divergence_note
              << "; last good checkpoint written to " << out_path << '\n';
    return 1;
  }
  std::cerr << "[rsid] checkpoint written to " << out_path;
  if (result.best_epoch > 0)
    std::cerr << " (best validation epoch " << result.best_epoch << ")";
  std::cerr << '\n';
  return 0;
}

int cmd_famae_eval(const DataArgs& data, const std::string& checkpoint,
                   std::size_t k, const std::string& split_name, int threads) {
  const auto items = rsid::load_items(data.items_path,
                                      parse_name_list(data.fields));
  const auto seqs =
      rsid::load_sequences(data.sequences_path, items, data.max_len);
  const auto params = rsid::famae::load_checkpoint(checkpoint);
  const auto split = rsid::leave_one_out_split(seqs);
  const rsid::WindowSet* eval = &split.test;
  if (split_name == "valid") eval = &split.valid;
  else if (split_name != "test")
    throw rsid::Error("--split must be test or valid");

  json j;
  j["split"] = split_name;
  j["k"] = k;
  j["windows"] = eval->count();
  j["metric1_recall"] = rsid::famae::metric_collaborative(
      items, *eval, params, k, rsid::resolve_threads(threads));
  j["metric2_recall"] = rsid::famae::metric_discriminative(
      items, *eval, params, k, rsid::resolve_threads(threads));
  std::cout << j.dump(2) << '\n';
  return 0;
}

int cmd_extract(const DataArgs& data, const std::string& checkpoint,
                const std::string& out_path) {
  const auto items = rsid::load_items(data.items_path,
                                      parse_name_list(data.fields));
  const auto params = rsid::famae::load_checkpoint(checkpoint);
  const auto matrix =
      rsid::famae::extract_item_representations(params, items);
  rsid::write_embeddings(matrix, out_path);
  std::cerr << "[rsid] wrote " << matrix.rows << "x" << matrix.dim
            << " embeddings to " << out_path << '\n';
  return 0;
}

int cmd_quantize(const std::string& in_path, const std::string& out_path,
                 const std::string& codebook_path, const std::string& method,
                 const std::string& branching, const std::string& anchors,
                 std::size_t iters, std::uint64_t seed, int threads) {
  const auto embeddings = rsid::read_embeddings(in_path);
  rsid::gaoq::QuantizerConfig config;
  config.method = rsid::gaoq::method_from_string(method);
  config.branching = parse_size_list(branching, "branching");
  config.anchors = parse_size_list(anchors, "anchors");
  config.kmeans_iters = iters;
  config.seed = seed;
  config.threads = rsid::resolve_threads(threads);

  const auto result = rsid::gaoq::quantize(embeddings, config);
  rsid::gaoq::write_sid_table(result.sids, out_path);
  if (!codebook_path.empty())
    rsid::gaoq::write_codebook(result.codebook, codebook_path);
  std::cerr << "[rsid] wrote " << result.sids.item_count() << " SIDs ("
            << result.sids.levels << " levels) to " << out_path << '\n';
  return 0;
}

int cmd_diagnose(const std::string& sids_path, const std::string& emb_path,
                 const std::string& corpus_path, const std::string& report_path,
                 bool bits) {
  const auto sids = rsid::gaoq::read_sid_table(sids_path);
  const auto entropy = rsid::diag::entropy_report(sids);

  std::vector<double> intra;
  if (!emb_path.empty()) {
    const auto embeddings = rsid::read_embeddings(emb_path);
    for (std::size_t l = 1; l <= sids.levels; ++l)
      intra.push_back(
          rsid::diag::intra_code_cosine(sids, embeddings, l).mean);
  }

  rsid::diag::OverlapReport overlap;
  bool have_overlap = false;
  if (!corpus_path.empty()) {
    std::unordered_map<std::string, std::int32_t> row_of;
    for (std::size_t i = 0; i < sids.item_tokens.size(); ++i)
      row_of[sids.item_tokens[i]] = static_cast<std::int32_t>(i);
    std::ifstream in(corpus_path);
    if (!in) throw rsid::Error("cannot open: " + corpus_path);
    rsid::diag::SidCorpus corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::size_t tab = line.find('\t');
      if (tab == std::string::npos)
        throw rsid::Error(corpus_path + ": line " + std::to_string(line_no) +
                          " is missing the user<TAB>items separator");
      std::stringstream ss(line.substr(tab + 1));
      std::vector<std::int32_t> rows;
      std::string tok;
      while (ss >> tok) {
        const auto it = row_of.find(tok);
        if (it == row_of.end())
          throw rsid::Error(corpus_path + ": line " + std::to_string(line_no) +
                            ": item '" + tok + "' is not in the SID table");
        rows.push_back(it->second);
      }
      if (rows.empty()) continue;
      corpus.targets.push_back(rows.back());
      rows.pop_back();
      corpus.histories.push_back(std::move(rows));
    }
    if (corpus.targets.empty())
      throw rsid::Error(corpus_path + ": no pairs");
    overlap = rsid::diag::sid_overlap(sids, corpus);
    have_overlap = true;
  }

  const std::string text = rsid::diag::report_json(
      entropy, intra, have_overlap ? &overlap : nullptr, bits);
  if (report_path.empty()) {
    std::cout << text << '\n';
  } else {
    std::ofstream out(report_path, std::ios::trunc);
    if (!out) throw rsid::Error("cannot open for writing: " + report_path);
    out << text << '\n';
  }
  return 0;
}

int cmd_bound_check(std::size_t trials, std::uint64_t seed,
                    const std::string& report_path) {
  rsid::Rng rng(seed);
  double max_gap_error = 0.0;
  double max_tight_gap = 0.0;
  std::size_t violations = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    auto instance = rsid::diag::random_bound_instance(rng);
    const auto check = rsid::diag::check_sufficiency_bound(instance);
    if (!check.holds) ++violations;
    max_gap_error =
        std::max(max_gap_error, std::abs(check.gap - check.kl_sum));
    rsid::diag::use_exact_predictor(instance);
    const auto tight = rsid::diag::check_sufficiency_bound(instance);
    if (!tight.holds) ++violations;
    max_tight_gap = std::max(max_tight_gap, std::abs(tight.gap));
  }
  json j;
  j["trials"] = trials;
  j["violations"] = violations;
  j["max_gap_vs_kl_error"] = max_gap_error;
  j["max_tight_gap"] = max_tight_gap;
  j["holds"] = violations == 0;
  const std::string text = j.dump(2);
  if (report_path.empty()) {
    std::cout << text << '\n';
  } else {
    std::ofstream out(report_path, std::ios::trunc);
    if (!out) throw rsid::Error("cannot open for writing: " + report_path);
    out << text << '\n';
  }
  return violations == 0 ? 0 : 1;
}

int cmd_cost(const rsid::diag::FamaeShape& famae_shape, std::uint64_t items,
             std::uint64_t dq, const std::string& branching,
             const std::string& anchors, std::uint64_t iters,
             const rsid::diag::T5Shape& t5_shape) {
  json j;
  const std::uint64_t famae = rsid::diag::famae_flops(famae_shape);
  j["famae_flops"] = famae;
  std::uint64_t total = famae;
  if (items > 0) {
    rsid::diag::GaoqShape g;
    g.items = items;
    g.dim = dq;
    for (const auto b : parse_size_list(branching, "branching"))
      g.branching.push_back(b);
    for (const auto a : parse_size_list(anchors, "anchors"))
      g.anchors.push_back(a);
    if (g.branching.empty())
      throw rsid::Error("cost: --branching is required with --n");
    g.iters.assign(g.branching.size(), iters);
    const std::uint64_t gaoq = rsid::diag::gaoq_flops(g);
    j["gaoq_flops"] = gaoq;
    total += gaoq;
  }
  const std::uint64_t t5 = rsid::diag::t5_flops(t5_shape);
  j["t5_flops"] = t5;
  total += t5;
  j["total_flops"] = total;
  std::cout << j.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic-ID tokenization pipeline (FAMAE + GAOQ)"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML-style config file (CLI overrides)");
  app.allow_config_extras(false);
  app.fallthrough();  // `rsid <cmd> --config f` reaches the global option

  DataArgs stats_data;
  auto* stats = app.add_subcommand("stats", "Validate and summarize inputs");
  add_data_flags(stats, stats_data, /*need_sequences=*/false);

  DataArgs train_data;
  ModelArgs train_args;
  std::string train_out, train_log;
  bool train_no_holdout = false;
  auto* train =
      app.add_subcommand("famae-train", "Train the field-masked encoder");
  add_data_flags(train, train_data, /*need_sequences=*/true);
  add_model_flags(train, train_args);
  train->add_option("--out", train_out, "Checkpoint output path")->required();
  train->add_option("--log", train_log, "Per-epoch JSON-lines metrics log");
  train->add_flag("--no-holdout", train_no_holdout,
                  "Train on all windows without a validation split");

  DataArgs eval_data;
  std::string eval_checkpoint, eval_split = "test";
  std::size_t eval_k = 10;
  int eval_threads = 0;
  auto* eval = app.add_subcommand("famae-eval",
                                  "Recall@K under full/single-field masking");
  add_data_flags(eval, eval_data, /*need_sequences=*/true);
  eval->add_option("--checkpoint", eval_checkpoint)->required();
  eval->add_option("--k", eval_k)->capture_default_str();
  eval->add_option("--split", eval_split, "test or valid")
      ->capture_default_str();
  eval->add_option("--threads", eval_threads)->capture_default_str();

  DataArgs extract_data;
  std::string extract_checkpoint, extract_out;
  auto* extract =
      app.add_subcommand("extract", "Write concatenated field embeddings");
  add_data_flags(extract, extract_data, /*need_sequences=*/false);
  extract->add_option("--checkpoint", extract_checkpoint)->required();
  extract->add_option("--out", extract_out, "Embedding .rsid output")
      ->required();

  std::string q_in, q_out, q_codebook, q_method = "gaoq";
  std::string q_branching = "auto", q_anchors = "auto";
  std::size_t q_iters = 50;
  std::uint64_t q_seed = 0;
  int q_threads = 0;
  auto* quantize =
      app.add_subcommand("quantize", "Discretize embeddings into SIDs");
  quantize->add_option("--in", q_in, "Embedding .rsid input")->required();
  quantize->add_option("--out", q_out, "SID TSV output")->required();
  quantize->add_option("--codebook", q_codebook, "Codebook JSON output");
  quantize->add_option("--method", q_method, "gaoq|hkmeans|rqkmeans")
      ->capture_default_str();
  quantize->add_option("--branching", q_branching,
                       "Comma list of prefix branching factors, or auto")
      ->capture_default_str();
  quantize->add_option("--anchors", q_anchors,
                       "Comma list of anchor counts for levels 2..L-1, or auto")
      ->capture_default_str();
  quantize->add_option("--iters", q_iters)->capture_default_str();
  quantize->add_option("--seed", q_seed)->capture_default_str();
  quantize->add_option("--threads", q_threads)->capture_default_str();

  std::string d_sids, d_emb, d_corpus, d_report;
  bool d_bits = false;
  auto* diagnose =
      app.add_subcommand("diagnose", "Entropy / ambiguity / overlap report");
  diagnose->add_option("--sids", d_sids, "SID TSV input")->required();
  diagnose->add_option("--emb", d_emb, "Embedding .rsid input (intra-code "
                                       "cosine)");
  diagnose->add_option("--corpus", d_corpus,
                       "Sequence TSV; last item per line is the target");
  diagnose->add_option("--report", d_report, "Report JSON output (default "
                                             "stdout)");
  diagnose->add_flag("--bits", d_bits, "Report entropies in bits");

  std::size_t b_trials = 100;
  std::uint64_t b_seed = 0;
  std::string b_report;
  auto* bound = app.add_subcommand(
      "bound-check", "Verify the predictive-sufficiency bound by enumeration");
  bound->add_option("--trials", b_trials)->capture_default_str();
  bound->add_option("--seed", b_seed)->capture_default_str();
  bound->add_option("--report", b_report, "Report JSON output");

  rsid::diag::FamaeShape cost_famae;
  rsid::diag::T5Shape cost_t5;
  std::uint64_t cost_items = 0, cost_dq = 0, cost_iters = 50;
  std::string cost_branching, cost_anchors;
  auto* cost = app.add_subcommand("cost", "Dominant FLOP estimates");
  cost->add_option("--te", cost_famae.seq_len)->capture_default_str();
  cost->add_option("--fields", cost_famae.fields)->capture_default_str();
  cost->add_option("--de", cost_famae.dim)->capture_default_str();
  cost->add_option("--le", cost_famae.layers)->capture_default_str();
  cost->add_option("--n", cost_items, "Item count for the quantizer stage");
  cost->add_option("--dq", cost_dq, "Quantizer input dimension");
  cost->add_option("--branching", cost_branching);
  cost->add_option("--anchors", cost_anchors);
  cost->add_option("--iters", cost_iters)->capture_default_str();
  cost->add_option("--t5-enc-len", cost_t5.enc_len)->capture_default_str();
  cost->add_option("--t5-dec-len", cost_t5.dec_len)->capture_default_str();
  cost->add_option("--t5-dim", cost_t5.dim)->capture_default_str();
  cost->add_option("--t5-enc-layers", cost_t5.enc_layers)
      ->capture_default_str();
  cost->add_option("--t5-dec-layers", cost_t5.dec_layers)
      ->capture_default_str();

  // Let [subcommand] sections in the config file populate their options.
  for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; }))
    sub->configurable(true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  echo_config(app);

  try {
    if (stats->parsed()) return cmd_stats(stats_data);
    if (train->parsed())
      return cmd_famae_train(train_data, train_args, train_out, train_log,
                             train_no_holdout);
    if (eval->parsed())
      return cmd_famae_eval(eval_data, eval_checkpoint, eval_k, eval_split,
                            eval_threads);
    if (extract->parsed())
      return cmd_extract(extract_data, extract_checkpoint, extract_out);
    if (quantize->parsed())
      return cmd_quantize(q_in, q_out, q_codebook, q_method, q_branching,
                          q_anchors, q_iters, q_seed, q_threads);
    if (diagnose->parsed())
      return cmd_diagnose(d_sids, d_emb, d_corpus, d_report, d_bits);
    if (bound->parsed()) return cmd_bound_check(b_trials, b_seed, b_report);
    if (cost->parsed()) {
      if (cost_items > 0 && cost_dq == 0)
        throw rsid::Error("cost: --dq is required with --n");
      return cmd_cost(cost_famae, cost_items, cost_dq, cost_branching,
                      cost_anchors, cost_iters, cost_t5);
    }
  } catch (const rsid::Error& e) {
    std::cerr << "[rsid] error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "[rsid] error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
