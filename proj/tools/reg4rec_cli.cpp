#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "reg4rec/dataeval/checkpoint.hpp"
#include "reg4rec/dataeval/data.hpp"
#include "reg4rec/dataeval/experiment.hpp"
#include "reg4rec/error.hpp"

namespace fs = std::filesystem;
using namespace reg4rec;
using namespace reg4rec::dataeval;
using nlohmann::json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
};

struct DataFlags {
  std::string interactions, features, tokens;
};

void add_data_flags(CLI::App* app, DataFlags& d, bool tokens) {
  app->add_option("--interactions", d.interactions, "Interaction log (.csv or .jsonl)");
  app->add_option("--features", d.features, "Item feature JSONL");
  if (tokens) app->add_option("--tokens", d.tokens, "Token map JSONL");
}

ExperimentConfig load_config(const Globals& g, const DataFlags& d) {
  ExperimentConfig cfg;
  if (!g.config.empty()) cfg = load_experiment_config(g.config);
  if (g.seed) cfg.set_seed(*g.seed);
  if (!d.interactions.empty()) cfg.data.interactions = d.interactions;
  if (!d.features.empty()) cfg.data.features = d.features;
  if (!d.tokens.empty()) cfg.data.tokens = d.tokens;
  return cfg;
}

void require(const std::string& value, const std::string& what) {
  if (value.empty()) throw Error("missing-input", what + " is required (flag or config)");
}

InteractionLog load_log(const ExperimentConfig& cfg) {
  require(cfg.data.interactions, "interactions");
  require(cfg.data.features, "features");
  return load_interactions(cfg.data.interactions, format_from_path(cfg.data.interactions), cfg.data.features);
}

fs::path out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return fs::path(g.out_dir) / name;
}

std::vector<numerics::Tensor> mpq_codebooks(const fs::path& path) {
  const auto model = mpq::MpqModel::from_checkpoint(load_checkpoint(path, "MPQ1"));
  std::vector<numerics::Tensor> out;
  for (const auto& cb : model.codebooks()) out.push_back(cb.codewords);
  return out;
}

void run_synth(const Globals& g, const std::string& format) {
  auto cfg = load_config(g, {});
  numerics::RngStream rng(cfg.seed);
  const auto corpus = synth_corpus(cfg.synth, rng);
  const auto fmt = format == "jsonl" ? Format::jsonl : Format::csv;
  save_interactions(out_path(g, "interactions." + format), corpus.log, fmt);
  save_item_features(out_path(g, "items.jsonl"), corpus.log);
  std::vector<mpq::TokenRecord> planted;
  for (const auto& [id, ts] : corpus.planted)
    planted.push_back({id, ts, std::vector<double>(ts.size(), 1.0 / static_cast<double>(ts.size()))});
  mpq::write_token_map(out_path(g, "planted_tokens.jsonl"), planted);
  std::cerr << "synth: " << corpus.log.records.size() << " interactions, " << corpus.log.items.size()
            << " items\n";
}

void run_tokenize(const Globals& g, const DataFlags& d) {
  const auto cfg = load_config(g, d);
  const auto log = load_log(cfg);
  const auto res = tokenize(log, cfg.mpq);
  const auto tokens = out_path(g, "tokens.jsonl");
  mpq::write_token_map(tokens, res.records);
  save_checkpoint(out_path(g, "mpq.ckpt"), res.model.to_checkpoint());
  std::ofstream csv(out_path(g, "mpq_metrics.csv"));
  csv.precision(17);
  csv << "epoch,total,recon\n" << "0," << res.train.initial_loss << "," << res.train.initial_recon << "\n";
  for (std::size_t e = 0; e < res.train.loss_curve.size(); ++e)
    csv << e + 1 << "," << res.train.loss_curve[e] << "," << res.train.recon_curve.at(e) << "\n";
  std::cerr << "tokenize: " << res.records.size() << " items -> " << tokens.string() << "\n";
}

void run_pretrain(const Globals& g, const DataFlags& d, const std::string& mpq_ckpt) {
  const auto cfg = load_config(g, d);
  require(cfg.data.tokens, "tokens");
  const auto log = load_log(cfg);
  const auto table = ItemTable::build(mpq::read_token_map(cfg.data.tokens), log);
  const auto split = leave_one_out(log, cfg.data.min_interactions);
  const auto codebooks = mpq_codebooks(mpq_ckpt);
  const auto res = pretrain_stage(split, table, codebooks, cfg,
                                  cfg.ladq.enabled ? out_path(g, "ladq_plan.jsonl") : fs::path());
  save_checkpoint(out_path(g, "pretrain.ckpt"), res.model.to_checkpoint());
  seqmodel::write_metrics_csv(out_path(g, "pretrain_metrics.csv"), res.metrics);
  std::cerr << "pretrain: loss " << res.initial.total << " -> " << res.final.total << "\n";
}

struct PosttrainFlags {
  std::string checkpoint, out;
  std::optional<std::size_t> iters, group_size, msra_h;
  std::optional<double> epsilon, kl_beta, msra_w;
  std::optional<std::uint64_t> seed;
};

void run_posttrain(const Globals& g, const DataFlags& d, const PosttrainFlags& f) {
  auto cfg = load_config(g, d);
  if (f.iters) cfg.grpo.iterations = *f.iters;
  if (f.group_size) cfg.grpo.group_size = *f.group_size;
  if (f.epsilon) cfg.grpo.epsilon = *f.epsilon;
  if (f.kl_beta) cfg.grpo.kl_beta = *f.kl_beta;
  if (f.msra_h) cfg.grpo.reward.h = *f.msra_h;
  if (f.msra_w) cfg.grpo.reward.w = *f.msra_w;
  if (f.seed) cfg.grpo.seed = *f.seed;
  cfg.grpo.validate();
  const auto ckpt = f.checkpoint.empty() ? cfg.checkpoint : f.checkpoint;
  if (ckpt.empty() || !fs::exists(ckpt)) throw Error("missing-checkpoint", "checkpoint '" + ckpt + "' not found");
  require(cfg.data.tokens, "tokens");
  const auto init = seqmodel::SeqModel::from_checkpoint(load_checkpoint(ckpt, "SEQ1"));
  const auto log = load_log(cfg);
  const auto table = ItemTable::build(mpq::read_token_map(cfg.data.tokens), log);
  const auto split = leave_one_out(log, cfg.data.min_interactions);
  rewards::RewardTrace trace(out_path(g, "reward_trace.csv"));
  const auto res = posttrain_stage(init, split, table, cfg, &trace);
  const fs::path out = f.out.empty() ? out_path(g, "posttrain.ckpt") : fs::path(f.out);
  save_checkpoint(out, res.model.to_checkpoint());
  grpo::write_log_csv(out_path(g, "posttrain_log.csv"), res.log);
  std::cerr << "posttrain: best iteration " << res.best_iter << ", validation " << res.best_validation << "\n";
}

struct InferFlags {
  std::string checkpoint, catalog, out;
  std::optional<std::size_t> topn, period, retry;
  std::optional<double> theta;
  std::string mode;
  std::optional<std::uint64_t> seed;
};

void run_infer(const Globals& g, const DataFlags& d, const InferFlags& f) {
  auto cfg = load_config(g, d);
  auto& s = cfg.decode;
  if (f.topn) s.top_n = *f.topn;
  if (f.theta) s.reflection.theta = *f.theta;
  if (f.period) s.reflection.period = *f.period;
  if (f.retry) s.reflection.retry_budget = *f.retry;
  if (!f.mode.empty()) s.mode = f.mode == "sample" ? decode::Mode::sample : decode::Mode::greedy;
  const std::uint64_t seed = f.seed.value_or(cfg.seed);
  s.validate();
  const auto ckpt = f.checkpoint.empty() ? cfg.checkpoint : f.checkpoint;
  if (ckpt.empty() || !fs::exists(ckpt)) throw Error("missing-checkpoint", "checkpoint '" + ckpt + "' not found");
  const auto catalog = f.catalog.empty() ? cfg.data.tokens : f.catalog;
  require(catalog, "catalog");
  const auto model = seqmodel::SeqModel::from_checkpoint(load_checkpoint(ckpt, "SEQ1"));
  const auto log = load_log(cfg);
  const auto table = ItemTable::build(mpq::read_token_map(catalog), log);
  const auto index = build_index(model.codebooks(), table);

  std::ofstream file;
  if (!f.out.empty()) file.open(f.out);
  std::ostream& out = f.out.empty() ? std::cout : file;
  for (const auto& [user, items] : log.sequences()) {
    std::vector<mpq::TokenSet> history;
    for (const auto& item : items) history.push_back(table.at(item));
    decode::ModelScorer scorer(model, history);
    auto rng = numerics::RngStream(seed).substream("eval").substream(user);
    const auto path = decode::generate_with_reflection(scorer, s.mode, s.reflection, rng);
    json j{{"user", user}, {"items", json::array()}, {"path", json::array()},
           {"pruned", path.status == decode::PathStatus::pruned}};
    for (const auto& st : path.steps) j["path"].push_back({{"r", st.codebook}, {"c", st.code}, {"conf", st.confidence}});
    if (path.status != decode::PathStatus::pruned)
      for (const auto& r : decode::retrieve_topn(path, index, s.top_n, s.drop)) j["items"].push_back(r.id);
    out << j.dump() << "\n";
  }
}

void run_eval(const Globals& g, const DataFlags& d, const std::string& checkpoint) {
  auto cfg = load_config(g, d);
  if (!checkpoint.empty()) cfg.checkpoint = checkpoint;
  const auto report = run_experiment(cfg, g.out_dir);
  std::cout << report.metrics_json().dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative recommendation with multi-step reasoning"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "Experiment configuration (.toml or .json)");
  app.add_option("--seed", g.seed, "Global seed for every stage");
  app.add_option("--out-dir", g.out_dir, "Directory for outputs");

  DataFlags data;
  std::string synth_format = "csv";
  auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus with planted structure");
  synth->add_option("--format", synth_format, "Interaction format")->check(CLI::IsMember({"csv", "jsonl"}));

  auto* tok = app.add_subcommand("tokenize", "Train the tokenizer and export the token map");
  add_data_flags(tok, data, false);

  std::string mpq_ckpt;
  auto* pre = app.add_subcommand("pretrain", "Pretrain the sequence model");
  add_data_flags(pre, data, true);
  pre->add_option("--mpq", mpq_ckpt, "Tokenizer checkpoint supplying codebooks")->required();

  PosttrainFlags pf;
  auto* post = app.add_subcommand("posttrain", "Post-train with group-relative policy optimization");
  add_data_flags(post, data, true);
  post->add_option("--checkpoint", pf.checkpoint, "Input sequence-model checkpoint");
  post->add_option("--out", pf.out, "Output checkpoint path");
  post->add_option("--iters", pf.iters);
  post->add_option("--group-size", pf.group_size)->check(CLI::PositiveNumber);
  post->add_option("--epsilon", pf.epsilon);
  post->add_option("--kl-beta", pf.kl_beta);
  post->add_option("--msra-h", pf.msra_h)->check(CLI::PositiveNumber);
  post->add_option("--msra-w", pf.msra_w);
  post->add_option("--seed", pf.seed);

  InferFlags inf;
  auto* infer = app.add_subcommand("infer", "Recommend next items for every user in the log");
  add_data_flags(infer, data, false);
  infer->add_option("--checkpoint", inf.checkpoint, "Sequence-model checkpoint");
  infer->add_option("--catalog", inf.catalog, "Token map JSONL of the candidate items");
  infer->add_option("--topn", inf.topn)->check(CLI::PositiveNumber);
  infer->add_option("--theta", inf.theta);
  infer->add_option("--reflect-period", inf.period)->check(CLI::PositiveNumber);
  infer->add_option("--retry-budget", inf.retry);
  infer->add_option("--mode", inf.mode)->check(CLI::IsMember({"greedy", "sample"}));
  infer->add_option("--seed", inf.seed);
  infer->add_option("--out", inf.out, "Output JSONL (default stdout)");

  std::string eval_ckpt;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and write report.json");
  add_data_flags(ev, data, true);
  ev->add_option("--checkpoint", eval_ckpt, "Sequence-model checkpoint");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) run_synth(g, synth_format);
    if (*tok) run_tokenize(g, data);
    if (*pre) run_pretrain(g, data, mpq_ckpt);
    if (*post) run_posttrain(g, data, pf);
    if (*infer) run_infer(g, data, inf);
    if (*ev) run_eval(g, data, eval_ckpt);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
