#include "reg4rec/dataeval/experiment.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "reg4rec/dataeval/checkpoint.hpp"
#include "reg4rec/error.hpp"
#include "toml.hpp"

#ifndef REG4REC_GIT_DESCRIBE
#define REG4REC_GIT_DESCRIBE "unknown"
#endif

namespace reg4rec::dataeval {

ItemTable ItemTable::build(std::span<const mpq::TokenRecord> records, const InteractionLog& log) {
  ItemTable t;
  std::map<std::string, const mpq::TokenRecord*> by_id;
  for (const auto& r : records) by_id[r.item] = &r;
  for (const auto& [id, info] : log.items) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw Error("unknown-item", "item '" + id + "' has no token record");
    t.tokens.emplace(id, it->second->tokens);
    t.category.emplace(id, info.category);
    t.catalog.push_back({id, it->second->tokens, it->second->gates});
  }
  return t;
}

const mpq::TokenSet& ItemTable::at(const std::string& item) const {
  const auto it = tokens.find(item);
  if (it == tokens.end()) throw Error("unknown-item", "item '" + item + "' has no tokens");
  return it->second;
}

std::size_t ItemTable::num_codebooks() const { return tokens.empty() ? 0 : tokens.begin()->second.size(); }

std::vector<seqmodel::Example> pretrain_examples(const EvalSplit& split, const ItemTable& table) {
  std::vector<seqmodel::Example> out;
  for (const auto& u : split.users) {
    std::vector<mpq::TokenSet> hist;
    for (std::size_t t = 0; t < u.train.size(); ++t) {
      if (t > 0) out.push_back({hist, table.at(u.train[t]), table.category.at(u.train[t])});
      hist.push_back(table.at(u.train[t]));
    }
  }
  return out;
}

std::vector<grpo::Context> posttrain_contexts(const EvalSplit& split, const ItemTable& table, std::size_t horizon,
                                              double w) {
  if (horizon == 0) throw Error("invalid-config", "horizon must be at least 1");
  std::vector<grpo::Context> out;
  for (const auto& u : split.users) {
    std::vector<mpq::TokenSet> hist;
    for (std::size_t t = 0; t < u.train.size(); ++t) {
      if (t > 0) {
        grpo::Context ctx;
        ctx.user = u.user;
        ctx.history = hist;
        ctx.window.w = w;
        for (std::size_t j = t; j < std::min(t + horizon, u.train.size()); ++j)
          ctx.window.items.push_back({u.train[j], table.at(u.train[j]), table.category.at(u.train[j])});
        out.push_back(std::move(ctx));
      }
      hist.push_back(table.at(u.train[t]));
    }
  }
  return out;
}

std::vector<EvalCase> eval_cases(const EvalSplit& split, const ItemTable& table, SplitPart part) {
  std::vector<EvalCase> out;
  for (const auto& u : split.users) {
    EvalCase c;
    c.user = u.user;
    for (const auto& item : u.train) c.history.push_back(table.at(item));
    if (part == SplitPart::test) c.history.push_back(table.at(u.valid));
    c.target = part == SplitPart::test ? u.test : u.valid;
    out.push_back(std::move(c));
  }
  return out;
}

void DecodeSettings::validate() const {
  if (top_n == 0) throw Error("invalid-topn", "top_n must be at least 1");
  if (ks.empty()) throw Error("invalid-k", "no K values");
  for (auto k : ks)
    if (k == 0) throw Error("invalid-k", "K must be at least 1");
  if (reflection.period == 0) throw Error("invalid-config", "reflection period must be at least 1");
  if (!(reflection.theta >= 0.0)) throw Error("invalid-config", "theta must be non-negative");
}

std::size_t DecodeSettings::depth() const { return std::max(top_n, *std::max_element(ks.begin(), ks.end())); }

void to_json(nlohmann::json& j, const DecodeSettings& c) {
  j = {{"mode", c.mode == decode::Mode::greedy ? "greedy" : "sample"},
       {"theta", c.reflection.theta},
       {"reflect_period", c.reflection.period},
       {"retry_budget", c.reflection.retry_budget},
       {"drop", c.drop},
       {"top_n", c.top_n},
       {"ks", c.ks}};
}

void from_json(const nlohmann::json& j, DecodeSettings& c) {
  DecodeSettings d;
  const auto mode = j.value("mode", std::string("greedy"));
  if (mode != "greedy" && mode != "sample") throw Error("invalid-config", "decode mode must be greedy or sample");
  c.mode = mode == "greedy" ? decode::Mode::greedy : decode::Mode::sample;
  c.reflection.theta = j.value("theta", d.reflection.theta);
  c.reflection.period = j.value("reflect_period", d.reflection.period);
  c.reflection.retry_budget = j.value("retry_budget", d.reflection.retry_budget);
  c.drop = j.value("drop", d.drop);
  c.top_n = j.value("top_n", d.top_n);
  c.ks = j.value("ks", d.ks);
}

double MetricsReport::recall_at(std::size_t k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return recall[i];
  throw Error("invalid-k", "K=" + std::to_string(k) + " was not evaluated");
}

double MetricsReport::ndcg_at(std::size_t k) const {
  for (std::size_t i = 0; i < ks.size(); ++i)
    if (ks[i] == k) return ndcg[i];
  throw Error("invalid-k", "K=" + std::to_string(k) + " was not evaluated");
}

nlohmann::json MetricsReport::metrics_json() const {
  nlohmann::json m = nlohmann::json::object();
  for (std::size_t i = 0; i < ks.size(); ++i) {
    m["R@" + std::to_string(ks[i])] = recall[i];
    m["N@" + std::to_string(ks[i])] = ndcg[i];
  }
  m["users"] = users;
  m["pruned"] = pruned;
  m["prune_rate"] = users ? static_cast<double>(pruned) / static_cast<double>(users) : 0.0;
  return m;
}

decode::RetrievalIndex build_index(const std::vector<numerics::Tensor>& codebooks, const ItemTable& table) {
  return decode::RetrievalIndex(codebooks, table.catalog);
}

MetricsReport evaluate(const seqmodel::SeqModel& model, const decode::RetrievalIndex& index,
                       std::span<const EvalCase> cases, const DecodeSettings& settings, std::uint64_t seed) {
  const ScorerFactory factory = [&](const EvalCase& c) -> std::unique_ptr<decode::PathScorer> {
    return std::make_unique<decode::ModelScorer>(model, c.history);
  };
  return evaluate(factory, index, cases, settings, seed);
}

MetricsReport evaluate(const ScorerFactory& scorer_for, const decode::RetrievalIndex& index,
                       std::span<const EvalCase> cases, const DecodeSettings& settings, std::uint64_t seed) {
  settings.validate();
  MetricsReport rep;
  rep.ks = settings.ks;
  rep.recall.assign(rep.ks.size(), 0.0);
  rep.ndcg.assign(rep.ks.size(), 0.0);
  const numerics::RngStream root = numerics::RngStream(seed).substream("eval");
  for (const auto& c : cases) {
    UserResult r;
    r.user = c.user;
    r.target = c.target;
    const auto scorer = scorer_for(c);
    auto rng = root.substream(c.user);
    r.path = decode::generate_with_reflection(*scorer, settings.mode, settings.reflection, rng);
    r.pruned = r.path.status == decode::PathStatus::pruned;
    if (!r.pruned) {
      for (const auto& x : decode::retrieve_topn(r.path, index, settings.depth(), settings.drop))
        r.ranked.push_back(x.id);
      const auto it = std::find(r.ranked.begin(), r.ranked.end(), r.target);
      if (it != r.ranked.end()) r.rank = static_cast<std::size_t>(it - r.ranked.begin()) + 1;
    }
    for (std::size_t i = 0; i < rep.ks.size(); ++i) {
      r.recall.push_back(r.pruned ? 0.0 : recall_at_k(r.ranked, r.target, rep.ks[i]));
      r.ndcg.push_back(r.pruned ? 0.0 : ndcg_at_k(r.ranked, r.target, rep.ks[i]));
      rep.recall[i] += r.recall.back();
      rep.ndcg[i] += r.ndcg.back();
    }
    rep.pruned += r.pruned;
    rep.per_user.push_back(std::move(r));
  }
  rep.users = cases.size();
  if (rep.users > 0)
    for (std::size_t i = 0; i < rep.ks.size(); ++i) {
      rep.recall[i] /= static_cast<double>(rep.users);
      rep.ndcg[i] /= static_cast<double>(rep.users);
    }
  return rep;
}

void ExperimentConfig::set_seed(std::uint64_t s) {
  seed = s;
  mpq.seed = s;
  seq.seed = s;
  grpo.seed = s;
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"seed", c.seed},
       {"data",
        {{"interactions", c.data.interactions},
         {"features", c.data.features},
         {"tokens", c.data.tokens},
         {"min_interactions", c.data.min_interactions}}},
       {"synth", c.synth},
       {"mpq", c.mpq},
       {"seq", c.seq},
       {"grpo", c.grpo},
       {"ladq", c.ladq},
       {"decode", c.decode},
       {"checkpoint", c.checkpoint},
       {"split", c.split}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  static const std::vector<std::string> known{"seed", "data",   "synth",  "mpq",        "seq",  "grpo",
                                              "ladq", "decode", "checkpoint", "split"};
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end())
      throw Error("invalid-config", "unknown section '" + k + "'");
  c = ExperimentConfig{};
  c.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("data")) {
    const auto& d = j.at("data");
    c.data.interactions = d.value("interactions", std::string());
    c.data.features = d.value("features", std::string());
    c.data.tokens = d.value("tokens", std::string());
    c.data.min_interactions = d.value("min_interactions", c.data.min_interactions);
  }
  if (j.contains("synth")) c.synth = j.at("synth").get<SynthConfig>();
  if (j.contains("mpq")) c.mpq = j.at("mpq").get<mpq::MpqConfig>();
  if (j.contains("seq")) c.seq = j.at("seq").get<seqmodel::SeqConfig>();
  if (j.contains("grpo")) c.grpo = j.at("grpo").get<grpo::GrpoConfig>();
  if (j.contains("ladq")) c.ladq = j.at("ladq").get<ladq::LadqConfig>();
  if (j.contains("decode")) c.decode = j.at("decode").get<DecodeSettings>();
  c.checkpoint = j.value("checkpoint", std::string());
  c.split = j.value("split", std::string("test"));
  if (c.split != "test" && c.split != "valid") throw Error("invalid-config", "split must be test or valid");
  // Stage seeds follow the global seed unless a section sets its own.
  const auto section_seed = [&](const char* s) { return j.contains(s) && j.at(s).contains("seed"); };
  if (!section_seed("mpq")) c.mpq.seed = c.seed;
  if (!section_seed("seq")) c.seq.seed = c.seed;
  if (!section_seed("grpo")) c.grpo.seed = c.seed;
}

namespace {

nlohmann::json toml_to_json(const toml::node& node) {
  if (const auto* t = node.as_table()) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
    return j;
  }
  if (const auto* a = node.as_array()) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& v : *a) j.push_back(toml_to_json(v));
    return j;
  }
  if (const auto* s = node.as_string()) return s->get();
  if (const auto* i = node.as_integer()) {
    if (i->get() >= 0) return static_cast<std::uint64_t>(i->get());
    return i->get();
  }
  if (const auto* f = node.as_floating_point()) return f->get();
  if (const auto* b = node.as_boolean()) return b->get();
  throw Error("invalid-config", "unsupported TOML value (dates and times are not accepted)");
}

}  // namespace

nlohmann::json load_config_json(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("io-error", "config " + path.string() + " not found");
  if (path.extension() == ".toml") {
    try {
      return toml_to_json(toml::parse_file(path.string()));
    } catch (const toml::parse_error& e) {
      std::ostringstream msg;
      msg << path.string() << ":" << e.source().begin.line << ": " << e.description();
      throw Error("invalid-config", msg.str());
    }
  }
  std::ifstream in(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("invalid-config", path.string() + ": " + e.what());
  }
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  try {
    return load_config_json(path).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("invalid-config", path.string() + ": " + e.what());
  }
}

std::string config_hash(const nlohmann::json& j) {
  const auto s = j.dump();
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
  std::ostringstream out;
  out << std::hex << std::setw(8) << std::setfill('0') << crc;
  return out.str();
}

std::string git_describe() { return REG4REC_GIT_DESCRIBE; }

void write_report(const std::filesystem::path& out_dir, const MetricsReport& report, const ExperimentConfig& cfg) {
  std::filesystem::create_directories(out_dir);
  const nlohmann::json config = cfg;
  const nlohmann::json j = {{"metrics", report.metrics_json()},
                            {"config_hash", config_hash(config)},
                            {"seed", cfg.seed},
                            {"git_describe", git_describe()}};
  {
    std::ofstream out(out_dir / "report.json", std::ios::trunc);
    if (!out) throw Error("io-error", "cannot write report.json in " + out_dir.string());
    out << j.dump(2) << '\n';
    if (!out) throw Error("io-error", "short write to report.json");
  }
  std::ofstream csv(out_dir / "per_user.csv", std::ios::trunc);
  if (!csv) throw Error("io-error", "cannot write per_user.csv in " + out_dir.string());
  csv << "user,target,pruned,rank";
  for (auto k : report.ks) csv << ",R@" << k << ",N@" << k;
  csv << '\n' << std::setprecision(17);
  for (const auto& r : report.per_user) {
    csv << r.user << ',' << r.target << ',' << (r.pruned ? 1 : 0) << ',' << r.rank;
    for (std::size_t i = 0; i < report.ks.size(); ++i) csv << ',' << r.recall[i] << ',' << r.ndcg[i];
    csv << '\n';
  }
  if (!csv) throw Error("io-error", "short write to per_user.csv");
}

MetricsReport run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  if (cfg.checkpoint.empty() || !std::filesystem::exists(cfg.checkpoint))
    throw Error("missing-checkpoint", "checkpoint '" + cfg.checkpoint + "' not found");
  if (cfg.data.tokens.empty() || !std::filesystem::exists(cfg.data.tokens))
    throw Error("missing-tokens", "token map '" + cfg.data.tokens + "' not found");
  cfg.decode.validate();
  const auto model = seqmodel::SeqModel::from_checkpoint(load_checkpoint(cfg.checkpoint, "SEQ1"));
  const auto log = load_interactions(cfg.data.interactions, format_from_path(cfg.data.interactions), cfg.data.features);
  const auto records = mpq::read_token_map(cfg.data.tokens);
  const auto table = ItemTable::build(records, log);
  const auto split = leave_one_out(log, cfg.data.min_interactions);
  const auto index = build_index(model.codebooks(), table);
  const auto cases = eval_cases(split, table, cfg.split == "valid" ? SplitPart::valid : SplitPart::test);
  auto report = evaluate(model, index, cases, cfg.decode, cfg.seed);
  write_report(out_dir, report, cfg);
  return report;
}

TokenizeResult tokenize(const InteractionLog& log, const mpq::MpqConfig& cfg) {
  TokenizeResult out;
  const auto features = log.feature_matrix();
  auto c = cfg;
  c.feature_dim = log.feature_dim();
  out.train = mpq::train_mpq(features, c);
  out.model = out.train.model;
  const auto ids = log.item_ids();
  out.records = mpq::export_tokens(out.model, ids, features);
  return out;
}

seqmodel::PretrainResult pretrain_stage(const EvalSplit& split, const ItemTable& table,
                                        const std::vector<numerics::Tensor>& codebooks, const ExperimentConfig& cfg,
                                        const std::filesystem::path& plan_log) {
  const auto examples = pretrain_examples(split, table);
  auto seq = cfg.seq;
  seq.num_codebooks = table.num_codebooks();
  if (!codebooks.empty()) seq.codebook_size = codebooks.front().rows();
  std::size_t cats = 0;
  for (const auto& [id, c] : table.category) cats = std::max(cats, c + 1);
  seq.num_categories = std::max<std::size_t>(cats, 1);
  seqmodel::PretrainResult res;
  if (cfg.ladq.enabled) {
    ladq::Controller controller(cfg.ladq, plan_log);
    res = ladq::pretrain_with_ladq(examples, seq, controller);
  } else {
    res = seqmodel::pretrain(examples, seq);
  }
  res.model.set_codebooks(codebooks);
  return res;
}

grpo::PosttrainResult posttrain_stage(const seqmodel::SeqModel& init, const EvalSplit& split, const ItemTable& table,
                                      const ExperimentConfig& cfg, rewards::RewardTrace* trace) {
  const auto contexts = posttrain_contexts(split, table, cfg.grpo.reward.h, cfg.grpo.reward.w);
  const auto index = build_index(init.codebooks(), table);
  const auto valid = eval_cases(split, table, SplitPart::valid);
  const auto k = *std::max_element(cfg.decode.ks.begin(), cfg.decode.ks.end());
  const grpo::Validator validator = [&](const seqmodel::SeqModel& m) {
    return evaluate(m, index, valid, cfg.decode, cfg.seed).recall_at(k);
  };
  return grpo::policy_update(init, contexts, index, cfg.grpo, validator, trace);
}

}  // namespace reg4rec::dataeval
