#include "reg4rec/dataeval/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "reg4rec/error.hpp"

namespace reg4rec::dataeval {

namespace {

std::string at_line(const std::filesystem::path& path, std::size_t line, const std::string& msg) {
  return path.filename().string() + ":" + std::to_string(line) + ": " + msg;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

template <typename T>
bool parse_int(const std::string& s, T& out) {
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io-error", "cannot open " + path.string());
  return in;
}

std::vector<Interaction> read_csv(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string line;
  if (!std::getline(in, line)) throw Error("invalid-schema", at_line(path, 1, "missing header"));
  const auto header = split_csv(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* name : {"user", "item", "ts", "category"})
    if (!col.count(name)) throw Error("invalid-schema", at_line(path, 1, std::string("missing column '") + name + "'"));
  std::vector<Interaction> out;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv(line);
    if (f.size() != header.size())
      throw Error("invalid-schema", at_line(path, n, "expected " + std::to_string(header.size()) + " fields, got " +
                                                         std::to_string(f.size())));
    Interaction r;
    r.user = f[col["user"]];
    r.item = f[col["item"]];
    if (r.user.empty() || r.item.empty()) throw Error("invalid-schema", at_line(path, n, "empty user or item"));
    if (!parse_int(f[col["ts"]], r.ts)) throw Error("invalid-schema", at_line(path, n, "ts is not an integer"));
    if (!parse_int(f[col["category"]], r.category))
      throw Error("invalid-schema", at_line(path, n, "category is not a non-negative integer"));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<Interaction> read_jsonl(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<Interaction> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Interaction r;
      r.user = j.at("user").get<std::string>();
      r.item = j.at("item").get<std::string>();
      r.ts = j.at("ts").get<std::int64_t>();
      if (!j.at("category").is_number_unsigned()) throw Error("invalid-schema", "category must be non-negative");
      r.category = j.at("category").get<std::size_t>();
      if (r.user.empty() || r.item.empty()) throw Error("invalid-schema", "empty user or item");
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error("invalid-schema", at_line(path, n, e.what()));
    } catch (const Error& e) {
      throw Error(e.code(), at_line(path, n, e.what()));
    }
  }
  return out;
}

}  // namespace

std::size_t InteractionLog::num_categories() const {
  std::size_t c = 0;
  for (const auto& [id, info] : items) c = std::max(c, info.category + 1);
  return c;
}

std::size_t InteractionLog::feature_dim() const { return items.empty() ? 0 : items.begin()->second.features.size(); }

std::map<std::string, std::vector<std::string>> InteractionLog::sequences() const {
  std::map<std::string, std::vector<const Interaction*>> by_user;
  for (const auto& r : records) by_user[r.user].push_back(&r);
  std::map<std::string, std::vector<std::string>> out;
  for (auto& [user, rs] : by_user) {
    std::stable_sort(rs.begin(), rs.end(), [](const Interaction* a, const Interaction* b) { return a->ts < b->ts; });
    auto& seq = out[user];
    for (const auto* r : rs) seq.push_back(r->item);
  }
  return out;
}

std::vector<std::string> InteractionLog::item_ids() const {
  std::vector<std::string> out;
  for (const auto& [id, info] : items) out.push_back(id);
  return out;
}

numerics::Tensor InteractionLog::feature_matrix() const {
  const auto d = feature_dim();
  std::vector<double> values;
  values.reserve(items.size() * d);
  for (const auto& [id, info] : items) values.insert(values.end(), info.features.begin(), info.features.end());
  return numerics::Tensor({items.size(), d}, std::move(values));
}

Format format_from_path(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".csv") return Format::csv;
  if (ext == ".jsonl" || ext == ".json") return Format::jsonl;
  throw Error("invalid-format", "cannot infer format of " + path.string());
}

std::map<std::string, ItemInfo> load_item_features(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::map<std::string, ItemInfo> out;
  std::string line;
  std::size_t n = 0, dim = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::string id;
    ItemInfo info;
    try {
      const auto j = nlohmann::json::parse(line);
      id = j.at("item").get<std::string>();
      if (!j.at("category").is_number_unsigned()) throw Error("invalid-schema", "category must be non-negative");
      info.category = j.at("category").get<std::size_t>();
      info.features = j.at("features").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw Error("invalid-schema", at_line(path, n, e.what()));
    } catch (const Error& e) {
      throw Error(e.code(), at_line(path, n, e.what()));
    }
    if (info.features.empty()) throw Error("invalid-schema", at_line(path, n, "empty feature vector"));
    if (dim == 0) dim = info.features.size();
    if (info.features.size() != dim) throw Error("invalid-schema", at_line(path, n, "feature dimension mismatch"));
    if (!std::all_of(info.features.begin(), info.features.end(), [](double v) { return std::isfinite(v); }))
      throw Error("invalid-schema", at_line(path, n, "non-finite feature"));
    if (!out.emplace(id, std::move(info)).second)
      throw Error("duplicate-record", at_line(path, n, "item '" + id + "' listed twice"));
  }
  return out;
}

InteractionLog load_interactions(const std::filesystem::path& path, Format format,
                                 const std::filesystem::path& features_path) {
  InteractionLog log;
  log.items = load_item_features(features_path);
  log.records = format == Format::csv ? read_csv(path) : read_jsonl(path);
  // Data lines are numbered as in the file: CSV has a header line.
  const std::size_t offset = format == Format::csv ? 2 : 1;
  std::set<std::tuple<std::string, std::string, std::int64_t>> seen;
  for (std::size_t i = 0; i < log.records.size(); ++i) {
    const auto& r = log.records[i];
    const auto line = i + offset;
    if (!seen.emplace(r.user, r.item, r.ts).second)
      throw Error("duplicate-record", at_line(path, line, "duplicate (user, item, ts)"));
    const auto it = log.items.find(r.item);
    if (it == log.items.end()) throw Error("unknown-item", at_line(path, line, "item '" + r.item + "' has no features"));
    if (it->second.category != r.category)
      throw Error("category-mismatch", at_line(path, line, "category differs from the feature file"));
  }
  return log;
}

void save_interactions(const std::filesystem::path& path, const InteractionLog& log, Format format) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("io-error", "cannot open " + path.string() + " for writing");
  if (format == Format::csv) {
    out << "user,item,ts,category\n";
    for (const auto& r : log.records) out << r.user << ',' << r.item << ',' << r.ts << ',' << r.category << '\n';
  } else {
    for (const auto& r : log.records)
      out << nlohmann::json{{"user", r.user}, {"item", r.item}, {"ts", r.ts}, {"category", r.category}}.dump()
          << '\n';
  }
  if (!out) throw Error("io-error", "short write to " + path.string());
}

void save_item_features(const std::filesystem::path& path, const InteractionLog& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("io-error", "cannot open " + path.string() + " for writing");
  for (const auto& [id, info] : log.items)
    out << nlohmann::json{{"item", id}, {"category", info.category}, {"features", info.features}}.dump() << '\n';
  if (!out) throw Error("io-error", "short write to " + path.string());
}

void SynthConfig::validate() const {
  if (n_users == 0 || n_items < 2) throw Error("invalid-config", "synth needs users and at least two items");
  if (n_categories == 0 || n_categories > n_items) throw Error("invalid-config", "need 1 <= categories <= items");
  if (min_len < 1 || max_len < min_len) throw Error("invalid-config", "need 1 <= min_len <= max_len");
  if (!(p >= 0.0 && p <= 1.0)) throw Error("invalid-config", "p must lie in [0, 1]");
  if (num_codebooks == 0 || codebook_size < 2 || block_dim == 0)
    throw Error("invalid-config", "need codebooks, codebook_size >= 2 and block_dim >= 1");
  if (!(noise >= 0.0) || !(stickiness >= 0.0 && stickiness <= 1.0))
    throw Error("invalid-config", "noise must be >= 0 and stickiness in [0, 1]");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"n_users", c.n_users},
       {"n_items", c.n_items},
       {"n_categories", c.n_categories},
       {"min_len", c.min_len},
       {"max_len", c.max_len},
       {"p", c.p},
       {"num_codebooks", c.num_codebooks},
       {"codebook_size", c.codebook_size},
       {"block_dim", c.block_dim},
       {"noise", c.noise},
       {"stickiness", c.stickiness}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  c.n_users = j.value("n_users", d.n_users);
  c.n_items = j.value("n_items", d.n_items);
  c.n_categories = j.value("n_categories", d.n_categories);
  c.min_len = j.value("min_len", d.min_len);
  c.max_len = j.value("max_len", d.max_len);
  c.p = j.value("p", d.p);
  c.num_codebooks = j.value("num_codebooks", d.num_codebooks);
  c.codebook_size = j.value("codebook_size", d.codebook_size);
  c.block_dim = j.value("block_dim", d.block_dim);
  c.noise = j.value("noise", d.noise);
  c.stickiness = j.value("stickiness", d.stickiness);
}

namespace {

std::string padded(char prefix, std::size_t i, std::size_t n) {
  std::ostringstream s;
  s << prefix << std::setw(static_cast<int>(std::to_string(n > 0 ? n - 1 : 0).size())) << std::setfill('0') << i;
  return s.str();
}

}  // namespace

SynthCorpus synth_corpus(const SynthConfig& cfg, numerics::RngStream& rng) {
  cfg.validate();
  auto chain_rng = rng.substream("synth-chain");
  auto feat_rng = rng.substream("synth-features");
  auto cat_rng = rng.substream("synth-categories");
  auto user_rng = rng.substream("synth-users");
  const auto M = cfg.num_codebooks, D = cfg.codebook_size, B = cfg.block_dim;
  SynthCorpus out;

  std::vector<std::string> ids;
  for (std::size_t i = 0; i < cfg.n_items; ++i) ids.push_back(padded('i', i, cfg.n_items));

  // Hidden chain: each item copies its predecessor and redraws floor(M/2) codebooks.
  std::vector<std::size_t> chain(cfg.n_items);
  std::iota(chain.begin(), chain.end(), std::size_t{0});
  chain_rng.shuffle(chain.begin(), chain.end());
  std::vector<std::vector<std::size_t>> codes(cfg.n_items, std::vector<std::size_t>(M));
  for (auto& c : codes[chain[0]]) c = chain_rng.index(D);
  std::vector<std::size_t> books(M);
  std::iota(books.begin(), books.end(), std::size_t{0});
  for (std::size_t k = 1; k < cfg.n_items; ++k) {
    codes[chain[k]] = codes[chain[k - 1]];
    chain_rng.shuffle(books.begin(), books.end());
    for (std::size_t r = 0; r < M / 2; ++r) codes[chain[k]][books[r]] = chain_rng.index(D);
  }
  std::vector<std::size_t> succ(cfg.n_items);
  for (std::size_t k = 0; k < cfg.n_items; ++k)
    succ[chain[k]] = k + 1 < cfg.n_items ? chain[k + 1] : chain[k - 1];

  // Categories are independent of the chain; every category is non-empty.
  std::vector<std::size_t> order(cfg.n_items);
  std::iota(order.begin(), order.end(), std::size_t{0});
  cat_rng.shuffle(order.begin(), order.end());
  std::vector<std::size_t> category(cfg.n_items);
  std::vector<std::vector<std::size_t>> by_cat(cfg.n_categories);
  for (std::size_t k = 0; k < cfg.n_items; ++k) category[order[k]] = k % cfg.n_categories;
  for (std::size_t i = 0; i < cfg.n_items; ++i) by_cat[category[i]].push_back(i);
  std::vector<std::vector<double>> trans(cfg.n_categories, std::vector<double>(cfg.n_categories));
  for (std::size_t c = 0; c < cfg.n_categories; ++c) {
    double s = 0.0;
    for (auto& v : trans[c]) s += (v = cat_rng.uniform());
    for (auto& v : trans[c]) v *= (1.0 - cfg.stickiness) / s;
    trans[c][c] += cfg.stickiness;
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(B));
  for (std::size_t r = 0; r < M; ++r) {
    numerics::Tensor cw = numerics::Tensor::matrix(D, B);
    for (auto& v : cw.data()) v = feat_rng.normal() * scale;
    out.block_codewords.push_back(std::move(cw));
  }
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    ItemInfo info;
    info.category = category[i];
    info.features.reserve(M * B);
    for (std::size_t r = 0; r < M; ++r)
      for (std::size_t b = 0; b < B; ++b)
        info.features.push_back(out.block_codewords[r](codes[i][r], b) + cfg.noise * feat_rng.normal());
    out.log.items.emplace(ids[i], std::move(info));
    out.planted.emplace(ids[i], mpq::TokenSet(codes[i]));
    out.successor.emplace(ids[i], ids[succ[i]]);
  }

  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    const auto user = padded('u', u, cfg.n_users);
    const auto len = cfg.min_len + user_rng.index(cfg.max_len - cfg.min_len + 1);
    std::size_t cur = user_rng.index(cfg.n_items);
    for (std::size_t t = 0; t < len; ++t) {
      out.log.records.push_back({user, ids[cur], static_cast<std::int64_t>(t), category[cur]});
      if (user_rng.uniform() < cfg.p) {
        cur = succ[cur];
      } else {
        const auto c = user_rng.categorical(trans[category[cur]]);
        const auto& pool = by_cat[c];
        if (pool.size() == 1 && pool[0] == cur) {
          cur = succ[cur];
        } else {
          std::size_t next = cur;
          while (next == cur) next = pool[user_rng.index(pool.size())];
          cur = next;
        }
      }
    }
  }
  return out;
}

EvalSplit leave_one_out(const InteractionLog& log, std::size_t min_interactions) {
  if (min_interactions < 3) throw Error("invalid-config", "leave-one-out needs at least 3 interactions per user");
  EvalSplit split;
  for (auto& [user, seq] : log.sequences()) {
    if (seq.size() < min_interactions) {
      ++split.dropped;
      continue;
    }
    UserSplit u;
    u.user = user;
    u.train.assign(seq.begin(), seq.end() - 2);
    u.valid = seq[seq.size() - 2];
    u.test = seq.back();
    split.users.push_back(std::move(u));
  }
  if (split.users.empty())
    throw Error("empty-split", "no user has at least " + std::to_string(min_interactions) + " interactions");
  return split;
}

double recall_at_k(std::span<const std::string> ranked, const std::string& target, std::size_t k) {
  if (k == 0) throw Error("invalid-k", "K must be at least 1");
  const auto n = std::min(k, ranked.size());
  return std::find(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(n), target) !=
                 ranked.begin() + static_cast<std::ptrdiff_t>(n)
             ? 1.0
             : 0.0;
}

double ndcg_at_k(std::span<const std::string> ranked, const std::string& target, std::size_t k) {
  if (k == 0) throw Error("invalid-k", "K must be at least 1");
  const auto n = std::min(k, ranked.size());
  for (std::size_t i = 0; i < n; ++i)
    if (ranked[i] == target) return 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return 0.0;
}

}  // namespace reg4rec::dataeval
