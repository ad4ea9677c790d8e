// SPDX-License-Identifier: Apache-2.0
#include "lga/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lga/error.hpp"
#include "lga/random.hpp"

namespace lga {

using json = nlohmann::json;

namespace {

constexpr std::string_view kSubjectSlot = "{S}";

const std::vector<std::string> kRelationNames = {
    "capital", "leader", "rival", "mentor", "partner", "neighbor",
    "founder", "heir",   "ally",  "owner",  "patron",  "student"};

const std::vector<std::string> kSyllables = {"ka", "lo", "mi", "ne", "ru", "ta", "vo", "zi",
                                             "be", "du", "fa", "go", "hi", "ju", "pe", "so"};

std::vector<std::string> split_words(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const std::size_t j = s.find(' ', i);
    const std::size_t end = j == std::string_view::npos ? s.size() : j;
    if (end > i) out.emplace_back(s.substr(i, end - i));
    i = end + 1;
  }
  return out;
}

std::string fill_subject(const std::string& tmpl, const std::string& subject) {
  std::string out = tmpl;
  const auto pos = out.find(kSubjectSlot);
  out.replace(pos, kSubjectSlot.size(), subject);
  return out;
}

std::string entity_name(std::size_t i) {
  // Two syllables cover 256 entities; a third is appended beyond that.
  std::string name = kSyllables[i % 16] + kSyllables[(i / 16) % 16];
  if (i >= 256) name += kSyllables[(i / 256) % 16];
  if (i >= 4096) name += std::to_string(i / 4096);
  return name;
}

Relation make_relation(std::size_t i) {
  Relation r;
  r.name = i < kRelationNames.size() ? kRelationNames[i] : "relation" + std::to_string(i);
  // The subject closes every template, so the answer is read off the last
  // subject token.
  r.templates = {"the " + r.name + " of {S}", "name the " + r.name + " of {S}",
                 "we know the " + r.name + " of {S}"};
  return r;
}

std::optional<std::pair<std::size_t, std::size_t>> find_span(const TokenSeq& haystack,
                                                              const TokenSeq& needle) {
  if (needle.empty() || needle.size() > haystack.size()) return std::nullopt;
  // Last occurrence: the subject is the final entity mention in every template.
  for (std::size_t i = haystack.size() - needle.size() + 1; i-- > 0;) {
    if (std::equal(needle.begin(), needle.end(), haystack.begin() + static_cast<long>(i)))
      return std::pair{i, i + needle.size()};
  }
  return std::nullopt;
}

}  // namespace

// ---------------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary() {
  add("<bos>");
  add("<eos>");
  add("<pad>");
}

TokenId Vocabulary::add(std::string_view token) {
  std::string key(token);
  if (auto it = index_.find(key); it != index_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.push_back(key);
  index_.emplace(std::move(key), id);
  return id;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw ValidationError("out-of-vocabulary token '" + std::string(token) + "'");
  return it->second;
}

TokenSeq Vocabulary::encode(std::string_view sentence) const {
  TokenSeq out;
  for (const auto& w : split_words(sentence)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(const TokenSeq& seq) const {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += token(seq[i]);
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingInput(path.string());
  Vocabulary v;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (n <= 3) {
      if (line != v.tokens_[n - 1]) throw ParseError(n, "expected special token " + v.tokens_[n - 1]);
      continue;
    }
    if (line.empty() || v.contains(line)) throw ParseError(n, "empty or duplicate token");
    v.add(line);
  }
  if (n < 3) throw ParseError(n, "vocabulary is missing special tokens");
  return v;
}

// ---------------------------------------------------------------- FactWorld

std::optional<int> FactWorld::object_of(int subject, int relation) const {
  for (const auto& f : facts)
    if (f.subject == subject && f.relation == relation) return f.object;
  return std::nullopt;
}

std::optional<int> FactWorld::chain_of(int fact) const {
  for (std::size_t i = 0; i < chains.size(); ++i)
    if (chains[i].fact == fact) return static_cast<int>(i);
  return std::nullopt;
}

Vocabulary FactWorld::vocabulary() const {
  Vocabulary v;
  for (const auto& r : relations) {
    for (const auto& t : r.templates)
      for (const auto& w : split_words(t))
        if (w != kSubjectSlot) v.add(w);
  }
  v.add("the");
  v.add("of");
  v.add("is");
  for (const auto& e : entities) v.add(e);
  return v;
}

std::string FactWorld::query_text(int subject, int relation, std::size_t variant) const {
  return fill_subject(relations.at(static_cast<std::size_t>(relation)).templates.at(variant),
                      entities.at(static_cast<std::size_t>(subject)));
}

std::string FactWorld::two_hop_text(int subject, int relation, int follow_relation) const {
  return "the " + relations.at(static_cast<std::size_t>(follow_relation)).name + " of the " +
         relations.at(static_cast<std::size_t>(relation)).name + " of " +
         entities.at(static_cast<std::size_t>(subject));
}

std::vector<std::pair<std::string, std::string>> FactWorld::training_pairs() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : facts) {
    const auto& rel = relations[static_cast<std::size_t>(f.relation)];
    for (std::size_t v = 0; v < rel.templates.size(); ++v)
      out.emplace_back(query_text(f.subject, f.relation, v), entities[static_cast<std::size_t>(f.object)]);
  }
  for (const auto& c : chains) {
    const auto& f = facts[static_cast<std::size_t>(c.fact)];
    out.emplace_back(two_hop_text(f.subject, f.relation, c.follow_relation),
                     entities[static_cast<std::size_t>(c.implied_object)]);
  }
  return out;
}

bool FactWorld::operator==(const FactWorld& o) const {
  if (entities != o.entities || facts != o.facts || chains != o.chains) return false;
  if (relations.size() != o.relations.size()) return false;
  for (std::size_t i = 0; i < relations.size(); ++i)
    if (relations[i].name != o.relations[i].name || relations[i].templates != o.relations[i].templates)
      return false;
  return true;
}

TokenSeq join_sequence(const TokenSeq& query, const TokenSeq& answer) {
  TokenSeq s;
  s.reserve(query.size() + answer.size() + 1);
  s.push_back(kBos);
  s.insert(s.end(), query.begin(), query.end());
  s.insert(s.end(), answer.begin(), answer.end());
  return s;
}

TokenSeq prompt_of(const TokenSeq& query) { return join_sequence(query, {}); }

// ---------------------------------------------------------------- generation

FactWorld generate_world(std::uint64_t seed, std::size_t n_entities, std::size_t n_relations,
                         std::size_t n_facts) {
  if (n_entities == 0 || n_relations == 0 || n_facts == 0)
    throw InvalidArgument("generate_world: counts must be positive");
  if (n_facts > n_entities * n_relations)
    throw InvalidArgument("generate_world: n_facts exceeds n_entities * n_relations");

  Rng rng(mix_seed(seed, 1));
  FactWorld w;
  for (std::size_t i = 0; i < n_entities; ++i) w.entities.push_back(entity_name(i));
  for (std::size_t i = 0; i < n_relations; ++i) w.relations.push_back(make_relation(i));

  std::vector<std::pair<int, int>> pairs;
  for (std::size_t s = 0; s < n_entities; ++s)
    for (std::size_t r = 0; r < n_relations; ++r) pairs.emplace_back(static_cast<int>(s), static_cast<int>(r));
  rng.shuffle(pairs);
  pairs.resize(n_facts);
  std::sort(pairs.begin(), pairs.end());

  const auto pick_other = [&](int subject, const std::vector<int>& pool) {
    if (pool.size() == 1) return pool[0];
    for (;;) {
      const int o = pool[rng.below(pool.size())];
      if (o != subject) return o;
    }
  };

  std::vector<int> all(n_entities);
  for (std::size_t i = 0; i < n_entities; ++i) all[i] = static_cast<int>(i);
  for (const auto& [s, r] : pairs) w.facts.push_back({s, r, pick_other(s, all)});

  // Guarantee at least 20% of facts can head a chain by pointing objects at
  // entities that have facts of their own.
  std::set<int> subject_set;
  for (const auto& f : w.facts) subject_set.insert(f.subject);
  const std::vector<int> subjects(subject_set.begin(), subject_set.end());
  const auto chainable = [&](const Fact& f) { return subject_set.contains(f.object); };
  const std::size_t target = (n_facts + 4) / 5;
  std::size_t have = static_cast<std::size_t>(std::count_if(w.facts.begin(), w.facts.end(), chainable));
  std::vector<std::size_t> order(w.facts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  for (std::size_t i = 0; i < order.size() && have < target; ++i) {
    auto& f = w.facts[order[i]];
    if (chainable(f)) continue;
    f.object = pick_other(f.subject, subjects);
    if (chainable(f)) ++have;
  }

  for (std::size_t fi = 0; fi < w.facts.size(); ++fi) {
    const auto& f = w.facts[fi];
    std::vector<int> follow;
    for (std::size_t r = 0; r < n_relations; ++r)
      if (w.object_of(f.object, static_cast<int>(r))) follow.push_back(static_cast<int>(r));
    if (follow.empty()) continue;
    const int r2 = follow[rng.below(follow.size())];
    w.chains.push_back({static_cast<int>(fi), r2, *w.object_of(f.object, r2)});
  }
  return w;
}

std::vector<EditQuery> build_edit_set(const FactWorld& world, std::size_t n_edits, std::uint64_t seed) {
  if (world.entities.size() < 2) throw InvalidArgument("build_edit_set: world needs at least 2 entities");
  if (n_edits > world.facts.size()) throw InvalidArgument("build_edit_set: n_edits exceeds fact count");

  const Vocabulary vocab = world.vocabulary();
  Rng rng(mix_seed(seed, 2));
  std::vector<std::size_t> order(world.facts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  order.resize(n_edits);

  std::vector<EditQuery> out;
  out.reserve(n_edits);
  for (const std::size_t fi : order) {
    const Fact& f = world.facts[fi];
    const auto& rel = world.relations[static_cast<std::size_t>(f.relation)];
    const auto chain = world.chain_of(static_cast<int>(fi));

    // A fact heading a chain takes a new object that keeps the chain answerable.
    std::vector<int> candidates;
    for (std::size_t e = 0; e < world.entities.size(); ++e) {
      const int ei = static_cast<int>(e);
      if (ei == f.object) continue;
      if (chain && !world.object_of(ei, world.chains[static_cast<std::size_t>(*chain)].follow_relation))
        continue;
      candidates.push_back(ei);
    }
    if (candidates.empty())
      for (std::size_t e = 0; e < world.entities.size(); ++e)
        if (static_cast<int>(e) != f.object) candidates.push_back(static_cast<int>(e));
    const int new_object = candidates[rng.below(candidates.size())];

    EditQuery q;
    q.id = "fact-" + std::to_string(fi);
    q.query = vocab.encode(world.query_text(f.subject, f.relation, 0));
    q.old_knowledge = {vocab.id(world.entities[static_cast<std::size_t>(f.object)])};
    q.new_knowledge = {vocab.id(world.entities[static_cast<std::size_t>(new_object)])};
    q.subject_span = *find_span(q.query, {vocab.id(world.entities[static_cast<std::size_t>(f.subject)])});
    for (std::size_t v = 1; v < rel.templates.size(); ++v)
      q.rephrases.push_back(vocab.encode(world.query_text(f.subject, f.relation, v)));

    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < world.facts.size(); ++j)
      if (j != fi) others.push_back(j);
    rng.shuffle(others);
    for (std::size_t k = 0; k < std::min<std::size_t>(2, others.size()); ++k) {
      const Fact& g = world.facts[others[k]];
      q.locality.push_back({vocab.encode(world.query_text(g.subject, g.relation, 0)),
                            {vocab.id(world.entities[static_cast<std::size_t>(g.object)])}});
    }

    if (chain) {
      const int r2 = world.chains[static_cast<std::size_t>(*chain)].follow_relation;
      if (auto implied = world.object_of(new_object, r2))
        q.portability.push_back({vocab.encode(world.two_hop_text(f.subject, f.relation, r2)),
                                 {vocab.id(world.entities[static_cast<std::size_t>(*implied)])}});
    }
    out.push_back(std::move(q));
  }
  return out;
}

ProxyTestSplit split_proxy_test(const std::vector<EditQuery>& edits, double proxy_fraction,
                                std::uint64_t seed) {
  if (edits.empty()) throw InvalidArgument("split_proxy_test: empty edit set");
  if (edits.size() < 10) throw InvalidArgument("split_proxy_test: need at least 10 edits");
  if (!(proxy_fraction > 0.0 && proxy_fraction < 1.0))
    throw InvalidArgument("split_proxy_test: proxy_fraction must be in (0, 1)");
  std::vector<std::size_t> order(edits.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 3));
  rng.shuffle(order);
  const auto n_proxy = static_cast<std::size_t>(std::llround(proxy_fraction * static_cast<double>(edits.size())));
  ProxyTestSplit split;
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_proxy ? split.proxy : split.test).push_back(edits[order[i]]);
  return split;
}

// ---------------------------------------------------------------- persistence

namespace {

json probes_to_json(const std::vector<Probe>& probes, const Vocabulary& v) {
  json arr = json::array();
  for (const auto& p : probes) arr.push_back({v.decode(p.query), v.decode(p.answer)});
  return arr;
}

std::vector<Probe> probes_from_json(const json& arr, const Vocabulary& v) {
  std::vector<Probe> out;
  for (const auto& p : arr) {
    if (!p.is_array() || p.size() != 2) throw std::invalid_argument("probe must be [query, answer]");
    out.push_back({v.encode(p[0].get<std::string>()), v.encode(p[1].get<std::string>())});
  }
  return out;
}

}  // namespace

void serialize_edits(const std::filesystem::path& path, const std::vector<EditQuery>& edits,
                     const Vocabulary& vocab, const std::string& header_comment) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (!header_comment.empty()) out << "# " << header_comment << '\n';
  for (const auto& e : edits) {
    json rec;
    rec["id"] = e.id;
    rec["query"] = vocab.decode(e.query);
    rec["subject"] = vocab.decode(TokenSeq(e.query.begin() + static_cast<long>(e.subject_span.first),
                                           e.query.begin() + static_cast<long>(e.subject_span.second)));
    rec["old"] = vocab.decode(e.old_knowledge);
    rec["new"] = vocab.decode(e.new_knowledge);
    json reph = json::array();
    for (const auto& r : e.rephrases) reph.push_back(vocab.decode(r));
    rec["rephrases"] = reph;
    rec["locality"] = probes_to_json(e.locality, vocab);
    rec["portability"] = probes_to_json(e.portability, vocab);
    out << rec.dump() << '\n';
  }
}

std::vector<EditQuery> deserialize_edits(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInput(path.string());
  std::vector<EditQuery> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line[0] == '#') continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(n, e.what());
    }
    EditQuery q;
    try {
      q.id = rec.at("id").get<std::string>();
      q.query = vocab.encode(rec.at("query").get<std::string>());
      q.old_knowledge = vocab.encode(rec.at("old").get<std::string>());
      q.new_knowledge = vocab.encode(rec.at("new").get<std::string>());
      for (const auto& r : rec.at("rephrases")) q.rephrases.push_back(vocab.encode(r.get<std::string>()));
      q.locality = probes_from_json(rec.at("locality"), vocab);
      q.portability = probes_from_json(rec.at("portability"), vocab);
      const auto span = find_span(q.query, vocab.encode(rec.at("subject").get<std::string>()));
      if (!span) throw ValidationError("subject not found in query");
      q.subject_span = *span;
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(n) + ": " + e.what());
    } catch (const json::exception& e) {
      throw ParseError(n, e.what());
    } catch (const std::invalid_argument& e) {
      throw ParseError(n, e.what());
    }
    out.push_back(std::move(q));
  }
  return out;
}

void save_world(const std::filesystem::path& path, const FactWorld& w, const std::string& config_hash) {
  json j;
  j["config_hash"] = config_hash;
  j["entities"] = w.entities;
  json rels = json::array();
  for (const auto& r : w.relations) rels.push_back({{"name", r.name}, {"templates", r.templates}});
  j["relations"] = rels;
  json facts = json::array();
  for (const auto& f : w.facts) facts.push_back({f.subject, f.relation, f.object});
  j["facts"] = facts;
  json chains = json::array();
  for (const auto& c : w.chains) chains.push_back({c.fact, c.follow_relation, c.implied_object});
  j["chains"] = chains;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

FactWorld load_world(const std::filesystem::path& path, std::string* config_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingInput(path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(e.byte, e.what());
  }
  FactWorld w;
  w.entities = j.at("entities").get<std::vector<std::string>>();
  for (const auto& r : j.at("relations"))
    w.relations.push_back({r.at("name").get<std::string>(), r.at("templates").get<std::vector<std::string>>()});
  for (const auto& f : j.at("facts")) w.facts.push_back({f[0].get<int>(), f[1].get<int>(), f[2].get<int>()});
  for (const auto& c : j.at("chains")) w.chains.push_back({c[0].get<int>(), c[1].get<int>(), c[2].get<int>()});
  if (config_hash) *config_hash = j.value("config_hash", "");
  return w;
}

}  // namespace lga
