// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lga/fwd.hpp"

namespace lga {

/// Closed whole-word vocabulary. Indices 0..2 are BOS, EOS and PAD.
class Vocabulary {
 public:
  Vocabulary();

  /// Adds a token if absent and returns its id.
  TokenId add(std::string_view token);

  /// Throws ValidationError for out-of-vocabulary tokens.
  TokenId id(std::string_view token) const;
  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  /// Splits on single spaces.
  TokenSeq encode(std::string_view sentence) const;
  std::string decode(const TokenSeq& seq) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// A relation with one canonical template and its paraphrases. Templates are
/// space-separated words with a single "{S}" subject slot; the answer follows
/// the last word.
struct Relation {
  std::string name;
  std::vector<std::string> templates;
};

struct Fact {
  int subject = 0;
  int relation = 0;
  int object = 0;
  bool operator==(const Fact&) const = default;
};

/// facts[fact] = (s, r, o) and (o, follow_relation) -> implied_object.
struct Chain {
  int fact = 0;
  int follow_relation = 0;
  int implied_object = 0;
  bool operator==(const Chain&) const = default;
};

struct FactWorld {
  std::vector<std::string> entities;
  std::vector<Relation> relations;
  std::vector<Fact> facts;
  std::vector<Chain> chains;

  std::optional<int> object_of(int subject, int relation) const;
  std::optional<int> chain_of(int fact) const;

  /// Specials, template words, then entity names, in a fixed order.
  Vocabulary vocabulary() const;

  /// Query words for `subject` under template `variant` of `relation`.
  std::string query_text(int subject, int relation, std::size_t variant = 0) const;
  std::string two_hop_text(int subject, int relation, int follow_relation) const;

  /// Every sentence the model is trained on: each fact under each template,
  /// plus the two-hop sentence for each chain. Each entry is (query, answer).
  std::vector<std::pair<std::string, std::string>> training_pairs() const;

  bool operator==(const FactWorld& other) const;
};

struct Probe {
  TokenSeq query;
  TokenSeq answer;
  bool operator==(const Probe&) const = default;
};

/// One editing sample: query Q, old knowledge K, new target K'.
struct EditQuery {
  std::string id;
  TokenSeq query;
  TokenSeq old_knowledge;
  TokenSeq new_knowledge;
  /// [begin, end) of the subject tokens inside `query`.
  std::pair<std::size_t, std::size_t> subject_span{0, 0};
  std::vector<TokenSeq> rephrases;
  std::vector<Probe> locality;
  std::vector<Probe> portability;

  std::size_t last_subject_pos() const { return subject_span.second - 1; }
  bool operator==(const EditQuery&) const = default;
};

/// [BOS] + query + answer; the sequence the autoregressive loss is taken on.
TokenSeq join_sequence(const TokenSeq& query, const TokenSeq& answer);
/// [BOS] + query.
TokenSeq prompt_of(const TokenSeq& query);

FactWorld generate_world(std::uint64_t seed, std::size_t n_entities, std::size_t n_relations,
                         std::size_t n_facts);

std::vector<EditQuery> build_edit_set(const FactWorld& world, std::size_t n_edits,
                                      std::uint64_t seed);

struct ProxyTestSplit {
  std::vector<EditQuery> proxy;
  std::vector<EditQuery> test;
};

ProxyTestSplit split_proxy_test(const std::vector<EditQuery>& edits, double proxy_fraction,
                                std::uint64_t seed);

/// One JSON object per line. Lines starting with '#' are metadata comments.
void serialize_edits(const std::filesystem::path& path, const std::vector<EditQuery>& edits,
                     const Vocabulary& vocab, const std::string& header_comment = {});
std::vector<EditQuery> deserialize_edits(const std::filesystem::path& path, const Vocabulary& vocab);

/// World file: one JSON document, used by the CLI to hand the world between stages.
void save_world(const std::filesystem::path& path, const FactWorld& world,
                const std::string& config_hash = {});
FactWorld load_world(const std::filesystem::path& path, std::string* config_hash = nullptr);

}  // namespace lga
