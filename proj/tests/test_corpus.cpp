// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "lga/corpus.hpp"
#include "lga/error.hpp"

using namespace lga;

namespace {

std::size_t fact_index(const EditQuery& q) { return std::stoul(q.id.substr(q.id.find('-') + 1)); }

int entity_of(const FactWorld& w, const Vocabulary& v, TokenId t) {
  const auto& name = v.token(t);
  for (std::size_t e = 0; e < w.entities.size(); ++e)
    if (w.entities[e] == name) return static_cast<int>(e);
  return -1;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_SUITE("corpus") {

TEST_CASE("vocabulary reserves specials and is a bijection") {
  const FactWorld w = generate_world(1, 10, 4, 30);
  const Vocabulary v = w.vocabulary();
  CHECK(v.token(kBos) == "<bos>");
  CHECK(v.token(kEos) == "<eos>");
  CHECK(v.token(kPad) == "<pad>");
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(v.id(v.token(static_cast<TokenId>(i))) == static_cast<TokenId>(i));
  const std::set<std::string> distinct(v.tokens().begin(), v.tokens().end());
  CHECK(distinct.size() == v.size());
}

TEST_CASE("encode then decode is the identity") {
  const FactWorld w = generate_world(3, 12, 3, 20);
  const Vocabulary v = w.vocabulary();
  for (const auto& [q, a] : w.training_pairs()) {
    CHECK(v.decode(v.encode(q)) == q);
    CHECK(v.decode(v.encode(a)) == a);
  }
  CHECK_THROWS_AS(v.encode("the capital of atlantis"), ValidationError);
}

TEST_CASE("vocabulary file round-trips") {
  const auto dir = testing::scratch_dir("vocab");
  const Vocabulary v = generate_world(1, 10, 4, 30).vocabulary();
  v.save(dir / "vocab.txt");
  CHECK(Vocabulary::load(dir / "vocab.txt") == v);
  const auto lines = lines_of(dir / "vocab.txt");
  REQUIRE(lines.size() == v.size());
  for (std::size_t i = 0; i < lines.size(); ++i) CHECK(lines[i] == v.tokens()[i]);
}

TEST_CASE("generate_world cardinality, functionality and chains") {
  const FactWorld w = generate_world(1, 10, 4, 30);
  CHECK(w.facts.size() == 30);
  std::set<std::pair<int, int>> pairs;
  for (const auto& f : w.facts) CHECK(pairs.emplace(f.subject, f.relation).second);
  for (const auto& c : w.chains) {
    const Fact& f = w.facts[static_cast<std::size_t>(c.fact)];
    REQUIRE(w.object_of(f.object, c.follow_relation).has_value());
    CHECK(*w.object_of(f.object, c.follow_relation) == c.implied_object);
  }
  CHECK(5 * w.chains.size() >= w.facts.size());
}

TEST_CASE("generate_world is deterministic and validates counts") {
  CHECK(generate_world(1, 10, 4, 30) == generate_world(1, 10, 4, 30));
  CHECK_FALSE(generate_world(1, 10, 4, 30) == generate_world(2, 10, 4, 30));
  CHECK_THROWS_AS(generate_world(1, 3, 2, 7), InvalidArgument);
  CHECK_THROWS_AS(generate_world(1, 0, 2, 1), InvalidArgument);
  CHECK_THROWS_AS(generate_world(1, 3, 0, 1), InvalidArgument);
  CHECK_THROWS_AS(generate_world(1, 3, 2, 0), InvalidArgument);
}

TEST_CASE("build_edit_set probes") {
  const FactWorld w = generate_world(1, 10, 4, 30);
  const Vocabulary v = w.vocabulary();
  const auto edits = build_edit_set(w, w.facts.size(), 1);

  SUBCASE("every fact edited exactly once") {
    std::set<std::size_t> seen;
    for (const auto& e : edits) CHECK(seen.insert(fact_index(e)).second);
    CHECK(seen.size() == w.facts.size());
  }

  SUBCASE("record contents") {
    for (const auto& e : edits) {
      const Fact& f = w.facts[fact_index(e)];
      CHECK(e.new_knowledge != e.old_knowledge);
      CHECK(entity_of(w, v, e.old_knowledge.front()) == f.object);
      CHECK(v.decode(e.query) == w.query_text(f.subject, f.relation, 0));
      CHECK(e.rephrases.size() >= 2);
      CHECK(e.locality.size() >= 2);
      CHECK(v.token(e.query[e.last_subject_pos()]) == w.entities[static_cast<std::size_t>(f.subject)]);

      // Locality probes never ask about the edited (subject, relation) pair.
      std::set<TokenSeq> edited_forms;
      for (std::size_t t = 0; t < w.relations[static_cast<std::size_t>(f.relation)].templates.size(); ++t)
        edited_forms.insert(v.encode(w.query_text(f.subject, f.relation, t)));
      for (const auto& p : e.locality) CHECK_FALSE(edited_forms.contains(p.query));

      for (const auto& s : {e.query, e.old_knowledge, e.new_knowledge})
        for (TokenId t : s) CHECK(static_cast<std::size_t>(t) < v.size());
    }
  }

  SUBCASE("portability follows the chain under the new object") {
    std::size_t with_chain = 0;
    for (const auto& e : edits) {
      const auto fi = fact_index(e);
      const auto chain = w.chain_of(static_cast<int>(fi));
      if (!chain) {
        CHECK(e.portability.empty());
        continue;
      }
      ++with_chain;
      REQUIRE(e.portability.size() == 1);
      const Fact& f = w.facts[fi];
      const int r2 = w.chains[static_cast<std::size_t>(*chain)].follow_relation;
      const int new_obj = entity_of(w, v, e.new_knowledge.front());
      const auto implied = w.object_of(new_obj, r2);
      REQUIRE(implied.has_value());
      CHECK(e.portability[0].query == v.encode(w.two_hop_text(f.subject, f.relation, r2)));
      CHECK(e.portability[0].answer == TokenSeq{v.id(w.entities[static_cast<std::size_t>(*implied)])});
    }
    CHECK(with_chain > 0);
  }
}

TEST_CASE("build_edit_set determinism and preconditions") {
  const FactWorld w = generate_world(1, 10, 4, 30);
  CHECK(build_edit_set(w, 12, 5) == build_edit_set(w, 12, 5));
  CHECK_THROWS_AS(build_edit_set(w, 31, 5), InvalidArgument);
  FactWorld lonely;
  lonely.entities = {"solo"};
  CHECK_THROWS_AS(build_edit_set(lonely, 0, 1), InvalidArgument);
}

TEST_CASE("split_proxy_test sizes and partition") {
  const FactWorld big = generate_world(1, 300, 4, 1000);
  const auto edits = build_edit_set(big, 1000, 1);
  const auto s = split_proxy_test(edits, 0.10, 7);
  CHECK(s.proxy.size() == 100);
  CHECK(s.test.size() == 900);

  const auto s270 = split_proxy_test(std::vector<EditQuery>(edits.begin(), edits.begin() + 270), 0.10, 7);
  CHECK(s270.proxy.size() == 27);
  CHECK(s270.test.size() == 243);

  const std::vector<EditQuery> ten(edits.begin(), edits.begin() + 10);
  const auto half = split_proxy_test(ten, 0.5, 3);
  REQUIRE(half.proxy.size() == 5);
  REQUIRE(half.test.size() == 5);
  std::set<std::string> ids;
  for (const auto& e : half.proxy) ids.insert(e.id);
  for (const auto& e : half.test) CHECK(ids.insert(e.id).second);
  CHECK(ids.size() == 10);

  CHECK(split_proxy_test(edits, 0.1, 7).proxy == s.proxy);
  CHECK_THROWS_AS(split_proxy_test({}, 0.1, 1), InvalidArgument);
  CHECK_THROWS_AS(split_proxy_test(ten, 0.0, 1), InvalidArgument);
  CHECK_THROWS_AS(split_proxy_test(ten, 1.0, 1), InvalidArgument);
}

TEST_CASE("edit set serialization") {
  const FactWorld w = generate_world(2, 10, 4, 30);
  const Vocabulary v = w.vocabulary();
  const auto edits = build_edit_set(w, 20, 2);
  const auto dir = testing::scratch_dir("jsonl");

  SUBCASE("round trip, with and without header comment") {
    serialize_edits(dir / "a.jsonl", edits, v);
    CHECK(deserialize_edits(dir / "a.jsonl", v) == edits);
    serialize_edits(dir / "b.jsonl", edits, v, "config_hash=0123");
    CHECK(lines_of(dir / "b.jsonl").front() == "# config_hash=0123");
    CHECK(deserialize_edits(dir / "b.jsonl", v) == edits);
  }

  SUBCASE("record keys") {
    serialize_edits(dir / "a.jsonl", edits, v);
    const auto first = lines_of(dir / "a.jsonl").front();
    for (const char* key : {"\"id\"", "\"query\"", "\"old\"", "\"new\"", "\"rephrases\"", "\"locality\"",
                            "\"portability\""})
      CHECK(first.find(key) != std::string::npos);
  }

  SUBCASE("truncated final line names its line number") {
    serialize_edits(dir / "a.jsonl", edits, v, "hdr");
    auto lines = lines_of(dir / "a.jsonl");
    lines.back().resize(lines.back().size() / 2);
    {
      std::ofstream out(dir / "t.jsonl");
      for (const auto& l : lines) out << l << '\n';
    }
    try {
      deserialize_edits(dir / "t.jsonl", v);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line == lines.size());
    }
  }

  SUBCASE("empty file gives an empty list") {
    std::ofstream(dir / "empty.jsonl").close();
    CHECK(deserialize_edits(dir / "empty.jsonl", v).empty());
  }

  SUBCASE("out-of-vocabulary token is a validation error") {
    serialize_edits(dir / "a.jsonl", edits, v);
    auto lines = lines_of(dir / "a.jsonl");
    const auto at = lines[0].find("\"new\":\"") + 7;
    lines[0].replace(at, lines[0].find('"', at) - at, "zzzz");
    {
      std::ofstream out(dir / "oov.jsonl");
      for (const auto& l : lines) out << l << '\n';
    }
    CHECK_THROWS_AS(deserialize_edits(dir / "oov.jsonl", v), ValidationError);
  }

  SUBCASE("missing file") { CHECK_THROWS_AS(deserialize_edits(dir / "nope.jsonl", v), MissingInput); }
}

TEST_CASE("world file round-trips with its hash") {
  const FactWorld w = generate_world(4, 10, 4, 30);
  const auto dir = testing::scratch_dir("world");
  save_world(dir / "w.json", w, "abc123");
  std::string hash;
  CHECK(load_world(dir / "w.json", &hash) == w);
  CHECK(hash == "abc123");
}

TEST_CASE("join_sequence and prompt_of") {
  CHECK(join_sequence({5, 6}, {7}) == TokenSeq{kBos, 5, 6, 7});
  CHECK(prompt_of({5, 6}) == TokenSeq{kBos, 5, 6});
}

}  // TEST_SUITE
