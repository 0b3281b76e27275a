#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "c2crs/corpus_io.hpp"
#include "support.hpp"

using namespace c2crs;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("c2crs_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  void write(const std::string& file, const std::string& text) const { std::ofstream(path / file) << text; }
};

void write_fixture(const TempDir& d) {
  d.write("kg.tsv", "#entities=3 relations=1 items=0,1\n0\t0\t2\n1\t0\t2\n");
  d.write("conversations.jsonl",
          R"({"id":"c1","utterances":[{"speaker":"seeker","text":"I like Alien","entities":[[2,0]],"items":[]},)"
          R"({"speaker":"recommender","text":"try Aliens","entities":[[1,1]],"items":[1]}]})"
          "\n"
          R"({"id":"c2","utterances":[{"speaker":"seeker","text":"something scary","entities":[]},)"
          R"({"speaker":"recommender","text":"what about horror","entities":[[2,2]]},)"
          R"({"speaker":"seeker","text":"sure","entities":[]}]})"
          "\n");
  d.write("reviews.jsonl",
          R"({"item_id":0,"sentences":["a scary classic","great monster"]})"
          "\n"
          R"({"item_id":1,"sentences":["more action"]})"
          "\n");
  d.write("alignment.jsonl",
          R"({"conversation_id":"c1","utterance":0,"pos":2,"entity":0,"review_item":0,"sentence":1})"
          "\n");
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

ConversationRecord conversation(const std::vector<std::vector<EntityId>>& items_per_utt, int tokens_per_utt = 2) {
  ConversationRecord rec;
  rec.conversation_id = "c";
  TokenId next = Vocabulary::kSpecialCount;
  for (std::size_t u = 0; u < items_per_utt.size(); ++u) {
    Utterance utt;
    utt.speaker = u % 2 ? Speaker::kRecommender : Speaker::kSeeker;
    for (int k = 0; k < tokens_per_utt; ++k) utt.token_ids.push_back(next++);
    utt.recommended_items = items_per_utt[u];
    rec.utterances.push_back(utt);
  }
  return rec;
}

}  // namespace

TEST_CASE("loader reads the fixture") {
  TempDir d("fixture");
  write_fixture(d);
  Corpus c = load_corpus_dir(d.path);
  CHECK(c.conversations.size() == 2);
  CHECK(c.kg.n_entities() == 3);
  CHECK(c.kg.n_relations() == 1);
  CHECK(c.kg.triples().size() == 2);
  CHECK(c.reviews.size() == 2);
  CHECK(c.alignment.size() == 1);
  CHECK(c.conversations[0].utterances[1].recommended_items == std::vector<EntityId>{1});
  CHECK(c.vocab.token(c.conversations[0].utterances[0].token_ids[2]) == "alien");
  CHECK(c.vocab.id("alien") != Vocabulary::kUnk);
}

TEST_CASE("vocabulary frequencies sum to the token count") {
  TempDir d("freq");
  write_fixture(d);
  Corpus c = load_corpus_dir(d.path);
  std::uint64_t tokens = 0;
  for (const auto& conv : c.conversations)
    for (const auto& u : conv.utterances) tokens += u.token_ids.size();
  for (const auto& [item, doc] : c.reviews)
    for (const auto& s : doc.sentences) tokens += s.size();
  CHECK(c.vocab.total_count() == tokens);
  for (TokenId t = 0; t < Vocabulary::kSpecialCount; ++t) CHECK(c.vocab.frequency(t) == 0);
}

TEST_CASE("loader errors name the line and the id") {
  TempDir d("errors");
  write_fixture(d);

  SECTION("triple with an unknown entity") {
    d.write("kg.tsv", "#entities=3 relations=1 items=0,1\n0\t0\t2\n99\t0\t1\n");
    const auto msg = error_of([&] { load_corpus_dir(d.path); });
    CHECK(msg.find("unknown entity 99") != std::string::npos);
    CHECK(msg.find("kg.tsv:3") != std::string::npos);
  }
  SECTION("alignment sentence index past the review doc") {
    d.write("alignment.jsonl",
            R"({"conversation_id":"c1","utterance":0,"pos":2,"entity":0,"review_item":0,"sentence":5})"
            "\n");
    const auto msg = error_of([&] { load_corpus_dir(d.path); });
    CHECK(msg.find("sentence index 5") != std::string::npos);
  }
  SECTION("malformed JSON line") {
    d.write("reviews.jsonl", "{\"item_id\":0,\"sentences\":[\"ok\"]}\n{not json\n");
    const auto msg = error_of([&] { load_corpus_dir(d.path); });
    CHECK(msg.find("reviews.jsonl:2") != std::string::npos);
  }
  SECTION("recommended item outside the item set") {
    d.write("conversations.jsonl",
            R"({"id":"c1","utterances":[{"speaker":"seeker","text":"hi","entities":[],"items":[2]}]})"
            "\n");
    CHECK(error_of([&] { load_corpus_dir(d.path); }).find("unknown item 2") != std::string::npos);
  }
  SECTION("duplicate triple") {
    d.write("kg.tsv", "#entities=3 relations=1 items=0,1\n0\t0\t2\n0\t0\t2\n");
    CHECK_THROWS_AS(load_corpus_dir(d.path), Error);
  }
}

TEST_CASE("write then load round-trips the corpus") {
  TempDir d("roundtrip");
  Corpus a = generate_synthetic_corpus(6, 15, 10, 4);
  write_corpus(a, d.path);
  Corpus b = load_corpus_dir(d.path);
  REQUIRE(a.conversations.size() == b.conversations.size());
  CHECK(a.vocab.tokens() == b.vocab.tokens());
  CHECK(a.alignment == b.alignment);
  CHECK(a.kg.triples() == b.kg.triples());
  CHECK(a.kg.items() == b.kg.items());
  CHECK(a.entity_names == b.entity_names);
  for (std::size_t i = 0; i < a.conversations.size(); ++i) {
    CHECK(a.conversations[i].conversation_id == b.conversations[i].conversation_id);
    for (std::size_t u = 0; u < a.conversations[i].utterances.size(); ++u) {
      const auto& ua = a.conversations[i].utterances[u];
      const auto& ub = b.conversations[i].utterances[u];
      CHECK(ua.token_ids == ub.token_ids);
      CHECK(ua.recommended_items == ub.recommended_items);
      CHECK(ua.entity_mentions.size() == ub.entity_mentions.size());
    }
  }
  for (const auto& [item, doc] : a.reviews) CHECK(b.reviews.at(item).sentences == doc.sentences);
}

TEST_CASE("instances enumerate turns") {
  SECTION("only the last utterance recommends") {
    auto inst = build_instances(conversation({{}, {}, {}, {7}}), 64);
    REQUIRE(inst.size() == 3);
    CHECK(!inst[0].target_item);
    CHECK(!inst[1].target_item);
    CHECK(inst[2].target_item == 7);
  }
  SECTION("one instance per recommended item") {
    auto inst = build_instances(conversation({{}, {}, {}, {7, 9}}), 64);
    REQUIRE(inst.size() == 4);
    CHECK(inst[2].target_item == 7);
    CHECK(inst[3].target_item == 9);
    CHECK(inst[2].context_token_ids == inst[3].context_token_ids);
    CHECK(inst[2].target_response.has_value());
    CHECK(!inst[3].target_response.has_value());
  }
  SECTION("single utterance yields nothing") { CHECK(build_instances(conversation({{}}), 8).empty()); }
}

TEST_CASE("context keeps the newest tokens") {
  auto rec = conversation({{}, {}, {}, {}}, 4);
  auto inst = build_instances(rec, 8);
  // Turn 3 context: u0 sep u1 sep u2 = 14 tokens, newest 8 kept.
  const auto& ctx = inst[2].context_token_ids;
  REQUIRE(ctx.size() == 8);
  CHECK(ctx.back() == rec.utterances[2].token_ids.back());
  CHECK(ctx[3] == Vocabulary::kSep);
  CHECK(std::vector<TokenId>(ctx.begin() + 4, ctx.end()) == rec.utterances[2].token_ids);
  CHECK(inst[0].context_token_ids == rec.utterances[0].token_ids);
}

TEST_CASE("context entities accumulate in first-mention order") {
  auto rec = conversation({{}, {}, {}});
  rec.utterances[0].entity_mentions = {{0, 5}, {1, 3}};
  rec.utterances[1].entity_mentions = {{0, 3}, {1, 8}};
  auto inst = build_instances(rec, 64);
  CHECK(inst[0].context_entities == std::vector<EntityId>{5, 3});
  CHECK(inst[1].context_entities == std::vector<EntityId>{5, 3, 8});
}

TEST_CASE("alignment triples follow the context") {
  auto rec = conversation({{}, {}, {}}, 3);
  rec.utterances[0].entity_mentions = {{1, 5}};
  rec.utterances[1].entity_mentions = {{2, 6}};
  std::vector<AlignmentTriple> align = {{"c", 0, 1, 5, 5, 0}, {"c", 0, 1, 6, 6, 0}, {"c", 1, 2, 6, 6, 1}};
  auto inst = build_instances(rec, 64, align);
  REQUIRE(inst[0].alignment.size() == 1);  // first triple per word wins
  CHECK(inst[0].alignment[0].entity_id == 5);
  CHECK(inst[0].alignment_positions[0] == 1);
  REQUIRE(inst[1].alignment.size() == 2);
  CHECK(inst[1].alignment_positions[1] == 3 + 1 + 2);
  // Truncation drops triples whose word fell out of the window.
  auto cut = build_instances(rec, 4, align);
  REQUIRE(cut[1].alignment.size() == 1);
  CHECK(cut[1].alignment[0].utterance_index == 1);
  CHECK(cut[1].context_token_ids[static_cast<std::size_t>(cut[1].alignment_positions[0])] == rec.utterances[1].token_ids[2]);
}

TEST_CASE("batching") {
  std::vector<TrainingInstance> inst(10);
  for (int i = 0; i < 10; ++i) {
    inst[static_cast<std::size_t>(i)].conversation_id = "c" + std::to_string(i);
    inst[static_cast<std::size_t>(i)].context_token_ids.assign(static_cast<std::size_t>(1 + i % 3), 7);
  }
  SECTION("sizes 4,4,2") {
    auto b = make_batches(inst, 4, 1, true);
    REQUIRE(b.size() == 3);
    CHECK(b[0].size() == 4);
    CHECK(b[1].size() == 4);
    CHECK(b[2].size() == 2);
  }
  SECTION("same seed, same order") {
    auto a = make_batches(inst, 4, 9, true);
    auto b = make_batches(inst, 4, 9, true);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].source_index == b[i].source_index);
  }
  SECTION("no shuffle keeps corpus order") {
    auto b = make_batches(inst, 4, 9, false);
    CHECK(b[0].source_index == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(b[2].source_index == std::vector<std::size_t>{8, 9});
  }
  SECTION("partition of the input") {
    auto b = make_batches(inst, 3, 2, true);
    std::multiset<std::size_t> seen;
    for (const auto& batch : b) seen.insert(batch.source_index.begin(), batch.source_index.end());
    CHECK(seen.size() == 10);
    CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 10);
  }
  SECTION("padding and masks") {
    auto b = make_batches(inst, 4, 0, false)[0];
    CHECK(b.max_context_len == 3);
    CHECK(b.context[0 * 3 + 1] == Vocabulary::kPad);
    CHECK(b.context_mask(0) == std::vector<std::uint8_t>{1, 0, 0});
    CHECK(b.context_mask(2) == std::vector<std::uint8_t>{1, 1, 1});
  }
  SECTION("contrastive batches need two rows") { CHECK_THROWS_AS(make_batches(inst, 1, 0, true, BatchMode::kContrastive), Error); }
}

TEST_CASE("synthetic corpus contract") {
  Corpus c = generate_synthetic_corpus(8, 24, 16, 1);
  CHECK(c.conversations.size() == 16);
  CHECK(c.reviews.size() == 8);
  CHECK(!c.alignment.empty());
  for (EntityId item : c.kg.items()) {
    bool in_triple = false;
    for (const auto& t : c.kg.triples()) in_triple |= t.head == item || t.tail == item;
    CHECK(in_triple);
  }
  // Every mention is aligned and every alignment resolves.
  std::size_t mentions = 0;
  for (const auto& conv : c.conversations)
    for (const auto& u : conv.utterances) mentions += u.entity_mentions.size();
  CHECK(c.alignment.size() == mentions);
  std::map<std::string, const ConversationRecord*> by_id;
  for (const auto& conv : c.conversations) by_id[conv.conversation_id] = &conv;
  for (const auto& a : c.alignment) {
    const auto& u = by_id.at(a.conversation_id)->utterances.at(static_cast<std::size_t>(a.utterance_index));
    bool linked = false;
    for (const auto& m : u.entity_mentions) linked |= m.position == a.token_position && m.entity == a.entity_id;
    CHECK(linked);
    CHECK(a.review_sentence_index < static_cast<int>(c.reviews.at(a.review_item_id).sentences.size()));
  }
  CHECK_THROWS_AS(generate_synthetic_corpus(1, 4, 2, 1), Error);
}

TEST_CASE("synthetic corpus is byte-identical under a seed") {
  TempDir a("synth_a"), b("synth_b");
  write_corpus(generate_synthetic_corpus(8, 24, 16, 1), a.path);
  write_corpus(generate_synthetic_corpus(8, 24, 16, 1), b.path);
  for (const char* f : {"conversations.jsonl", "kg.tsv", "reviews.jsonl", "alignment.jsonl", "entity_names.tsv"}) {
    std::ifstream fa(a.path / f), fb(b.path / f);
    std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    CHECK(!sa.empty());
    CHECK(sa == sb);
  }
}
