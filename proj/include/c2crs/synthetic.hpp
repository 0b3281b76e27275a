#pragma once

// Deterministic toy corpus in which each item owns a disjoint set of
// attribute entities. A conversation asks for some of its target item's
// attributes, so the recommendation target is recoverable from the
// mentioned entities and a model can memorise the training set.

#include <array>

#include "c2crs/corpus.hpp"

namespace c2crs {

struct SyntheticLayout {
  static constexpr RelationId kHasAttribute = 0;
  static constexpr RelationId kSimilarTo = 1;
};

inline Corpus generate_synthetic_corpus(int n_items, int n_entities, int n_conversations, std::uint64_t seed) {
  if (n_items < 2) throw Error("synthetic corpus needs n_items >= 2");
  if (n_entities < n_items) throw Error("synthetic corpus needs n_entities >= n_items");
  if (n_conversations < 0) throw Error("negative conversation count");
  Rng rng(seed);

  auto owner = [&](EntityId attr) { return (attr - n_items) % n_items; };
  std::vector<std::vector<EntityId>> attrs_of(static_cast<std::size_t>(n_items));
  for (EntityId a = n_items; a < n_entities; ++a) attrs_of[owner(a)].push_back(a);

  Corpus corpus;
  for (EntityId i = 0; i < n_items; ++i) corpus.entity_names[i] = "movie" + std::to_string(i);
  for (EntityId a = n_items; a < n_entities; ++a) corpus.entity_names[a] = "attr" + std::to_string(a - n_items);

  std::vector<EntityId> items;
  std::vector<Triple> triples;
  for (EntityId i = 0; i < n_items; ++i) items.push_back(i);
  for (EntityId a = n_items; a < n_entities; ++a) triples.push_back({owner(a), SyntheticLayout::kHasAttribute, a});
  for (EntityId i = 0; i < n_items; ++i) triples.push_back({i, SyntheticLayout::kSimilarTo, (i + 1) % n_items});
  corpus.kg = KnowledgeGraph(n_entities, 2, items, triples);

  static constexpr std::array<const char*, 8> kAdjectives = {"great", "fun", "slow", "dark",
                                                             "funny", "classic", "moving", "clever"};
  auto pick = [&](const auto& pool) { return std::string(pool[rng.index(pool.size())]); };

  std::map<std::string, std::uint64_t> counts;
  auto words_of = [&](const std::string& text) {
    auto w = tokenize(text);
    for (const auto& x : w) ++counts[x];
    return w;
  };

  // Reviews: sentence 0 describes the item, then one sentence per attribute.
  std::map<EntityId, std::vector<std::vector<std::string>>> review_words;
  std::map<EntityId, int> attr_sentence;
  for (EntityId i = 0; i < n_items; ++i) {
    auto& doc = review_words[i];
    doc.push_back(words_of(corpus.entity_names[i] + " is a " + pick(kAdjectives) + " movie"));
    for (EntityId a : attrs_of[i]) {
      attr_sentence[a] = static_cast<int>(doc.size());
      doc.push_back(words_of("the " + corpus.entity_names[a] + " part is " + pick(kAdjectives)));
    }
    doc.push_back(words_of(pick(kAdjectives) + " acting and a " + pick(kAdjectives) + " story"));
  }

  struct RawUtt {
    Speaker speaker;
    std::vector<std::string> words;
    std::vector<EntityMention> mentions;
    std::vector<EntityId> items;
  };
  // Text with "{k}" placeholders replaced by entity names and linked.
  auto utter = [&](Speaker sp, const std::string& tmpl, const std::vector<EntityId>& ents) {
    RawUtt u{sp, {}, {}, {}};
    for (const auto& w : tokenize(tmpl)) {
      if (w.size() == 3 && w.front() == '{' && w.back() == '}') {
        const EntityId e = ents.at(static_cast<std::size_t>(w[1] - '0'));
        u.mentions.push_back({static_cast<int>(u.words.size()), e});
        u.words.push_back(corpus.entity_names[e]);
      } else {
        u.words.push_back(w);
      }
    }
    for (const auto& w : u.words) ++counts[w];
    return u;
  };

  static constexpr std::array<const char*, 3> kGreetings = {"hi there", "hello", "hey how are you"};
  static constexpr std::array<const char*, 3> kLiked = {"hi i really enjoyed {0}", "hello i loved {0}",
                                                        "hey {0} was my favorite"};
  static constexpr std::array<const char*, 3> kAsk = {"what kind of movie are you looking for ?",
                                                      "hello what do you like to watch ?",
                                                      "hi what genre do you enjoy ?"};
  static constexpr std::array<const char*, 2> kWantOne = {"i want something with {0}", "anything with {0} please"};
  static constexpr std::array<const char*, 2> kWantTwo = {"i want something with {0} and {1}",
                                                          "i like {0} and {1} movies"};
  static constexpr std::array<const char*, 3> kRecommend = {"you should watch {0}", "how about {0} ?",
                                                            "i recommend {0} it is great"};
  static constexpr std::array<const char*, 2> kThanks = {"thanks i will watch {0}", "great i will check out {0}"};

  std::vector<EntityId> order(items);
  std::vector<std::vector<RawUtt>> raw_convs;
  for (int c = 0; c < n_conversations; ++c) {
    if (c % n_items == 0) rng.shuffle(order.begin(), order.end());
    const EntityId target = order[static_cast<std::size_t>(c % n_items)];
    std::vector<RawUtt> conv;
    if (rng.bernoulli(0.5)) {
      EntityId liked = static_cast<EntityId>(rng.index(static_cast<std::size_t>(n_items - 1)));
      if (liked >= target) ++liked;
      conv.push_back(utter(Speaker::kSeeker, pick(kLiked), {liked}));
    } else {
      conv.push_back(utter(Speaker::kSeeker, pick(kGreetings), {}));
    }
    conv.push_back(utter(Speaker::kRecommender, pick(kAsk), {}));
    std::vector<EntityId> wanted = attrs_of[target];
    rng.shuffle(wanted.begin(), wanted.end());
    if (wanted.size() >= 2) {
      conv.push_back(utter(Speaker::kSeeker, pick(kWantTwo), {wanted[0], wanted[1]}));
    } else if (wanted.size() == 1) {
      conv.push_back(utter(Speaker::kSeeker, pick(kWantOne), {wanted[0]}));
    } else {
      // No attributes: ask for something close to the item that links to the target.
      conv.push_back(utter(Speaker::kSeeker, "something similar to {0} please", {(target + n_items - 1) % n_items}));
    }
    RawUtt rec = utter(Speaker::kRecommender, pick(kRecommend), {target});
    rec.items.push_back(target);
    conv.push_back(std::move(rec));
    conv.push_back(utter(Speaker::kSeeker, pick(kThanks), {target}));
    raw_convs.push_back(std::move(conv));
  }

  corpus.vocab = Vocabulary::from_counts(counts);
  for (auto& [item, doc] : review_words) {
    ReviewDoc rd{item, {}};
    for (const auto& s : doc) rd.sentences.push_back(corpus.vocab.encode(s));
    corpus.reviews.emplace(item, std::move(rd));
  }
  for (std::size_t c = 0; c < raw_convs.size(); ++c) {
    ConversationRecord rec;
    rec.conversation_id = "synth-" + std::to_string(c);
    for (std::size_t u = 0; u < raw_convs[c].size(); ++u) {
      auto& ru = raw_convs[c][u];
      for (const auto& m : ru.mentions) {
        const bool is_item = m.entity < n_items;
        corpus.alignment.push_back({rec.conversation_id, static_cast<int>(u), m.position, m.entity,
                                    is_item ? m.entity : owner(m.entity), is_item ? 0 : attr_sentence.at(m.entity)});
      }
      rec.utterances.push_back({ru.speaker, corpus.vocab.encode(ru.words), ru.mentions, ru.items});
    }
    corpus.conversations.push_back(std::move(rec));
  }
  return corpus;
}

}  // namespace c2crs
