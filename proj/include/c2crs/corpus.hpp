#pragma once

// Conversation / knowledge-graph / review data model, training-instance
// construction and batching.

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "c2crs/common.hpp"

namespace c2crs {

using TokenId = int;
using EntityId = int;
using RelationId = int;

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kBos = 2;
  static constexpr TokenId kEos = 3;
  static constexpr TokenId kSep = 4;
  static constexpr int kSpecialCount = 5;

  Vocabulary() {
    for (const char* s : {"<pad>", "<unk>", "<bos>", "<eos>", "<sep>"}) append(s, 0);
  }

  /// Vocabulary over `counts`, ordered by descending frequency then
  /// lexicographically, after the special tokens.
  static Vocabulary from_counts(const std::map<std::string, std::uint64_t>& counts) {
    std::vector<std::pair<std::string, std::uint64_t>> entries(counts.begin(), counts.end());
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto& [tok, n] : entries) {
      if (v.index_.contains(tok)) {
        v.frequency_[v.index_.at(tok)] += n;
        continue;
      }
      v.append(tok, n);
    }
    return v;
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  /// Corpus count f_w; zero for special tokens.
  std::uint64_t frequency(TokenId id) const { return frequency_.at(static_cast<std::size_t>(id)); }

  const std::vector<std::string>& tokens() const { return tokens_; }

  std::uint64_t total_count() const {
    std::uint64_t n = 0;
    for (auto f : frequency_) n += f;
    return n;
  }

  std::vector<TokenId> encode(const std::vector<std::string>& words) const {
    std::vector<TokenId> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId t : ids) {
      if (!out.empty()) out += ' ';
      out += token(t);
    }
    return out;
  }

  /// FNV-1a over the token list; lets a checkpoint detect a mismatched corpus.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : tokens_) {
      for (unsigned char c : t) {
        h ^= c;
        h *= 1099511628211ULL;
      }
      h ^= 0xff;
      h *= 1099511628211ULL;
    }
    return h;
  }

 private:
  void append(const std::string& tok, std::uint64_t n) {
    index_.emplace(tok, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(tok);
    frequency_.push_back(n);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  std::vector<std::uint64_t> frequency_;
};

/// Whitespace split followed by ASCII lowercasing.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

// ---------------------------------------------------------------------------
// Conversations, knowledge graph, reviews

enum class Speaker { kSeeker, kRecommender };

inline std::string_view to_string(Speaker s) { return s == Speaker::kSeeker ? "seeker" : "recommender"; }

struct EntityMention {
  int position = 0;
  EntityId entity = 0;
  bool operator==(const EntityMention&) const = default;
};

struct Utterance {
  Speaker speaker = Speaker::kSeeker;
  std::vector<TokenId> token_ids;
  std::vector<EntityMention> entity_mentions;
  std::vector<EntityId> recommended_items;
  bool operator==(const Utterance&) const = default;
};

struct ConversationRecord {
  std::string conversation_id;
  std::vector<Utterance> utterances;
  bool operator==(const ConversationRecord&) const = default;
};

struct Triple {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;
  auto operator<=>(const Triple&) const = default;
};

class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;

  KnowledgeGraph(int n_entities, int n_relations, std::vector<EntityId> items, std::vector<Triple> triples)
      : n_entities_(n_entities), n_relations_(n_relations), items_(std::move(items)), triples_(std::move(triples)) {
    validate();
  }

  int n_entities() const { return n_entities_; }
  int n_relations() const { return n_relations_; }
  const std::vector<EntityId>& items() const { return items_; }
  const std::vector<Triple>& triples() const { return triples_; }

  bool has_entity(EntityId e) const { return e >= 0 && e < n_entities_; }
  bool is_item(EntityId e) const { return item_index_.contains(e); }

  /// Position of an item inside items(); items are scored in this order.
  int item_index(EntityId e) const {
    auto it = item_index_.find(e);
    if (it == item_index_.end()) throw Error("unknown item " + std::to_string(e));
    return it->second;
  }

  bool operator==(const KnowledgeGraph& o) const {
    return n_entities_ == o.n_entities_ && n_relations_ == o.n_relations_ && items_ == o.items_ &&
           triples_ == o.triples_;
  }

 private:
  void validate() {
    if (n_entities_ <= 0) throw Error("knowledge graph needs at least one entity");
    if (n_relations_ < 0) throw Error("negative relation count");
    item_index_.clear();
    for (EntityId i : items_) {
      if (!has_entity(i)) throw Error("unknown entity " + std::to_string(i));
      if (!item_index_.emplace(i, static_cast<int>(item_index_.size())).second)
        throw Error("duplicate item " + std::to_string(i));
    }
    std::set<Triple> seen;
    for (const auto& t : triples_) {
      if (!has_entity(t.head)) throw Error("unknown entity " + std::to_string(t.head));
      if (!has_entity(t.tail)) throw Error("unknown entity " + std::to_string(t.tail));
      if (t.relation < 0 || t.relation >= n_relations_) throw Error("unknown relation " + std::to_string(t.relation));
      if (!seen.insert(t).second)
        throw Error("duplicate triple " + std::to_string(t.head) + " " + std::to_string(t.relation) + " " +
                    std::to_string(t.tail));
    }
  }

  int n_entities_ = 0;
  int n_relations_ = 0;
  std::vector<EntityId> items_;
  std::vector<Triple> triples_;
  std::unordered_map<EntityId, int> item_index_;
};

struct ReviewDoc {
  EntityId item_id = 0;
  std::vector<std::vector<TokenId>> sentences;
  bool operator==(const ReviewDoc&) const = default;
};

struct AlignmentTriple {
  std::string conversation_id;
  int utterance_index = 0;
  int token_position = 0;
  EntityId entity_id = 0;
  EntityId review_item_id = 0;
  int review_sentence_index = 0;
  bool operator==(const AlignmentTriple&) const = default;
};

/// Everything ingested from one data directory.
struct Corpus {
  std::vector<ConversationRecord> conversations;
  KnowledgeGraph kg;
  std::map<EntityId, ReviewDoc> reviews;
  std::vector<AlignmentTriple> alignment;
  Vocabulary vocab;
  /// Optional surface forms (entity id -> lowercase name) for serve-time linking.
  std::map<EntityId, std::string> entity_names;

  /// Alignment triples grouped by conversation id.
  std::unordered_map<std::string, std::vector<AlignmentTriple>> alignment_by_conversation() const {
    std::unordered_map<std::string, std::vector<AlignmentTriple>> out;
    for (const auto& a : alignment) out[a.conversation_id].push_back(a);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Training instances

struct ReviewRef {
  EntityId item = 0;
  int sentence = 0;
  auto operator<=>(const ReviewRef&) const = default;
};

struct TrainingInstance {
  std::string conversation_id;
  int turn = 0;  // number of context utterances; predicts utterance `turn` (0-based)
  std::vector<TokenId> context_token_ids;
  std::vector<EntityId> context_entities;
  std::optional<EntityId> target_item;
  std::optional<std::vector<TokenId>> target_response;
  std::vector<AlignmentTriple> alignment;
  /// Position of each alignment triple's word inside context_token_ids.
  std::vector<int> alignment_positions;
  /// Review sentences describing the context (filled by build_all_instances).
  std::vector<ReviewRef> review_refs;
  /// Items recommended by earlier utterances of the context.
  std::vector<EntityId> earlier_recommendations;
};

/// One instance per turn t >= 1 predicting utterance t+1. Utterances are
/// joined with the separator token and the oldest tokens are dropped beyond
/// `max_context_len`. A turn whose next utterance recommends several items
/// yields one instance per item; only the first of them carries the
/// response so generation is not trained on duplicates. Responses are only
/// targets when the next speaker is the recommender.
inline std::vector<TrainingInstance> build_instances(const ConversationRecord& record, std::size_t max_context_len,
                                                     std::span<const AlignmentTriple> alignment = {}) {
  if (max_context_len == 0) throw Error("max_context_len must be positive");
  std::vector<TrainingInstance> out;
  const auto& utts = record.utterances;
  if (utts.size() < 2) return out;

  // Flattened tokens with (utterance, position) of each token; -1 marks separators.
  std::vector<TokenId> flat;
  std::vector<std::pair<int, int>> origin;
  std::vector<EntityId> entities;
  std::set<EntityId> seen_entities;
  std::vector<EntityId> recommended;

  for (std::size_t t = 1; t < utts.size(); ++t) {
    const Utterance& prev = utts[t - 1];
    if (!flat.empty()) {
      flat.push_back(Vocabulary::kSep);
      origin.emplace_back(-1, -1);
    }
    for (std::size_t p = 0; p < prev.token_ids.size(); ++p) {
      flat.push_back(prev.token_ids[p]);
      origin.emplace_back(static_cast<int>(t - 1), static_cast<int>(p));
    }
    for (const auto& m : prev.entity_mentions)
      if (seen_entities.insert(m.entity).second) entities.push_back(m.entity);
    for (EntityId item : prev.recommended_items)
      if (std::find(recommended.begin(), recommended.end(), item) == recommended.end()) recommended.push_back(item);

    TrainingInstance base;
    base.conversation_id = record.conversation_id;
    base.turn = static_cast<int>(t);
    const std::size_t start = flat.size() > max_context_len ? flat.size() - max_context_len : 0;
    base.context_token_ids.assign(flat.begin() + static_cast<std::ptrdiff_t>(start), flat.end());
    base.context_entities = entities;
    base.earlier_recommendations = recommended;

    // First alignment triple per (utterance, position) wins.
    std::set<std::pair<int, int>> linked;
    for (const auto& a : alignment) {
      if (a.conversation_id != record.conversation_id || a.utterance_index >= static_cast<int>(t)) continue;
      if (!linked.insert({a.utterance_index, a.token_position}).second) continue;
      int pos = -1;
      for (std::size_t k = start; k < flat.size(); ++k) {
        if (origin[k].first == a.utterance_index && origin[k].second == a.token_position) {
          pos = static_cast<int>(k - start);
          break;
        }
      }
      if (pos < 0) continue;  // truncated away
      base.alignment.push_back(a);
      base.alignment_positions.push_back(pos);
    }

    const Utterance& next = utts[t];
    std::optional<std::vector<TokenId>> response;
    if (next.speaker == Speaker::kRecommender && !next.token_ids.empty()) response = next.token_ids;

    if (next.recommended_items.empty()) {
      base.target_response = response;
      out.push_back(std::move(base));
    } else {
      bool first = true;
      for (EntityId item : next.recommended_items) {
        TrainingInstance inst = base;
        inst.target_item = item;
        if (first) inst.target_response = response;
        first = false;
        out.push_back(std::move(inst));
      }
    }
  }
  return out;
}

/// Review sentences describing an instance's context: sentences linked by
/// the context's alignment triples first, then the leading sentences of the
/// review documents of items mentioned in the context, de-duplicated and
/// capped at `max_sentences`.
inline std::vector<ReviewRef> context_review_refs(const std::vector<AlignmentTriple>& alignment,
                                                  const std::vector<EntityId>& context_entities, const Corpus& corpus,
                                                  std::size_t max_sentences) {
  std::vector<ReviewRef> refs;
  std::set<ReviewRef> seen;
  auto push = [&](ReviewRef r) {
    if (refs.size() < max_sentences && seen.insert(r).second) refs.push_back(r);
  };
  for (const auto& a : alignment) push({a.review_item_id, a.review_sentence_index});
  for (EntityId e : context_entities) {
    auto it = corpus.reviews.find(e);
    if (it == corpus.reviews.end()) continue;
    for (std::size_t s = 0; s < it->second.sentences.size() && refs.size() < max_sentences; ++s)
      push({e, static_cast<int>(s)});
  }
  return refs;
}

/// Instances for every conversation of a corpus, with review bundles attached.
inline std::vector<TrainingInstance> build_all_instances(const Corpus& corpus, std::size_t max_context_len,
                                                         std::size_t max_review_sentences) {
  const auto by_conv = corpus.alignment_by_conversation();
  std::vector<TrainingInstance> all;
  for (const auto& rec : corpus.conversations) {
    auto it = by_conv.find(rec.conversation_id);
    std::span<const AlignmentTriple> align;
    if (it != by_conv.end()) align = it->second;
    for (auto& inst : build_instances(rec, max_context_len, align)) {
      inst.review_refs = context_review_refs(inst.alignment, inst.context_entities, corpus, max_review_sentences);
      all.push_back(std::move(inst));
    }
  }
  return all;
}

// ---------------------------------------------------------------------------
// Batching

/// Word/entity/sentence link realised inside a batch instance.
struct AlignedUnit {
  int context_position = 0;
  EntityId entity = 0;
  ReviewRef sentence;
};

struct Batch {
  /// Row-major [size x max_context_len] padded with kPad.
  std::vector<TokenId> context;
  std::size_t max_context_len = 0;
  std::vector<std::size_t> context_lengths;
  std::vector<std::vector<EntityId>> entities;
  std::vector<std::vector<ReviewRef>> reviews;
  std::vector<std::optional<EntityId>> target_items;
  /// Row-major [size x max_response_len] padded with kPad; rows without a
  /// response have length 0.
  std::vector<TokenId> responses;
  std::size_t max_response_len = 0;
  std::vector<std::size_t> response_lengths;
  std::vector<std::vector<AlignedUnit>> alignment;
  std::vector<std::string> conversation_ids;
  /// Index of each row in the instance list the batch was cut from.
  std::vector<std::size_t> source_index;

  std::size_t size() const { return context_lengths.size(); }

  std::span<const TokenId> context_row(std::size_t i) const {
    return {context.data() + i * max_context_len, context_lengths[i]};
  }

  std::span<const TokenId> response_row(std::size_t i) const {
    return {responses.data() + i * max_response_len, response_lengths[i]};
  }

  /// 1 for real tokens, 0 for padding, for row i of the context matrix.
  std::vector<std::uint8_t> context_mask(std::size_t i) const {
    std::vector<std::uint8_t> m(max_context_len, 0);
    std::fill_n(m.begin(), context_lengths[i], 1);
    return m;
  }
};

enum class BatchMode { kPlain, kContrastive };

inline Batch make_batch(const std::vector<TrainingInstance>& instances, std::span<const std::size_t> rows) {
  Batch b;
  for (std::size_t r : rows) {
    b.max_context_len = std::max(b.max_context_len, instances[r].context_token_ids.size());
    if (instances[r].target_response)
      b.max_response_len = std::max(b.max_response_len, instances[r].target_response->size());
  }
  b.context.assign(rows.size() * b.max_context_len, Vocabulary::kPad);
  b.responses.assign(rows.size() * b.max_response_len, Vocabulary::kPad);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& inst = instances[rows[i]];
    std::copy(inst.context_token_ids.begin(), inst.context_token_ids.end(), b.context.begin() + i * b.max_context_len);
    b.context_lengths.push_back(inst.context_token_ids.size());
    b.entities.push_back(inst.context_entities);
    b.reviews.push_back(inst.review_refs);
    b.target_items.push_back(inst.target_item);
    if (inst.target_response) {
      std::copy(inst.target_response->begin(), inst.target_response->end(),
                b.responses.begin() + i * b.max_response_len);
      b.response_lengths.push_back(inst.target_response->size());
    } else {
      b.response_lengths.push_back(0);
    }
    std::vector<AlignedUnit> units;
    for (std::size_t k = 0; k < inst.alignment.size(); ++k) {
      const auto& a = inst.alignment[k];
      units.push_back({inst.alignment_positions[k], a.entity_id, {a.review_item_id, a.review_sentence_index}});
    }
    b.alignment.push_back(std::move(units));
    b.conversation_ids.push_back(inst.conversation_id);
    b.source_index.push_back(rows[i]);
  }
  return b;
}

/// Cuts instances into batches; order is deterministic for a given seed and
/// the final short batch is kept.
inline std::vector<Batch> make_batches(const std::vector<TrainingInstance>& instances, std::size_t batch_size,
                                       std::uint64_t seed, bool shuffle, BatchMode mode = BatchMode::kPlain) {
  if (batch_size == 0) throw Error("batch_size must be positive");
  if (mode == BatchMode::kContrastive && batch_size < 2)
    throw Error("contrastive batches need batch_size >= 2 for in-batch negatives");
  std::vector<std::size_t> order(instances.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    out.push_back(make_batch(instances, std::span<const std::size_t>(order.data() + start, n)));
  }
  return out;
}

}  // namespace c2crs
