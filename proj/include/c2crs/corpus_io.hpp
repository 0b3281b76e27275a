#pragma once

// Line-oriented corpus files:
//   conversations.jsonl  {"id","utterances":[{"speaker","text","entities":[[pos,id]],"items":[id]}]}
//   kg.tsv               "#entities=N relations=R items=i1,i2,..." then head<TAB>relation<TAB>tail
//   reviews.jsonl        {"item_id","sentences":["..."]}
//   alignment.jsonl      {"conversation_id","utterance","pos","entity","review_item","sentence"}
//   entity_names.tsv     id<TAB>name (optional)

#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "c2crs/corpus.hpp"

namespace c2crs {

namespace detail {

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

inline bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

inline int parse_int(const std::string& s, const std::string& file, std::size_t line) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    throw ParseError(file, line, "expected integer, got '" + s + "'");
  }
  if (used != s.size()) throw ParseError(file, line, "expected integer, got '" + s + "'");
  return v;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

template <typename F>
auto json_field(const nlohmann::json& j, const char* key, const std::string& file, std::size_t line, F&& convert) {
  if (!j.is_object() || !j.contains(key)) throw ParseError(file, line, std::string("missing field '") + key + "'");
  try {
    return convert(j.at(key));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(file, line, std::string("bad field '") + key + "': " + e.what());
  }
}

inline nlohmann::json parse_json_line(const std::string& text, const std::string& file, std::size_t line) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(file, line, std::string("malformed JSON: ") + e.what());
  }
}

struct RawUtterance {
  Speaker speaker;
  std::vector<std::string> words;
  std::vector<EntityMention> mentions;
  std::vector<EntityId> items;
};

struct RawConversation {
  std::string id;
  std::vector<RawUtterance> utterances;
};

}  // namespace detail

inline KnowledgeGraph load_kg(const std::filesystem::path& path) {
  const std::string file = path.filename().string();
  const auto lines = detail::read_lines(path);
  if (lines.empty() || !lines[0].starts_with("#")) throw ParseError(file, 1, "missing '#entities=' header");
  int n_entities = -1, n_relations = -1;
  std::vector<EntityId> items;
  std::istringstream header(lines[0].substr(1));
  std::string field;
  while (header >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw ParseError(file, 1, "bad header field '" + field + "'");
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "entities") {
      n_entities = detail::parse_int(value, file, 1);
    } else if (key == "relations") {
      n_relations = detail::parse_int(value, file, 1);
    } else if (key == "items") {
      for (const auto& s : detail::split(value, ','))
        if (!s.empty()) items.push_back(detail::parse_int(s, file, 1));
    } else {
      throw ParseError(file, 1, "unknown header field '" + key + "'");
    }
  }
  if (n_entities <= 0 || n_relations < 0) throw ParseError(file, 1, "header needs entities=N relations=R");
  std::vector<Triple> triples;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (detail::blank(lines[i])) continue;
    const auto cols = detail::split(lines[i], '\t');
    if (cols.size() != 3) throw ParseError(file, i + 1, "expected head<TAB>relation<TAB>tail");
    Triple t{detail::parse_int(cols[0], file, i + 1), detail::parse_int(cols[1], file, i + 1),
             detail::parse_int(cols[2], file, i + 1)};
    for (EntityId e : {t.head, t.tail})
      if (e < 0 || e >= n_entities) throw ParseError(file, i + 1, "unknown entity " + std::to_string(e));
    if (t.relation < 0 || t.relation >= n_relations)
      throw ParseError(file, i + 1, "unknown relation " + std::to_string(t.relation));
    triples.push_back(t);
  }
  try {
    return KnowledgeGraph(n_entities, n_relations, std::move(items), std::move(triples));
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(file, 1, e.what());
  }
}

inline std::map<EntityId, std::string> load_entity_names(const std::filesystem::path& path) {
  const std::string file = path.filename().string();
  std::map<EntityId, std::string> names;
  const auto lines = detail::read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (detail::blank(lines[i])) continue;
    const auto tab = lines[i].find('\t');
    if (tab == std::string::npos) throw ParseError(file, i + 1, "expected id<TAB>name");
    std::string name;
    for (const auto& w : tokenize(lines[i].substr(tab + 1))) name += (name.empty() ? "" : " ") + w;
    names[detail::parse_int(lines[i].substr(0, tab), file, i + 1)] = name;
  }
  return names;
}

/// Reads and cross-validates the four corpus files and builds the vocabulary
/// from conversation and review tokens.
inline Corpus load_corpus(const std::filesystem::path& conversations_path, const std::filesystem::path& kg_path,
                          const std::filesystem::path& reviews_path, const std::filesystem::path& alignment_path) {
  Corpus corpus;
  corpus.kg = load_kg(kg_path);
  const KnowledgeGraph& kg = corpus.kg;
  std::map<std::string, std::uint64_t> counts;

  // Conversations.
  std::vector<detail::RawConversation> raw_convs;
  {
    const std::string file = conversations_path.filename().string();
    const auto lines = detail::read_lines(conversations_path);
    std::set<std::string> ids;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (detail::blank(lines[i])) continue;
      const std::size_t ln = i + 1;
      const auto j = detail::parse_json_line(lines[i], file, ln);
      detail::RawConversation rc;
      rc.id = detail::json_field(j, "id", file, ln, [](const auto& v) { return v.template get<std::string>(); });
      if (!ids.insert(rc.id).second) throw ParseError(file, ln, "duplicate conversation id '" + rc.id + "'");
      const auto& utts = detail::json_field(j, "utterances", file, ln, [](const auto& v) -> const nlohmann::json& { return v; });
      if (!utts.is_array() || utts.empty()) throw ParseError(file, ln, "conversation needs at least one utterance");
      for (const auto& u : utts) {
        detail::RawUtterance ru;
        const auto speaker = detail::json_field(u, "speaker", file, ln, [](const auto& v) { return v.template get<std::string>(); });
        if (speaker == "seeker") ru.speaker = Speaker::kSeeker;
        else if (speaker == "recommender") ru.speaker = Speaker::kRecommender;
        else throw ParseError(file, ln, "unknown speaker '" + speaker + "'");
        ru.words = tokenize(detail::json_field(u, "text", file, ln, [](const auto& v) { return v.template get<std::string>(); }));
        if (u.contains("entities")) {
          const auto mentions = detail::json_field(u, "entities", file, ln,
                                                   [](const auto& v) { return v.template get<std::vector<std::array<int, 2>>>(); });
          for (const auto& m : mentions) {
            if (m[0] < 0 || m[0] >= static_cast<int>(ru.words.size()))
              throw ParseError(file, ln, "entity position " + std::to_string(m[0]) + " outside utterance");
            if (!kg.has_entity(m[1])) throw ParseError(file, ln, "unknown entity " + std::to_string(m[1]));
            ru.mentions.push_back({m[0], m[1]});
          }
        }
        if (u.contains("items")) {
          ru.items = detail::json_field(u, "items", file, ln, [](const auto& v) { return v.template get<std::vector<int>>(); });
          for (EntityId it : ru.items)
            if (!kg.is_item(it)) throw ParseError(file, ln, "unknown item " + std::to_string(it));
        }
        for (const auto& w : ru.words) ++counts[w];
        rc.utterances.push_back(std::move(ru));
      }
      raw_convs.push_back(std::move(rc));
    }
  }

  // Reviews.
  std::map<EntityId, std::vector<std::vector<std::string>>> raw_reviews;
  {
    const std::string file = reviews_path.filename().string();
    const auto lines = detail::read_lines(reviews_path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (detail::blank(lines[i])) continue;
      const std::size_t ln = i + 1;
      const auto j = detail::parse_json_line(lines[i], file, ln);
      const EntityId item = detail::json_field(j, "item_id", file, ln, [](const auto& v) { return v.template get<int>(); });
      if (!kg.is_item(item)) throw ParseError(file, ln, "unknown item " + std::to_string(item));
      if (raw_reviews.contains(item)) throw ParseError(file, ln, "duplicate review doc for item " + std::to_string(item));
      const auto sentences = detail::json_field(j, "sentences", file, ln,
                                                [](const auto& v) { return v.template get<std::vector<std::string>>(); });
      std::vector<std::vector<std::string>> doc;
      for (const auto& s : sentences) {
        auto words = tokenize(s);
        if (words.empty()) throw ParseError(file, ln, "empty review sentence");
        for (const auto& w : words) ++counts[w];
        doc.push_back(std::move(words));
      }
      if (doc.empty()) throw ParseError(file, ln, "review doc for item " + std::to_string(item) + " has no sentences");
      raw_reviews.emplace(item, std::move(doc));
    }
  }

  corpus.vocab = Vocabulary::from_counts(counts);
  const Vocabulary& vocab = corpus.vocab;

  for (auto& rc : raw_convs) {
    ConversationRecord rec;
    rec.conversation_id = rc.id;
    for (auto& ru : rc.utterances) {
      rec.utterances.push_back({ru.speaker, vocab.encode(ru.words), std::move(ru.mentions), std::move(ru.items)});
    }
    corpus.conversations.push_back(std::move(rec));
  }
  for (auto& [item, doc] : raw_reviews) {
    ReviewDoc rd{item, {}};
    for (const auto& s : doc) rd.sentences.push_back(vocab.encode(s));
    corpus.reviews.emplace(item, std::move(rd));
  }

  // Alignment.
  {
    const std::string file = alignment_path.filename().string();
    const auto lines = detail::read_lines(alignment_path);
    std::unordered_map<std::string, const ConversationRecord*> by_id;
    for (const auto& c : corpus.conversations) by_id[c.conversation_id] = &c;
    for (std::size_t i = 0; i < lines.size(); ++i) {
      if (detail::blank(lines[i])) continue;
      const std::size_t ln = i + 1;
      const auto j = detail::parse_json_line(lines[i], file, ln);
      auto get_int = [&](const char* key) {
        return detail::json_field(j, key, file, ln, [](const auto& v) { return v.template get<int>(); });
      };
      AlignmentTriple a;
      a.conversation_id = detail::json_field(j, "conversation_id", file, ln, [](const auto& v) { return v.template get<std::string>(); });
      a.utterance_index = get_int("utterance");
      a.token_position = get_int("pos");
      a.entity_id = get_int("entity");
      a.review_item_id = get_int("review_item");
      a.review_sentence_index = get_int("sentence");
      auto conv = by_id.find(a.conversation_id);
      if (conv == by_id.end()) throw ParseError(file, ln, "unknown conversation '" + a.conversation_id + "'");
      const auto& utts = conv->second->utterances;
      if (a.utterance_index < 0 || a.utterance_index >= static_cast<int>(utts.size()))
        throw ParseError(file, ln, "utterance index " + std::to_string(a.utterance_index) + " out of range");
      const auto& utt = utts[a.utterance_index];
      if (!kg.has_entity(a.entity_id)) throw ParseError(file, ln, "unknown entity " + std::to_string(a.entity_id));
      const bool linked = std::any_of(utt.entity_mentions.begin(), utt.entity_mentions.end(), [&](const EntityMention& m) {
        return m.position == a.token_position && m.entity == a.entity_id;
      });
      if (!linked)
        throw ParseError(file, ln, "token " + std::to_string(a.token_position) + " is not linked to entity " +
                                       std::to_string(a.entity_id));
      auto doc = corpus.reviews.find(a.review_item_id);
      if (doc == corpus.reviews.end()) throw ParseError(file, ln, "unknown item " + std::to_string(a.review_item_id));
      if (a.review_sentence_index < 0 || a.review_sentence_index >= static_cast<int>(doc->second.sentences.size()))
        throw ParseError(file, ln, "sentence index " + std::to_string(a.review_sentence_index) +
                                       " out of range for item " + std::to_string(a.review_item_id));
      corpus.alignment.push_back(std::move(a));
    }
  }
  return corpus;
}

/// Loads the standard file set from a directory; entity_names.tsv is optional.
inline Corpus load_corpus_dir(const std::filesystem::path& dir) {
  Corpus c = load_corpus(dir / "conversations.jsonl", dir / "kg.tsv", dir / "reviews.jsonl", dir / "alignment.jsonl");
  if (std::filesystem::exists(dir / "entity_names.tsv")) c.entity_names = load_entity_names(dir / "entity_names.tsv");
  return c;
}

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error("cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open("conversations.jsonl");
    for (const auto& c : corpus.conversations) {
      nlohmann::ordered_json j;
      j["id"] = c.conversation_id;
      j["utterances"] = nlohmann::ordered_json::array();
      for (const auto& u : c.utterances) {
        nlohmann::ordered_json ju;
        ju["speaker"] = std::string(to_string(u.speaker));
        ju["text"] = corpus.vocab.decode(u.token_ids);
        ju["entities"] = nlohmann::ordered_json::array();
        for (const auto& m : u.entity_mentions) ju["entities"].push_back({m.position, m.entity});
        ju["items"] = u.recommended_items;
        j["utterances"].push_back(std::move(ju));
      }
      out << j.dump() << '\n';
    }
  }
  {
    auto out = open("kg.tsv");
    out << "#entities=" << corpus.kg.n_entities() << " relations=" << corpus.kg.n_relations() << " items=";
    for (std::size_t i = 0; i < corpus.kg.items().size(); ++i) out << (i ? "," : "") << corpus.kg.items()[i];
    out << '\n';
    for (const auto& t : corpus.kg.triples()) out << t.head << '\t' << t.relation << '\t' << t.tail << '\n';
  }
  {
    auto out = open("reviews.jsonl");
    for (const auto& [item, doc] : corpus.reviews) {
      nlohmann::ordered_json j;
      j["item_id"] = item;
      j["sentences"] = nlohmann::ordered_json::array();
      for (const auto& s : doc.sentences) j["sentences"].push_back(corpus.vocab.decode(s));
      out << j.dump() << '\n';
    }
  }
  {
    auto out = open("alignment.jsonl");
    for (const auto& a : corpus.alignment) {
      nlohmann::ordered_json j;
      j["conversation_id"] = a.conversation_id;
      j["utterance"] = a.utterance_index;
      j["pos"] = a.token_position;
      j["entity"] = a.entity_id;
      j["review_item"] = a.review_item_id;
      j["sentence"] = a.review_sentence_index;
      out << j.dump() << '\n';
    }
  }
  if (!corpus.entity_names.empty()) {
    auto out = open("entity_names.tsv");
    for (const auto& [id, name] : corpus.entity_names) out << id << '\t' << name << '\n';
  }
}

}  // namespace c2crs
