#pragma once

// Conversation service over a frozen checkpoint and its HTTP binding.

// Eigen must precede httplib: <resolv.h> defines a `_res` macro that
// collides with Eigen parameter names.
#include "c2crs/model.hpp"

#include <httplib.h>

#include <atomic>
#include <chrono>
#include <memory>
#include <mutex>
#include <nlohmann/json.hpp>

namespace c2crs {

/// Client-side error (reported as HTTP 400).
class BadRequest : public Error {
 public:
  using Error::Error;
};

struct ServeOptions {
  std::chrono::seconds session_ttl = std::chrono::minutes(30);
  DecodeOptions decode;
  std::string checkpoint_id;
  int max_k = 1000;
};

/// Exact lowercase surface-form linker over the entity-name table. Longer
/// names win over shorter ones starting at the same token.
class EntityLinker {
 public:
  EntityLinker() = default;
  explicit EntityLinker(const std::map<EntityId, std::string>& names) {
    for (const auto& [id, name] : names) {
      auto toks = tokenize(name);
      if (toks.empty()) continue;
      max_len_ = std::max(max_len_, toks.size());
      std::string key;
      for (const auto& t : toks) key += (key.empty() ? "" : " ") + t;
      table_.emplace(key, id);  // first id wins for duplicate names
    }
  }

  std::vector<EntityMention> link(const std::vector<std::string>& tokens) const {
    std::vector<EntityMention> out;
    for (std::size_t i = 0; i < tokens.size();) {
      std::size_t matched = 0;
      for (std::size_t len = std::min(max_len_, tokens.size() - i); len >= 1; --len) {
        std::string key;
        for (std::size_t k = 0; k < len; ++k) key += (k ? " " : "") + tokens[i + k];
        if (auto it = table_.find(key); it != table_.end()) {
          out.push_back({static_cast<int>(i), it->second});
          matched = len;
          break;
        }
      }
      i += matched ? matched : 1;
    }
    return out;
  }

 private:
  std::map<std::string, EntityId> table_;
  std::size_t max_len_ = 0;
};

struct SessionState {
  std::string id;
  std::vector<Utterance> history;
  std::vector<EntityId> entities;  // first-mention order
  std::chrono::steady_clock::time_point created, last_active;
  int turn = 0;
  std::mutex mu;  // one in-flight turn per session
};

struct ScoredItem {
  EntityId item_id = 0;
  std::string name;
  double score = 0.0;
};

struct ConverseResult {
  std::string session_id;
  std::string response;
  std::vector<ScoredItem> recommendations;
  int turn = 0;
};

inline nlohmann::ordered_json to_json(const ConverseResult& r) {
  nlohmann::ordered_json recs = nlohmann::ordered_json::array();
  for (const auto& s : r.recommendations) recs.push_back({{"item_id", s.item_id}, {"name", s.name}, {"score", s.score}});
  return {{"session_id", r.session_id}, {"response", r.response}, {"recommendations", recs}, {"turn", r.turn}};
}

/// Multi-turn conversations against a read-only model. Sessions live in
/// memory and expire after `session_ttl` of inactivity.
class ConversationService {
 public:
  using Clock = std::function<std::chrono::steady_clock::time_point()>;

  ConversationService(const C2crsModel<float>& model, const Corpus& corpus, ServeOptions opt = {},
                      Clock clock = [] { return std::chrono::steady_clock::now(); })
      : model_(model), corpus_(corpus), opt_(std::move(opt)), clock_(std::move(clock)), predictor_(model, corpus),
        linker_(corpus.entity_names) {
    for (const auto& a : corpus.alignment) entity_sentence_.try_emplace(a.entity_id, ReviewRef{a.review_item_id, a.review_sentence_index});
    for (const auto& [item, doc] : corpus.reviews)
      if (!doc.sentences.empty()) entity_sentence_.try_emplace(item, ReviewRef{item, 0});
  }

  ConverseResult converse(std::string session_id, const std::string& utterance, int k) {
    auto words = tokenize(utterance);
    if (words.empty()) throw BadRequest("utterance must not be empty");
    if (k < 1) throw BadRequest("k must be >= 1");
    if (k > opt_.max_k) throw BadRequest("k must be <= " + std::to_string(opt_.max_k));
    if (session_id.empty()) session_id = "session-" + std::to_string(++anonymous_);

    std::shared_ptr<SessionState> s = session(session_id);
    std::lock_guard lock(s->mu);
    append(*s, Speaker::kSeeker, words);

    ConverseResult out;
    out.session_id = session_id;
    auto ranked = predictor_.recommend(s->entities);
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.ranked_items.size());
    for (std::size_t i = 0; i < n; ++i) {
      const EntityId id = ranked.ranked_items[i];
      auto name = corpus_.entity_names.find(id);
      out.recommendations.push_back(
          {id, name == corpus_.entity_names.end() ? std::to_string(id) : name->second, ranked.scores[i]});
    }

    auto [context, refs] = context_of(*s);
    DecodeOptions decode = opt_.decode;
    decode.mode = DecodeMode::kGreedy;
    auto gen = predictor_.generate(context, s->entities, refs, decode);
    out.response = corpus_.vocab.decode(gen.tokens);
    append(*s, Speaker::kRecommender, tokenize(out.response));
    out.turn = ++s->turn;
    s->last_active = clock_();
    return out;
  }

  /// Clears a session; unknown ids are accepted.
  void reset(const std::string& session_id) {
    std::lock_guard lock(mu_);
    sessions_.erase(session_id);
  }

  nlohmann::ordered_json health() const {
    return {{"status", "ok"},
            {"checkpoint", opt_.checkpoint_id},
            {"items", corpus_.kg.items().size()},
            {"sessions", session_count()}};
  }

  nlohmann::ordered_json items(std::size_t limit) const {
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (EntityId id : corpus_.kg.items()) {
      if (out.size() >= limit) break;
      auto name = corpus_.entity_names.find(id);
      out.push_back({{"item_id", id}, {"name", name == corpus_.entity_names.end() ? std::to_string(id) : name->second}});
    }
    return out;
  }

  std::size_t session_count() const {
    std::lock_guard lock(mu_);
    return sessions_.size();
  }

 private:
  std::shared_ptr<SessionState> session(const std::string& id) {
    std::lock_guard lock(mu_);
    const auto now = clock_();
    std::erase_if(sessions_, [&](const auto& kv) {
      return kv.first != id && now - kv.second->last_active > opt_.session_ttl;
    });
    auto it = sessions_.find(id);
    if (it != sessions_.end() && now - it->second->last_active > opt_.session_ttl) {
      sessions_.erase(it);
      it = sessions_.end();
    }
    if (it == sessions_.end()) {
      auto s = std::make_shared<SessionState>();
      s->id = id;
      s->created = s->last_active = now;
      it = sessions_.emplace(id, std::move(s)).first;
    }
    return it->second;
  }

  void append(SessionState& s, Speaker speaker, const std::vector<std::string>& words) {
    Utterance u;
    u.speaker = speaker;
    u.token_ids = corpus_.vocab.encode(words);
    u.entity_mentions = linker_.link(words);
    for (const auto& m : u.entity_mentions)
      if (std::find(s.entities.begin(), s.entities.end(), m.entity) == s.entities.end()) s.entities.push_back(m.entity);
    s.history.push_back(std::move(u));
  }

  std::pair<std::vector<TokenId>, std::vector<ReviewRef>> context_of(const SessionState& s) const {
    std::vector<TokenId> flat;
    std::vector<AlignmentTriple> links;
    for (std::size_t i = 0; i < s.history.size(); ++i) {
      if (!flat.empty()) flat.push_back(Vocabulary::kSep);
      flat.insert(flat.end(), s.history[i].token_ids.begin(), s.history[i].token_ids.end());
      for (const auto& m : s.history[i].entity_mentions) {
        auto it = entity_sentence_.find(m.entity);
        if (it == entity_sentence_.end()) continue;
        links.push_back({s.id, static_cast<int>(i), m.position, m.entity, it->second.item, it->second.sentence});
      }
    }
    const auto max_len = static_cast<std::size_t>(model_.config().max_context_len);
    if (flat.size() > max_len) flat.erase(flat.begin(), flat.end() - static_cast<std::ptrdiff_t>(max_len));
    auto refs = context_review_refs(links, s.entities, corpus_, static_cast<std::size_t>(model_.config().max_review_sentences));
    return {std::move(flat), std::move(refs)};
  }

  const C2crsModel<float>& model_;
  const Corpus& corpus_;
  ServeOptions opt_;
  Clock clock_;
  Predictor<float> predictor_;
  EntityLinker linker_;
  std::map<EntityId, ReviewRef> entity_sentence_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<SessionState>> sessions_;
  std::atomic<long> anonymous_{0};
};

namespace detail {

inline void json_reply(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  try {
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw BadRequest("request body must be a JSON object");
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw BadRequest(std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace detail

/// Installs the /api routes and permissive CORS headers on `server`.
inline void install_routes(httplib::Server& server, ConversationService& service) {
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  auto guarded = [](auto handler) {
    return [handler](const httplib::Request& req, httplib::Response& res) {
      try {
        handler(req, res);
      } catch (const BadRequest& e) {
        detail::json_reply(res, 400, {{"error", e.what()}});
      } catch (const nlohmann::json::exception& e) {
        detail::json_reply(res, 400, {{"error", e.what()}});
      } catch (const std::exception& e) {
        detail::json_reply(res, 500, {{"error", e.what()}});
      }
    };
  };

  server.Post("/api/converse", guarded([&service](const httplib::Request& req, httplib::Response& res) {
                auto body = detail::parse_body(req);
                if (!body.contains("utterance") || !body["utterance"].is_string())
                  throw BadRequest("'utterance' must be a string");
                const int k = body.value("k", 10);
                auto result = service.converse(body.value("session_id", std::string()), body["utterance"].get<std::string>(), k);
                detail::json_reply(res, 200, to_json(result));
              }));
  server.Post("/api/reset", guarded([&service](const httplib::Request& req, httplib::Response& res) {
                auto body = detail::parse_body(req);
                service.reset(body.value("session_id", std::string()));
                detail::json_reply(res, 200, {{"status", "ok"}});
              }));
  server.Get("/api/health", guarded([&service](const httplib::Request&, httplib::Response& res) {
               detail::json_reply(res, 200, service.health());
             }));
  server.Get("/api/items", guarded([&service](const httplib::Request& req, httplib::Response& res) {
               std::size_t limit = std::numeric_limits<std::size_t>::max();
               if (req.has_param("limit")) {
                 try {
                   const long v = std::stol(req.get_param_value("limit"));
                   if (v < 0) throw BadRequest("limit must be non-negative");
                   limit = static_cast<std::size_t>(v);
                 } catch (const std::logic_error&) {
                   throw BadRequest("limit must be an integer");
                 }
               }
               detail::json_reply(res, 200, {{"items", service.items(limit)}});
             }));
}

}  // namespace c2crs
