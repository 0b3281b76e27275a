#pragma once

// Response generation: a Transformer decoder whose layers attend to the
// conversation tokens, then the context entities, then review sentences,
// followed by a head that attends over the review sentences and conditions
// the vocabulary distribution on the attended context.

#include <functional>
#include <iostream>
#include <set>

#include "c2crs/encoders.hpp"

namespace c2crs {

/// Encoder memories the decoder cross-attends to, all d_conv wide.
template <typename T>
struct DecoderMemory {
  ad::Var<T> tokens;  // F
  nn::KeyMask token_mask;
  ad::Var<T> entities;  // projected N_u
  ad::Var<T> sentences;  // E
};

namespace nn {

template <typename T>
struct DecoderLayer {
  MultiHeadAttention<T> self_attn, conv_attn, kg_attn, review_attn;
  LayerNorm<T> norm_self, norm_conv, norm_kg, norm_review, norm_ffn;
  FeedForward<T> ffn;

  DecoderLayer() = default;
  DecoderLayer(ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg, Rng& rng)
      : self_attn(ps, name + ".self_attn", cfg.d_conv, cfg.n_heads, rng),
        conv_attn(ps, name + ".conv_attn", cfg.d_conv, cfg.n_heads, rng),
        kg_attn(ps, name + ".kg_attn", cfg.d_conv, cfg.n_heads, rng),
        review_attn(ps, name + ".review_attn", cfg.d_conv, cfg.n_heads, rng),
        norm_self(ps, name + ".norm_self", cfg.d_conv),
        norm_conv(ps, name + ".norm_conv", cfg.d_conv),
        norm_kg(ps, name + ".norm_kg", cfg.d_conv),
        norm_review(ps, name + ".norm_review", cfg.d_conv),
        norm_ffn(ps, name + ".norm_ffn", cfg.d_conv),
        ffn(ps, name + ".ffn", cfg.d_conv, cfg.ffn_width, rng) {}

  /// generated prefix -> conversation history -> knowledge graph -> reviews -> FFN.
  /// `skip_reviews` drops the review sub-layer entirely.
  Var<T> operator()(Tape<T>& t, Var<T> x, const DecoderMemory<T>& mem, bool skip_reviews = false) const {
    const Eigen::Index d = x.rows();
    if (mem.tokens.rows() != d || mem.entities.rows() != d || mem.sentences.rows() != d)
      throw Error("decoder_layer: memory width mismatch");
    x = norm_self(t, ad::add(x, self_attn(t, x, x, {}, true)));
    x = norm_conv(t, ad::add(x, conv_attn(t, x, mem.tokens, mem.token_mask)));
    x = norm_kg(t, ad::add(x, kg_attn(t, x, mem.entities)));
    if (!skip_reviews) x = norm_review(t, ad::add(x, review_attn(t, x, mem.sentences)));
    return norm_ffn(t, ad::add(x, ffn(t, x)));
  }
};

}  // namespace nn

template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(ParamStore<T>& ps, const ModelConfig& cfg, const CorpusShape& shape, Rng& rng)
      : embed_(ps, "decoder.embedding", shape.vocab_size, cfg.d_conv, rng),
        kg_proj_(ps, "decoder.kg_proj", cfg.d_rec, cfg.d_conv, rng) {
    for (int l = 0; l < cfg.n_dec_layers; ++l) layers_.emplace_back(ps, "decoder.layer" + std::to_string(l), cfg, rng);
  }

  /// Maps d_rec entity representations into the decoder width.
  ad::Var<T> project_entities(ad::Tape<T>& t, ad::Var<T> entities) const { return kg_proj_(t, entities); }

  /// Top-layer states R (d_conv x prefix length).
  ad::Var<T> operator()(ad::Tape<T>& t, std::span<const TokenId> prefix, const DecoderMemory<T>& mem,
                        bool skip_reviews = false) const {
    if (prefix.empty()) throw Error("decoder: empty prefix");
    ad::Var<T> x = embed_(t, prefix);
    for (const auto& layer : layers_) x = layer(t, x, mem, skip_reviews);
    return x;
  }

  const nn::DecoderLayer<T>& layer(std::size_t i) const { return layers_.at(i); }

 private:
  nn::TokenEmbedding<T> embed_;
  nn::Linear<T> kg_proj_;
  std::vector<nn::DecoderLayer<T>> layers_;
};

/// alpha = softmax(E^T r), c = E alpha, logits = W [r; c] + b.
template <typename T>
class FusionHead {
 public:
  FusionHead() = default;
  FusionHead(ParamStore<T>& ps, const ModelConfig& cfg, const CorpusShape& shape, Rng& rng)
      : out_(ps, "decoder.fusion.out", 2 * cfg.d_conv, shape.vocab_size, rng) {
    if (shape.vocab_size < Vocabulary::kSpecialCount) throw Error("fusion_head: vocabulary too small");
  }

  /// Vocabulary logits, one column per decoder position.
  ad::Var<T> logits(ad::Tape<T>& t, ad::Var<T> states, ad::Var<T> sentences) const {
    if (states.rows() != sentences.rows()) throw Error("fusion_head: width mismatch");
    ad::Var<T> attn = ad::softmax_cols(ad::matmul(ad::transpose(sentences), states));
    ad::Var<T> context = ad::matmul(sentences, attn);
    return out_(t, ad::concat_rows<T>({states, context}));
  }

  Matrix<T> probabilities(ad::Tape<T>& t, ad::Var<T> states, ad::Var<T> sentences) const {
    return ad::detail::softmax_cols<T>(logits(t, states, sentences).value());
  }

 private:
  nn::Linear<T> out_;
};

/// 1 below the threshold beta, else max(gamma, beta / f_w).
inline double instance_weight(std::uint64_t frequency, double beta, double gamma) {
  const double f = static_cast<double>(frequency);
  if (f < beta) return 1.0;
  return std::max(gamma, beta / f);
}

/// Weighted token NLL: -(1/m) sum_j alpha_j log P(w_j | w_<j). `logits` is
/// |V| x m with one column per target position.
template <typename T>
ad::Var<T> gen_loss(ad::Var<T> logits, const std::vector<TokenId>& targets, const std::vector<double>& weights) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.cols() || weights.size() != targets.size())
    throw Error("gen_loss: one target and weight per position");
  for (TokenId w : targets)
    if (w < 0 || w >= logits.rows()) throw Error("gen_loss: target outside the vocabulary");
  ad::Var<T> nll = ad::sub(ad::logsumexp_cols(logits), ad::pick(logits, std::vector<int>(targets.begin(), targets.end())));
  Matrix<T> w(1, static_cast<Eigen::Index>(weights.size()));
  const T inv_m = T(1) / static_cast<T>(targets.size());
  for (std::size_t j = 0; j < weights.size(); ++j) w(0, static_cast<Eigen::Index>(j)) = static_cast<T>(weights[j]) * inv_m;
  return ad::weighted_sum(nll, std::move(w));
}

/// Frequency weights for a target sequence.
inline std::vector<double> token_weights(const std::vector<TokenId>& targets, const Vocabulary& vocab, double beta,
                                         double gamma) {
  std::vector<double> w;
  w.reserve(targets.size());
  for (TokenId t : targets) w.push_back(instance_weight(vocab.frequency(t), beta, gamma));
  return w;
}

/// Same loss from per-step probability vectors. Pad targets are skipped.
inline double gen_loss(const std::vector<std::vector<double>>& step_probs, const std::vector<TokenId>& targets,
                       const Vocabulary& vocab, double beta, double gamma) {
  if (step_probs.size() != targets.size()) throw Error("gen_loss: one distribution per target");
  double total = 0.0;
  std::size_t m = 0;
  for (std::size_t j = 0; j < targets.size(); ++j) {
    if (targets[j] == Vocabulary::kPad) continue;
    total += instance_weight(vocab.frequency(targets[j]), beta, gamma) * std::log(step_probs[j].at(targets[j]));
    ++m;
  }
  return m == 0 ? 0.0 : -total / static_cast<double>(m);
}

enum class DecodeMode { kGreedy, kBeam };

struct DecodeOptions {
  DecodeMode mode = DecodeMode::kGreedy;
  int max_len = 30;
  int beam_width = 4;
  /// eos is suppressed until this many tokens have been produced.
  int min_len = 1;
  /// Never emitted.
  std::vector<TokenId> banned = {Vocabulary::kPad, Vocabulary::kBos, Vocabulary::kSep};
};

struct GenerationOutput {
  enum class Stop { kEos, kMaxLen };
  std::vector<TokenId> tokens;
  std::vector<double> step_probabilities;
  Stop reason = Stop::kMaxLen;
};

/// Next-token distribution for a prefix that starts with bos.
using NextTokenFn = std::function<std::vector<double>(std::span<const TokenId>)>;

namespace detail {

inline void apply_bans(std::vector<double>& probs, const DecodeOptions& opt, std::size_t produced) {
  for (TokenId b : opt.banned)
    if (b >= 0 && static_cast<std::size_t>(b) < probs.size()) probs[b] = 0.0;
  if (static_cast<int>(produced) < opt.min_len && static_cast<std::size_t>(Vocabulary::kEos) < probs.size())
    probs[Vocabulary::kEos] = 0.0;
}

}  // namespace detail

/// Greedy (argmax, ties to the lowest token id) or beam search over summed
/// log-probabilities with length normalisation when hypotheses finish.
inline GenerationOutput decode(const NextTokenFn& next, const DecodeOptions& opt) {
  if (opt.max_len < 1) throw Error("decode: max_len must be >= 1");
  GenerationOutput out;
  if (opt.mode == DecodeMode::kGreedy) {
    std::vector<TokenId> prefix = {Vocabulary::kBos};
    for (int step = 0; step < opt.max_len; ++step) {
      auto probs = next(prefix);
      detail::apply_bans(probs, opt, out.tokens.size());
      std::size_t best = 0;
      for (std::size_t i = 1; i < probs.size(); ++i)
        if (probs[i] > probs[best]) best = i;
      if (static_cast<TokenId>(best) == Vocabulary::kEos) {
        out.step_probabilities.push_back(probs[best]);
        out.reason = GenerationOutput::Stop::kEos;
        return out;
      }
      out.tokens.push_back(static_cast<TokenId>(best));
      out.step_probabilities.push_back(probs[best]);
      prefix.push_back(static_cast<TokenId>(best));
    }
    out.reason = GenerationOutput::Stop::kMaxLen;
    return out;
  }

  if (opt.beam_width < 1) throw Error("decode: beam_width must be >= 1");
  struct Hyp {
    std::vector<TokenId> tokens;
    std::vector<double> probs;
    double logp = 0.0;
    bool finished = false;
  };
  std::vector<Hyp> beam = {Hyp{}};
  std::vector<Hyp> finished;
  const auto width = static_cast<std::size_t>(opt.beam_width);
  for (int step = 0; step < opt.max_len && !beam.empty() && finished.size() < width; ++step) {
    struct Cand {
      std::size_t parent;
      TokenId token;
      double prob;
      double logp;
    };
    std::vector<Cand> cands;
    for (std::size_t h = 0; h < beam.size(); ++h) {
      std::vector<TokenId> prefix = {Vocabulary::kBos};
      prefix.insert(prefix.end(), beam[h].tokens.begin(), beam[h].tokens.end());
      auto probs = next(prefix);
      detail::apply_bans(probs, opt, beam[h].tokens.size());
      for (std::size_t i = 0; i < probs.size(); ++i)
        if (probs[i] > 0.0) cands.push_back({h, static_cast<TokenId>(i), probs[i], beam[h].logp + std::log(probs[i])});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });
    std::vector<Hyp> next_beam;
    for (const auto& c : cands) {
      if (next_beam.size() + finished.size() >= width) break;
      Hyp h = beam[c.parent];
      h.probs.push_back(c.prob);
      h.logp = c.logp;
      if (c.token == Vocabulary::kEos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(c.token);
        next_beam.push_back(std::move(h));
      }
    }
    beam = std::move(next_beam);
  }
  for (auto& h : beam) finished.push_back(std::move(h));
  if (finished.empty()) return out;
  auto normalised = [](const Hyp& h) { return h.logp / static_cast<double>(std::max<std::size_t>(1, h.probs.size())); };
  const Hyp* best = &finished.front();
  for (const auto& h : finished)
    if (normalised(h) > normalised(*best)) best = &h;
  out.tokens = best->tokens;
  out.step_probabilities = best->probs;
  out.reason = best->finished ? GenerationOutput::Stop::kEos : GenerationOutput::Stop::kMaxLen;
  return out;
}

/// Unique n-grams over total n-grams across all responses. With
/// `per_sentence`, the ratio is computed per response and averaged over the
/// responses that contain at least one n-gram.
inline double distinct_n(const std::vector<std::vector<TokenId>>& responses, int n, bool per_sentence = false) {
  if (n < 1) throw Error("distinct_n: n must be >= 1");
  if (responses.empty()) {
    std::cerr << "warning: distinct_n over an empty response set\n";
    return 0.0;
  }
  const auto un = static_cast<std::size_t>(n);
  if (per_sentence) {
    double acc = 0.0;
    std::size_t counted = 0;
    for (const auto& r : responses) {
      if (r.size() < un) continue;
      std::set<std::vector<TokenId>> uniq;
      for (std::size_t i = 0; i + un <= r.size(); ++i) uniq.emplace(r.begin() + i, r.begin() + i + un);
      acc += static_cast<double>(uniq.size()) / static_cast<double>(r.size() - un + 1);
      ++counted;
    }
    return counted == 0 ? 0.0 : acc / static_cast<double>(counted);
  }
  std::set<std::vector<TokenId>> uniq;
  std::size_t total = 0;
  for (const auto& r : responses) {
    if (r.size() < un) continue;
    for (std::size_t i = 0; i + un <= r.size(); ++i) {
      uniq.emplace(r.begin() + i, r.begin() + i + un);
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(uniq.size()) / static_cast<double>(total);
}

}  // namespace c2crs
