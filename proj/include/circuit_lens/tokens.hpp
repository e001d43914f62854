#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "circuit_lens/common.hpp"

namespace circuit_lens {

struct TokenSeq {
  std::vector<TokenId> ids;
  std::string label;

  Index size() const { return static_cast<Index>(ids.size()); }
  std::span<const TokenId> view() const { return ids; }
};

struct Corpus {
  std::vector<TokenSeq> sequences;
  std::filesystem::path source;
  // One entry per line dropped for being shorter than the requested minimum.
  std::vector<std::string> warnings;
};

// Byte-level vocabulary: token id -> raw bytes of the token.
class Vocab {
 public:
  // Token strings are given in the GPT-2 byte-to-unicode alphabet.
  static Vocab from_token_strings(const std::vector<std::string>& encoded);
  // Standard published vocabulary file: JSON object token-string -> id.
  static Vocab load(const std::filesystem::path& path);
  static Vocab parse(const std::string& json_text);

  Index size() const { return static_cast<Index>(id_to_bytes_.size()); }
  const std::string& bytes(TokenId id) const;
  // Lowest id whose decoded bytes equal `text`, or -1.
  TokenId find(const std::string& text) const;

 private:
  std::vector<std::string> id_to_bytes_;
  std::unordered_map<std::string, TokenId> first_id_;
};

// Decodes a token string written in the byte-to-unicode alphabet back to raw bytes.
std::string decode_byte_level(const std::string& encoded);
// Inverse of decode_byte_level.
std::string encode_byte_level(const std::string& raw);

// Display string for a token id; leading spaces are preserved.
std::string decode_token(const Vocab& vocab, TokenId id);

// Accepts "id:<n>" or a decoded token string such as " the".
TokenId resolve_token(const std::string& spec, const Vocab* vocab, Index d_voc);

// JSON lines of {"label": string, "tokens": [ids]}. Sequences shorter than
// min_len are dropped with a warning; out-of-range ids are an error.
Corpus load_corpus(const std::filesystem::path& path, Index min_len, Index d_voc);
Corpus parse_corpus(const std::string& jsonl, Index min_len, Index d_voc);

void validate_tokens(std::span<const TokenId> ids, Index d_voc);

class StopWords {
 public:
  static StopWords load(const std::filesystem::path& path);
  static StopWords english();  // shipped list
  explicit StopWords(std::unordered_set<std::string> words) : words_(std::move(words)) {}

  // Token counts as a stop word when its text, stripped of surrounding
  // whitespace and lower-cased, is in the list.
  bool contains_token(const std::string& token_text) const;
  std::size_t size() const { return words_.size(); }

 private:
  std::unordered_set<std::string> words_;
};

double stop_word_density(const Vocab& vocab, const StopWords& words, std::span<const TokenId> ids);

}  // namespace circuit_lens
