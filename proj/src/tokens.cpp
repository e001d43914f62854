#include "circuit_lens/tokens.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace circuit_lens {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// GPT-2's reversible byte -> printable code point table.
struct ByteTable {
  std::array<char32_t, 256> byte_to_cp{};
  std::unordered_map<char32_t, unsigned char> cp_to_byte;

  ByteTable() {
    std::vector<int> direct;
    for (int b = '!'; b <= '~'; ++b) direct.push_back(b);
    for (int b = 0xA1; b <= 0xAC; ++b) direct.push_back(b);
    for (int b = 0xAE; b <= 0xFF; ++b) direct.push_back(b);
    std::array<bool, 256> is_direct{};
    for (int b : direct) is_direct[static_cast<std::size_t>(b)] = true;
    int shifted = 0;
    for (int b = 0; b < 256; ++b) {
      const char32_t cp = is_direct[static_cast<std::size_t>(b)] ? static_cast<char32_t>(b)
                                                                 : static_cast<char32_t>(256 + shifted++);
      byte_to_cp[static_cast<std::size_t>(b)] = cp;
      cp_to_byte[cp] = static_cast<unsigned char>(b);
    }
  }
};

const ByteTable& byte_table() {
  static const ByteTable table;
  return table;
}

std::vector<char32_t> utf8_code_points(const std::string& s) {
  std::vector<char32_t> out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    int len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + static_cast<std::size_t>(len) > s.size())
      fail(ErrorCode::ConfigError, "invalid UTF-8 in vocabulary entry");
    char32_t cp = len == 1 ? c : len == 2 ? (c & 0x1F) : len == 3 ? (c & 0x0F) : (c & 0x07);
    for (int k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    out.push_back(cp);
    i += static_cast<std::size_t>(len);
  }
  return out;
}

void append_utf8(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

std::string read_file(const fs::path& path, ErrorCode code) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(code, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string decode_byte_level(const std::string& encoded) {
  const auto& table = byte_table();
  std::string out;
  for (char32_t cp : utf8_code_points(encoded)) {
    auto it = table.cp_to_byte.find(cp);
    if (it == table.cp_to_byte.end())
      fail(ErrorCode::ConfigError, "code point outside the byte-level alphabet");
    out.push_back(static_cast<char>(it->second));
  }
  return out;
}

std::string encode_byte_level(const std::string& raw) {
  const auto& table = byte_table();
  std::string out;
  for (char c : raw) append_utf8(out, table.byte_to_cp[static_cast<unsigned char>(c)]);
  return out;
}

Vocab Vocab::from_token_strings(const std::vector<std::string>& encoded) {
  Vocab v;
  v.id_to_bytes_.reserve(encoded.size());
  for (std::size_t id = 0; id < encoded.size(); ++id) {
    v.id_to_bytes_.push_back(decode_byte_level(encoded[id]));
    v.first_id_.try_emplace(v.id_to_bytes_.back(), static_cast<TokenId>(id));
  }
  return v;
}

Vocab Vocab::parse(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("vocabulary is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) fail(ErrorCode::ConfigError, "vocabulary must map token strings to ids");
  std::vector<std::string> encoded(doc.size());
  std::vector<bool> seen(doc.size(), false);
  for (const auto& [token, id_json] : doc.items()) {
    const auto id = id_json.get<long long>();
    if (id < 0 || id >= static_cast<long long>(doc.size()) || seen[static_cast<std::size_t>(id)])
      fail(ErrorCode::ConfigError, "vocabulary ids must be a permutation of 0..size-1");
    seen[static_cast<std::size_t>(id)] = true;
    encoded[static_cast<std::size_t>(id)] = token;
  }
  return from_token_strings(encoded);
}

Vocab Vocab::load(const fs::path& path) { return parse(read_file(path, ErrorCode::ConfigError)); }

const std::string& Vocab::bytes(TokenId id) const {
  if (id < 0 || id >= size())
    fail(ErrorCode::IdOutOfRange, "token id " + std::to_string(id) + " outside vocabulary of " +
                                      std::to_string(size()));
  return id_to_bytes_[static_cast<std::size_t>(id)];
}

TokenId Vocab::find(const std::string& text) const {
  auto it = first_id_.find(text);
  return it == first_id_.end() ? -1 : it->second;
}

std::string decode_token(const Vocab& vocab, TokenId id) { return vocab.bytes(id); }

TokenId resolve_token(const std::string& spec, const Vocab* vocab, Index d_voc) {
  if (spec.rfind("id:", 0) == 0) {
    long long id = -1;
    try {
      std::size_t used = 0;
      id = std::stoll(spec.substr(3), &used);
      if (used != spec.size() - 3) id = -1;
    } catch (const std::exception&) {
      id = -1;
    }
    if (id < 0 || id >= d_voc) fail(ErrorCode::IdOutOfRange, "token " + spec + " out of range");
    return static_cast<TokenId>(id);
  }
  if (vocab == nullptr)
    fail(ErrorCode::ConfigError, "token '" + spec + "' needs --vocab (or use id:<n>)");
  const TokenId id = vocab->find(spec);
  if (id < 0) fail(ErrorCode::ConfigError, "token '" + spec + "' is not in the vocabulary");
  if (id >= d_voc) fail(ErrorCode::IdOutOfRange, "token '" + spec + "' exceeds model vocabulary");
  return id;
}

void validate_tokens(std::span<const TokenId> ids, Index d_voc) {
  for (TokenId id : ids)
    if (id < 0 || id >= d_voc)
      fail(ErrorCode::IdOutOfRange, "token id " + std::to_string(id) + " outside [0, " +
                                        std::to_string(d_voc) + ")");
}

Corpus parse_corpus(const std::string& jsonl, Index min_len, Index d_voc) {
  Corpus corpus;
  std::istringstream in(jsonl);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); }))
      continue;
    const std::string where = "line " + std::to_string(line_no);
    TokenSeq seq;
    try {
      const json doc = json::parse(line);
      seq.label = doc.value("label", where);
      for (const auto& t : doc.at("tokens")) {
        const auto id = t.get<long long>();
        if (id < 0 || id >= d_voc)
          fail(ErrorCode::MalformedLine, where + ": token id " + std::to_string(id) + " out of range");
        seq.ids.push_back(static_cast<TokenId>(id));
      }
    } catch (const json::exception& e) {
      fail(ErrorCode::MalformedLine, where + ": " + e.what());
    }
    if (seq.ids.empty() || seq.size() < min_len) {
      corpus.warnings.push_back(where + " (" + seq.label + "): " + std::to_string(seq.size()) +
                                " tokens, need " + std::to_string(std::max<Index>(min_len, 1)));
      continue;
    }
    corpus.sequences.push_back(std::move(seq));
  }
  if (corpus.sequences.empty()) fail(ErrorCode::EmptyCorpus, "no usable sequences in corpus");
  return corpus;
}

Corpus load_corpus(const fs::path& path, Index min_len, Index d_voc) {
  Corpus c = parse_corpus(read_file(path, ErrorCode::ConfigError), min_len, d_voc);
  c.source = path;
  return c;
}

StopWords StopWords::load(const fs::path& path) {
  std::istringstream in(read_file(path, ErrorCode::ConfigError));
  std::unordered_set<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string w;
    if (!(fields >> w) || w[0] == '#') continue;
    do words.insert(w);
    while (fields >> w);
  }
  return StopWords(std::move(words));
}

StopWords StopWords::english() { return load(fs::path(CIRCUIT_LENS_DATA_DIR) / "stopwords_en.txt"); }

bool StopWords::contains_token(const std::string& token_text) const {
  std::string s;
  for (char c : token_text)
    if (!std::isspace(static_cast<unsigned char>(c)))
      s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  return !s.empty() && words_.contains(s);
}

double stop_word_density(const Vocab& vocab, const StopWords& words, std::span<const TokenId> ids) {
  if (ids.empty()) return 0.0;
  std::size_t hits = 0;
  for (TokenId id : ids) hits += words.contains_token(vocab.bytes(id)) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(ids.size());
}

}  // namespace circuit_lens
