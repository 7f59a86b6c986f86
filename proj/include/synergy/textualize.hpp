#pragma once

#include <algorithm>
#include <cctype>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "synergy/common.hpp"
#include "synergy/ingest.hpp"

namespace synergy {

inline constexpr std::string_view kInputSlot = "{input}";

struct PromptTemplate {
  std::string instruction =
      "Decide in a single word if the synergy of the drug combination in the cell line is "
      "positive or not. {input}. Synergy:";
  std::string positive_word = "Positive";
  std::string negative_word = "Not positive";

  static PromptTemplate alternate() {
    PromptTemplate t;
    t.instruction =
        "Determine cancer drug combination synergy for the following drugs. Allowed synergies: "
        "{Positive, Not positive}. {input}. Synergy:";
    return t;
  }

  void validate() const {
    std::size_t slots = 0;
    for (auto pos = instruction.find(kInputSlot); pos != std::string::npos;
         pos = instruction.find(kInputSlot, pos + kInputSlot.size())) {
      ++slots;
    }
    if (slots != 1) {
      throw TemplateError("template must contain exactly one {input} slot, found " +
                          std::to_string(slots));
    }
    if (positive_word.empty() || negative_word.empty()) {
      throw TemplateError("answer words must be non-empty");
    }
    if (positive_word == negative_word) throw TemplateError("answer words must differ");
  }
};

struct SerializedExample {
  std::string prompt;
  std::string completion;
  int label = 0;
};

inline std::string serialize_record(const SynergyRecord& r, int precision = 3) {
  std::string s;
  s.reserve(256);
  s += "The first drug is " + r.drug1 + ". ";
  s += "The second drug is " + r.drug2 + ". ";
  s += "The cell line is " + r.cell_line + ". ";
  s += "Tissue is " + r.tissue + ". ";
  s += "The first drug's sensitivity using relative inhibition is " + format_real(r.ri1, precision) + ". ";
  s += "The second drug's sensitivity using relative inhibition is " + format_real(r.ri2, precision) + ".";
  return s;
}

inline std::string serialize_record(const LabeledExample& e, int precision = 3) {
  return serialize_record(e.record, precision);
}

inline std::string build_prompt(std::string_view serialized, const PromptTemplate& tpl) {
  tpl.validate();
  std::string out = tpl.instruction;
  out.replace(out.find(kInputSlot), kInputSlot.size(), serialized);
  return out;
}

inline const std::string& label_to_completion(int label, const PromptTemplate& tpl) {
  return label == 1 ? tpl.positive_word : tpl.negative_word;
}

inline SerializedExample serialize_example(const LabeledExample& e, const PromptTemplate& tpl,
                                           int precision = 3) {
  return {build_prompt(serialize_record(e, precision), tpl), label_to_completion(e.label, tpl),
          e.label};
}

// Word-level tokenization: whitespace separates words; a punctuation
// character is its own token unless it sits between two alphanumerics
// ("A-673", "0.568", "drug's" stay whole).
inline std::vector<std::string> tokenize_words(std::string_view text) {
  auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  auto space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (space(c)) {
      flush();
    } else if (alnum(c) || (c & 0x80)) {
      cur.push_back(c);
    } else {
      const bool joined = i > 0 && i + 1 < text.size() && alnum(text[i - 1]) && alnum(text[i + 1]);
      if (joined) {
        cur.push_back(c);
      } else {
        flush();
        out.emplace_back(1, c);
      }
    }
  }
  flush();
  return out;
}

inline std::string normalize_whitespace(std::string_view text) {
  std::string out;
  for (const auto& t : tokenize_words(text)) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

struct TokenizedExample {
  std::vector<int> ids;
  std::vector<int> mask;
  int label = 0;
};

class Tokenizer {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kUnkId = 1;
  static constexpr std::string_view kPadToken = "<pad>";
  static constexpr std::string_view kUnkToken = "<unk>";

  Tokenizer() : id_to_token_{std::string(kPadToken), std::string(kUnkToken)} { reindex(); }

  // Frequency-ranked vocabulary (ties broken lexicographically), truncated to
  // max_size - 2 words plus the two reserved tokens.
  static Tokenizer build(const std::vector<std::string>& corpus, std::size_t max_size) {
    if (corpus.empty()) throw std::invalid_argument("build_vocabulary: empty corpus");
    if (max_size < 2) throw std::invalid_argument("build_vocabulary: max_size < 2");
    std::map<std::string, std::size_t> freq;
    for (const auto& doc : corpus) {
      for (auto& w : tokenize_words(doc)) ++freq[w];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Tokenizer t;
    for (std::size_t i = 0; i < ranked.size() && t.id_to_token_.size() < max_size; ++i) {
      t.id_to_token_.push_back(ranked[i].first);
    }
    t.reindex();
    return t;
  }

  std::size_t size() const { return id_to_token_.size(); }
  int pad_id() const { return kPadId; }
  int unk_id() const { return kUnkId; }

  int id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnkId : it->second;
  }
  const std::string& token(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }

  std::vector<int> ids(std::string_view text) const {
    std::vector<int> out;
    for (const auto& w : tokenize_words(text)) out.push_back(id(w));
    return out;
  }

  // Left-padded encoding of exactly `length` positions.
  TokenizedExample encode(std::string_view text, std::size_t length, int label = 0) const {
    auto real = ids(text);
    if (real.empty()) throw std::invalid_argument("encode: empty text");
    if (real.size() > length) throw SequenceTooLong(real.size(), length);
    TokenizedExample ex;
    ex.label = label;
    ex.ids.assign(length - real.size(), kPadId);
    ex.mask.assign(length - real.size(), 0);
    ex.ids.insert(ex.ids.end(), real.begin(), real.end());
    ex.mask.insert(ex.mask.end(), real.size(), 1);
    return ex;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
      if (i == kPadId) continue;
      if (!out.empty()) out += ' ';
      out += token(i);
    }
    return out;
  }

  void save(std::ostream& os) const {
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) os << id_to_token_[i] << '\t' << i << '\n';
  }

  static Tokenizer load(std::istream& is) {
    std::map<int, std::string> rows;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw DataError("tokenizer: malformed line '" + line + "'");
      const int id = std::stoi(line.substr(tab + 1));
      if (!rows.emplace(id, line.substr(0, tab)).second) {
        throw DataError("tokenizer: duplicate id " + std::to_string(id));
      }
    }
    Tokenizer t;
    t.id_to_token_.clear();
    int expect = 0;
    for (auto& [id, tok] : rows) {
      if (id != expect++) throw DataError("tokenizer: ids are not contiguous");
      t.id_to_token_.push_back(std::move(tok));
    }
    if (t.id_to_token_.size() < 2 || t.id_to_token_[0] != kPadToken || t.id_to_token_[1] != kUnkToken) {
      throw DataError("tokenizer: reserved tokens missing");
    }
    t.reindex();
    if (t.token_to_id_.size() != t.id_to_token_.size()) throw DataError("tokenizer: duplicate token");
    return t;
  }

  std::uint64_t checksum() const {
    std::ostringstream os;
    save(os);
    return fnv1a64(os.str());
  }

 private:
  void reindex() {
    token_to_id_.clear();
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
      token_to_id_.emplace(id_to_token_[i], static_cast<int>(i));
    }
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

inline Tokenizer build_vocabulary(const std::vector<std::string>& corpus, std::size_t max_size) {
  return Tokenizer::build(corpus, max_size);
}

inline TokenizedExample encode(std::string_view text, const Tokenizer& tok, std::size_t length) {
  return tok.encode(text, length);
}

// Prompts for a set of examples, in order. Labels never enter the text.
inline std::vector<std::string> prompt_corpus(const std::vector<LabeledExample>& xs, const PromptTemplate& tpl,
                                              int precision = 3) {
  std::vector<std::string> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(build_prompt(serialize_record(x, precision), tpl));
  return out;
}

inline std::vector<TokenizedExample> tokenize_examples(const std::vector<LabeledExample>& xs,
                                                       const PromptTemplate& tpl, const Tokenizer& tok,
                                                       std::size_t length, int precision = 3) {
  std::vector<TokenizedExample> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(tok.encode(build_prompt(serialize_record(x, precision), tpl), length, x.label));
  return out;
}

}  // namespace synergy
