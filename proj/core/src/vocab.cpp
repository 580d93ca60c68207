#include "malsf/vocab.hpp"

#include <sstream>
#include <stdexcept>

namespace malsf {

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.size() < 3 || words_[0] != "[CLS]" || words_[1] != "[PAD]" || words_[2] != "[UNK]") {
    throw std::invalid_argument("vocab must start with [CLS] [PAD] [UNK]");
  }
  for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
}

const Vocab& Vocab::synthetic() {
  static const Vocab v({
      "[CLS]", "[PAD]", "[UNK]",
      "a", "and",
      "red", "green", "blue", "yellow", "purple", "orange", "cyan", "pink",
      "circle", "square", "triangle",
  });
  return v;
}

int Vocab::id_of(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

int TokenSeq::real_tokens() const {
  int n = 0;
  for (uint8_t m : attn_mask) n += m;
  return n;
}

std::vector<std::string> split_whitespace(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

TokenSeq tokenize(const std::string& text, const Vocab& vocab, int l_max) {
  if (l_max < 1) throw std::invalid_argument("tokenize: l_max must be >= 1");
  TokenSeq seq;
  seq.ids.assign(static_cast<size_t>(l_max), Vocab::kPad);
  seq.attn_mask.assign(static_cast<size_t>(l_max), 0);
  seq.ids[0] = Vocab::kCls;
  seq.attn_mask[0] = 1;
  int pos = 1;
  for (const auto& w : split_whitespace(text)) {
    if (pos >= l_max) break;  // truncate
    seq.ids[static_cast<size_t>(pos)] = vocab.id_of(w);
    seq.attn_mask[static_cast<size_t>(pos)] = 1;
    ++pos;
  }
  return seq;
}

}  // namespace malsf
