#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace malsf {

// Whitespace tokenizer over a fixed word list. Ids are positions in the
// word list; [CLS]=0, [PAD]=1, [UNK]=2 by construction.
class Vocab {
 public:
  static constexpr int kCls = 0;
  static constexpr int kPad = 1;
  static constexpr int kUnk = 2;

  explicit Vocab(std::vector<std::string> words);

  // The built-in vocabulary of the synthetic scene language.
  static const Vocab& synthetic();

  int size() const { return static_cast<int>(words_.size()); }
  int id_of(const std::string& word) const;  // kUnk when absent
  const std::string& word(int id) const { return words_[static_cast<size_t>(id)]; }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

struct TokenSeq {
  std::vector<int> ids;            // length l_max, position 0 is [CLS]
  std::vector<uint8_t> attn_mask;  // 1 for [CLS] and real tokens, 0 for [PAD]
  int real_tokens() const;         // count of mask==1 positions
};

TokenSeq tokenize(const std::string& text, const Vocab& vocab, int l_max);

std::vector<std::string> split_whitespace(const std::string& text);

}  // namespace malsf
