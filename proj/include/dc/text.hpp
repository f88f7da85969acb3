#pragma once
// Token vocabulary and caption tokenization. Captions come from a closed
// grammar ("a <color> <shape> on a <bgcolor> background [<position>]"), so
// the vocabulary is a fixed word list; token id 0 is reserved for the null
// prompt, which is represented as a single-token sequence.

#include <string>
#include <unordered_map>
#include <vector>

namespace dc {

inline constexpr int kNullTokenId = 0;

// Word classes the caption grammar draws from; the dataset generator keys
// its palettes and shape rasterizers off these exact strings.
const std::vector<std::string>& shape_words();           // 5 subject shapes
const std::vector<std::string>& subject_color_words();   // 8 subject colors
const std::vector<std::string>& background_color_words(); // 6 background colors
const std::vector<std::string>& position_phrases();      // 5 placement buckets ("" = centered)

struct Vocabulary {
    std::vector<std::string> words; // id -> word; words[0] is the null marker
    std::unordered_map<std::string, int> index;

    // Full grammar vocabulary: null marker, structural words, and all word
    // classes above.
    static Vocabulary standard();

    int size() const { return int(words.size()); }
    bool contains(const std::string& w) const { return index.count(w) != 0; }
    int id(const std::string& w) const;         // unknown word -> config error
    const std::string& word(int token_id) const; // out of range -> config error
};

struct TokenSequence {
    std::vector<int> ids;

    static TokenSequence null_prompt() { return TokenSequence{{kNullTokenId}}; }
    bool is_null() const { return ids.size() == 1 && ids[0] == kNullTokenId; }
    bool operator==(const TokenSequence&) const = default;
};

// Whitespace tokenization against the vocabulary. Empty/blank text maps to
// the null prompt; unknown words or sequences longer than max_tokens are
// config errors.
TokenSequence tokenize(const Vocabulary& vocab, const std::string& text, int max_tokens);
std::string detokenize(const Vocabulary& vocab, const TokenSequence& seq);

} // namespace dc
