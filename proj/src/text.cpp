#include "dc/text.hpp"

#include <sstream>

#include "dc/common.hpp"

namespace dc {

const std::vector<std::string>& shape_words() {
    static const std::vector<std::string> v = {"circle", "square", "triangle", "star", "cross"};
    return v;
}

const std::vector<std::string>& subject_color_words() {
    static const std::vector<std::string> v = {"red",    "green", "blue", "yellow",
                                               "orange", "purple", "cyan", "magenta"};
    return v;
}

const std::vector<std::string>& background_color_words() {
    static const std::vector<std::string> v = {"gray", "navy", "teal", "olive", "maroon", "pink"};
    return v;
}

const std::vector<std::string>& position_phrases() {
    // "" means centered and is omitted from captions, keeping the caption <->
    // attribute round-trip unambiguous.
    static const std::vector<std::string> v = {"", "top left", "top right", "bottom left",
                                               "bottom right"};
    return v;
}

Vocabulary Vocabulary::standard() {
    Vocabulary v;
    auto add = [&](const std::string& w) {
        if (!v.contains(w)) {
            v.index.emplace(w, int(v.words.size()));
            v.words.push_back(w);
        }
    };
    add("<null>");
    for (const char* w : {"a", "on", "background", "top", "bottom", "left", "right"}) add(w);
    for (const auto& w : shape_words()) add(w);
    for (const auto& w : subject_color_words()) add(w);
    for (const auto& w : background_color_words()) add(w);
    return v;
}

int Vocabulary::id(const std::string& w) const {
    auto it = index.find(w);
    require(it != index.end(), ErrorCode::config, "word not in vocabulary: " + w);
    return it->second;
}

const std::string& Vocabulary::word(int token_id) const {
    require(token_id >= 0 && token_id < size(), ErrorCode::config,
            "token id out of range: " + std::to_string(token_id));
    return words[std::size_t(token_id)];
}

TokenSequence tokenize(const Vocabulary& vocab, const std::string& text, int max_tokens) {
    std::istringstream stream(text);
    TokenSequence seq;
    std::string w;
    while (stream >> w) seq.ids.push_back(vocab.id(w));
    if (seq.ids.empty()) return TokenSequence::null_prompt();
    require(int(seq.ids.size()) <= max_tokens, ErrorCode::config,
            "caption longer than max_tokens (" + std::to_string(seq.ids.size()) + " > " +
                std::to_string(max_tokens) + ")");
    return seq;
}

std::string detokenize(const Vocabulary& vocab, const TokenSequence& seq) {
    if (seq.is_null()) return "";
    std::string out;
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
        if (i) out += ' ';
        out += vocab.word(seq.ids[i]);
    }
    return out;
}

} // namespace dc
