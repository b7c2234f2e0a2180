#include "hulm/tokenizer.hpp"

#include <fstream>
#include <map>

#include "hulm/errors.hpp"

namespace hulm {

std::vector<int> ByteTokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        ids.push_back(static_cast<int>(c));
    }
    return ids;
}

std::string ByteTokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= vocab_size()) {
            throw VocabError("decode: token id " + std::to_string(id) + " outside byte vocabulary");
        }
        if (id == sep_id()) {
            continue;
        }
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

FileVocabTokenizer::FileVocabTokenizer(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("vocabulary file not readable: " + path);
    }
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            symbols_.push_back(line);
        }
    }
    validate_symbols();
    for (const auto& sym : symbols_) {
        max_symbol_len_ = std::max(max_symbol_len_, sym.size());
    }
}

FileVocabTokenizer::FileVocabTokenizer(std::vector<std::string> symbols)
    : symbols_(std::move(symbols)) {
    validate_symbols();
    for (const auto& sym : symbols_) {
        max_symbol_len_ = std::max(max_symbol_len_, sym.size());
    }
}

void FileVocabTokenizer::validate_symbols() const {
    if (symbols_.empty()) {
        throw VocabError("vocabulary is empty");
    }
    std::map<std::string, int> seen;
    for (const auto& sym : symbols_) {
        if (sym.empty()) {
            throw VocabError("vocabulary has an empty symbol");
        }
        if (!seen.emplace(sym, 0).second) {
            throw VocabError("duplicate symbol in vocabulary: '" + sym + "'");
        }
    }
}

std::vector<int> FileVocabTokenizer::encode(const std::string& text) const {
    std::vector<int> ids;
    size_t pos = 0;
    while (pos < text.size()) {
        int best = -1;
        size_t best_len = 0;
        const size_t limit = std::min(max_symbol_len_, text.size() - pos);
        for (size_t len = limit; len >= 1; --len) {
            const std::string_view cand(text.data() + pos, len);
            for (size_t i = 0; i < symbols_.size(); ++i) {
                if (symbols_[i] == cand) {
                    best = static_cast<int>(i);
                    best_len = len;
                    break;
                }
            }
            if (best >= 0) {
                break;
            }
        }
        if (best < 0) {
            throw VocabError("unencodable input at byte " + std::to_string(pos) + ": '" +
                             text.substr(pos, 1) + "'");
        }
        ids.push_back(best);
        pos += best_len;
    }
    return ids;
}

std::string FileVocabTokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int id : ids) {
        if (id < 0 || id >= vocab_size()) {
            throw VocabError("decode: token id " + std::to_string(id) + " outside vocabulary");
        }
        if (id == sep_id()) {
            continue;
        }
        out += symbols_[static_cast<size_t>(id)];
    }
    return out;
}

std::unique_ptr<Tokenizer> make_tokenizer(const std::string& spec) {
    if (spec == "byte" || spec.empty()) {
        return std::make_unique<ByteTokenizer>();
    }
    if (spec.rfind("file:", 0) == 0) {
        return std::make_unique<FileVocabTokenizer>(spec.substr(5));
    }
    throw ConfigError("unknown tokenizer spec '" + spec + "' (expected 'byte' or 'file:<path>')");
}

}  // namespace hulm
