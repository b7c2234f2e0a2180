#pragma once

#include <memory>
#include <string>
#include <vector>

namespace hulm {

// Token ids are dense ints in [0, vocab_size). The last id is always the
// document separator; it never appears in encoded text, so decode() of a
// stream with separators stripped round-trips losslessly.
class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    virtual std::vector<int> encode(const std::string& text) const = 0;
    // separator and padding ids are skipped
    virtual std::string decode(const std::vector<int>& ids) const = 0;
    virtual int vocab_size() const = 0;
    int sep_id() const { return vocab_size() - 1; }
};

// Default: one token per byte (ids 0..255) plus the separator, no training.
class ByteTokenizer final : public Tokenizer {
public:
    std::vector<int> encode(const std::string& text) const override;
    std::string decode(const std::vector<int>& ids) const override;
    int vocab_size() const override { return 257; }
};

// Vocabulary file plug-in: one symbol per line (UTF-8, may be multi-byte);
// encoding is greedy longest-match. Unencodable input is a vocabulary error.
class FileVocabTokenizer final : public Tokenizer {
public:
    explicit FileVocabTokenizer(const std::string& path);
    explicit FileVocabTokenizer(std::vector<std::string> symbols);
    std::vector<int> encode(const std::string& text) const override;
    std::string decode(const std::vector<int>& ids) const override;
    int vocab_size() const override { return static_cast<int>(symbols_.size()) + 1; }
    const std::vector<std::string>& symbols() const { return symbols_; }

private:
    void validate_symbols() const;
    std::vector<std::string> symbols_;
    size_t max_symbol_len_ = 0;
};

// spec is "byte" or "file:<path>"
std::unique_ptr<Tokenizer> make_tokenizer(const std::string& spec);

}  // namespace hulm
