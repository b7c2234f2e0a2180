#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hulm/tokenizer.hpp"

namespace hulm {

struct Document {
    int64_t timestamp = 0;
    std::string text;
    std::map<std::string, double> doc_labels;
};

struct AuthorRecord {
    std::string author_id;
    std::vector<Document> documents;  // ascending by timestamp after ingest
    std::map<std::string, double> attributes;
};

// token positions [begin, end) of one source document inside a block;
// doc_index == -1 marks a separator token
struct BlockSpan {
    int doc_index = -1;
    int begin = 0;
    int end = 0;
};

struct Block {
    std::vector<int> tokens;      // length block_len, right padded with sep id
    std::vector<uint8_t> mask;    // 1 = real token
    std::vector<BlockSpan> spans;
    int valid_len = 0;

    bool fully_padded() const { return valid_len == 0; }
};

struct BlockSequence {
    std::vector<Block> blocks;
    int block_len = 0;
    int non_padded_block_count = 0;
};

// Corpus files are UTF-8 JSON lines: a format-version header object
// {"format":"hulm-corpus","version":1} followed by one document per line with
// fields in fixed order: author_id, timestamp, attributes, doc_labels, text.
extern const char* const kCorpusHeader;

std::vector<AuthorRecord> ingest(const std::string& path);
void write_corpus(const std::string& path, const std::vector<AuthorRecord>& authors);

// Chunk an author's temporally ordered documents into fixed-length blocks.
// A separator token follows every document. When the stream exceeds
// max_blocks * block_len tokens, the oldest tokens are dropped (the kept
// tokens are exactly the suffix of the full concatenation). anchor_doc, when
// set, selects the stance protocol: only documents strictly earlier than the
// anchor form the history and the anchor is appended as the final content.
BlockSequence build_blocks(const AuthorRecord& author, const Tokenizer& tok, int block_len,
                           int max_blocks, std::optional<int> anchor_doc = std::nullopt);

// ---------------------------------------------------------------------------
// synthetic corpus generation
// ---------------------------------------------------------------------------

// Token distribution per position: (1-g-s) * background + g * age-bucket
// marker table + s * author style table. Labels: "age" is drawn, "ope" is a
// fixed affine function of the author's style (and therefore of the style
// marker frequencies), "age_bin" = age >= 30; per-document labels: "topic"
// depends only on the bucket table, "stance" only on the style vector.
struct SyntheticSpec {
    int n_authors = 32;
    int docs_per_author = 8;
    int doc_len = 48;  // characters per document (1 char = 1 synthetic token)
    int vocab_size = 40;
    double group_signal = 0.0;       // g
    double individual_signal = 0.0;  // s
    double age_min = 13.0;
    double age_max = 60.0;
    int style_chars = 3;  // preferred characters per author style
    uint64_t seed = 1;
};

std::vector<AuthorRecord> generate_synthetic(const SyntheticSpec& spec);

// the character alphabet a spec generates over, in token-id order
std::string synthetic_alphabet(const SyntheticSpec& spec);
// vocabulary file (one symbol per line) for FileVocabTokenizer
std::string synthetic_vocab_file_text(const SyntheticSpec& spec);

// Deterministic by-author split; ratios must sum to 1 (within 1e-9).
struct CorpusSplits {
    std::vector<AuthorRecord> train;
    std::vector<AuthorRecord> dev;
    std::vector<AuthorRecord> test;
};
CorpusSplits split_authors(std::vector<AuthorRecord> authors, double train_ratio, double dev_ratio,
                           double test_ratio, uint64_t seed);

const std::vector<double>& age_bucket_bounds();  // {18, 21, 30, 45}

}  // namespace hulm
