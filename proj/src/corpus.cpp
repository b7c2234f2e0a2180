#include "hulm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "hulm/errors.hpp"
#include "hulm/rng.hpp"
#include "hulm/util.hpp"

namespace hulm {

using ordered_json = nlohmann::ordered_json;

const char* const kCorpusHeader = R"({"format":"hulm-corpus","version":1})";

namespace {

std::map<std::string, double> parse_number_map(const ordered_json& j, const char* field, int lineno) {
    std::map<std::string, double> out;
    if (!j.is_object()) {
        throw ParseError("line " + std::to_string(lineno) + ": '" + field + "' must be an object");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!it.value().is_number()) {
            throw ParseError("line " + std::to_string(lineno) + ": '" + field + "." + it.key() +
                             "' must be a number");
        }
        out[it.key()] = it.value().get<double>();
    }
    return out;
}

}  // namespace

std::vector<AuthorRecord> ingest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot read corpus file: " + path);
    }
    std::string line;
    int lineno = 0;

    if (!std::getline(in, line)) {
        return {};  // empty file -> empty corpus
    }
    ++lineno;
    {
        ordered_json header = ordered_json::parse(line, nullptr, false);
        if (header.is_discarded() || !header.is_object() ||
            header.value("format", "") != "hulm-corpus" || header.value("version", 0) != 1) {
            throw ParseError("line 1: missing or invalid corpus format header");
        }
    }

    std::map<std::string, AuthorRecord> by_id;
    std::vector<std::string> order;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        ordered_json j = ordered_json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            throw ParseError("line " + std::to_string(lineno) + ": not a JSON object");
        }
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string& k = it.key();
            if (k != "author_id" && k != "timestamp" && k != "attributes" && k != "doc_labels" &&
                k != "text") {
                throw ParseError("line " + std::to_string(lineno) + ": unknown field '" + k + "'");
            }
        }
        if (!j.contains("author_id") || !j["author_id"].is_string()) {
            throw ParseError("line " + std::to_string(lineno) + ": missing string 'author_id'");
        }
        if (!j.contains("timestamp") || !j["timestamp"].is_number_integer()) {
            throw ParseError("line " + std::to_string(lineno) + ": missing integer 'timestamp'");
        }
        if (!j.contains("text") || !j["text"].is_string()) {
            throw ParseError("line " + std::to_string(lineno) + ": missing string 'text'");
        }

        const std::string id = j["author_id"].get<std::string>();
        Document doc;
        doc.timestamp = j["timestamp"].get<int64_t>();
        doc.text = j["text"].get<std::string>();
        std::map<std::string, double> attrs;
        if (j.contains("attributes")) {
            attrs = parse_number_map(j["attributes"], "attributes", lineno);
        }
        if (j.contains("doc_labels")) {
            doc.doc_labels = parse_number_map(j["doc_labels"], "doc_labels", lineno);
        }

        auto [it, inserted] = by_id.try_emplace(id);
        if (inserted) {
            it->second.author_id = id;
            it->second.attributes = attrs;
            order.push_back(id);
        } else if (!attrs.empty() || !it->second.attributes.empty()) {
            if (attrs != it->second.attributes) {
                throw DataError("line " + std::to_string(lineno) + ": attributes for author '" + id +
                                "' conflict with an earlier line");
            }
        }
        it->second.documents.push_back(std::move(doc));
    }

    std::vector<AuthorRecord> authors;
    authors.reserve(order.size());
    for (const std::string& id : order) {
        AuthorRecord& a = by_id[id];
        std::stable_sort(a.documents.begin(), a.documents.end(),
                         [](const Document& x, const Document& y) { return x.timestamp < y.timestamp; });
        authors.push_back(std::move(a));
    }
    std::sort(authors.begin(), authors.end(),
              [](const AuthorRecord& x, const AuthorRecord& y) { return x.author_id < y.author_id; });
    return authors;
}

void write_corpus(const std::string& path, const std::vector<AuthorRecord>& authors) {
    std::ostringstream out;
    out << kCorpusHeader << "\n";
    for (const AuthorRecord& a : authors) {
        for (const Document& d : a.documents) {
            ordered_json j;
            j["author_id"] = a.author_id;
            j["timestamp"] = d.timestamp;
            j["attributes"] = ordered_json::object();
            for (const auto& [k, v] : a.attributes) {
                j["attributes"][k] = v;
            }
            j["doc_labels"] = ordered_json::object();
            for (const auto& [k, v] : d.doc_labels) {
                j["doc_labels"][k] = v;
            }
            j["text"] = d.text;
            out << j.dump() << "\n";
        }
    }
    write_file(path, out.str());
}

// ----------------------------------------------------------------------------
// block construction
// ----------------------------------------------------------------------------

BlockSequence build_blocks(const AuthorRecord& author, const Tokenizer& tok, int block_len,
                           int max_blocks, std::optional<int> anchor_doc) {
    if (block_len < 2) {
        throw ConfigError("build_blocks: block_len must be >= 2");
    }
    if (max_blocks < 1) {
        throw ConfigError("build_blocks: max_blocks must be >= 1");
    }

    std::vector<int> doc_order;
    if (anchor_doc.has_value()) {
        const int a = *anchor_doc;
        if (a < 0 || a >= static_cast<int>(author.documents.size())) {
            throw DataError("build_blocks: anchor document index " + std::to_string(a) +
                            " not present in author '" + author.author_id + "'");
        }
        const int64_t anchor_ts = author.documents[static_cast<size_t>(a)].timestamp;
        for (int i = 0; i < static_cast<int>(author.documents.size()); ++i) {
            if (author.documents[static_cast<size_t>(i)].timestamp < anchor_ts) {
                doc_order.push_back(i);
            }
        }
        doc_order.push_back(a);
    } else {
        for (int i = 0; i < static_cast<int>(author.documents.size()); ++i) {
            doc_order.push_back(i);
        }
    }

    // full concatenated stream: doc tokens followed by one separator each
    const int sep = tok.sep_id();
    std::vector<int> stream;
    std::vector<int> stream_doc;  // parallel: source doc index, -1 for separators
    for (int di : doc_order) {
        const std::vector<int> ids = tok.encode(author.documents[static_cast<size_t>(di)].text);
        for (int id : ids) {
            stream.push_back(id);
            stream_doc.push_back(di);
        }
        stream.push_back(sep);
        stream_doc.push_back(-1);
    }

    // truncation keeps the most recent tokens
    const size_t cap = static_cast<size_t>(max_blocks) * block_len;
    size_t start = 0;
    if (stream.size() > cap) {
        start = stream.size() - cap;
    }

    BlockSequence seq;
    seq.block_len = block_len;
    for (size_t pos = start; pos < stream.size(); pos += static_cast<size_t>(block_len)) {
        const size_t n = std::min(static_cast<size_t>(block_len), stream.size() - pos);
        Block b;
        b.tokens.assign(static_cast<size_t>(block_len), sep);
        b.mask.assign(static_cast<size_t>(block_len), 0);
        b.valid_len = static_cast<int>(n);
        for (size_t i = 0; i < n; ++i) {
            b.tokens[i] = stream[pos + i];
            b.mask[i] = 1;
        }
        // contiguous runs of one doc index become spans
        int run_doc = -2;
        int run_begin = 0;
        for (size_t i = 0; i <= n; ++i) {
            const int d = i < n ? stream_doc[pos + i] : -2;
            if (d != run_doc) {
                if (run_doc != -2) {
                    b.spans.push_back({run_doc, run_begin, static_cast<int>(i)});
                }
                run_doc = d;
                run_begin = static_cast<int>(i);
            }
        }
        seq.blocks.push_back(std::move(b));
    }
    seq.non_padded_block_count = static_cast<int>(seq.blocks.size());
    return seq;
}

// ----------------------------------------------------------------------------
// synthetic generation
// ----------------------------------------------------------------------------

namespace {

constexpr const char* kFullAlphabet =
    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
constexpr int kGroupRegion = 10;  // 2 marker chars per age bucket, 5 buckets


void validate(const SyntheticSpec& spec) {
    if (spec.group_signal < 0 || spec.individual_signal < 0 ||
        spec.group_signal + spec.individual_signal > 1.0) {
        throw ConfigError("synthetic spec: need g >= 0, s >= 0 and g + s <= 1");
    }
    if (spec.style_chars < 1 || spec.style_chars > spec.vocab_size - kGroupRegion - 3) {
        throw ConfigError("synthetic spec: style_chars must fit inside the style region");
    }
    if (spec.vocab_size < kGroupRegion + spec.style_chars + 3 ||
        spec.vocab_size > static_cast<int>(std::string(kFullAlphabet).size())) {
        throw ConfigError("synthetic spec: vocab_size must be in [16, 62]");
    }
    if (spec.n_authors < 1 || spec.docs_per_author < 1 || spec.doc_len < 1) {
        throw ConfigError("synthetic spec: counts must be positive");
    }
    if (!(spec.age_min < spec.age_max)) {
        throw ConfigError("synthetic spec: age_min must be < age_max");
    }
}

}  // namespace

std::string synthetic_alphabet(const SyntheticSpec& spec) {
    validate(spec);
    return std::string(kFullAlphabet).substr(0, static_cast<size_t>(spec.vocab_size));
}

std::string synthetic_vocab_file_text(const SyntheticSpec& spec) {
    std::string out;
    for (char c : synthetic_alphabet(spec)) {
        out.push_back(c);
        out.push_back('\n');
    }
    return out;
}

const std::vector<double>& age_bucket_bounds() {
    static const std::vector<double> bounds{18.0, 21.0, 30.0, 45.0};
    return bounds;
}

std::vector<AuthorRecord> generate_synthetic(const SyntheticSpec& spec) {
    validate(spec);
    const std::string alphabet = synthetic_alphabet(spec);
    const int v = spec.vocab_size;
    const int n_style_region = v - kGroupRegion;
    const double g = spec.group_signal;
    const double s = spec.individual_signal;

    std::vector<AuthorRecord> authors;
    authors.reserve(static_cast<size_t>(spec.n_authors));
    for (int ai = 0; ai < spec.n_authors; ++ai) {
        // per-author stream so generation order (or parallelism) cannot leak
        Rng rng(derive_seed(spec.seed, "author/" + std::to_string(ai)));

        AuthorRecord rec;
        {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "a%05d", ai);
            rec.author_id = buf;
        }

        const double age = rng.uniform(spec.age_min, spec.age_max);
        const int bucket = bucket_index(age, age_bucket_bounds());

        // style: distinct preferred characters from the style region
        std::vector<int> style;
        while (static_cast<int>(style.size()) < spec.style_chars) {
            const int c = kGroupRegion + static_cast<int>(rng.below(static_cast<uint64_t>(n_style_region)));
            if (std::find(style.begin(), style.end(), c) == style.end()) {
                style.push_back(c);
            }
        }
        std::sort(style.begin(), style.end());

        double rank_sum = 0.0;
        for (int c : style) {
            rank_sum += c - kGroupRegion;
        }
        // openness is an exact affine function of the style ranks, so it is a
        // linear function of the style-marker unigram frequencies
        const double ope = 1.0 + 4.0 * (rank_sum / spec.style_chars) / (n_style_region - 1);
        const int stance = static_cast<int>(rank_sum) % 3;

        rec.attributes["age"] = age;
        rec.attributes["ope"] = ope;
        rec.attributes["age_bin"] = age >= 30.0 ? 1.0 : 0.0;

        for (int di = 0; di < spec.docs_per_author; ++di) {
            Document doc;
            doc.timestamp = 1000000 + static_cast<int64_t>(di) * 3600;
            // doc_len is a mean; lengths vary so block boundaries carry no
            // predictable phase an author-state could latch onto
            const int len = spec.doc_len < 2
                                ? spec.doc_len
                                : spec.doc_len / 2 + static_cast<int>(rng.below(
                                                         static_cast<uint64_t>(spec.doc_len)));
            doc.text.reserve(static_cast<size_t>(len));
            for (int t = 0; t < len; ++t) {
                const double u = rng.uniform();
                int token;
                if (u < g) {
                    token = bucket * 2 + static_cast<int>(rng.below(2));
                } else if (u < g + s) {
                    token = style[static_cast<size_t>(rng.below(static_cast<uint64_t>(spec.style_chars)))];
                } else {
                    token = static_cast<int>(rng.below(static_cast<uint64_t>(v)));
                }
                doc.text.push_back(alphabet[static_cast<size_t>(token)]);
            }
            doc.doc_labels["topic"] = bucket;
            doc.doc_labels["stance"] = stance;
            rec.documents.push_back(std::move(doc));
        }
        authors.push_back(std::move(rec));
    }
    return authors;
}

CorpusSplits split_authors(std::vector<AuthorRecord> authors, double train_ratio, double dev_ratio,
                           double test_ratio, uint64_t seed) {
    if (std::abs(train_ratio + dev_ratio + test_ratio - 1.0) > 1e-9) {
        throw ConfigError("split ratios must sum to 1");
    }
    Rng rng(derive_seed(seed, "splits"));
    rng.shuffle(authors);
    const size_t n = authors.size();
    const size_t n_train = static_cast<size_t>(std::lround(train_ratio * static_cast<double>(n)));
    const size_t n_dev = static_cast<size_t>(std::lround(dev_ratio * static_cast<double>(n)));

    CorpusSplits out;
    for (size_t i = 0; i < n; ++i) {
        if (i < n_train) {
            out.train.push_back(std::move(authors[i]));
        } else if (i < n_train + n_dev) {
            out.dev.push_back(std::move(authors[i]));
        } else {
            out.test.push_back(std::move(authors[i]));
        }
    }
    return out;
}

}  // namespace hulm
