#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>
#include <sstream>

#include "hulm/corpus.hpp"
#include "hulm/errors.hpp"
#include "hulm/rng.hpp"
#include "hulm/stats.hpp"
#include "hulm/util.hpp"

using namespace hulm;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

AuthorRecord make_author(const std::string& id, std::vector<std::pair<int64_t, std::string>> docs) {
    AuthorRecord a;
    a.author_id = id;
    for (auto& [ts, text] : docs) {
        Document d;
        d.timestamp = ts;
        d.text = text;
        a.documents.push_back(d);
    }
    return a;
}

}  // namespace

TEST_CASE("ingest: empty file yields empty corpus") {
    const std::string path = temp_path("hulm_empty.jsonl");
    write_file(path, "");
    CHECK(ingest(path).empty());
}

TEST_CASE("ingest: out-of-order documents are re-sorted") {
    const std::string path = temp_path("hulm_order.jsonl");
    std::string content = std::string(kCorpusHeader) + "\n";
    content += R"({"author_id":"u1","timestamp":200,"attributes":{},"doc_labels":{},"text":"later"})" "\n";
    content += R"({"author_id":"u1","timestamp":100,"attributes":{},"doc_labels":{},"text":"earlier"})" "\n";
    write_file(path, content);
    auto authors = ingest(path);
    REQUIRE(authors.size() == 1);
    REQUIRE(authors[0].documents.size() == 2);
    CHECK(authors[0].documents[0].text == "earlier");
    CHECK(authors[0].documents[1].text == "later");
}

TEST_CASE("ingest: malformed line reports its line number") {
    const std::string path = temp_path("hulm_bad.jsonl");
    write_file(path, std::string(kCorpusHeader) + "\n{not json}\n");
    try {
        ingest(path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
}

TEST_CASE("ingest: conflicting attributes rejected") {
    const std::string path = temp_path("hulm_conflict.jsonl");
    std::string content = std::string(kCorpusHeader) + "\n";
    content += R"({"author_id":"u1","timestamp":1,"attributes":{"age":30},"doc_labels":{},"text":"a"})" "\n";
    content += R"({"author_id":"u1","timestamp":2,"attributes":{"age":31},"doc_labels":{},"text":"b"})" "\n";
    write_file(path, content);
    CHECK_THROWS_AS(ingest(path), DataError);
}

TEST_CASE("ingest: 100-line fixture matches an independent count") {
    SyntheticSpec spec;
    spec.n_authors = 10;
    spec.docs_per_author = 10;
    spec.doc_len = 8;
    spec.seed = 77;
    auto authors = generate_synthetic(spec);
    const std::string path = temp_path("hulm_fixture.jsonl");
    write_corpus(path, authors);

    // independent count: split the raw file on newlines, count non-header
    // lines and distinct author_id substrings
    std::istringstream in(read_file(path));
    std::string line;
    int doc_lines = -1;  // skip header
    std::set<std::string> ids;
    while (std::getline(in, line)) {
        ++doc_lines;
        const auto p = line.find("\"author_id\":\"");
        if (p != std::string::npos) {
            const auto start = p + 13;
            ids.insert(line.substr(start, line.find('"', start) - start));
        }
    }
    CHECK(doc_lines == 100);
    CHECK(ids.size() == 10);

    auto round = ingest(path);
    CHECK(round.size() == ids.size());
    size_t total = 0;
    for (const auto& a : round) {
        total += a.documents.size();
    }
    CHECK(total == static_cast<size_t>(doc_lines));
}

TEST_CASE("corpus write/ingest round-trips content") {
    auto a = make_author("ux", {{5, "hello \"world\"\nline2"}, {9, "uni\xc3\xa9"}});
    a.attributes["age"] = 41.5;
    a.documents[0].doc_labels["stance"] = 2;
    const std::string path = temp_path("hulm_rt.jsonl");
    write_corpus(path, {a});
    auto back = ingest(path);
    REQUIRE(back.size() == 1);
    CHECK(back[0].author_id == "ux");
    CHECK(back[0].attributes.at("age") == 41.5);
    REQUIRE(back[0].documents.size() == 2);
    CHECK(back[0].documents[0].text == "hello \"world\"\nline2");
    CHECK(back[0].documents[0].doc_labels.at("stance") == 2);
    CHECK(back[0].documents[1].text == "uni\xc3\xa9");
}

TEST_CASE("byte tokenizer round-trips arbitrary bytes") {
    ByteTokenizer tok;
    std::string text;
    for (int i = 0; i < 256; ++i) {
        text.push_back(static_cast<char>(i));
    }
    CHECK(tok.decode(tok.encode(text)) == text);
    CHECK(tok.vocab_size() == 257);
}

TEST_CASE("build_blocks: one 3-token doc in a block of 8") {
    ByteTokenizer tok;
    auto a = make_author("u", {{1, "abc"}});
    auto seq = build_blocks(a, tok, 8, 4);
    REQUIRE(seq.blocks.size() == 1);
    CHECK(seq.blocks[0].valid_len == 4);  // 3 tokens + separator
    CHECK(seq.non_padded_block_count == 1);
    int padded = 0;
    for (uint8_t m : seq.blocks[0].mask) {
        padded += m ? 0 : 1;
    }
    CHECK(padded == 4);
}

TEST_CASE("build_blocks: anchor with no earlier documents stands alone") {
    ByteTokenizer tok;
    auto a = make_author("u", {{10, "anchor"}, {20, "later"}, {30, "even later"}});
    auto seq = build_blocks(a, tok, 16, 4, 0);
    REQUIRE(seq.blocks.size() == 1);
    // only the anchor text plus its separator
    CHECK(seq.blocks[0].valid_len == 7);
    std::set<int> docs;
    for (const auto& sp : seq.blocks[0].spans) {
        if (sp.doc_index >= 0) {
            docs.insert(sp.doc_index);
        }
    }
    CHECK(docs == std::set<int>{0});
}

TEST_CASE("build_blocks: anchor index must exist") {
    ByteTokenizer tok;
    auto a = make_author("u", {{10, "x"}});
    CHECK_THROWS_AS(build_blocks(a, tok, 8, 2, 5), DataError);
}

TEST_CASE("build_blocks: overflow keeps the suffix of the concatenation") {
    ByteTokenizer tok;
    std::vector<std::pair<int64_t, std::string>> docs;
    for (int i = 0; i < 10; ++i) {
        docs.push_back({i * 100, "document-" + std::to_string(i) + "-padpadpad"});
    }
    auto a = make_author("u", docs);
    const int block_len = 16;
    const int max_blocks = 4;
    auto seq = build_blocks(a, tok, block_len, max_blocks);
    REQUIRE(static_cast<int>(seq.blocks.size()) == max_blocks);

    // reference concatenator: full stream, then its suffix
    std::vector<int> full;
    for (const auto& d : a.documents) {
        for (int id : tok.encode(d.text)) {
            full.push_back(id);
        }
        full.push_back(tok.sep_id());
    }
    std::vector<int> expect(full.end() - max_blocks * block_len, full.end());
    std::vector<int> got;
    for (const auto& b : seq.blocks) {
        for (int i = 0; i < b.valid_len; ++i) {
            got.push_back(b.tokens[static_cast<size_t>(i)]);
        }
    }
    CHECK(got == expect);
}

TEST_CASE("build_blocks round-trip: non-padded tokens minus separators = ordered texts") {
    ByteTokenizer tok;
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::pair<int64_t, std::string>> docs;
        std::string expect;
        const int ndocs = 1 + static_cast<int>(rng.below(5));
        for (int i = 0; i < ndocs; ++i) {
            std::string text;
            const int len = static_cast<int>(rng.below(20));
            for (int j = 0; j < len; ++j) {
                text.push_back(static_cast<char>('a' + rng.below(26)));
            }
            docs.push_back({i, text});
            expect += text;
        }
        auto a = make_author("u", docs);
        auto seq = build_blocks(a, tok, 8, 64);
        std::vector<int> kept;
        for (const auto& b : seq.blocks) {
            for (int i = 0; i < b.valid_len; ++i) {
                kept.push_back(b.tokens[static_cast<size_t>(i)]);
            }
            CHECK(static_cast<int>(b.tokens.size()) == 8);
        }
        CHECK(tok.decode(kept) == expect);
    }
}

TEST_CASE("stance protocol: nothing at or after the anchor timestamp enters any block") {
    ByteTokenizer tok;
    Rng rng(321);
    for (int trial = 0; trial < 50; ++trial) {
        const int ndocs = 2 + static_cast<int>(rng.below(10));
        std::vector<std::pair<int64_t, std::string>> docs;
        for (int i = 0; i < ndocs; ++i) {
            // duplicated timestamps exercise the strictly-earlier rule
            const int64_t ts = static_cast<int64_t>(rng.below(6)) * 10;
            std::string text(1 + rng.below(12), ' ');
            for (char& c : text) {
                c = static_cast<char>('a' + rng.below(26));
            }
            docs.push_back({ts, text});
        }
        auto a = make_author("u", docs);
        std::stable_sort(a.documents.begin(), a.documents.end(),
                         [](const Document& x, const Document& y) { return x.timestamp < y.timestamp; });
        const int anchor = static_cast<int>(rng.below(ndocs));
        const int64_t anchor_ts = a.documents[static_cast<size_t>(anchor)].timestamp;
        auto seq = build_blocks(a, tok, 8, 3, anchor);
        bool anchor_seen = false;
        for (const auto& b : seq.blocks) {
            for (const auto& sp : b.spans) {
                if (sp.doc_index < 0) {
                    continue;
                }
                if (sp.doc_index == anchor) {
                    anchor_seen = true;
                } else {
                    CHECK(a.documents[static_cast<size_t>(sp.doc_index)].timestamp < anchor_ts);
                }
            }
        }
        CHECK(anchor_seen);  // truncation keeps the suffix, so the anchor survives
    }
}

TEST_CASE("synthetic: g=s=0 authors are exchangeable (pairwise chi-square)") {
    SyntheticSpec spec;
    spec.n_authors = 16;
    spec.docs_per_author = 12;
    spec.doc_len = 64;
    spec.vocab_size = 24;
    spec.group_signal = 0.0;
    spec.individual_signal = 0.0;
    spec.seed = 2024;
    auto authors = generate_synthetic(spec);
    const std::string alphabet = synthetic_alphabet(spec);

    auto counts_of = [&](const AuthorRecord& a) {
        std::vector<double> c(alphabet.size(), 0.0);
        for (const auto& d : a.documents) {
            for (char ch : d.text) {
                c[alphabet.find(ch)] += 1.0;
            }
        }
        return c;
    };

    int pairs = 0;
    int ok = 0;
    for (size_t i = 0; i < authors.size(); ++i) {
        for (size_t j = i + 1; j < authors.size(); ++j) {
            auto c1 = counts_of(authors[i]);
            auto c2 = counts_of(authors[j]);
            double n1 = 0;
            double n2 = 0;
            for (size_t k = 0; k < c1.size(); ++k) {
                n1 += c1[k];
                n2 += c2[k];
            }
            double stat = 0.0;
            int cats = 0;
            for (size_t k = 0; k < c1.size(); ++k) {
                const double col = c1[k] + c2[k];
                if (col <= 0) {
                    continue;
                }
                ++cats;
                const double e1 = n1 * col / (n1 + n2);
                const double e2 = n2 * col / (n1 + n2);
                stat += (c1[k] - e1) * (c1[k] - e1) / e1 + (c2[k] - e2) * (c2[k] - e2) / e2;
            }
            const double p = hulm::stats::chi2_sf(stat, cats - 1);
            ++pairs;
            if (p > 0.01) {
                ++ok;
            }
        }
    }
    CHECK(static_cast<double>(ok) >= 0.95 * pairs);
}

TEST_CASE("synthetic: s=1 authors use only their style characters") {
    SyntheticSpec spec;
    spec.n_authors = 6;
    spec.docs_per_author = 4;
    spec.doc_len = 32;
    spec.individual_signal = 1.0;
    spec.seed = 5;
    auto authors = generate_synthetic(spec);
    for (const auto& a : authors) {
        std::set<char> distinct;
        for (const auto& d : a.documents) {
            distinct.insert(d.text.begin(), d.text.end());
        }
        CHECK(distinct.size() <= 3);
    }
}

TEST_CASE("synthetic: fixed seed reproduces byte-identical corpus files") {
    SyntheticSpec spec;
    spec.n_authors = 8;
    spec.seed = 99;
    spec.group_signal = 0.3;
    spec.individual_signal = 0.3;
    const std::string p1 = temp_path("hulm_det1.jsonl");
    const std::string p2 = temp_path("hulm_det2.jsonl");
    write_corpus(p1, generate_synthetic(spec));
    write_corpus(p2, generate_synthetic(spec));
    CHECK(read_file(p1) == read_file(p2));
    CHECK(file_hash(p1) == file_hash(p2));
}

TEST_CASE("synthetic: g + s > 1 rejected") {
    SyntheticSpec spec;
    spec.group_signal = 0.7;
    spec.individual_signal = 0.7;
    CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
}

TEST_CASE("splits: ratios within one author, authors disjoint") {
    SyntheticSpec spec;
    spec.n_authors = 53;
    spec.seed = 4;
    auto authors = generate_synthetic(spec);
    auto splits = split_authors(authors, 0.8, 0.1, 0.1, 11);
    CHECK(std::abs(static_cast<double>(splits.train.size()) - 0.8 * 53) <= 1.0);
    CHECK(std::abs(static_cast<double>(splits.dev.size()) - 0.1 * 53) <= 1.0);
    CHECK(std::abs(static_cast<double>(splits.test.size()) - 0.1 * 53) <= 1.0);
    CHECK(splits.train.size() + splits.dev.size() + splits.test.size() == 53);
    std::set<std::string> seen;
    for (const auto* part : {&splits.train, &splits.dev, &splits.test}) {
        for (const auto& a : *part) {
            CHECK(seen.insert(a.author_id).second);
        }
    }
}

TEST_CASE("file vocabulary tokenizer: greedy longest match") {
    const std::string path = temp_path("hulm_vocab.txt");
    write_file(path, "a\nb\nab\n");
    FileVocabTokenizer tok(path);
    CHECK(tok.vocab_size() == 4);
    CHECK(tok.encode("ab") == std::vector<int>{2});
    CHECK(tok.encode("ba") == std::vector<int>{1, 0});
    CHECK(tok.decode({2, 1}) == "ab" "b");
    CHECK_THROWS_AS(tok.encode("xyz"), VocabError);
}
