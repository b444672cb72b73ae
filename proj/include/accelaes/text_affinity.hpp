#pragma once

// Prompt-token aesthetic scoring: each prompt token is compared against a fixed
// anchor vocabulary by cosine similarity of embeddings, its score is the best
// match over anchors, and tokens above the similarity threshold form the
// aesthetic token set used for cross-attention aggregation.

#include <algorithm>
#include <charconv>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "accelaes/errors.hpp"
#include "accelaes/random.hpp"

namespace accelaes {

inline constexpr double kDefaultSimThreshold = 0.60;

struct EmbeddingTable {
    std::size_t dim = 0;
    std::unordered_map<std::string, std::vector<double>> entries;

    const std::vector<double>* find(const std::string& token) const {
        auto it = entries.find(token);
        return it == entries.end() ? nullptr : &it->second;
    }

    bool contains(const std::string& token) const { return entries.count(token) != 0; }
    std::size_t size() const { return entries.size(); }

    // Returns true if an existing entry was replaced.
    bool insert(const std::string& token, std::vector<double> v) {
        if (dim == 0) dim = v.size();
        if (v.size() != dim) {
            throw FormatError("embedding for '" + token + "' has length " + std::to_string(v.size()) +
                              ", table dim is " + std::to_string(dim));
        }
        auto [it, fresh] = entries.insert_or_assign(token, std::move(v));
        return !fresh;
    }
};

struct AnchorSet {
    std::vector<std::string> anchors;

    std::size_t size() const { return anchors.size(); }

    // The fixed 34-entry aesthetic vocabulary, grouped by category.
    static AnchorSet defaults() {
        return AnchorSet{{
            // style / rendering quality
            "photorealistic", "realistic", "cinematic", "highly detailed", "artistic", "masterpiece",
            "professional photography", "soft bokeh", "bokeh", "dramatic lighting", "fantasy art",
            "studio lighting",
            // detail / sharpness
            "detailed", "intricate", "sharp focus", "sharp",
            // aesthetic judgment
            "stunning", "beautiful", "elegant", "vivid", "vibrant",
            // photography / composition
            "depth of field", "volumetric lighting", "close up", "portrait", "full body",
            // subject emphasis
            "main subject", "foreground", "focused",
            // content-level fallback
            "subject", "character", "object", "figure", "person",
        }};
    }
};

struct PromptTokens {
    std::vector<std::string> tokens;

    std::size_t size() const { return tokens.size(); }

    // Lowercase, turn '-' and '_' into word breaks, drop other ASCII
    // punctuation, split on whitespace.
    static PromptTokens from_text(std::string_view text) {
        PromptTokens out;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) out.tokens.push_back(std::move(cur));
            cur.clear();
        };
        for (char ch : text) {
            const auto c = static_cast<unsigned char>(ch);
            if (std::isspace(c) || ch == '-' || ch == '_') {
                flush();
            } else if (c < 0x80 && std::ispunct(c)) {
                continue;
            } else {
                cur.push_back(static_cast<char>(std::tolower(c)));
            }
        }
        flush();
        return out;
    }
};

struct TokenAffinity {
    std::vector<double> scores;          // one per prompt token, in [-1, 1]
    std::vector<std::size_t> selected;   // ascending token indices
    bool triggered = false;
    std::vector<std::string> matched_anchors;  // distinct anchors hit by a selected token, sorted
    std::vector<std::string> diagnostics;
};

inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw ShapeError("cosine_similarity: length " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    }
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) throw DegenerateInputError("cosine_similarity: zero-norm vector");
    const double s = dot / (std::sqrt(nu) * std::sqrt(nv));
    return std::clamp(s, -1.0, 1.0);
}

struct ScoreOptions {
    double sim_threshold = kDefaultSimThreshold;
    std::optional<std::size_t> top_r;  // applied after the threshold
};

// Scores every prompt token by its best anchor similarity. Multi-word anchors
// fire through 2- and 3-word windows whose joined text is in the table; a
// window's score is credited to each word it spans.
inline TokenAffinity score_tokens(const PromptTokens& prompt, const AnchorSet& anchors, const EmbeddingTable& table,
                                  const ScoreOptions& opts = {}) {
    TokenAffinity out;
    const std::size_t m = prompt.size();
    out.scores.assign(m, -1.0);

    std::vector<const std::vector<double>*> anchor_vecs;
    anchor_vecs.reserve(anchors.size());
    for (const auto& a : anchors.anchors) {
        anchor_vecs.push_back(table.find(a));
        if (anchor_vecs.back() == nullptr) out.diagnostics.push_back("anchor not in table: " + a);
    }

    std::vector<std::set<std::size_t>> token_hits(m);
    auto credit = [&](std::size_t j, const std::vector<double>& v) {
        for (std::size_t k = 0; k < anchor_vecs.size(); ++k) {
            if (anchor_vecs[k] == nullptr) continue;
            const double s = cosine_similarity(v, *anchor_vecs[k]);
            out.scores[j] = std::max(out.scores[j], s);
            if (s >= opts.sim_threshold) token_hits[j].insert(k);
        }
    };

    for (std::size_t j = 0; j < m; ++j) {
        const auto* v = table.find(prompt.tokens[j]);
        if (v == nullptr) {
            out.diagnostics.push_back("token not in table: " + prompt.tokens[j]);
            continue;
        }
        credit(j, *v);
    }
    for (std::size_t len = 2; len <= 3; ++len) {
        for (std::size_t j = 0; j + len <= m; ++j) {
            std::string phrase = prompt.tokens[j];
            for (std::size_t q = 1; q < len; ++q) phrase += " " + prompt.tokens[j + q];
            const auto* v = table.find(phrase);
            if (v == nullptr) continue;
            for (std::size_t q = 0; q < len; ++q) credit(j + q, *v);
        }
    }

    std::vector<std::size_t> cand;
    for (std::size_t j = 0; j < m; ++j)
        if (out.scores[j] >= opts.sim_threshold) cand.push_back(j);
    if (opts.top_r && cand.size() > *opts.top_r) {
        std::stable_sort(cand.begin(), cand.end(),
                         [&](std::size_t a, std::size_t b) { return out.scores[a] > out.scores[b]; });
        cand.resize(*opts.top_r);
        std::sort(cand.begin(), cand.end());
    }
    out.selected = std::move(cand);
    out.triggered = !out.selected.empty();

    std::set<std::string> matched;
    for (std::size_t j : out.selected)
        for (std::size_t k : token_hits[j]) matched.insert(anchors.anchors[k]);
    out.matched_anchors.assign(matched.begin(), matched.end());
    return out;
}

struct TableLoad {
    EmbeddingTable table;
    std::vector<std::string> warnings;
};

// Text format: `token<TAB>v1 v2 ... v_dim`, '#' starts a comment line, the
// first data line fixes dim.
inline TableLoad parse_embedding_table(std::istream& in, const std::string& source = "<stream>") {
    TableLoad out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        const auto where = source + ":" + std::to_string(lineno);
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0) throw ParseError(where + ": expected 'token<TAB>values'");
        std::string token = line.substr(0, tab);
        std::vector<double> vec;
        const char* p = line.data() + tab + 1;
        const char* end = line.data() + line.size();
        while (p < end) {
            while (p < end && (*p == ' ' || *p == '\t')) ++p;
            if (p == end) break;
            double v = 0.0;
            auto [next, ec] = std::from_chars(p, end, v);
            if (ec != std::errc() || (next < end && *next != ' ' && *next != '\t')) {
                throw ParseError(where + ": bad number near '" + std::string(p, std::min<std::size_t>(16, end - p)) + "'");
            }
            if (!std::isfinite(v)) throw ParseError(where + ": non-finite value");
            vec.push_back(v);
            p = next;
        }
        if (vec.empty()) throw ParseError(where + ": no values");
        if (out.table.dim != 0 && vec.size() != out.table.dim) {
            throw FormatError(where + ": vector length " + std::to_string(vec.size()) + ", expected " +
                              std::to_string(out.table.dim));
        }
        if (out.table.insert(token, std::move(vec))) out.warnings.push_back(where + ": duplicate token '" + token + "', last entry wins");
    }
    if (out.table.size() == 0) throw FormatError(source + ": no embedding records");
    return out;
}

inline TableLoad load_embedding_table(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open embedding table: " + path);
    return parse_embedding_table(f, path);
}

// Deterministic unit vector keyed on (token, dim, seed). Stands in for a text
// encoder in tests and default runs: identical strings map to identical
// vectors, distinct strings to nearly orthogonal ones.
inline std::vector<double> synthetic_embedding(std::string_view token, std::size_t dim, std::uint64_t seed) {
    if (dim < 2) throw ConfigError("synthetic_embedding: dim must be >= 2");
    Rng rng(mix_seed(fnv1a64(token), mix_seed(seed, dim)));
    std::vector<double> v(dim);
    double norm = 0.0;
    for (double& x : v) {
        x = rng.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

// Synthetic table covering the anchors and every word of the given prompts.
inline EmbeddingTable synthetic_table(const AnchorSet& anchors, const std::vector<PromptTokens>& prompts, std::size_t dim,
                                      std::uint64_t seed) {
    EmbeddingTable t;
    t.dim = dim;
    for (const auto& a : anchors.anchors) t.insert(a, synthetic_embedding(a, dim, seed));
    for (const auto& p : prompts)
        for (const auto& tok : p.tokens)
            if (!t.contains(tok)) t.insert(tok, synthetic_embedding(tok, dim, seed));
    return t;
}

}  // namespace accelaes
