#pragma once

// Cascade corpora, social graphs, vocabulary, splits and time-decay bins.
//
// Cascade file: one cascade per line, `id<TAB>user,timestamp[ user,timestamp]*`.
// Edge file: one edge per line, two whitespace-separated raw ids; `#` comments.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "tandrud/tensor.hpp"

namespace tandrud {

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Event {
    std::size_t user;  // dense vocab index
    double time;       // non-negative seconds
};

struct Cascade {
    std::string id;
    std::vector<Event> events;  // timestamps non-decreasing, users unique

    double span() const {
        return events.empty() ? 0.0 : events.back().time - events.front().time;
    }
};

class Vocab {
public:
    std::size_t intern(const std::string& raw) {
        auto it = index_.find(raw);
        if (it != index_.end()) return it->second;
        std::size_t id = raw_.size();
        index_.emplace(raw, id);
        raw_.push_back(raw);
        return id;
    }
    const std::string& raw(std::size_t i) const { return raw_.at(i); }
    bool contains(const std::string& raw) const { return index_.count(raw) > 0; }
    std::size_t index(const std::string& raw) const { return index_.at(raw); }
    std::size_t size() const { return raw_.size(); }

    // FNV-1a over the ordered raw ids; checkpoints pin this.
    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& s : raw_) {
            for (char c : s) {
                h ^= static_cast<unsigned char>(c);
                h *= 1099511628211ULL;
            }
            h ^= '\n';
            h *= 1099511628211ULL;
        }
        return h;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw ParseError("cannot write vocab file: " + path);
        for (const auto& s : raw_) out << s << '\n';
    }
    static Vocab load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ParseError("cannot open vocab file: " + path);
        Vocab v;
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) v.intern(line);
        return v;
    }

private:
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::string> raw_;
};

struct CascadeCorpus {
    std::vector<Cascade> cascades;
    Vocab vocab;
    std::size_t dropped_short = 0;  // cascades shorter than 2 after dedup

    std::size_t user_count() const { return vocab.size(); }
    std::size_t cascade_count() const { return cascades.size(); }

    // Max within-cascade time span over all cascades.
    double t_max() const {
        double t = 0.0;
        for (const auto& c : cascades) t = std::max(t, c.span());
        return t;
    }
};

struct SocialGraph {
    std::vector<std::vector<std::size_t>> adjacency;  // sorted, deduplicated
    std::size_t edge_count = 0;
    std::size_t dropped_edges = 0;  // endpoints missing from vocab

    std::size_t node_count() const { return adjacency.size(); }
    std::size_t degree(std::size_t u) const { return adjacency[u].size(); }
    bool has_edge(std::size_t u, std::size_t v) const {
        const auto& nb = adjacency[u];
        return std::binary_search(nb.begin(), nb.end(), v);
    }
};

struct PrefixInstance {
    std::size_t cascade_index;  // into the corpus
    std::size_t prefix_len;     // i, observed events [0, i)
    std::size_t target;         // user at position i
};

namespace detail {
inline double parse_time(const std::string& tok, std::size_t line_no) {
    std::size_t pos = 0;
    double t;
    try {
        t = std::stod(tok, &pos);
    } catch (const std::exception&) {
        throw ParseError("line " + std::to_string(line_no) +
                         ": non-numeric timestamp '" + tok + "'");
    }
    if (pos != tok.size())
        throw ParseError("line " + std::to_string(line_no) +
                         ": non-numeric timestamp '" + tok + "'");
    return t;
}
}  // namespace detail

// Parses the cascade format. With a fixed vocab, unknown users are an error;
// otherwise raw ids are interned in first-seen order. Duplicate users within
// a cascade keep only the first activation; cascades shorter than 2 after
// dedup are dropped and counted.
inline CascadeCorpus load_cascades(const std::string& path,
                                   const Vocab* fixed_vocab = nullptr) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open cascade file: " + path);
    CascadeCorpus corpus;
    if (fixed_vocab) corpus.vocab = *fixed_vocab;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw ParseError("line " + std::to_string(line_no) +
                             ": missing <TAB> after cascade id");
        Cascade c;
        c.id = line.substr(0, tab);
        std::istringstream rest(line.substr(tab + 1));
        std::string tok;
        std::vector<bool> seen;
        double prev_t = -1.0;
        while (rest >> tok) {
            auto comma = tok.rfind(',');
            if (comma == std::string::npos || comma == 0 || comma + 1 == tok.size())
                throw ParseError("line " + std::to_string(line_no) +
                                 ": malformed token '" + tok + "'");
            std::string raw = tok.substr(0, comma);
            double t = detail::parse_time(tok.substr(comma + 1), line_no);
            if (t < 0)
                throw ParseError("line " + std::to_string(line_no) +
                                 ": negative timestamp");
            if (t < prev_t)
                throw ParseError("line " + std::to_string(line_no) +
                                 ": timestamps must be non-decreasing");
            prev_t = t;
            std::size_t u;
            if (fixed_vocab) {
                if (!corpus.vocab.contains(raw))
                    throw ParseError("line " + std::to_string(line_no) +
                                     ": user '" + raw + "' not in vocab");
                u = corpus.vocab.index(raw);
            } else {
                u = corpus.vocab.intern(raw);
            }
            if (u >= seen.size()) seen.resize(corpus.vocab.size(), false);
            if (seen[u]) continue;  // a user activates once per cascade
            seen[u] = true;
            c.events.push_back({u, t});
        }
        if (c.events.size() < 2) {
            ++corpus.dropped_short;
            continue;
        }
        corpus.cascades.push_back(std::move(c));
    }
    return corpus;
}

inline void save_cascades(const CascadeCorpus& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write cascade file: " + path);
    char buf[64];
    for (const auto& c : corpus.cascades) {
        out << c.id << '\t';
        for (std::size_t i = 0; i < c.events.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%.17g", c.events[i].time);
            out << corpus.vocab.raw(c.events[i].user) << ',' << buf;
            if (i + 1 < c.events.size()) out << ' ';
        }
        out << '\n';
    }
}

// Cascade-level 8:1:1 split under a deterministic shuffle.
// Sizes: floor(0.8 M), floor(0.1 M), remainder.
inline std::array<CascadeCorpus, 3> split_corpus(const CascadeCorpus& corpus,
                                                 std::uint64_t seed) {
    std::size_t m = corpus.cascade_count();
    if (m < 10)
        throw ConfigError("split_corpus: need at least 10 cascades, have " +
                          std::to_string(m));
    std::vector<std::size_t> order(m);
    for (std::size_t i = 0; i < m; ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t n_train = static_cast<std::size_t>(std::floor(0.8 * static_cast<double>(m)));
    std::size_t n_valid = static_cast<std::size_t>(std::floor(0.1 * static_cast<double>(m)));
    std::array<CascadeCorpus, 3> out;
    for (auto& c : out) c.vocab = corpus.vocab;
    for (std::size_t i = 0; i < m; ++i) {
        std::size_t part = i < n_train ? 0 : (i < n_train + n_valid ? 1 : 2);
        out[part].cascades.push_back(corpus.cascades[order[i]]);
    }
    return out;
}

// Time-decay bin per the ceiling rule: n = ceil(dt / unit) clamped to [1, T],
// returned as the 0-based index n - 1. dt = 0 maps to index 0.
inline std::size_t time_bin(double dt, double unit, std::size_t T) {
    if (dt < 0) throw ContractError("time_bin: negative time delta");
    if (unit <= 0) throw ContractError("time_bin: non-positive interval width");
    double n = std::ceil(dt / unit);
    if (n < 1) n = 1;
    if (n > static_cast<double>(T)) n = static_cast<double>(T);
    return static_cast<std::size_t>(n) - 1;
}

// Edge-list loader. Edges with an endpoint missing from the vocab are dropped
// and counted; self-loops removed; stored undirected unless directed is set
// (then each line is one arc u -> v).
inline SocialGraph load_graph(const std::string& path, const Vocab& vocab,
                              bool directed = false) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open edge file: " + path);
    SocialGraph g;
    g.adjacency.resize(vocab.size());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string a, b, extra;
        if (!(ss >> a >> b))
            throw ParseError("line " + std::to_string(line_no) +
                             ": expected two user ids");
        if (ss >> extra)
            throw ParseError("line " + std::to_string(line_no) +
                             ": trailing tokens after edge");
        if (!vocab.contains(a) || !vocab.contains(b)) {
            ++g.dropped_edges;
            continue;
        }
        std::size_t u = vocab.index(a), v = vocab.index(b);
        if (u == v) continue;
        g.adjacency[u].push_back(v);
        if (!directed) g.adjacency[v].push_back(u);
    }
    for (auto& nb : g.adjacency) {
        std::sort(nb.begin(), nb.end());
        nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
    }
    for (const auto& nb : g.adjacency) g.edge_count += nb.size();
    if (!directed) g.edge_count /= 2;
    return g;
}

// One instance per prefix length i in [1, n-1]; long cascades are truncated
// to their first max_len events.
inline std::vector<PrefixInstance> make_prefix_instances(const Cascade& cascade,
                                                         std::size_t cascade_index,
                                                         std::size_t max_len) {
    if (cascade.events.size() < 2)
        throw ContractError("make_prefix_instances: cascade shorter than 2");
    std::size_t n = std::min(cascade.events.size(), max_len);
    std::vector<PrefixInstance> out;
    out.reserve(n - 1);
    for (std::size_t i = 1; i < n; ++i)
        out.push_back({cascade_index, i, cascade.events[i].user});
    return out;
}

inline std::vector<PrefixInstance> make_prefix_instances(const CascadeCorpus& corpus,
                                                         std::size_t max_len) {
    std::vector<PrefixInstance> out;
    for (std::size_t c = 0; c < corpus.cascades.size(); ++c) {
        auto part = make_prefix_instances(corpus.cascades[c], c, max_len);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

}  // namespace tandrud
