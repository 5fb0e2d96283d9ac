#pragma once

// Topological embeddings: Node2Vec biased walks, skip-gram with negative
// sampling, the pairwise cosine similarity matrix, and embedding file IO.
//
// Embedding file: header line `N d_g`, then one line per node
// `raw_id v1 ... v<d_g>` in decimal text (round-trips bit-exactly).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tandrud/data.hpp"
#include "tandrud/tensor.hpp"

namespace tandrud {

struct WalkConfig {
    double p = 1.0;          // return parameter
    double q = 1.0;          // in-out parameter
    std::size_t walk_length = 80;
    std::size_t walks_per_node = 10;
    std::uint64_t seed = 1;
};

struct SgnsConfig {
    std::size_t dim = 128;
    std::size_t window = 5;
    std::size_t negatives = 5;
    std::size_t epochs = 5;
    double lr = 0.025;
    std::uint64_t seed = 1;
};

struct EmbeddingMatrix {
    Tensor rows;  // N x d_g
    std::vector<bool> zero_row;  // isolated nodes
    bool trained = false;

    std::size_t dim() const { return rows.cols(); }
};

// One biased transition from cur, having arrived from prev. A candidate x is
// weighted 1/p if it is prev, 1 if it neighbors prev, 1/q otherwise.
inline std::size_t node2vec_step(const SocialGraph& g, std::size_t prev,
                                 std::size_t cur, double p, double q,
                                 std::mt19937_64& rng) {
    const auto& nb = g.adjacency[cur];
    double total = 0;
    for (std::size_t x : nb)
        total += x == prev ? 1.0 / p : g.has_edge(prev, x) ? 1.0 : 1.0 / q;
    std::uniform_real_distribution<double> d(0.0, total);
    double r = d(rng);
    for (std::size_t k = 0; k < nb.size(); ++k) {
        double wt = nb[k] == prev            ? 1.0 / p
                    : g.has_edge(prev, nb[k]) ? 1.0
                                              : 1.0 / q;
        if (r < wt || k + 1 == nb.size()) return nb[k];
        r -= wt;
    }
    return nb.back();
}

// Per-node walks with p,q-biased second-order transitions; the first step is
// uniform over neighbors. Each start node gets an independent generator
// (global seed xor node id) so walk content does not depend on scheduling.
inline std::vector<std::vector<std::size_t>> node2vec_walks(const SocialGraph& g,
                                                            const WalkConfig& cfg) {
    if (cfg.p <= 0 || cfg.q <= 0) throw ConfigError("node2vec: p and q must be > 0");
    if (cfg.walk_length < 2) throw ConfigError("node2vec: walk_length must be >= 2");
    std::vector<std::vector<std::size_t>> walks;
    for (std::size_t start = 0; start < g.node_count(); ++start) {
        if (g.degree(start) == 0) continue;  // isolated, skipped
        std::mt19937_64 rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * (start + 1)));
        for (std::size_t w = 0; w < cfg.walks_per_node; ++w) {
            std::vector<std::size_t> walk{start};
            walk.reserve(cfg.walk_length);
            while (walk.size() < cfg.walk_length) {
                std::size_t cur = walk.back();
                const auto& nb = g.adjacency[cur];
                if (nb.empty()) break;
                if (walk.size() == 1) {
                    std::uniform_int_distribution<std::size_t> d(0, nb.size() - 1);
                    walk.push_back(nb[d(rng)]);
                } else {
                    walk.push_back(node2vec_step(g, walk[walk.size() - 2], cur,
                                                 cfg.p, cfg.q, rng));
                }
            }
            walks.push_back(std::move(walk));
        }
    }
    return walks;
}

// Skip-gram with negative sampling over the walks. Negatives are drawn from
// the unigram^(3/4) distribution of walk occurrences. Single-writer updates
// in a fixed order keep training bit-reproducible under a seed.
inline EmbeddingMatrix train_sgns(const std::vector<std::vector<std::size_t>>& walks,
                                  std::size_t n_nodes, const SgnsConfig& cfg,
                                  std::vector<double>* epoch_losses = nullptr,
                                  std::size_t* pairs_per_epoch = nullptr) {
    EmbeddingMatrix emb;
    emb.rows = Tensor({n_nodes, cfg.dim});
    emb.zero_row.assign(n_nodes, true);
    if (walks.empty()) {
        emb.trained = true;
        return emb;
    }

    std::vector<double> counts(n_nodes, 0.0);
    for (const auto& w : walks)
        for (std::size_t u : w) counts[u] += 1.0;

    // cumulative unigram^0.75 table for negative draws
    std::vector<double> cum(n_nodes, 0.0);
    double total = 0;
    for (std::size_t u = 0; u < n_nodes; ++u) {
        total += std::pow(counts[u], 0.75);
        cum[u] = total;
    }
    if (total <= 0) {
        emb.trained = true;
        return emb;
    }

    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto draw_negative = [&]() {
        double r = unit(rng) * total;
        return static_cast<std::size_t>(
            std::lower_bound(cum.begin(), cum.end(), r) - cum.begin());
    };

    Tensor& win = emb.rows;
    Tensor wout({n_nodes, cfg.dim});
    {
        std::uniform_real_distribution<double> init(-0.5 / cfg.dim, 0.5 / cfg.dim);
        for (std::size_t u = 0; u < n_nodes; ++u)
            if (counts[u] > 0)
                for (std::size_t k = 0; k < cfg.dim; ++k) win.at(u, k) = init(rng);
    }

    std::vector<double> grad_center(cfg.dim);
    if (pairs_per_epoch) *pairs_per_epoch = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double loss = 0;
        std::size_t pairs = 0;
        for (const auto& walk : walks) {
            for (std::size_t pos = 0; pos < walk.size(); ++pos) {
                std::size_t center = walk[pos];
                std::size_t lo = pos >= cfg.window ? pos - cfg.window : 0;
                std::size_t hi = std::min(walk.size() - 1, pos + cfg.window);
                for (std::size_t cpos = lo; cpos <= hi; ++cpos) {
                    if (cpos == pos) continue;
                    ++pairs;
                    std::size_t ctx = walk[cpos];
                    std::fill(grad_center.begin(), grad_center.end(), 0.0);
                    for (std::size_t s = 0; s <= cfg.negatives; ++s) {
                        std::size_t target = s == 0 ? ctx : draw_negative();
                        double label = s == 0 ? 1.0 : 0.0;
                        double z = 0;
                        for (std::size_t k = 0; k < cfg.dim; ++k)
                            z += win.at(center, k) * wout.at(target, k);
                        double sig = 1.0 / (1.0 + std::exp(-z));
                        loss -= label > 0 ? std::log(std::max(sig, 1e-12))
                                          : std::log(std::max(1.0 - sig, 1e-12));
                        double g = cfg.lr * (label - sig);
                        for (std::size_t k = 0; k < cfg.dim; ++k) {
                            grad_center[k] += g * wout.at(target, k);
                            wout.at(target, k) += g * win.at(center, k);
                        }
                    }
                    for (std::size_t k = 0; k < cfg.dim; ++k)
                        win.at(center, k) += grad_center[k];
                }
            }
        }
        if (epoch_losses) epoch_losses->push_back(loss);
        if (pairs_per_epoch) *pairs_per_epoch = pairs;
    }

    for (std::size_t u = 0; u < n_nodes; ++u)
        if (counts[u] > 0) emb.zero_row[u] = false;
    emb.trained = true;
    return emb;
}

// Pairwise row-wise cosine similarity. Zero rows (isolated nodes) yield 0
// everywhere, including their own diagonal, keeping the attention adjustment
// neutral instead of propagating NaN.
inline Tensor cosine_similarity_matrix(const Tensor& gc) {
    std::size_t n = gc.rows(), d = gc.cols();
    std::vector<double> norms(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < d; ++k) s += gc.at(i, k) * gc.at(i, k);
        norms[i] = std::sqrt(s);
    }
    Tensor e({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        if (norms[i] == 0.0) continue;
        for (std::size_t j = i; j < n; ++j) {
            if (norms[j] == 0.0) continue;
            double dot = 0;
            for (std::size_t k = 0; k < d; ++k) dot += gc.at(i, k) * gc.at(j, k);
            double v = dot / (norms[i] * norms[j]);
            e.at(i, j) = v;
            e.at(j, i) = v;
        }
    }
    return e;
}

inline void save_embeddings(const EmbeddingMatrix& emb, const Vocab& vocab,
                            const std::string& path) {
    if (emb.rows.rows() != vocab.size())
        throw ContractError("save_embeddings: row count disagrees with vocab");
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write embedding file: " + path);
    out << vocab.size() << ' ' << emb.dim() << '\n';
    char buf[64];
    for (std::size_t u = 0; u < vocab.size(); ++u) {
        out << vocab.raw(u);
        for (std::size_t k = 0; k < emb.dim(); ++k) {
            std::snprintf(buf, sizeof buf, "%.17g", emb.rows.at(u, k));
            out << ' ' << buf;
        }
        out << '\n';
    }
}

inline EmbeddingMatrix load_embeddings(const std::string& path, const Vocab& vocab) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open embedding file: " + path);
    std::size_t n, d;
    if (!(in >> n >> d)) throw ParseError("embedding file: bad header");
    if (n != vocab.size())
        throw ParseError("embedding file: node count " + std::to_string(n) +
                         " disagrees with vocab size " + std::to_string(vocab.size()));
    EmbeddingMatrix emb;
    emb.rows = Tensor({n, d});
    emb.zero_row.assign(n, false);
    for (std::size_t r = 0; r < n; ++r) {
        std::string raw;
        if (!(in >> raw)) throw ParseError("embedding file: truncated at row " +
                                           std::to_string(r));
        if (!vocab.contains(raw))
            throw ParseError("embedding file: unknown user '" + raw + "'");
        std::size_t u = vocab.index(raw);
        bool all_zero = true;
        for (std::size_t k = 0; k < d; ++k) {
            double v;
            if (!(in >> v)) throw ParseError("embedding file: truncated row for '" +
                                             raw + "'");
            emb.rows.at(u, k) = v;
            if (v != 0.0) all_zero = false;
        }
        emb.zero_row[u] = all_zero;
    }
    emb.trained = true;
    return emb;
}

}  // namespace tandrud
