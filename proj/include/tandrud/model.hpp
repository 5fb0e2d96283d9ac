#pragma once

// The TAN-DRUD network: dual-role user-level attention with topology
// adjustment, forget-gate fusion, cascade-level attention with time decay,
// prediction softmax and loss. AN-DRUD is the same graph with topology
// inputs absent (use_topology = false).

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

// How a similarity row e reshapes the attention weights.
//   ExpWeight      alpha ∝ alpha' * exp(e)   (default; constant rows are a no-op)
//   LiteralSoftmax alpha = softmax(alpha' * e)
//   RawLogit       alpha = softmax(logit * e)
enum class AdjustMode { ExpWeight, LiteralSoftmax, RawLogit };

struct ModelConfig {
    bool use_topology = true;
    AdjustMode adjust = AdjustMode::ExpWeight;
    double dropout_keep = 0.8;
    double l2_lambda = 1e-5;
    std::size_t max_len = 200;
};

struct ModelParams {
    std::size_t N = 0, d = 0, dg = 0, T = 0;
    double t_max = 0.0;  // corpus time span backing the bin width

    Tensor Xs, Xr;              // N x d sender / receiver embeddings
    Tensor Wso, Wrc, Wro, Wsc;  // d x d attention transforms
    Tensor Wms, Wmr, Wns, Wnr;  // d x d gate transforms
    Tensor bm, bn;              // d
    Tensor Wg, bg;              // d x dg, d topology projection
    Tensor Wt, bt;              // d x T, d time transform
    Tensor w;                   // d cascade-attention vector
    Tensor Wc, bc;              // N x d, N output layer

    struct Named {
        const char* name;
        Tensor* tensor;
        bool is_bias;
    };
    std::vector<Named> named() {
        return {{"Xs", &Xs, false},   {"Xr", &Xr, false},  {"Wso", &Wso, false},
                {"Wrc", &Wrc, false}, {"Wro", &Wro, false}, {"Wsc", &Wsc, false},
                {"Wms", &Wms, false}, {"Wmr", &Wmr, false}, {"Wns", &Wns, false},
                {"Wnr", &Wnr, false}, {"bm", &bm, true},    {"bn", &bn, true},
                {"Wg", &Wg, false},   {"bg", &bg, true},    {"Wt", &Wt, false},
                {"bt", &bt, true},    {"w", &w, false},     {"Wc", &Wc, false},
                {"bc", &bc, true}};
    }

    static ModelParams init(std::size_t N, std::size_t d, std::size_t dg,
                            std::size_t T, std::uint64_t seed) {
        if (N == 0 || d == 0 || dg == 0 || T == 0)
            throw ConfigError("init_params: all dimensions must be positive");
        ModelParams p;
        p.N = N;
        p.d = d;
        p.dg = dg;
        p.T = T;
        p.Xs = Tensor({N, d});
        p.Xr = Tensor({N, d});
        for (Tensor* t : {&p.Wso, &p.Wrc, &p.Wro, &p.Wsc, &p.Wms, &p.Wmr, &p.Wns,
                          &p.Wnr})
            *t = Tensor({d, d});
        p.bm = Tensor({d});
        p.bn = Tensor({d});
        p.Wg = Tensor({d, dg});
        p.bg = Tensor({d});
        p.Wt = Tensor({d, T});
        p.bt = Tensor({d});
        p.w = Tensor({d});
        p.Wc = Tensor({N, d});
        p.bc = Tensor({N});

        std::mt19937_64 rng(seed);
        for (auto& entry : p.named()) {
            if (entry.is_bias) continue;  // biases stay zero
            Tensor& t = *entry.tensor;
            std::size_t fan_in = t.shape.size() == 2 ? t.shape[1] : t.shape[0];
            std::size_t fan_out = t.shape.size() == 2 ? t.shape[0] : 1;
            double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            std::uniform_real_distribution<double> dist(-a, a);
            for (double& v : t.values) v = dist(rng);
        }
        return p;
    }
};

// Tape node ids for every parameter, lifted once per tape.
struct ParamNodes {
    Var Xs, Xr, Wso, Wrc, Wro, Wsc, Wms, Wmr, Wns, Wnr, bm, bn, Wg, bg, Wt, bt,
        w, Wc, bc;
    std::vector<Var> in_order;     // matches ModelParams::named() order
    std::vector<bool> bias_flags;  // same order
};

inline ParamNodes lift_params(Tape& tape, ModelParams& p) {
    ParamNodes n;
    Var* slots[] = {&n.Xs, &n.Xr, &n.Wso, &n.Wrc, &n.Wro, &n.Wsc, &n.Wms,
                    &n.Wmr, &n.Wns, &n.Wnr, &n.bm, &n.bn, &n.Wg, &n.bg,
                    &n.Wt,  &n.bt,  &n.w,   &n.Wc,  &n.bc};
    auto named = p.named();
    for (std::size_t i = 0; i < named.size(); ++i) {
        *slots[i] = tape.leaf(*named[i].tensor);
        n.in_order.push_back(*slots[i]);
        n.bias_flags.push_back(named[i].is_bias);
    }
    return n;
}

// One (prefix, target) forward instance. E and g_raw carry rows/cols for the
// prefix positions only (i x i and i x dg); both may be empty for AN-DRUD.
struct PrefixFeatures {
    std::vector<std::size_t> users;
    std::vector<std::size_t> time_bins;  // bin of t_i - t_j per position
    Tensor similarity;                   // i x i, topology mode only
    Tensor topo_rows;                    // i x dg, topology mode only
};

struct ForwardVars {
    Var cascade_repr;  // d
    Var beta;          // i
    Var logits;        // N
    std::vector<Var> receiver_repr, sender_repr, fused, final_repr;  // per j
};

inline std::vector<std::size_t> range_indices(std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> idx;
    idx.reserve(hi - lo);
    for (std::size_t k = lo; k < hi; ++k) idx.push_back(k);
    return idx;
}

namespace detail {

inline Var adjusted_attention(Tape& tape, Var logits, const std::vector<double>& e,
                              const ModelConfig& cfg) {
    Var alpha_prime = tape.softmax(logits);
    if (e.empty()) return alpha_prime;  // AN-DRUD: no adjustment
    if (cfg.adjust == AdjustMode::ExpWeight) {
        std::vector<double> w(e.size());
        for (std::size_t k = 0; k < e.size(); ++k) w[k] = std::exp(e[k]);
        Var w_const = tape.constant(Tensor::vec(std::move(w)));
        return tape.normalize_sum(tape.mul(alpha_prime, w_const));
    }
    Var e_const = tape.constant(Tensor::vec(std::vector<double>(e)));
    Var base = cfg.adjust == AdjustMode::RawLogit ? logits : alpha_prime;
    return tape.softmax(tape.mul(base, e_const));
}

inline Var dropout_mask(Tape& tape, std::size_t d, double keep, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Tensor mask({d});
    for (std::size_t k = 0; k < d; ++k)
        mask.values[k] = unit(rng) < keep ? 1.0 / keep : 0.0;
    return tape.constant(std::move(mask));
}

}  // namespace detail

// Full forward pass for one prefix. Dropout is applied on u_j and f_j only
// when train is true (inverted dropout, scaled by 1/keep).
inline ForwardVars forward(Tape& tape, const ParamNodes& pn, const ModelParams& p,
                           const PrefixFeatures& in, const ModelConfig& cfg,
                           bool train = false, std::mt19937_64* rng = nullptr) {
    std::size_t i = in.users.size();
    if (i < 1) throw ContractError("forward: empty prefix");
    if (in.time_bins.size() != i)
        throw ContractError("forward: time bins disagree with prefix length");
    if (cfg.use_topology &&
        (in.similarity.rows() < i || in.topo_rows.rows() < i))
        throw ContractError("forward: topology features missing or too small");

    Var xs = tape.gather_rows(pn.Xs, in.users);  // i x d
    Var xr = tape.gather_rows(pn.Xr, in.users);

    // Attention logit matrices: entry (k, j) is the k->j score.
    Var sender_keys = tape.matmul_nt(xs, pn.Wso);    // rows: Wso x_k^s
    Var recv_query = tape.matmul_nt(xr, pn.Wrc);     // rows: Wrc x_j^r
    Var recv_logits = tape.matmul_nt(sender_keys, recv_query);  // i x i
    Var recv_keys = tape.matmul_nt(xr, pn.Wro);
    Var send_query = tape.matmul_nt(xs, pn.Wsc);
    Var send_logits = tape.matmul_nt(recv_keys, send_query);    // i x i

    Var g_new = -1;
    if (cfg.use_topology) {
        Tensor graw({i, p.dg});
        for (std::size_t r = 0; r < i; ++r)
            for (std::size_t k = 0; k < p.dg; ++k)
                graw.at(r, k) = in.topo_rows.at(r, k);
        Var graw_c = tape.constant(std::move(graw));
        g_new = tape.tanh_(
            tape.add_row_broadcast(tape.matmul_nt(graw_c, pn.Wg), pn.bg));
    }

    ForwardVars out;
    std::vector<Var> f_rows;
    for (std::size_t j = 0; j < i; ++j) {
        // receiver role: attend over predecessors k < j with sender embeddings
        Var d_r;
        if (j == 0) {
            d_r = tape.row(xr, 0);
        } else {
            Var logits = tape.slice_col(recv_logits, j, 0, j);
            std::vector<double> e;
            if (cfg.use_topology)
                for (std::size_t k = 0; k < j; ++k) e.push_back(in.similarity.at(k, j));
            Var alpha = detail::adjusted_attention(tape, logits, e, cfg);
            Var ctx = tape.vecmat(alpha, tape.gather_rows(xs, range_indices(0, j)));
            d_r = tape.add(ctx, tape.row(xr, j));
        }
        // sender role: attend over successors k > j with receiver embeddings
        Var d_s;
        if (j + 1 == i) {
            d_s = tape.row(xs, j);
        } else {
            Var logits = tape.slice_col(send_logits, j, j + 1, i);
            std::vector<double> e;
            if (cfg.use_topology)
                for (std::size_t k = j + 1; k < i; ++k)
                    e.push_back(in.similarity.at(k, j));
            Var alpha = detail::adjusted_attention(tape, logits, e, cfg);
            Var ctx = tape.vecmat(alpha, tape.gather_rows(xr, range_indices(j + 1, i)));
            d_s = tape.add(ctx, tape.row(xs, j));
        }

        // forget-gate fusion
        Var m = tape.sigmoid(tape.add(
            tape.add(tape.matvec(pn.Wms, d_s), tape.matvec(pn.Wmr, d_r)), pn.bm));
        Var n = tape.sigmoid(tape.add(
            tape.add(tape.matvec(pn.Wns, d_s), tape.matvec(pn.Wnr, d_r)), pn.bn));
        Var ones = tape.constant(Tensor({p.d}, std::vector<double>(p.d, 1.0)));
        Var u = tape.add(tape.mul(tape.sub(ones, m), d_s),
                         tape.mul(tape.sub(ones, n), d_r));
        if (train && cfg.dropout_keep < 1.0)
            u = tape.mul(u, detail::dropout_mask(tape, p.d, cfg.dropout_keep, *rng));

        // time gate and final representation
        if (in.time_bins[j] >= p.T)
            throw ContractError("forward: time bin out of range");
        Var lambda =
            tape.sigmoid(tape.add(tape.col(pn.Wt, in.time_bins[j]), pn.bt));
        Var pre = cfg.use_topology ? tape.add(tape.row(g_new, j), u) : u;
        Var f = tape.mul(lambda, pre);
        if (train && cfg.dropout_keep < 1.0)
            f = tape.mul(f, detail::dropout_mask(tape, p.d, cfg.dropout_keep, *rng));

        out.receiver_repr.push_back(d_r);
        out.sender_repr.push_back(d_s);
        out.fused.push_back(u);
        out.final_repr.push_back(f);
        f_rows.push_back(f);
    }

    // cascade-level attention and prediction logits
    std::vector<Var> scores;
    for (Var f : f_rows) scores.push_back(tape.dot(pn.w, f));
    out.beta = tape.softmax(tape.stack_scalars(scores));
    Var f_mat = tape.stack_rows(f_rows);
    out.cascade_repr = tape.vecmat(out.beta, f_mat);
    out.logits = tape.add(tape.matvec(pn.Wc, out.cascade_repr), pn.bc);
    return out;
}

// Standalone spec ops, kept thin over the forward graph pieces so the
// contracts stay independently testable.

inline Var project_topology(Tape& tape, const ParamNodes& pn, const Tensor& graw,
                            const ModelConfig& cfg) {
    if (!cfg.use_topology)
        throw ContractError("project_topology: topology disabled");
    Var graw_c = tape.constant(graw);
    return tape.tanh_(tape.add_row_broadcast(tape.matmul_nt(graw_c, pn.Wg), pn.bg));
}

inline Var time_gate(Tape& tape, const ParamNodes& pn, const Tensor& onehot) {
    std::size_t ones = 0, idx = 0;
    for (std::size_t k = 0; k < onehot.numel(); ++k) {
        if (onehot.values[k] == 1.0) {
            ++ones;
            idx = k;
        } else if (onehot.values[k] != 0.0) {
            throw ContractError("time_gate: input is not a one-hot vector");
        }
    }
    if (ones != 1) throw ContractError("time_gate: input is not a one-hot vector");
    return tape.sigmoid(tape.add(tape.col(pn.Wt, idx), pn.bt));
}

// Mean cross-entropy over a batch plus L2 on all weights and embeddings
// (biases excluded). Uses log-sum-exp, never log of a softmax output.
inline Var batch_loss(Tape& tape, const ParamNodes& pn, const ModelParams& p,
                      const std::vector<PrefixFeatures>& batch,
                      const std::vector<std::size_t>& targets,
                      const ModelConfig& cfg, bool train = false,
                      std::mt19937_64* rng = nullptr) {
    if (batch.empty()) throw ContractError("batch_loss: empty batch");
    if (batch.size() != targets.size())
        throw ContractError("batch_loss: targets disagree with batch");
    std::vector<Var> ce;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        ForwardVars fv = forward(tape, pn, p, batch[b], cfg, train, rng);
        Var lse = tape.log_sum_exp(fv.logits);
        ce.push_back(tape.sub(lse, tape.pick(fv.logits, targets[b])));
    }
    Var total = tape.scale(tape.sum(tape.stack_scalars(ce)),
                           1.0 / static_cast<double>(batch.size()));
    if (cfg.l2_lambda > 0) {
        Var l2 = -1;
        for (std::size_t k = 0; k < pn.in_order.size(); ++k) {
            if (pn.bias_flags[k]) continue;
            Var sq = tape.sum(tape.mul(pn.in_order[k], pn.in_order[k]));
            l2 = l2 < 0 ? sq : tape.add(l2, sq);
        }
        total = tape.add(total, tape.scale(l2, cfg.l2_lambda));
    }
    if (!tape.value(total).finite())
        throw ContractError("batch_loss: non-finite loss");
    return total;
}

// ---- checkpointing ----

inline void save_checkpoint(const ModelParams& p, const ModelConfig& cfg,
                            std::uint64_t vocab_hash, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ParseError("cannot write checkpoint: " + path);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", p.t_max);
    out << "TANDRUD 1\n";
    out << "vocab_hash " << vocab_hash << '\n';
    out << "config " << p.N << ' ' << p.d << ' ' << p.dg << ' ' << p.T << ' '
        << (cfg.use_topology ? 1 : 0) << ' ' << static_cast<int>(cfg.adjust)
        << ' ' << buf << '\n';
    ModelParams& mp = const_cast<ModelParams&>(p);
    for (auto& entry : mp.named()) {
        const Tensor& t = *entry.tensor;
        out << "tensor " << entry.name << ' ' << t.shape.size();
        for (std::size_t s : t.shape) out << ' ' << s;
        out << '\n';
        for (std::size_t k = 0; k < t.values.size(); ++k) {
            std::snprintf(buf, sizeof buf, "%.17g", t.values[k]);
            out << buf << (k + 1 == t.values.size() ? '\n' : ' ');
        }
    }
}

inline std::pair<ModelParams, ModelConfig> load_checkpoint(
    const std::string& path, std::uint64_t expected_vocab_hash) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open checkpoint: " + path);
    std::string magic;
    int version;
    if (!(in >> magic >> version) || magic != "TANDRUD" || version != 1)
        throw ParseError("checkpoint: bad header");
    std::string key;
    std::uint64_t vh;
    if (!(in >> key >> vh) || key != "vocab_hash")
        throw ParseError("checkpoint: missing vocab hash");
    if (vh != expected_vocab_hash)
        throw ParseError("checkpoint: vocab hash mismatch (checkpoint was trained "
                         "against a different vocabulary)");
    ModelParams p;
    ModelConfig cfg;
    int topo, adjust;
    if (!(in >> key >> p.N >> p.d >> p.dg >> p.T >> topo >> adjust >> p.t_max) ||
        key != "config")
        throw ParseError("checkpoint: missing config");
    if (adjust < 0 || adjust > 2) throw ParseError("checkpoint: bad adjust mode");
    cfg.use_topology = topo != 0;
    cfg.adjust = static_cast<AdjustMode>(adjust);
    p = [&] {
        ModelParams q = ModelParams::init(p.N, p.d, p.dg, p.T, 0);
        q.t_max = p.t_max;
        return q;
    }();
    for (auto& entry : p.named()) {
        std::string kind, name;
        std::size_t rank;
        if (!(in >> kind >> name >> rank) || kind != "tensor" ||
            name != entry.name)
            throw ParseError("checkpoint: expected tensor '" +
                             std::string(entry.name) + "'");
        std::vector<std::size_t> shape(rank);
        for (auto& s : shape) in >> s;
        Tensor t(shape);
        for (auto& v : t.values)
            if (!(in >> v)) throw ParseError("checkpoint: truncated tensor '" +
                                             std::string(entry.name) + "'");
        *entry.tensor = std::move(t);
    }
    return {std::move(p), cfg};
}

}  // namespace tandrud
