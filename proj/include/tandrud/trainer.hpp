#pragma once

// Training loop with early stopping on validation RR, RR/P@K evaluation,
// diffusion-tree inference via cascade-level attention, and an
// independent-cascade generator with planted parents for end-to-end checks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <queue>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "tandrud/data.hpp"
#include "tandrud/graph_embed.hpp"
#include "tandrud/model.hpp"
#include "tandrud/optim.hpp"

namespace tandrud {

struct TrainConfig {
    double lr = 0.001;
    std::size_t max_epochs = 200;
    std::size_t patience = 10;  // epochs without valid-RR improvement
    std::size_t batch_size = 32;
    std::uint64_t seed = 1;
};

struct Metrics {
    double rr = 0.0;
    double p10 = 0.0, p50 = 0.0, p100 = 0.0;
    std::size_t instances = 0;
    std::string mask_mode = "none";
};

struct EpochRecord {
    std::size_t epoch;
    double train_loss;
    double valid_rr;
    double seconds;  // wall time, excluded from deterministic logs
};

struct TrainResult {
    ModelParams best;
    std::vector<EpochRecord> log;
    std::size_t best_epoch = 0;
    bool aborted_non_finite = false;
};

struct DiffusionTree {
    // parent position per cascade position; position 0 is the root (no parent)
    std::vector<std::size_t> parents;
};

// ---- feature construction ----

// Per-cascade topology features, shared across its prefixes: the similarity
// matrix is computed once and every prefix takes its leading block.
struct CascadeFeatures {
    Tensor similarity;  // n x n
    Tensor topo_rows;   // n x dg
};

inline CascadeFeatures build_cascade_features(const Cascade& cascade,
                                              const EmbeddingMatrix& emb,
                                              std::size_t max_len) {
    std::size_t n = std::min(cascade.events.size(), max_len);
    CascadeFeatures f;
    f.topo_rows = Tensor({n, emb.dim()});
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t u = cascade.events[j].user;
        for (std::size_t k = 0; k < emb.dim(); ++k)
            f.topo_rows.at(j, k) = emb.rows.at(u, k);
    }
    f.similarity = cosine_similarity_matrix(f.topo_rows);
    return f;
}

inline PrefixFeatures build_prefix_features(const Cascade& cascade,
                                            std::size_t prefix_len,
                                            const ModelParams& p,
                                            const ModelConfig& cfg,
                                            const CascadeFeatures* topo) {
    std::size_t i = prefix_len;
    PrefixFeatures in;
    in.users.reserve(i);
    in.time_bins.reserve(i);
    double t_i = cascade.events[i - 1].time;
    double unit = p.t_max > 0 ? p.t_max / static_cast<double>(p.T) : 1.0;
    for (std::size_t j = 0; j < i; ++j) {
        in.users.push_back(cascade.events[j].user);
        in.time_bins.push_back(time_bin(t_i - cascade.events[j].time, unit, p.T));
    }
    if (cfg.use_topology) {
        if (!topo) throw ContractError("build_prefix_features: topology missing");
        in.similarity = Tensor({i, i});
        for (std::size_t a = 0; a < i; ++a)
            for (std::size_t b = 0; b < i; ++b)
                in.similarity.at(a, b) = topo->similarity.at(a, b);
        in.topo_rows = Tensor({i, p.dg});
        for (std::size_t a = 0; a < i; ++a)
            for (std::size_t k = 0; k < p.dg; ++k)
                in.topo_rows.at(a, k) = topo->topo_rows.at(a, k);
    }
    return in;
}

// ---- evaluation ----

// Rank of the target in p, descending probability, ties broken by
// ascending user index.
inline std::size_t rank_of(const std::vector<double>& probs, std::size_t target) {
    double pt = probs[target];
    std::size_t rank = 1;
    for (std::size_t u = 0; u < probs.size(); ++u) {
        if (u == target) continue;
        if (probs[u] > pt || (probs[u] == pt && u < target)) ++rank;
    }
    return rank;
}

inline std::vector<double> softmax_values(const Tensor& logits) {
    double mx = *std::max_element(logits.values.begin(), logits.values.end());
    std::vector<double> p(logits.values.size());
    double z = 0;
    for (std::size_t u = 0; u < p.size(); ++u) {
        p[u] = std::exp(logits.values[u] - mx);
        z += p[u];
    }
    for (double& v : p) v /= z;
    return p;
}

// Probability vector for one prefix; with mask_observed, already-activated
// users are zeroed and the rest renormalized.
inline std::vector<double> predict_probs(ModelParams& params, const ModelConfig& cfg,
                                         const PrefixFeatures& in,
                                         bool mask_observed = false) {
    Tape tape;
    ParamNodes pn = lift_params(tape, params);
    ForwardVars fv = forward(tape, pn, params, in, cfg, false);
    std::vector<double> p = softmax_values(tape.value(fv.logits));
    if (mask_observed) {
        double kept = 1.0;
        for (std::size_t u : in.users) {
            kept -= p[u];
            p[u] = 0.0;
        }
        if (kept > 0)
            for (double& v : p) v /= kept;
    }
    return p;
}

inline Metrics evaluate(const CascadeCorpus& corpus, ModelParams& params,
                        const ModelConfig& cfg, const EmbeddingMatrix* emb,
                        bool mask_observed = false, std::size_t threads = 1) {
    auto instances = make_prefix_instances(corpus, cfg.max_len);
    if (instances.empty()) throw ContractError("evaluate: no prefix instances");

    std::vector<CascadeFeatures> topo;
    if (cfg.use_topology) {
        if (!emb) throw ContractError("evaluate: topology embeddings missing");
        topo.reserve(corpus.cascades.size());
        for (const auto& c : corpus.cascades)
            topo.push_back(build_cascade_features(c, *emb, cfg.max_len));
    }

    std::vector<std::size_t> ranks(instances.size());
    auto work = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t k = lo; k < hi; ++k) {
            const PrefixInstance& inst = instances[k];
            const Cascade& c = corpus.cascades[inst.cascade_index];
            PrefixFeatures in = build_prefix_features(
                c, inst.prefix_len, params, cfg,
                cfg.use_topology ? &topo[inst.cascade_index] : nullptr);
            auto probs = predict_probs(params, cfg, in, mask_observed);
            ranks[k] = rank_of(probs, inst.target);
        }
    };
    if (threads <= 1) {
        work(0, instances.size());
    } else {
        std::vector<std::thread> pool;
        std::size_t chunk = (instances.size() + threads - 1) / threads;
        for (std::size_t t = 0; t < threads; ++t) {
            std::size_t lo = t * chunk;
            std::size_t hi = std::min(instances.size(), lo + chunk);
            if (lo >= hi) break;
            pool.emplace_back(work, lo, hi);
        }
        for (auto& th : pool) th.join();
    }

    Metrics m;
    m.instances = instances.size();
    m.mask_mode = mask_observed ? "observed" : "none";
    for (std::size_t r : ranks) {
        m.rr += 1.0 / static_cast<double>(r);
        if (r <= 10) m.p10 += 1;
        if (r <= 50) m.p50 += 1;
        if (r <= 100) m.p100 += 1;
    }
    double n = static_cast<double>(m.instances);
    m.rr /= n;
    m.p10 /= n;
    m.p50 /= n;
    m.p100 /= n;
    return m;
}

// ---- training ----

inline TrainResult train(const CascadeCorpus& train_set,
                         const CascadeCorpus& valid_set, ModelParams params,
                         const ModelConfig& model_cfg, const TrainConfig& cfg,
                         const EmbeddingMatrix* emb) {
    if (train_set.cascades.empty() || valid_set.cascades.empty())
        throw ConfigError("train: empty train or valid set");
    if (cfg.lr < 0 || cfg.patience < 1) throw ConfigError("train: bad config");

    auto instances = make_prefix_instances(train_set, model_cfg.max_len);
    std::vector<CascadeFeatures> topo;
    if (model_cfg.use_topology) {
        if (!emb) throw ConfigError("train: topology embeddings missing");
        for (const auto& c : train_set.cascades)
            topo.push_back(build_cascade_features(c, *emb, model_cfg.max_len));
    }

    AdamState adam;
    {
        auto named = params.named();
        for (auto& e : named) adam.register_param(e.name, *e.tensor);
    }

    TrainResult result;
    result.best = params;
    double best_rr = -1.0;
    std::size_t since_best = 0;
    std::mt19937_64 shuffle_rng(cfg.seed);
    std::mt19937_64 dropout_rng(cfg.seed ^ 0xd10u);

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        std::shuffle(instances.begin(), instances.end(), shuffle_rng);
        double epoch_loss = 0;
        std::size_t n_batches = 0;
        bool bad = false;
        for (std::size_t off = 0; off < instances.size(); off += cfg.batch_size) {
            std::size_t end = std::min(instances.size(), off + cfg.batch_size);
            std::vector<PrefixFeatures> batch;
            std::vector<std::size_t> targets;
            for (std::size_t k = off; k < end; ++k) {
                const PrefixInstance& inst = instances[k];
                const Cascade& c = train_set.cascades[inst.cascade_index];
                batch.push_back(build_prefix_features(
                    c, inst.prefix_len, params, model_cfg,
                    model_cfg.use_topology ? &topo[inst.cascade_index] : nullptr));
                targets.push_back(inst.target);
            }
            Tape tape;
            ParamNodes pn = lift_params(tape, params);
            Var loss;
            try {
                loss = batch_loss(tape, pn, params, batch, targets, model_cfg,
                                  true, &dropout_rng);
            } catch (const ContractError&) {
                bad = true;
                break;
            }
            tape.backward(loss);
            epoch_loss += tape.value(loss).values[0];
            ++n_batches;

            auto named = params.named();
            std::vector<Tensor*> ptrs;
            std::vector<const Tensor*> grads;
            for (std::size_t k = 0; k < named.size(); ++k) {
                ptrs.push_back(named[k].tensor);
                grads.push_back(&tape.grad(pn.in_order[k]));
            }
            try {
                adam.step(ptrs, grads, cfg.lr);
            } catch (const NonFiniteGradient&) {
                bad = true;
                break;
            }
        }
        if (bad) {
            // abort, retain the last good checkpoint
            result.aborted_non_finite = true;
            break;
        }
        epoch_loss /= static_cast<double>(std::max<std::size_t>(1, n_batches));

        Metrics vm = evaluate(valid_set, params, model_cfg, emb, false);
        auto t1 = std::chrono::steady_clock::now();
        double secs = std::chrono::duration<double>(t1 - t0).count();
        result.log.push_back({epoch, epoch_loss, vm.rr, secs});

        if (vm.rr > best_rr) {
            best_rr = vm.rr;
            result.best = params;
            result.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    return result;
}

// ---- diffusion tree inference ----

// Parent of u_{i+1} is the position with the highest cascade attention on
// prefix c_i; ties go to the earliest position.
inline DiffusionTree infer_tree(const Cascade& cascade, ModelParams& params,
                                const ModelConfig& cfg,
                                const EmbeddingMatrix* emb) {
    if (cascade.events.size() < 2)
        throw ContractError("infer_tree: cascade shorter than 2");
    std::size_t n = std::min(cascade.events.size(), cfg.max_len);
    CascadeFeatures topo;
    if (cfg.use_topology) {
        if (!emb) throw ContractError("infer_tree: topology embeddings missing");
        topo = build_cascade_features(cascade, *emb, cfg.max_len);
    }
    DiffusionTree tree;
    tree.parents.assign(n, 0);
    for (std::size_t i = 1; i < n; ++i) {
        PrefixFeatures in = build_prefix_features(cascade, i, params, cfg,
                                                  cfg.use_topology ? &topo : nullptr);
        Tape tape;
        ParamNodes pn = lift_params(tape, params);
        ForwardVars fv = forward(tape, pn, params, in, cfg, false);
        const Tensor& beta = tape.value(fv.beta);
        std::size_t best = 0;
        for (std::size_t j = 1; j < beta.numel(); ++j)
            if (beta.values[j] > beta.values[best]) best = j;
        tree.parents[i] = best;
    }
    return tree;
}

// ---- synthetic corpus with planted diffusion trees ----

struct SynthResult {
    CascadeCorpus corpus;
    // per emitted cascade: parent position per event (position 0 is the root)
    std::vector<std::vector<std::size_t>> planted_parents;
};

// Independent-cascade process: each newly activated node tries each inactive
// neighbor once with the given probability; successful attempts fire at
// parent_time + Exp(1). The earliest pending activation wins and defines the
// planted parent.
inline SynthResult synth_generate(const SocialGraph& graph, double act_prob,
                                  std::size_t max_len, std::size_t count,
                                  std::uint64_t seed) {
    if (act_prob < 0 || act_prob > 1)
        throw ConfigError("synth_generate: activation probability out of [0,1]");
    SynthResult out;
    for (std::size_t u = 0; u < graph.node_count(); ++u)
        out.corpus.vocab.intern(std::to_string(u));

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> start_dist(0, graph.node_count() - 1);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::exponential_distribution<double> delay(1.0);

    struct Pending {
        double time;
        std::size_t node;
        std::size_t parent_pos;
        bool operator>(const Pending& o) const { return time > o.time; }
    };

    for (std::size_t c = 0; c < count; ++c) {
        std::size_t root = start_dist(rng);
        std::priority_queue<Pending, std::vector<Pending>, std::greater<>> queue;
        std::vector<bool> active(graph.node_count(), false);
        Cascade cascade;
        cascade.id = "synth" + std::to_string(c);
        std::vector<std::size_t> parents;
        queue.push({0.0, root, 0});
        while (!queue.empty() && cascade.events.size() < max_len) {
            Pending ev = queue.top();
            queue.pop();
            if (active[ev.node]) continue;
            active[ev.node] = true;
            std::size_t pos = cascade.events.size();
            cascade.events.push_back({ev.node, ev.time});
            parents.push_back(ev.parent_pos);
            for (std::size_t nb : graph.adjacency[ev.node]) {
                if (active[nb]) continue;
                if (unit(rng) < act_prob)
                    queue.push({ev.time + delay(rng), nb, pos});
            }
        }
        if (cascade.events.size() < 2) continue;  // dropped, too short
        out.corpus.cascades.push_back(std::move(cascade));
        out.planted_parents.push_back(std::move(parents));
    }
    return out;
}

}  // namespace tandrud
