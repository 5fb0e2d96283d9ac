// Pipeline driver: prepare -> embed -> train -> eval / infer-tree, plus a
// synthetic-corpus generator. Every subcommand writes a manifest.json into
// its output directory before doing any real work, so artifacts are always
// attributable to the exact invocation that produced them.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "tandrud/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace tandrud;

namespace {

constexpr const char* kVersion = "tandrud 1.0.0";

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// FNV-1a over the raw bytes of a file; used for manifest input digests.
std::uint64_t file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open input file: " + path);
    std::uint64_t h = 1469598103934665603ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
    }
    return h;
}

struct Manifest {
    std::string command;
    json flags = json::object();
    std::vector<std::string> inputs;
    std::uint64_t seed = 0;
    std::vector<std::string> outputs;

    // Hash inputs and persist before any computation.
    void write(const std::string& out_dir) const {
        fs::create_directories(out_dir);
        json m;
        m["version"] = kVersion;
        m["command"] = command;
        m["flags"] = flags;
        json digests = json::object();
        for (const auto& p : inputs) digests[p] = file_digest(p);
        m["inputs"] = digests;
        m["seed"] = seed;
        m["outputs"] = outputs;
        std::ofstream out(out_dir + "/manifest.json");
        if (!out) throw ParseError("cannot write manifest in: " + out_dir);
        out << m.dump(2) << '\n';
    }
};

std::string metrics_record(const std::string& split, const Metrics& m) {
    std::string s = "{\"split\":\"" + split + "\"";
    s += ",\"RR\":" + fmt17(m.rr);
    s += ",\"P@10\":" + fmt17(m.p10);
    s += ",\"P@50\":" + fmt17(m.p50);
    s += ",\"P@100\":" + fmt17(m.p100);
    s += ",\"n_instances\":" + std::to_string(m.instances);
    s += ",\"mask_mode\":\"" + m.mask_mode + "\"}";
    return s;
}

void print_metrics_table(const std::string& split, const Metrics& m) {
    std::printf("split      RR        P@10      P@50      P@100     instances\n");
    std::printf("%-10s %-9.4f %-9.4f %-9.4f %-9.4f %zu\n", split.c_str(), m.rr,
                m.p10, m.p50, m.p100, m.instances);
}

ModelConfig make_model_config(bool no_topology, bool raw_logit, bool literal,
                              double dropout_keep, double l2, std::size_t max_len) {
    ModelConfig cfg;
    cfg.use_topology = !no_topology;
    if (raw_logit && literal)
        throw ConfigError("--raw-logit-adjust and --literal-adjust are exclusive");
    cfg.adjust = raw_logit  ? AdjustMode::RawLogit
                 : literal  ? AdjustMode::LiteralSoftmax
                            : AdjustMode::ExpWeight;
    cfg.dropout_keep = dropout_keep;
    cfg.l2_lambda = l2;
    cfg.max_len = max_len;
    return cfg;
}

// ---- subcommands ----

struct PrepareArgs {
    std::string cascades, out_dir;
    std::uint64_t seed = 1;
};

int run_prepare(const PrepareArgs& a) {
    Manifest man{"prepare"};
    man.flags = {{"cascades", a.cascades}, {"out-dir", a.out_dir}, {"seed", a.seed}};
    man.inputs = {a.cascades};
    man.seed = a.seed;
    man.outputs = {"vocab.txt", "train.tsv", "valid.tsv", "test.tsv"};
    man.write(a.out_dir);

    CascadeCorpus corpus = load_cascades(a.cascades);
    auto [train_set, valid_set, test_set] = split_corpus(corpus, a.seed);
    corpus.vocab.save(a.out_dir + "/vocab.txt");
    save_cascades(train_set, a.out_dir + "/train.tsv");
    save_cascades(valid_set, a.out_dir + "/valid.tsv");
    save_cascades(test_set, a.out_dir + "/test.tsv");
    std::printf("users %zu cascades %zu dropped_short %zu t_max %s\n",
                corpus.vocab.size(), corpus.cascades.size(), corpus.dropped_short,
                fmt17(corpus.t_max()).c_str());
    std::printf("split train %zu valid %zu test %zu\n", train_set.cascades.size(),
                valid_set.cascades.size(), test_set.cascades.size());
    return 0;
}

struct EmbedArgs {
    std::string graph, vocab, out_dir;
    std::size_t dg = 128, walk_length = 80, walks_per_node = 10;
    std::size_t window = 5, negatives = 5, epochs = 5;
    double p = 1.0, q = 1.0, lr = 0.025;
    std::uint64_t seed = 1;
    bool directed_walks = false;
};

int run_embed(const EmbedArgs& a) {
    Manifest man{"embed"};
    man.flags = {{"graph", a.graph},       {"vocab", a.vocab},
                 {"out-dir", a.out_dir},   {"dg", a.dg},
                 {"p", a.p},               {"q", a.q},
                 {"walk-length", a.walk_length},
                 {"walks-per-node", a.walks_per_node},
                 {"window", a.window},     {"negatives", a.negatives},
                 {"epochs", a.epochs},     {"lr", a.lr},
                 {"seed", a.seed},         {"directed-walks", a.directed_walks}};
    man.inputs = {a.graph, a.vocab};
    man.seed = a.seed;
    man.outputs = {"embeddings.txt"};
    man.write(a.out_dir);

    Vocab vocab = Vocab::load(a.vocab);
    SocialGraph g = load_graph(a.graph, vocab, a.directed_walks);
    std::printf("graph nodes %zu edges %zu dropped_edges %zu\n", g.node_count(),
                g.edge_count, g.dropped_edges);

    WalkConfig wcfg;
    wcfg.p = a.p;
    wcfg.q = a.q;
    wcfg.walk_length = a.walk_length;
    wcfg.walks_per_node = a.walks_per_node;
    wcfg.seed = a.seed;
    auto walks = node2vec_walks(g, wcfg);

    SgnsConfig scfg;
    scfg.dim = a.dg;
    scfg.window = a.window;
    scfg.negatives = a.negatives;
    scfg.epochs = a.epochs;
    scfg.lr = a.lr;
    scfg.seed = a.seed;
    std::vector<double> losses;
    EmbeddingMatrix emb = train_sgns(walks, g.node_count(), scfg, &losses);
    for (std::size_t e = 0; e < losses.size(); ++e)
        std::printf("sgns epoch %zu loss %s\n", e, fmt17(losses[e]).c_str());
    save_embeddings(emb, vocab, a.out_dir + "/embeddings.txt");
    return 0;
}

struct TrainArgs {
    std::string train, valid, vocab, embeddings, out_dir;
    std::size_t d = 64, T = 50, dg = 128, max_len = 200;
    std::size_t batch = 32, epochs = 200, patience = 10, runs = 1;
    double lr = 0.001, l2 = 1e-5, dropout_keep = 0.8;
    std::uint64_t seed = 1;
    bool no_topology = false, raw_logit = false, literal = false;
};

int run_train(const TrainArgs& a) {
    if (!a.no_topology && a.embeddings.empty())
        throw ConfigError(
            "topology model needs --graph-embeddings (or pass --no-topology)");

    Manifest man{"train"};
    man.flags = {{"train", a.train},
                 {"valid", a.valid},
                 {"vocab", a.vocab},
                 {"graph-embeddings", a.embeddings},
                 {"out-dir", a.out_dir},
                 {"d", a.d},
                 {"T", a.T},
                 {"dg", a.dg},
                 {"lr", a.lr},
                 {"l2", a.l2},
                 {"dropout-keep", a.dropout_keep},
                 {"max-len", a.max_len},
                 {"batch", a.batch},
                 {"epochs", a.epochs},
                 {"patience", a.patience},
                 {"runs", a.runs},
                 {"seed", a.seed},
                 {"no-topology", a.no_topology},
                 {"raw-logit-adjust", a.raw_logit},
                 {"literal-adjust", a.literal}};
    man.inputs = {a.train, a.valid, a.vocab};
    if (!a.embeddings.empty()) man.inputs.push_back(a.embeddings);
    man.seed = a.seed;
    man.outputs = {"checkpoint.txt", "epochs.log"};
    man.write(a.out_dir);

    Vocab vocab = Vocab::load(a.vocab);
    CascadeCorpus train_set = load_cascades(a.train, &vocab);
    CascadeCorpus valid_set = load_cascades(a.valid, &vocab);
    ModelConfig mcfg = make_model_config(a.no_topology, a.raw_logit, a.literal,
                                         a.dropout_keep, a.l2, a.max_len);
    EmbeddingMatrix emb;
    if (mcfg.use_topology) emb = load_embeddings(a.embeddings, vocab);

    TrainConfig tcfg;
    tcfg.lr = a.lr;
    tcfg.max_epochs = a.epochs;
    tcfg.patience = a.patience;
    tcfg.batch_size = a.batch;

    double t_max = std::max(train_set.t_max(), valid_set.t_max());
    std::ofstream log(a.out_dir + "/epochs.log");
    if (!log) throw ParseError("cannot write epoch log in: " + a.out_dir);

    double best_rr = -1.0;
    for (std::size_t run = 0; run < a.runs; ++run) {
        tcfg.seed = a.seed + run;
        ModelParams p0 = ModelParams::init(vocab.size(), a.d, a.dg, a.T, tcfg.seed);
        p0.t_max = t_max;
        TrainResult r = train(train_set, valid_set, p0, mcfg, tcfg,
                              mcfg.use_topology ? &emb : nullptr);
        double run_rr = -1.0;
        for (const auto& rec : r.log) {
            // the log keeps wall time out so reruns are byte-identical
            log << "run " << run << " epoch " << rec.epoch << " loss "
                << fmt17(rec.train_loss) << " valid_rr " << fmt17(rec.valid_rr)
                << '\n';
            std::printf("run %zu epoch %zu loss %.6f valid_rr %.6f (%.2fs)\n", run,
                        rec.epoch, rec.train_loss, rec.valid_rr, rec.seconds);
            run_rr = std::max(run_rr, rec.valid_rr);
        }
        if (r.aborted_non_finite)
            std::fprintf(stderr, "run %zu: non-finite loss, kept last good state\n",
                         run);
        std::string ckpt = a.runs == 1
                               ? a.out_dir + "/checkpoint.txt"
                               : a.out_dir + "/checkpoint_run" +
                                     std::to_string(run) + ".txt";
        save_checkpoint(r.best, mcfg, vocab.hash(), ckpt);
        if (run_rr > best_rr) {
            best_rr = run_rr;
            if (a.runs > 1)
                save_checkpoint(r.best, mcfg, vocab.hash(),
                                a.out_dir + "/checkpoint.txt");
        }
        std::printf("run %zu best epoch %zu valid_rr %.6f\n", run, r.best_epoch,
                    run_rr);
    }
    return 0;
}

struct EvalArgs {
    std::string cascades, vocab, checkpoint, embeddings, out_dir;
    std::string split = "test";
    std::size_t threads = 1;
    bool mask_observed = false;
};

int run_eval(const EvalArgs& a) {
    Manifest man{"eval"};
    man.flags = {{"cascades", a.cascades},   {"vocab", a.vocab},
                 {"checkpoint", a.checkpoint}, {"graph-embeddings", a.embeddings},
                 {"out-dir", a.out_dir},     {"split", a.split},
                 {"threads", a.threads},     {"mask-observed", a.mask_observed}};
    man.inputs = {a.cascades, a.vocab, a.checkpoint};
    if (!a.embeddings.empty()) man.inputs.push_back(a.embeddings);
    man.outputs = {"metrics.txt"};
    man.write(a.out_dir);

    Vocab vocab = Vocab::load(a.vocab);
    CascadeCorpus corpus = load_cascades(a.cascades, &vocab);
    auto [params, cfg] = load_checkpoint(a.checkpoint, vocab.hash());
    if (cfg.use_topology && a.embeddings.empty())
        throw ConfigError("checkpoint uses topology; pass --graph-embeddings");
    EmbeddingMatrix emb;
    if (cfg.use_topology) emb = load_embeddings(a.embeddings, vocab);

    Metrics m = evaluate(corpus, params, cfg, cfg.use_topology ? &emb : nullptr,
                         a.mask_observed, a.threads);
    std::string record = metrics_record(a.split, m);
    std::ofstream out(a.out_dir + "/metrics.txt");
    out << record << '\n';
    print_metrics_table(a.split, m);
    std::printf("%s\n", record.c_str());
    return 0;
}

struct InferArgs {
    std::string cascades, vocab, checkpoint, embeddings, out_dir;
};

int run_infer_tree(const InferArgs& a) {
    Manifest man{"infer-tree"};
    man.flags = {{"cascades", a.cascades},
                 {"vocab", a.vocab},
                 {"checkpoint", a.checkpoint},
                 {"graph-embeddings", a.embeddings},
                 {"out-dir", a.out_dir}};
    man.inputs = {a.cascades, a.vocab, a.checkpoint};
    if (!a.embeddings.empty()) man.inputs.push_back(a.embeddings);
    man.outputs = {"trees.txt", "edges.txt"};
    man.write(a.out_dir);

    Vocab vocab = Vocab::load(a.vocab);
    CascadeCorpus corpus = load_cascades(a.cascades, &vocab);
    auto [params, cfg] = load_checkpoint(a.checkpoint, vocab.hash());
    if (cfg.use_topology && a.embeddings.empty())
        throw ConfigError("checkpoint uses topology; pass --graph-embeddings");
    EmbeddingMatrix emb;
    if (cfg.use_topology) emb = load_embeddings(a.embeddings, vocab);

    std::ofstream trees(a.out_dir + "/trees.txt");
    std::ofstream edges(a.out_dir + "/edges.txt");
    for (const auto& c : corpus.cascades) {
        DiffusionTree t =
            infer_tree(c, params, cfg, cfg.use_topology ? &emb : nullptr);
        for (std::size_t i = 1; i < t.parents.size(); ++i) {
            trees << c.id << '\t' << i << '\t' << t.parents[i] << '\n';
            edges << c.id << '\t' << vocab.raw(c.events[i].user) << '\t'
                  << vocab.raw(c.events[t.parents[i]].user) << '\n';
        }
    }
    std::printf("inferred trees for %zu cascades\n", corpus.cascades.size());
    return 0;
}

struct SynthArgs {
    std::string out_dir;
    std::size_t nodes = 200, max_len = 200, count = 500;
    double edge_prob = 0.03, act_prob = 0.3;
    std::uint64_t seed = 1;
};

int run_synth(const SynthArgs& a) {
    Manifest man{"synth"};
    man.flags = {{"out-dir", a.out_dir},     {"nodes", a.nodes},
                 {"edge-prob", a.edge_prob}, {"act-prob", a.act_prob},
                 {"max-len", a.max_len},     {"count", a.count},
                 {"seed", a.seed}};
    man.seed = a.seed;
    man.outputs = {"cascades.tsv", "trees.txt", "graph.txt"};
    man.write(a.out_dir);

    // Erdos-Renyi graph over the requested node count.
    SocialGraph g;
    g.adjacency.resize(a.nodes);
    std::mt19937_64 rng(a.seed ^ 0x5e1fULL);
    std::uniform_real_distribution<double> unit(0, 1);
    std::ofstream gout(a.out_dir + "/graph.txt");
    for (std::size_t u = 0; u < a.nodes; ++u)
        for (std::size_t v = u + 1; v < a.nodes; ++v)
            if (unit(rng) < a.edge_prob) {
                g.adjacency[u].push_back(v);
                g.adjacency[v].push_back(u);
                ++g.edge_count;
                gout << u << ' ' << v << '\n';
            }

    SynthResult r = synth_generate(g, a.act_prob, a.max_len, a.count, a.seed);
    save_cascades(r.corpus, a.out_dir + "/cascades.tsv");
    std::ofstream trees(a.out_dir + "/trees.txt");
    for (std::size_t c = 0; c < r.corpus.cascades.size(); ++c)
        for (std::size_t i = 1; i < r.planted_parents[c].size(); ++i)
            trees << r.corpus.cascades[c].id << '\t' << i << '\t'
                  << r.planted_parents[c][i] << '\n';
    std::printf("nodes %zu edges %zu cascades %zu\n", a.nodes, g.edge_count,
                r.corpus.cascades.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Topology-aware dual-role cascade prediction"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    PrepareArgs pa;
    auto* prepare = app.add_subcommand("prepare", "validate, split, build vocab");
    prepare->add_option("--cascades", pa.cascades)->required();
    prepare->add_option("--out-dir", pa.out_dir)->required();
    prepare->add_option("--seed", pa.seed);

    EmbedArgs ea;
    auto* embed = app.add_subcommand("embed", "train topological embeddings");
    embed->add_option("--graph", ea.graph)->required();
    embed->add_option("--vocab", ea.vocab)->required();
    embed->add_option("--out-dir", ea.out_dir)->required();
    embed->add_option("--dg", ea.dg);
    embed->add_option("--p", ea.p);
    embed->add_option("--q", ea.q);
    embed->add_option("--walk-length", ea.walk_length);
    embed->add_option("--walks-per-node", ea.walks_per_node);
    embed->add_option("--window", ea.window);
    embed->add_option("--negatives", ea.negatives);
    embed->add_option("--epochs", ea.epochs);
    embed->add_option("--lr", ea.lr);
    embed->add_option("--seed", ea.seed);
    embed->add_flag("--directed-walks", ea.directed_walks);

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "train the prediction model");
    tr->add_option("--train", ta.train)->required();
    tr->add_option("--valid", ta.valid)->required();
    tr->add_option("--vocab", ta.vocab)->required();
    tr->add_option("--graph-embeddings", ta.embeddings);
    tr->add_option("--out-dir", ta.out_dir)->required();
    tr->add_option("--d", ta.d);
    tr->add_option("--T", ta.T);
    tr->add_option("--dg", ta.dg);
    tr->add_option("--lr", ta.lr);
    tr->add_option("--l2", ta.l2);
    tr->add_option("--dropout-keep", ta.dropout_keep);
    tr->add_option("--max-len", ta.max_len);
    tr->add_option("--batch", ta.batch);
    tr->add_option("--epochs", ta.epochs);
    tr->add_option("--patience", ta.patience);
    tr->add_option("--runs", ta.runs);
    tr->add_option("--seed", ta.seed);
    tr->add_flag("--no-topology", ta.no_topology);
    tr->add_flag("--raw-logit-adjust", ta.raw_logit);
    tr->add_flag("--literal-adjust", ta.literal);

    EvalArgs va;
    auto* ev = app.add_subcommand("eval", "rank-based evaluation");
    ev->add_option("--cascades", va.cascades)->required();
    ev->add_option("--vocab", va.vocab)->required();
    ev->add_option("--checkpoint", va.checkpoint)->required();
    ev->add_option("--graph-embeddings", va.embeddings);
    ev->add_option("--out-dir", va.out_dir)->required();
    ev->add_option("--split", va.split);
    ev->add_option("--threads", va.threads);
    ev->add_flag("--mask-observed", va.mask_observed);

    InferArgs ia;
    auto* it = app.add_subcommand("infer-tree", "recover diffusion trees");
    it->add_option("--cascades", ia.cascades)->required();
    it->add_option("--vocab", ia.vocab)->required();
    it->add_option("--checkpoint", ia.checkpoint)->required();
    it->add_option("--graph-embeddings", ia.embeddings);
    it->add_option("--out-dir", ia.out_dir)->required();

    SynthArgs sa;
    auto* sy = app.add_subcommand("synth", "generate synthetic cascades");
    sy->add_option("--out-dir", sa.out_dir)->required();
    sy->add_option("--nodes", sa.nodes);
    sy->add_option("--edge-prob", sa.edge_prob);
    sy->add_option("--act-prob", sa.act_prob);
    sy->add_option("--max-len", sa.max_len);
    sy->add_option("--count", sa.count);
    sy->add_option("--seed", sa.seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;  // 2 on usage errors, 0 for --help/--version
    }

    try {
        if (prepare->parsed()) return run_prepare(pa);
        if (embed->parsed()) return run_embed(ea);
        if (tr->parsed()) return run_train(ta);
        if (ev->parsed()) return run_eval(va);
        if (it->parsed()) return run_infer_tree(ia);
        if (sy->parsed()) return run_synth(sa);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
