#include "unlearn/model.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "unlearn/optim.hpp"

namespace unlearn {

using nlohmann::json;

// ------------------------------- ModelSpec ---------------------------------

void ModelSpec::validate() const {
    if (blocks.empty()) throw ConfigError("model needs at least one block");
    if (embed_dim <= 0) throw ConfigError("embed_dim must be positive");
    if (temperature <= 0.0) throw ConfigError("temperature must be positive");
    if (vocab.empty()) throw ConfigError("vocab must not be empty");
    if (image_channels <= 0 || image_size <= 0) throw ConfigError("bad image dimensions");
    bool any_bn = false;
    int hw = image_size;
    for (const auto& b : blocks) {
        if (b.channels <= 0 || b.kernel <= 0 || b.stride <= 0) {
            throw ConfigError("bad block spec");
        }
        if (b.kernel % 2 == 0) throw ConfigError("block kernels must be odd");
        any_bn = any_bn || b.has_batchnorm;
        hw = (hw + 2 * (b.kernel / 2) - b.kernel) / b.stride + 1;
        if (hw < 1) throw ConfigError("image collapses to zero spatial size");
    }
    if (!any_bn) {
        throw ConfigError("at least one block must carry batch normalization");
    }
}

std::string ModelSpec::to_json() const {
    json j;
    j["image_channels"] = image_channels;
    j["image_size"] = image_size;
    j["embed_dim"] = embed_dim;
    j["temperature"] = temperature;
    j["bn_eps"] = bn_eps;
    j["bn_momentum"] = bn_momentum;
    j["vocab"] = vocab;
    json bl = json::array();
    for (const auto& b : blocks) {
        bl.push_back({{"channels", b.channels},
                      {"kernel", b.kernel},
                      {"stride", b.stride},
                      {"batchnorm", b.has_batchnorm}});
    }
    j["blocks"] = bl;
    return j.dump();
}

ModelSpec ModelSpec::from_json(const std::string& s) {
    json j = json::parse(s);
    ModelSpec m;
    m.image_channels = j.at("image_channels").get<int>();
    m.image_size = j.at("image_size").get<int>();
    m.embed_dim = j.at("embed_dim").get<int>();
    m.temperature = j.at("temperature").get<real>();
    m.bn_eps = j.at("bn_eps").get<real>();
    m.bn_momentum = j.at("bn_momentum").get<real>();
    m.vocab = j.at("vocab").get<std::vector<std::string>>();
    for (const auto& b : j.at("blocks")) {
        m.blocks.push_back({b.at("channels").get<int>(), b.at("kernel").get<int>(),
                            b.at("stride").get<int>(), b.at("batchnorm").get<bool>()});
    }
    return m;
}

std::string ModelSpec::fingerprint() const {
    return hex64(fnv1a64_str(to_json()));
}

// ------------------------------ DualEncoder --------------------------------

DualEncoder::DualEncoder(ModelSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    int in_ch = spec_.image_channels;
    for (size_t i = 0; i < spec_.blocks.size(); ++i) {
        const BlockSpec& b = spec_.blocks[i];
        block_input_channels_.push_back(in_ch);
        const std::string base = "img.block" + std::to_string(i);
        LayerInfo conv;
        conv.path = base + ".conv";
        conv.param_paths = {conv.path + ".weight", conv.path + ".bias"};
        conv.matrix_capable = true;
        conv.matrix_out = b.channels;
        conv.matrix_in = in_ch * b.kernel * b.kernel;
        image_layers_.push_back(std::move(conv));
        if (b.has_batchnorm) {
            LayerInfo bn;
            bn.path = base + ".bn";
            bn.param_paths = {bn.path + ".gamma", bn.path + ".beta"};
            bn.matrix_capable = false;
            image_layers_.push_back(std::move(bn));
        }
        in_ch = b.channels;
    }
    final_channels_ = in_ch;
    LayerInfo proj;
    proj.path = "img.proj";
    proj.param_paths = {"img.proj.weight", "img.proj.bias"};
    proj.matrix_capable = true;
    proj.matrix_out = spec_.embed_dim;
    proj.matrix_in = final_channels_;
    image_layers_.push_back(std::move(proj));
}

DualEncoder DualEncoder::from_checkpoint(const ParameterSet& ps) {
    if (ps.meta().spec_json.empty()) throw IncompatibleError("checkpoint has no model spec");
    return DualEncoder(ModelSpec::from_json(ps.meta().spec_json));
}

const LayerInfo& DualEncoder::layer(const std::string& path) const {
    for (const auto& l : image_layers_) {
        if (l.path == path) return l;
    }
    throw ConfigError("unknown layer '" + path + "'");
}

std::vector<std::string> DualEncoder::image_layer_paths() const {
    std::vector<std::string> out;
    for (const auto& l : image_layers_) out.push_back(l.path);
    return out;
}

std::vector<std::string> DualEncoder::adapter_capable_paths() const {
    std::vector<std::string> out;
    for (const auto& l : image_layers_) {
        if (l.matrix_capable) out.push_back(l.path);
    }
    return out;
}

std::vector<std::string> DualEncoder::bn_layer_paths() const {
    std::vector<std::string> out;
    for (const auto& l : image_layers_) {
        if (l.path.size() > 3 && l.path.substr(l.path.size() - 3) == ".bn") out.push_back(l.path);
    }
    return out;
}

ParameterSet DualEncoder::init_params(uint64_t seed) const {
    ParameterSet ps;
    for (size_t i = 0; i < spec_.blocks.size(); ++i) {
        const BlockSpec& b = spec_.blocks[i];
        const int in_ch = block_input_channels_[i];
        const std::string base = "img.block" + std::to_string(i);
        Rng rng(derive_seed(seed, base));
        Tensor w({b.channels, in_ch, b.kernel, b.kernel});
        const real std_w = std::sqrt(2.0 / (in_ch * b.kernel * b.kernel));
        for (size_t j = 0; j < w.size(); ++j) w[j] = rng.normal() * std_w;
        ps.put(base + ".conv.weight", std::move(w));
        ps.put(base + ".conv.bias", Tensor({b.channels}));
        if (b.has_batchnorm) {
            ps.put(base + ".bn.gamma", Tensor({b.channels}, 1.0));
            ps.put(base + ".bn.beta", Tensor({b.channels}));
            ps.put(base + ".bn.running_mean", Tensor({b.channels}));
            ps.put(base + ".bn.running_var", Tensor({b.channels}, 1.0));
        }
    }
    {
        Rng rng(derive_seed(seed, "img.proj"));
        Tensor w({spec_.embed_dim, final_channels_});
        const real std_w = std::sqrt(1.0 / final_channels_);
        for (size_t j = 0; j < w.size(); ++j) w[j] = rng.normal() * std_w;
        ps.put("img.proj.weight", std::move(w));
        ps.put("img.proj.bias", Tensor({spec_.embed_dim}));
    }
    {
        Rng rng(derive_seed(seed, "txt.embed"));
        Tensor t({static_cast<int>(spec_.vocab.size()), spec_.embed_dim});
        for (size_t j = 0; j < t.size(); ++j) t[j] = rng.normal();
        ps.put("txt.embed.table", std::move(t));
    }
    ps.meta().fingerprint = spec_.fingerprint();
    ps.meta().vocab = spec_.vocab;
    ps.meta().seed = seed;
    ps.meta().provenance = "init";
    ps.meta().bn_layers = bn_layer_paths();
    ps.meta().spec_json = spec_.to_json();
    return ps;
}

void DualEncoder::check_params(const ParameterSet& ps) const {
    if (ps.meta().fingerprint != spec_.fingerprint()) {
        throw IncompatibleError("parameter set fingerprint does not match this architecture");
    }
    for (const auto& l : image_layers_) {
        for (const auto& p : l.param_paths) {
            if (!ps.has(p)) throw IncompatibleError("missing parameter '" + p + "'");
        }
    }
    if (!ps.has("txt.embed.table")) throw IncompatibleError("missing text embedding table");
    for (const auto& bn : bn_layer_paths()) {
        const Tensor& rv = ps.at(bn + ".running_var");
        for (size_t i = 0; i < rv.size(); ++i) {
            if (!(rv[i] > 0.0)) {
                throw IncompatibleError("non-positive running variance in '" + bn + "'");
            }
        }
    }
}

void DualEncoder::check_image_batch(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != spec_.image_channels ||
        images.dim(2) != spec_.image_size || images.dim(3) != spec_.image_size) {
        throw ShapeError("image batch " + shape_str(images.shape()) + " does not match model input (N," +
                         std::to_string(spec_.image_channels) + "," +
                         std::to_string(spec_.image_size) + "," +
                         std::to_string(spec_.image_size) + ")");
    }
}

DualEncoder::Binding DualEncoder::bind(Graph& g, const ParameterSet& ps,
                                       const std::set<std::string>& trainable_layers) const {
    Binding b;
    b.trainable = trainable_layers;
    auto bind_layer = [&](const std::string& layer_path, const std::vector<std::string>& params) {
        const bool rg = trainable_layers.count(layer_path) > 0;
        for (const auto& p : params) b.params[p] = g.input(ps.at(p), rg);
    };
    for (const auto& l : image_layers_) bind_layer(l.path, l.param_paths);
    bind_layer(text_layer_, {"txt.embed.table"});
    return b;
}

DualEncoder::ImageForward DualEncoder::image_forward(Graph& g, const Binding& bind,
                                                     const ParameterSet& ps, ValueId images,
                                                     BnMode mode, const AdapterOverlay* adapters,
                                                     std::vector<Tensor>* batch_means,
                                                     std::vector<Tensor>* batch_vars) const {
    ImageForward out;
    ValueId x = images;
    auto effective_weight = [&](const std::string& layer_path, const std::vector<int>& wshape) {
        ValueId w = bind.params.at(layer_path + ".weight");
        if (adapters) {
            auto it = adapters->find(layer_path);
            if (it != adapters->end()) {
                ValueId delta = g.matmul_nn(it->second.a, it->second.b);
                delta = g.reshape(delta, wshape);
                w = g.add(w, g.scale(delta, it->second.scaling));
            }
        }
        return w;
    };
    for (size_t i = 0; i < spec_.blocks.size(); ++i) {
        const BlockSpec& blk = spec_.blocks[i];
        const std::string base = "img.block" + std::to_string(i);
        const std::vector<int> wshape = {blk.channels, block_input_channels_[i], blk.kernel,
                                         blk.kernel};
        ValueId w = effective_weight(base + ".conv", wshape);
        x = g.conv2d(x, w, bind.params.at(base + ".conv.bias"), blk.stride, blk.kernel / 2);
        if (blk.has_batchnorm) {
            out.pre_bn.push_back(x);
            ValueId gamma = bind.params.at(base + ".bn.gamma");
            ValueId beta = bind.params.at(base + ".bn.beta");
            if (mode == BnMode::Frozen) {
                x = g.batchnorm_eval(x, gamma, beta, ps.at(base + ".bn.running_mean"),
                                     ps.at(base + ".bn.running_var"), spec_.bn_eps);
            } else {
                Tensor bm, bv;
                x = g.batchnorm_batch(x, gamma, beta, spec_.bn_eps, &bm, &bv);
                if (batch_means) batch_means->push_back(std::move(bm));
                if (batch_vars) batch_vars->push_back(std::move(bv));
            }
        }
        x = g.relu(x);
    }
    x = g.global_avg_pool(x);
    {
        const std::vector<int> wshape = {spec_.embed_dim, final_channels_};
        ValueId w = effective_weight("img.proj", wshape);
        x = g.linear(x, w, bind.params.at("img.proj.bias"));
    }
    out.embed = g.l2_normalize_rows(x);
    return out;
}

ValueId DualEncoder::text_forward(Graph& g, const Binding& bind,
                                  const std::vector<int>& prompt_ids) const {
    ValueId rows = g.embedding_rows(bind.params.at("txt.embed.table"), prompt_ids);
    return g.l2_normalize_rows(rows);
}

ValueId DualEncoder::contrastive_loss(Graph& g, ValueId img_embed, ValueId txt_embed) const {
    ValueId logits = g.scale(g.matmul_nt(img_embed, txt_embed), 1.0 / spec_.temperature);
    const int n = g.value(logits).dim(0);
    std::vector<int> diag(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) diag[static_cast<size_t>(i)] = i;
    ValueId a = g.cross_entropy_rows(logits, diag);
    ValueId b = g.cross_entropy_rows(g.transpose2d(logits), diag);
    return g.scale(g.add(a, b), 0.5);
}

Tensor DualEncoder::encode_image(const ParameterSet& ps, const Tensor& images) const {
    check_image_batch(images);
    Graph g;
    Binding b = bind(g, ps, {});
    ImageForward f = image_forward(g, b, ps, g.constant(images), BnMode::Frozen);
    return g.value(f.embed);
}

Tensor DualEncoder::encode_text(const ParameterSet& ps, const std::vector<int>& prompt_ids) const {
    Graph g;
    Binding b = bind(g, ps, {});
    return g.value(text_forward(g, b, prompt_ids));
}

DualEncoder::Classification DualEncoder::zero_shot_classify(
    const ParameterSet& ps, const Tensor& images,
    const std::vector<int>& class_prompt_ids) const {
    if (class_prompt_ids.empty()) {
        throw ConfigError("zero-shot classification needs at least one class prompt");
    }
    Tensor ie = encode_image(ps, images);
    Tensor te = encode_text(ps, class_prompt_ids);
    const int n = ie.dim(0), m = te.dim(0), d = ie.dim(1);
    Classification out;
    out.similarities = Tensor({n, m});
    out.predicted.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        int best = 0;
        real best_sim = -2.0;
        for (int j = 0; j < m; ++j) {
            real s = 0.0;
            for (int k = 0; k < d; ++k) {
                s += ie[static_cast<size_t>(i) * d + k] * te[static_cast<size_t>(j) * d + k];
            }
            out.similarities[static_cast<size_t>(i) * m + j] = s;
            if (s > best_sim) {  // ties keep the lowest class index
                best_sim = s;
                best = j;
            }
        }
        out.predicted[static_cast<size_t>(i)] = best;
    }
    return out;
}

ParameterSet DualEncoder::pretrain_toy(const Dataset& dataset, const PretrainConfig& cfg,
                                       PretrainLog* log) const {
    if (dataset.empty()) throw ConfigError("pre-training dataset is empty");
    if (static_cast<int>(spec_.vocab.size()) != dataset.taxonomy.vocab_size()) {
        throw IncompatibleError("model vocab does not match dataset taxonomy");
    }
    // Every vocab class must be represented in the data.
    {
        std::vector<bool> sup_seen(static_cast<size_t>(dataset.taxonomy.n_superclasses), false);
        std::vector<bool> sub_seen(static_cast<size_t>(dataset.taxonomy.n_subgroups()), false);
        for (const auto& ex : dataset.items) {
            sup_seen[static_cast<size_t>(ex.superclass)] = true;
            sub_seen[static_cast<size_t>(ex.subgroup)] = true;
        }
        for (size_t c = 0; c < sup_seen.size(); ++c) {
            if (!sup_seen[c]) {
                throw CoverageError("superclass " + std::to_string(c) + " absent from dataset");
            }
        }
        for (size_t s = 0; s < sub_seen.size(); ++s) {
            if (!sub_seen[s]) {
                throw CoverageError("subgroup " + std::to_string(s) + " absent from dataset");
            }
        }
    }

    ParameterSet ps = init_params(derive_seed(cfg.seed, "init"));
    ps.meta().provenance = "original";
    ps.meta().seed = cfg.seed;

    // Holdout split for the zero-shot floor.
    std::vector<int> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    Rng split_rng(derive_seed(cfg.seed, "holdout"));
    split_rng.shuffle(order);
    const size_t holdout_n =
        static_cast<size_t>(cfg.holdout_fraction * static_cast<real>(order.size()));
    std::vector<int> holdout(order.begin(), order.begin() + static_cast<long>(holdout_n));
    std::vector<int> train(order.begin() + static_cast<long>(holdout_n), order.end());
    if (train.empty()) throw ConfigError("holdout fraction leaves no training data");

    std::set<std::string> trainable;
    for (const auto& l : image_layers_) trainable.insert(l.path);
    trainable.insert(text_layer_);

    Adam adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    Rng order_rng(derive_seed(cfg.seed, "order"));
    Rng pair_rng(derive_seed(cfg.seed, "pair"));

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(train);
        for (size_t off = 0; off < train.size(); off += static_cast<size_t>(cfg.batch)) {
            const size_t end = std::min(train.size(), off + static_cast<size_t>(cfg.batch));
            std::vector<int> idx(train.begin() + static_cast<long>(off),
                                 train.begin() + static_cast<long>(end));
            if (idx.size() < 2) continue;  // contrastive batches need >= 2 rows
            Tensor images = stack_images(dataset, idx);
            std::vector<int> prompts(idx.size());
            for (size_t i = 0; i < idx.size(); ++i) {
                const auto& ex = dataset.items[static_cast<size_t>(idx[i])];
                prompts[i] = pair_rng.bernoulli(cfg.coarse_prompt_prob)
                                 ? dataset.taxonomy.coarse_prompt_id(ex.superclass)
                                 : dataset.taxonomy.fine_prompt_id(ex.subgroup);
            }

            Graph g;
            Binding b = bind(g, ps, trainable);
            std::vector<Tensor> bm, bv;
            ImageForward f =
                image_forward(g, b, ps, g.constant(images), BnMode::Batch, nullptr, &bm, &bv);
            ValueId te = text_forward(g, b, prompts);
            ValueId loss = contrastive_loss(g, f.embed, te);
            const real loss_v = g.value(loss)[0];
            if (!std::isfinite(loss_v)) throw TrainingError("pre-training loss diverged", step);
            if (log) log->losses.push_back(loss_v);
            g.backward(loss);

            std::map<std::string, Tensor*> params;
            std::map<std::string, const Tensor*> grads;
            for (const auto& l : image_layers_) {
                for (const auto& p : l.param_paths) {
                    params[p] = &ps.at(p);
                    grads[p] = &g.grad(b.params.at(p));
                }
            }
            params["txt.embed.table"] = &ps.at("txt.embed.table");
            grads["txt.embed.table"] = &g.grad(b.params.at("txt.embed.table"));
            adam.step(params, grads);

            // Running statistics track the pre-BN batch moments.
            const auto bn_paths = bn_layer_paths();
            for (size_t i = 0; i < bn_paths.size(); ++i) {
                Tensor& rm = ps.at(bn_paths[i] + ".running_mean");
                Tensor& rv = ps.at(bn_paths[i] + ".running_var");
                for (size_t j = 0; j < rm.size(); ++j) {
                    rm[j] = (1.0 - spec_.bn_momentum) * rm[j] + spec_.bn_momentum * bm[i][j];
                    rv[j] = (1.0 - spec_.bn_momentum) * rv[j] + spec_.bn_momentum * bv[i][j];
                }
            }
            ++step;
        }
    }

    if (log && !holdout.empty()) {
        Tensor images = stack_images(dataset, holdout);
        std::vector<int> coarse_ids, fine_ids;
        for (int c = 0; c < dataset.taxonomy.n_superclasses; ++c) {
            coarse_ids.push_back(dataset.taxonomy.coarse_prompt_id(c));
        }
        for (int s = 0; s < dataset.taxonomy.n_subgroups(); ++s) {
            fine_ids.push_back(dataset.taxonomy.fine_prompt_id(s));
        }
        auto coarse = zero_shot_classify(ps, images, coarse_ids);
        auto fine = zero_shot_classify(ps, images, fine_ids);
        int ok_c = 0, ok_f = 0;
        for (size_t i = 0; i < holdout.size(); ++i) {
            const auto& ex = dataset.items[static_cast<size_t>(holdout[i])];
            if (coarse.predicted[i] == ex.superclass) ++ok_c;
            if (fine.predicted[i] == ex.subgroup) ++ok_f;
        }
        log->holdout_accuracy_coarse = static_cast<real>(ok_c) / static_cast<real>(holdout.size());
        log->holdout_accuracy_fine = static_cast<real>(ok_f) / static_cast<real>(holdout.size());
    }
    return ps;
}

real cosine_similarity(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw ShapeError("cosine_similarity size mismatch");
    const real na = a.l2_norm();
    const real nb = b.l2_norm();
    if (na == 0.0 || nb == 0.0) {
        throw DegenerateInputError("cosine similarity of a zero vector is undefined");
    }
    real dot = 0.0;
    for (size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
    return std::clamp(dot / (na * nb), -1.0, 1.0);
}

}  // namespace unlearn
