#include "mrf/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>

#include "mrf/checkpoint.hpp"
#include "mrf/embedding_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mrf {

namespace {

// ---- json plumbing ----

void check_keys(const json& j, const std::string& ctx,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) raise(Err::ConfigError, ctx + " must be an object");
    for (const auto& [key, _] : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(),
                         [&](const char* a) { return key == a; }) == allowed.end())
            raise(Err::ConfigError, "unknown key '" + key + "' in " + ctx);
    }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

BlobDatasetConfig data_from_json(const json& j) {
    BlobDatasetConfig cfg;
    check_keys(j, "data", {"layout", "n_classes", "n_per_class", "grid", "patch", "dim",
                           "spread", "noise", "seed"});
    cfg.layout = blob_layout_from_name(get_or<std::string>(j, "layout",
                                                           blob_layout_name(cfg.layout)));
    cfg.n_classes = get_or(j, "n_classes", cfg.n_classes);
    cfg.n_per_class = get_or(j, "n_per_class", cfg.n_per_class);
    cfg.grid = get_or(j, "grid", cfg.grid);
    cfg.patch = get_or(j, "patch", cfg.patch);
    cfg.dim = get_or(j, "dim", cfg.dim);
    cfg.spread = get_or(j, "spread", cfg.spread);
    cfg.noise = get_or(j, "noise", cfg.noise);
    cfg.seed = get_or(j, "seed", cfg.seed);
    return cfg;
}

json data_to_json(const BlobDatasetConfig& cfg) {
    return {{"layout", blob_layout_name(cfg.layout)}, {"n_classes", cfg.n_classes},
            {"n_per_class", cfg.n_per_class},         {"grid", cfg.grid},
            {"patch", cfg.patch},                     {"dim", cfg.dim},
            {"spread", cfg.spread},                   {"noise", cfg.noise},
            {"seed", cfg.seed}};
}

EncoderConfig encoder_from_json(const json& j) {
    EncoderConfig cfg;
    check_keys(j, "encoder", {"depth", "width", "block_kind", "tokens", "token_dim",
                              "mlp_hidden"});
    cfg.depth = get_or(j, "depth", cfg.depth);
    cfg.width = get_or(j, "width", cfg.width);
    cfg.block_kind = block_kind_from_name(get_or<std::string>(j, "block_kind",
                                                              block_kind_name(cfg.block_kind)));
    cfg.tokens = get_or(j, "tokens", cfg.tokens);
    cfg.token_dim = get_or(j, "token_dim", cfg.token_dim);
    cfg.mlp_hidden = get_or(j, "mlp_hidden", cfg.mlp_hidden);
    return cfg;
}

json encoder_to_json(const EncoderConfig& cfg) {
    return {{"depth", cfg.depth},       {"width", cfg.width},
            {"block_kind", block_kind_name(cfg.block_kind)},
            {"tokens", cfg.tokens},     {"token_dim", cfg.token_dim},
            {"mlp_hidden", cfg.mlp_hidden}};
}

MimConfig mim_from_json(const json& j) {
    MimConfig cfg;
    check_keys(j, "mim", {"mask_ratio", "decoder_depth", "decoder_width", "epochs", "batch",
                          "lr", "probe_epochs"});
    cfg.mask_ratio = get_or(j, "mask_ratio", cfg.mask_ratio);
    cfg.decoder_depth = get_or(j, "decoder_depth", cfg.decoder_depth);
    cfg.decoder_width = get_or(j, "decoder_width", cfg.decoder_width);
    cfg.epochs = get_or(j, "epochs", cfg.epochs);
    cfg.batch = get_or(j, "batch", cfg.batch);
    cfg.lr = get_or(j, "lr", cfg.lr);
    cfg.probe_epochs = get_or(j, "probe_epochs", cfg.probe_epochs);
    return cfg;
}

json mim_to_json(const MimConfig& cfg) {
    return {{"mask_ratio", cfg.mask_ratio},       {"decoder_depth", cfg.decoder_depth},
            {"decoder_width", cfg.decoder_width}, {"epochs", cfg.epochs},
            {"batch", cfg.batch},                 {"lr", cfg.lr},
            {"probe_epochs", cfg.probe_epochs}};
}

ViewConfig views_from_json(const json& j) {
    ViewConfig cfg;
    check_keys(j, "refine.views", {"n_global", "n_local", "global_scale_lo", "global_scale_hi",
                                   "local_scale_lo", "local_scale_hi", "color_jitter",
                                   "jitter_sd"});
    cfg.n_global = get_or(j, "n_global", cfg.n_global);
    cfg.n_local = get_or(j, "n_local", cfg.n_local);
    cfg.global_scale_lo = get_or(j, "global_scale_lo", cfg.global_scale_lo);
    cfg.global_scale_hi = get_or(j, "global_scale_hi", cfg.global_scale_hi);
    cfg.local_scale_lo = get_or(j, "local_scale_lo", cfg.local_scale_lo);
    cfg.local_scale_hi = get_or(j, "local_scale_hi", cfg.local_scale_hi);
    cfg.color_jitter = get_or(j, "color_jitter", cfg.color_jitter);
    cfg.jitter_sd = get_or(j, "jitter_sd", cfg.jitter_sd);
    return cfg;
}

json views_to_json(const ViewConfig& cfg) {
    return {{"n_global", cfg.n_global},
            {"n_local", cfg.n_local},
            {"global_scale_lo", cfg.global_scale_lo},
            {"global_scale_hi", cfg.global_scale_hi},
            {"local_scale_lo", cfg.local_scale_lo},
            {"local_scale_hi", cfg.local_scale_hi},
            {"color_jitter", cfg.color_jitter},
            {"jitter_sd", cfg.jitter_sd}};
}

RefineConfig refine_from_json(const json& j) {
    RefineConfig cfg;
    check_keys(j, "refine",
               {"epochs", "batch", "peak_lr", "warmup_epochs", "end_lr", "layer_decay",
                "freeze_blocks", "encoder_wd", "head_wd", "beta1", "beta2", "temperature",
                "queue_capacity", "queue_top_k", "ema_momentum", "views", "schedule",
                "swap_negatives", "init_epochs", "init_lr", "knn_log_every",
                "knn_log_subset"});
    cfg.epochs = get_or(j, "epochs", cfg.epochs);
    cfg.batch = get_or(j, "batch", cfg.batch);
    cfg.peak_lr = get_or(j, "peak_lr", cfg.peak_lr);
    cfg.warmup_epochs = get_or(j, "warmup_epochs", cfg.warmup_epochs);
    cfg.end_lr = get_or(j, "end_lr", cfg.end_lr);
    cfg.layer_decay = get_or(j, "layer_decay", cfg.layer_decay);
    cfg.freeze_blocks = get_or(j, "freeze_blocks", cfg.freeze_blocks);
    cfg.encoder_wd = get_or(j, "encoder_wd", cfg.encoder_wd);
    cfg.head_wd = get_or(j, "head_wd", cfg.head_wd);
    cfg.beta1 = get_or(j, "beta1", cfg.beta1);
    cfg.beta2 = get_or(j, "beta2", cfg.beta2);
    cfg.temperature = get_or(j, "temperature", cfg.temperature);
    cfg.queue.capacity = get_or(j, "queue_capacity", cfg.queue.capacity);
    cfg.queue.top_k = get_or(j, "queue_top_k", cfg.queue.top_k);
    cfg.ema_momentum = get_or(j, "ema_momentum", cfg.ema_momentum);
    if (j.contains("views")) cfg.views = views_from_json(j.at("views"));
    cfg.schedule = schedule_kind_from_name(get_or<std::string>(j, "schedule",
                                                               schedule_kind_name(cfg.schedule)));
    cfg.swap_negatives = get_or(j, "swap_negatives", cfg.swap_negatives);
    cfg.init_epochs = get_or(j, "init_epochs", cfg.init_epochs);
    cfg.init_lr = get_or(j, "init_lr", cfg.init_lr);
    cfg.knn_log_every = get_or(j, "knn_log_every", cfg.knn_log_every);
    cfg.knn_log_subset = get_or(j, "knn_log_subset", cfg.knn_log_subset);
    return cfg;
}

json refine_to_json(const RefineConfig& cfg) {
    return {{"epochs", cfg.epochs},
            {"batch", cfg.batch},
            {"peak_lr", cfg.peak_lr},
            {"warmup_epochs", cfg.warmup_epochs},
            {"end_lr", cfg.end_lr},
            {"layer_decay", cfg.layer_decay},
            {"freeze_blocks", cfg.freeze_blocks},
            {"encoder_wd", cfg.encoder_wd},
            {"head_wd", cfg.head_wd},
            {"beta1", cfg.beta1},
            {"beta2", cfg.beta2},
            {"temperature", cfg.temperature},
            {"queue_capacity", cfg.queue.capacity},
            {"queue_top_k", cfg.queue.top_k},
            {"ema_momentum", cfg.ema_momentum},
            {"views", views_to_json(cfg.views)},
            {"schedule", schedule_kind_name(cfg.schedule)},
            {"swap_negatives", cfg.swap_negatives},
            {"init_epochs", cfg.init_epochs},
            {"init_lr", cfg.init_lr},
            {"knn_log_every", cfg.knn_log_every},
            {"knn_log_subset", cfg.knn_log_subset}};
}

HeadsSpec heads_from_json(const json& j) {
    HeadsSpec spec;
    check_keys(j, "heads", {"attach", "projector_dims", "predictor_dims"});
    spec.attach = get_or(j, "attach", spec.attach);
    spec.projector_dims = get_or(j, "projector_dims", spec.projector_dims);
    spec.predictor_dims = get_or(j, "predictor_dims", spec.predictor_dims);
    return spec;
}

json heads_to_json(const HeadsSpec& spec) {
    return {{"attach", spec.attach},
            {"projector_dims", spec.projector_dims},
            {"predictor_dims", spec.predictor_dims}};
}

ProbeStageConfig probe_from_json(const json& j) {
    ProbeStageConfig cfg;
    check_keys(j, "probe", {"knn_k", "knn_temperature", "linear_epochs", "linear_lr",
                            "linear_wd", "low_shot", "test_fraction", "low_shot_seed"});
    cfg.knn.k = get_or(j, "knn_k", cfg.knn.k);
    cfg.knn.temperature = get_or(j, "knn_temperature", cfg.knn.temperature);
    cfg.linear_epochs = get_or(j, "linear_epochs", cfg.linear_epochs);
    cfg.linear_lr = get_or(j, "linear_lr", cfg.linear_lr);
    cfg.linear_wd = get_or(j, "linear_wd", cfg.linear_wd);
    cfg.low_shot = get_or(j, "low_shot", cfg.low_shot);
    cfg.test_fraction = get_or(j, "test_fraction", cfg.test_fraction);
    cfg.low_shot_seed = get_or(j, "low_shot_seed", cfg.low_shot_seed);
    return cfg;
}

json probe_to_json(const ProbeStageConfig& cfg) {
    return {{"knn_k", cfg.knn.k},
            {"knn_temperature", cfg.knn.temperature},
            {"linear_epochs", cfg.linear_epochs},
            {"linear_lr", cfg.linear_lr},
            {"linear_wd", cfg.linear_wd},
            {"low_shot", cfg.low_shot},
            {"test_fraction", cfg.test_fraction},
            {"low_shot_seed", cfg.low_shot_seed}};
}

ClusterStageConfig cluster_from_json(const json& j) {
    ClusterStageConfig cfg;
    check_keys(j, "cluster", {"k", "minibatch", "iterations", "restarts", "seed", "per_block"});
    cfg.kmeans.k = get_or(j, "k", cfg.kmeans.k);
    cfg.kmeans.minibatch = get_or(j, "minibatch", cfg.kmeans.minibatch);
    cfg.kmeans.iterations = get_or(j, "iterations", cfg.kmeans.iterations);
    cfg.kmeans.restarts = get_or(j, "restarts", cfg.kmeans.restarts);
    cfg.kmeans.seed = get_or(j, "seed", cfg.kmeans.seed);
    cfg.per_block = get_or(j, "per_block", cfg.per_block);
    return cfg;
}

json cluster_to_json(const ClusterStageConfig& cfg) {
    return {{"k", cfg.kmeans.k},           {"minibatch", cfg.kmeans.minibatch},
            {"iterations", cfg.kmeans.iterations}, {"restarts", cfg.kmeans.restarts},
            {"seed", cfg.kmeans.seed},     {"per_block", cfg.per_block}};
}

// ---- stage bookkeeping ----

const std::vector<std::string> kCanonicalStages = {"pretrain", "analyze_blocks", "init_heads",
                                                   "refine",   "probe",          "cluster"};

std::uint64_t stage_stream_id(const std::string& stage) {
    for (std::size_t i = 0; i < kCanonicalStages.size(); ++i)
        if (kCanonicalStages[i] == stage) return i + 1;
    raise(Err::ConfigError, "unknown stage '" + stage + "'");
}

std::string out_path(const ExperimentConfig& cfg, const std::string& file) {
    return (fs::path(cfg.out_dir) / file).string();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) raise(Err::IoFailure, "cannot open " + path + " for writing");
    out << text;
    if (!out) raise(Err::IoFailure, "write failed on " + path);
}

void write_section(const ExperimentConfig& cfg, const std::string& stage, const json& section) {
    write_text(out_path(cfg, stage + ".json"), section.dump(2) + "\n");
}

void ensure_finite(const json& j, const std::string& where) {
    if (j.is_number_float()) {
        if (!std::isfinite(j.get<double>()))
            raise(Err::NonFiniteLoss, "non-finite value at " + where);
    } else if (j.is_object()) {
        for (const auto& [key, value] : j.items()) ensure_finite(value, where + "." + key);
    } else if (j.is_array()) {
        std::size_t i = 0;
        for (const auto& value : j) ensure_finite(value, where + "[" + std::to_string(i++) + "]");
    }
}

// Checkpoints remember the configs that shaped their tensors; resuming with a
// different config would scatter parameters into the wrong slots.
void require_matching(const json& stored, const json& current, const std::string& what,
                      const std::string& path) {
    if (stored.dump() != current.dump())
        raise(Err::ConfigError,
              path + " was written with a different " + what + " config; refusing to resume");
}

struct Split {
    std::vector<std::size_t> train, test;
};

Split class_tail_split(const BlobDatasetConfig& data, double test_fraction) {
    const std::size_t per = data.n_per_class;
    const auto test_count = static_cast<std::size_t>(std::llround(test_fraction * per));
    if (test_count == 0 || test_count >= per)
        raise(Err::ConfigError, "test fraction leaves an empty split");
    Split s;
    for (std::size_t c = 0; c < data.n_classes; ++c)
        for (std::size_t i = 0; i < per; ++i)
            (i < per - test_count ? s.train : s.test).push_back(c * per + i);
    return s;
}

Matrix take_rows(const Matrix& x, const std::vector<std::size_t>& idx) {
    Matrix out(idx.size(), x.cols);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(x.row(idx[i]), x.cols, out.row(i));
    return out;
}

std::vector<std::int32_t> take_labels(const std::vector<std::int32_t>& y,
                                      const std::vector<std::size_t>& idx) {
    std::vector<std::int32_t> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = y[idx[i]];
    return out;
}

Matrix final_features(const EncoderParams& params, const Matrix& x) {
    return encode(params, x, Collect::final_only).cls_per_block.back();
}

// ---- artifact packing ----

void pack_encoder(Checkpoint& ck, EncoderParams& params) {
    pack_views(ck, "encoder", params.trainable_views());
}

EncoderParams unpack_encoder(const Checkpoint& ck, const EncoderConfig& cfg) {
    RngStream scratch(0);
    EncoderParams params = EncoderParams::init(cfg, scratch);
    unpack_views(ck, "encoder", params.trainable_views());
    return params;
}

std::vector<std::span<double>> head_stat_views(HeadParams& head) {
    std::vector<std::span<double>> views;
    for (auto& layer : head.layers) {
        if (!layer.bn) continue;
        views.emplace_back(layer.run_mean);
        views.emplace_back(layer.run_var);
    }
    return views;
}

void pack_ensemble(Checkpoint& ck, HeadEnsemble& ens) {
    for (std::size_t h = 0; h < ens.heads.size(); ++h) {
        const std::string base = "head" + std::to_string(h);
        pack_views(ck, base, ens.heads[h].trainable_views());
        pack_views(ck, base + "/stats", head_stat_views(ens.heads[h]));
        const Matrix vectors = ens.queues[h].snapshot_vectors();
        ck.add(base + "/queue", vectors.data);
        const auto labels = ens.queues[h].snapshot_labels();
        std::vector<double> as_double(labels.begin(), labels.end());
        ck.add(base + "/queue_labels", as_double);
    }
}

void unpack_ensemble(const Checkpoint& ck, HeadEnsemble& ens) {
    for (std::size_t h = 0; h < ens.heads.size(); ++h) {
        const std::string base = "head" + std::to_string(h);
        unpack_views(ck, base, ens.heads[h].trainable_views());
        unpack_views(ck, base + "/stats", head_stat_views(ens.heads[h]));
        const std::vector<double>& flat = ck.tensor(base + "/queue");
        const std::size_t dim = ens.queues[h].dim();
        if (dim == 0 || flat.size() % dim != 0)
            raise(Err::ConfigError, base + "/queue size does not divide the bottleneck width");
        Matrix vectors(flat.size() / dim, dim);
        vectors.data = flat;
        const std::vector<double>& raw_labels = ck.tensor(base + "/queue_labels");
        if (vectors.rows > 0) {
            std::vector<std::int32_t> labels(raw_labels.size());
            for (std::size_t i = 0; i < labels.size(); ++i)
                labels[i] = static_cast<std::int32_t>(raw_labels[i]);
            ens.queues[h].enqueue_batch(vectors, labels.empty() ? nullptr : &labels);
        }
    }
}

// ---- the stages ----

struct StageContext {
    const ExperimentConfig& cfg;
    std::optional<BlobDataset> data;
    std::optional<EncoderParams> pretrained;
    std::optional<HeadEnsemble> heads;
    std::optional<EncoderParams> refined;

    const BlobDataset& dataset() {
        if (!data) data = generate_blobs(cfg.data);
        return *data;
    }
};

const EncoderParams& require_pretrained(StageContext& ctx) {
    if (ctx.pretrained) return *ctx.pretrained;
    const std::string path = out_path(ctx.cfg, "pretrain.mrfc");
    if (!fs::exists(path))
        raise(Err::ConfigError, "needs " + path + "; run the pretrain stage first");
    const Checkpoint ck = load_checkpoint(path);
    require_matching(ck.meta.at("encoder"), encoder_to_json(ctx.cfg.encoder), "encoder", path);
    ctx.pretrained = unpack_encoder(ck, ctx.cfg.encoder);
    return *ctx.pretrained;
}

json ensemble_meta(const ExperimentConfig& cfg) {
    const EnsembleConfig ens = cfg.ensemble();
    json heads = json::array();
    for (const auto& hc : ens.head_configs)
        heads.push_back({{"input_dim", hc.input_dim},
                         {"projector_dims", hc.projector_dims},
                         {"predictor_dims", hc.predictor_dims}});
    return {{"attach", ens.attach_indices},
            {"heads", heads},
            {"queue_capacity", cfg.refine.queue.capacity},
            {"queue_top_k", cfg.refine.queue.top_k}};
}

HeadEnsemble& require_heads(StageContext& ctx, const char* checkpoint_name) {
    if (ctx.heads) return *ctx.heads;
    const std::string path = out_path(ctx.cfg, checkpoint_name);
    if (!fs::exists(path))
        raise(Err::ConfigError, "needs " + path + "; run the init_heads stage first");
    const Checkpoint ck = load_checkpoint(path);
    require_matching(ck.meta.at("ensemble"), ensemble_meta(ctx.cfg), "head ensemble", path);
    RngStream scratch(0);
    ctx.heads = HeadEnsemble::init(ctx.cfg.encoder, ctx.cfg.ensemble(), ctx.cfg.refine.queue,
                                   scratch);
    unpack_ensemble(ck, *ctx.heads);
    return *ctx.heads;
}

const EncoderParams* refined_if_available(StageContext& ctx) {
    if (ctx.refined) return &*ctx.refined;
    const std::string path = out_path(ctx.cfg, "refine.mrfc");
    if (!fs::exists(path)) return nullptr;
    const Checkpoint ck = load_checkpoint(path);
    require_matching(ck.meta.at("encoder"), encoder_to_json(ctx.cfg.encoder), "encoder", path);
    ctx.refined = unpack_encoder(ck, ctx.cfg.encoder);
    return &*ctx.refined;
}

json stage_pretrain(StageContext& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    RngStream rng = RngStream(cfg.seed).split(stage_stream_id("pretrain"));
    MimResult res = mim_pretrain(cfg.encoder, cfg.mim, ctx.dataset().samples, rng);

    Checkpoint ck;
    ck.meta = {{"kind", "pretrain"},
               {"seed", cfg.seed},
               {"encoder", encoder_to_json(cfg.encoder)},
               {"epoch_losses", res.epoch_losses}};
    pack_encoder(ck, res.params);
    save_checkpoint(out_path(cfg, "pretrain.mrfc"), ck);

    std::string csv = "epoch,loss\n";
    for (std::size_t e = 0; e < res.epoch_losses.size(); ++e) {
        char line[64];
        std::snprintf(line, sizeof line, "%zu,%.17g\n", e, res.epoch_losses[e]);
        csv += line;
    }
    write_text(out_path(cfg, "mim_loss.csv"), csv);

    ctx.pretrained = std::move(res.params);
    return {{"seed", cfg.seed},
            {"epochs", cfg.mim.epochs},
            {"final_loss", res.epoch_losses.empty() ? 0.0 : res.epoch_losses.back()},
            {"checkpoint", "pretrain.mrfc"},
            {"loss_curve_csv", "mim_loss.csv"}};
}

json stage_analyze_blocks(StageContext& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    const EncoderParams& enc = require_pretrained(ctx);
    const BlobDataset& ds = ctx.dataset();
    const Split split = class_tail_split(cfg.data, cfg.probe.test_fraction);

    std::vector<double> knn_curve =
        per_block_knn(enc, take_rows(ds.samples, split.train), take_labels(ds.labels, split.train),
                      take_rows(ds.samples, split.test), take_labels(ds.labels, split.test),
                      cfg.probe.knn);
    for (double& v : knn_curve) v *= 100.0;

    RngStream rng = RngStream(cfg.seed).split(stage_stream_id("analyze_blocks"));
    const std::vector<double> recon = per_block_reconstruction_probe(enc, cfg.mim,
                                                                     ds.samples, rng);
    return {{"seed", cfg.seed},
            {"per_block_knn", knn_curve},
            {"knn_relative_improvement", relative_improvement(knn_curve)},
            {"reconstruction_loss", recon},
            {"reconstruction_relative_improvement", relative_improvement(recon)}};
}

json stage_init_heads(StageContext& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    const EncoderParams& enc = require_pretrained(ctx);
    const BlobDataset& ds = ctx.dataset();

    RngStream rng = RngStream(cfg.seed).split(stage_stream_id("init_heads"));
    HeadEnsemble ens = HeadEnsemble::init(cfg.encoder, cfg.ensemble(), cfg.refine.queue, rng);
    const std::vector<double> losses =
        init_heads_phase(enc, ens, ds.samples, ds.labels, cfg.data, cfg.refine, rng);

    Checkpoint ck;
    ck.meta = {{"kind", "init_heads"},
               {"seed", cfg.seed},
               {"encoder", encoder_to_json(cfg.encoder)},
               {"ensemble", ensemble_meta(cfg)},
               {"epoch_losses", losses}};
    pack_ensemble(ck, ens);
    save_checkpoint(out_path(cfg, "init_heads.mrfc"), ck);

    json queue_fill = json::array();
    for (const auto& q : ens.queues) queue_fill.push_back(q.filled());
    ctx.heads = std::move(ens);
    return {{"seed", cfg.seed},
            {"epoch_losses", losses},
            {"queue_fill", queue_fill},
            {"checkpoint", "init_heads.mrfc"}};
}

json stage_refine(StageContext& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    EncoderParams enc = require_pretrained(ctx); // copy: the stage refines its own
    HeadEnsemble& ens = require_heads(ctx, "init_heads.mrfc");

    RngStream rng = RngStream(cfg.seed).split(stage_stream_id("refine"));
    RefineResult res = refine(enc, ens, ctx.dataset().samples, ctx.dataset().labels, cfg.data,
                              cfg.refine, rng);

    Checkpoint ck;
    ck.meta = {{"kind", "refine"},
               {"seed", cfg.seed},
               {"encoder", encoder_to_json(cfg.encoder)},
               {"ensemble", ensemble_meta(cfg)},
               {"ema_momentum", cfg.refine.ema_momentum}};
    pack_encoder(ck, enc);
    pack_ensemble(ck, ens);
    std::vector<double> ema_flat;
    for (const auto& s : res.ema.shadow()) ema_flat.insert(ema_flat.end(), s.begin(), s.end());
    ck.add("ema", ema_flat);
    save_checkpoint(out_path(cfg, "refine.mrfc"), ck);
    write_text(out_path(cfg, "refine_logs.csv"), logs_to_csv(res.logs));

    json section = {{"seed", cfg.seed},
                    {"steps", res.logs.rows.size()},
                    {"epoch_swap", res.logs.epoch_swap},
                    {"checkpoint", "refine.mrfc"},
                    {"logs_csv", "refine_logs.csv"}};
    if (!res.logs.rows.empty()) {
        section["final_head_losses"] = res.logs.rows.back().head_losses;
        section["final_nn_swap"] = res.logs.rows.back().nn_swap;
    }
    if (!res.logs.knn_checks.empty()) {
        json checks = json::array();
        for (const auto& [step, acc] : res.logs.knn_checks)
            checks.push_back({{"step", step}, {"accuracy", acc}});
        section["knn_checks"] = checks;
    }
    ctx.refined = std::move(enc);
    return section;
}

json probe_variant(StageContext& ctx, const EncoderParams& enc, const std::string& name,
                   const Split& split) {
    const ExperimentConfig& cfg = ctx.cfg;
    const BlobDataset& ds = ctx.dataset();
    const Matrix train_x = take_rows(ds.samples, split.train);
    const Matrix test_x = take_rows(ds.samples, split.test);
    const auto train_y = take_labels(ds.labels, split.train);
    const auto test_y = take_labels(ds.labels, split.test);

    std::vector<double> curve = per_block_knn(enc, train_x, train_y, test_x, test_y,
                                              cfg.probe.knn);
    for (double& v : curve) v *= 100.0;

    const Matrix train_f = final_features(enc, train_x);
    const Matrix test_f = final_features(enc, test_x);
    export_embeddings(out_path(cfg, "embeddings_" + name + "_train.mrfe"), train_f, &train_y);
    export_embeddings(out_path(cfg, "embeddings_" + name + "_test.mrfe"), test_f, &test_y);

    ProbeDataset probe_ds{train_f, train_y, test_f, test_y};
    const double linear =
        100.0 * linear_probe(probe_ds, cfg.probe.linear_epochs, cfg.probe.linear_lr,
                             cfg.probe.linear_wd);

    json low_shot = json::object();
    for (std::size_t n : cfg.probe.low_shot) {
        const ProbeDataset shot = low_shot_split(train_f, train_y, n, cfg.probe.low_shot_seed);
        KnnConfig shot_cfg = cfg.probe.knn;
        shot_cfg.k = std::min(shot_cfg.k, shot.train_y.size());
        low_shot[std::to_string(n)] = 100.0 * knn_probe(shot, shot_cfg);
    }

    return {{"per_block_knn", curve},
            {"final_knn", curve.back()},
            {"linear", linear},
            {"low_shot", low_shot},
            {"embeddings", {"embeddings_" + name + "_train.mrfe",
                            "embeddings_" + name + "_test.mrfe"}}};
}

json stage_probe(StageContext& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    const EncoderParams& pre = require_pretrained(ctx);
    const Split split = class_tail_split(cfg.data, cfg.probe.test_fraction);

    json section = {{"seed", cfg.seed},
                    {"train_rows", split.train.size()},
                    {"test_rows", split.test.size()},
                    {"unrefined", probe_variant(ctx, pre, "unrefined", split)}};
    if (const EncoderParams* post = refined_if_available(ctx))
        section["refined"] = probe_variant(ctx, *post, "refined", split);
    return section;
}

json cluster_variant(StageContext& ctx, const EncoderParams& enc, const std::string& name,
                     const Split& split) {
    const ExperimentConfig& cfg = ctx.cfg;
    const std::string exported = out_path(cfg, "embeddings_" + name + "_test.mrfe");

    Matrix features;
    std::vector<std::int32_t> truth;
    if (fs::exists(exported)) {
        EmbeddingData loaded = import_embeddings(exported);
        if (loaded.has_labels) {
            features = std::move(loaded.features);
            truth = std::move(loaded.labels);
        }
    }
    if (truth.empty()) {
        const BlobDataset& ds = ctx.dataset();
        features = final_features(enc, take_rows(ds.samples, split.test));
        truth = take_labels(ds.labels, split.test);
    }

    const ClusterMetrics m = cluster_metrics(features, truth, cfg.cluster.kmeans);
    json out = {{"ACC", m.acc}, {"NMI", m.nmi}, {"AMI", m.ami},
                {"ARI", m.ari}, {"SIL", m.sil}, {"DBS", m.dbs}};

    if (cfg.cluster.per_block) {
        const BlobDataset& ds = ctx.dataset();
        const EncodeResult blocks =
            encode(enc, take_rows(ds.samples, split.test), Collect::per_block);
        std::vector<std::vector<std::int32_t>> labelings;
        for (const Matrix& f : blocks.cls_per_block) {
            Matrix normalized = f;
            for (std::size_t i = 0; i < normalized.rows; ++i) {
                double sq = 0.0;
                for (std::size_t j = 0; j < normalized.cols; ++j)
                    sq += normalized(i, j) * normalized(i, j);
                if (sq > 0.0) {
                    const double inv = 1.0 / std::sqrt(sq);
                    for (std::size_t j = 0; j < normalized.cols; ++j) normalized(i, j) *= inv;
                }
            }
            labelings.push_back(minibatch_kmeans(normalized, cfg.cluster.kmeans).labels);
        }
        out["block_similarity"] = block_cluster_similarity(labelings);
    }
    return out;
}

json stage_cluster(StageContext& ctx) {
    const ExperimentConfig& cfg = ctx.cfg;
    const EncoderParams& pre = require_pretrained(ctx);
    const Split split = class_tail_split(cfg.data, cfg.probe.test_fraction);

    json section = {{"seed", cfg.seed},
                    {"unrefined", cluster_variant(ctx, pre, "unrefined", split)}};
    if (const EncoderParams* post = refined_if_available(ctx))
        section["refined"] = cluster_variant(ctx, *post, "refined", split);
    return section;
}

json run_stage(StageContext& ctx, const std::string& stage) {
    if (stage == "pretrain") return stage_pretrain(ctx);
    if (stage == "analyze_blocks") return stage_analyze_blocks(ctx);
    if (stage == "init_heads") return stage_init_heads(ctx);
    if (stage == "refine") return stage_refine(ctx);
    if (stage == "probe") return stage_probe(ctx);
    if (stage == "cluster") return stage_cluster(ctx);
    raise(Err::ConfigError, "unknown stage '" + stage + "'");
}

} // namespace

void ProbeStageConfig::validate() const {
    if (!(test_fraction > 0.0) || !(test_fraction < 1.0))
        raise(Err::ConfigError, "test_fraction must lie in (0, 1)");
    if (linear_epochs == 0) raise(Err::ConfigError, "linear_epochs must be positive");
}

EnsembleConfig ExperimentConfig::ensemble() const {
    EnsembleConfig ens;
    if (heads.attach.empty()) {
        ens = EnsembleConfig::last_third(encoder.depth, encoder.width);
    } else {
        ens.attach_indices = heads.attach;
        for (std::size_t i = 0; i < heads.attach.size(); ++i)
            ens.head_configs.push_back(HeadConfig::desk(encoder.width));
    }
    if (!heads.projector_dims.empty() || !heads.predictor_dims.empty()) {
        for (auto& hc : ens.head_configs) {
            if (!heads.projector_dims.empty()) hc.projector_dims = heads.projector_dims;
            if (!heads.predictor_dims.empty()) hc.predictor_dims = heads.predictor_dims;
        }
    }
    return ens;
}

void ExperimentConfig::validate() const {
    data.validate();
    encoder.validate();
    if (encoder.tokens != data.tokens() || encoder.token_dim != data.token_dim())
        raise(Err::ConfigError, "encoder token layout does not match the data layout");
    mim.validate(encoder);
    ensemble().validate(encoder.depth);
    refine.validate(encoder.depth);
    probe.validate();
    cluster.kmeans.validate();
    std::set<std::string> seen;
    for (const auto& s : stages) {
        stage_stream_id(s); // validates the name
        if (!seen.insert(s).second) raise(Err::ConfigError, "stage '" + s + "' listed twice");
    }
    if (out_dir.empty()) raise(Err::ConfigError, "out_dir must not be empty");
}

ExperimentConfig experiment_from_json(const json& j) {
    try {
        ExperimentConfig cfg;
        check_keys(j, "config", {"seed", "out_dir", "stages", "data", "encoder", "mim", "heads",
                                 "refine", "probe", "cluster"});
        cfg.seed = get_or(j, "seed", cfg.seed);
        cfg.out_dir = get_or(j, "out_dir", cfg.out_dir);
        cfg.stages = get_or(j, "stages", cfg.stages);
        if (j.contains("data")) cfg.data = data_from_json(j.at("data"));
        if (j.contains("encoder")) cfg.encoder = encoder_from_json(j.at("encoder"));
        if (j.contains("mim")) cfg.mim = mim_from_json(j.at("mim"));
        if (j.contains("heads")) cfg.heads = heads_from_json(j.at("heads"));
        if (j.contains("refine")) cfg.refine = refine_from_json(j.at("refine"));
        if (j.contains("probe")) cfg.probe = probe_from_json(j.at("probe"));
        if (j.contains("cluster")) cfg.cluster = cluster_from_json(j.at("cluster"));
        cfg.validate();
        return cfg;
    } catch (const json::exception& e) {
        raise(Err::ConfigError, std::string("config parse: ") + e.what());
    }
}

json experiment_to_json(const ExperimentConfig& cfg) {
    return {{"seed", cfg.seed},
            {"out_dir", cfg.out_dir},
            {"stages", cfg.stages},
            {"data", data_to_json(cfg.data)},
            {"encoder", encoder_to_json(cfg.encoder)},
            {"mim", mim_to_json(cfg.mim)},
            {"heads", heads_to_json(cfg.heads)},
            {"refine", refine_to_json(cfg.refine)},
            {"probe", probe_to_json(cfg.probe)},
            {"cluster", cluster_to_json(cfg.cluster)}};
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) raise(Err::ConfigError, "cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        raise(Err::ConfigError, path + ": " + e.what());
    }
    return experiment_from_json(j);
}

json run_stages(const ExperimentConfig& cfg, const std::vector<std::string>& stages) {
    cfg.validate();
    for (const auto& s : stages) stage_stream_id(s);
    fs::create_directories(cfg.out_dir);

    StageContext ctx{cfg, {}, {}, {}, {}};
    for (const auto& stage : kCanonicalStages) {
        if (std::find(stages.begin(), stages.end(), stage) == stages.end()) continue;
        try {
            const json section = run_stage(ctx, stage);
            ensure_finite(section, stage);
            write_section(cfg, stage, section);
        } catch (const Error& e) {
            throw Error(e.code, "stage " + stage + ": " + e.what());
        }
    }
    return merge_report(cfg);
}

json run_experiment(const ExperimentConfig& cfg) { return run_stages(cfg, cfg.stages); }

json merge_report(const ExperimentConfig& cfg) {
    json report = {{"config", experiment_to_json(cfg)}, {"stages", json::object()}};
    for (const auto& stage : kCanonicalStages) {
        const std::string path = out_path(cfg, stage + ".json");
        if (!fs::exists(path)) continue;
        std::ifstream in(path);
        if (!in) raise(Err::IoFailure, "cannot open " + path);
        json section;
        try {
            in >> section;
        } catch (const json::exception& e) {
            raise(Err::IoFailure, path + ": " + e.what());
        }
        report["stages"][stage] = section;
    }
    fs::create_directories(cfg.out_dir);
    write_text(out_path(cfg, "report.json"), report.dump(2) + "\n");
    return report;
}

} // namespace mrf
