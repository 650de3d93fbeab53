#pragma once

#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nsp/grid.hpp"
#include "nsp/latent.hpp"
#include "nsp/objective.hpp"
#include "nsp/rng.hpp"
#include "nsp/tensor.hpp"

namespace nsp {

struct ModelConfig {
    int hidden = 128;          // trunk width
    int latent_channels = 64;  // D
    int downsample = 4;        // r; realized as stride-2 stages
    int stage_blocks = 2;      // residual blocks per encoder/decoder stage
    int fusion_blocks = 3;
    int sde_hidden = 64;
    double dropout = 0.1;
    double logvar_min = -6.0;
    double logvar_max = -0.18;
    double sigma_floor = 1e-4;
    double dt = 1.0;

    void validate() const {
        if (hidden < 1 || latent_channels < 1 || sde_hidden < 1)
            throw ConfigError("model widths must be >= 1");
        if (downsample != 2 && downsample != 4)
            throw ConfigError("downsample must be 2 or 4 (stride-2 stages)");
        if (stage_blocks < 0 || fusion_blocks < 0) throw ConfigError("negative block count");
        if (!(logvar_min < logvar_max)) throw ConfigError("logvar range empty");
        if (sigma_floor <= 0.0) throw ConfigError("sigma_floor must be > 0");
        if (dt <= 0.0) throw ConfigError("dt must be > 0");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    }
    int stages() const { return downsample == 4 ? 2 : 1; }
};

/// Latent geometry for a padded H x W input.
struct LatentSpec {
    int channels;
    int downsample;
    int latent_h;
    int latent_w;
};

inline int pad_to_multiple(int v, int m) { return (v + m - 1) / m * m; }

inline LatentSpec latent_spec_for(const ModelConfig& cfg, int height, int width) {
    const int hp = pad_to_multiple(height, cfg.downsample);
    const int wp = pad_to_multiple(width, cfg.downsample);
    return {cfg.latent_channels, cfg.downsample, hp / cfg.downsample, wp / cfg.downsample};
}

// ---------------------------------------------------------------------------
// Layers.
// ---------------------------------------------------------------------------

struct TrainMode {
    bool training = false;
    Rng* rng = nullptr;
};

struct Conv {
    Tensor w;
    Tensor b;
    int stride = 1;

    static Conv make(int in_ch, int out_ch, int k, int stride, Rng& rng,
                     bool zero_init = false, double bias_init = 0.0) {
        Conv c;
        const double bound = zero_init ? 0.0 : std::sqrt(1.0 / (in_ch * k * k));
        c.w = zero_init ? Tensor::zeros({out_ch, in_ch, k, k}, true)
                        : Tensor::uniform_init({out_ch, in_ch, k, k}, bound, rng, true);
        c.b = Tensor::full({out_ch}, bias_init, true);
        c.stride = stride;
        return c;
    }
    Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride); }
};

struct ResBlock {
    Conv c1, c2;

    static ResBlock make(int ch, Rng& rng) {
        return {Conv::make(ch, ch, 3, 1, rng), Conv::make(ch, ch, 3, 1, rng)};
    }
    Tensor forward(const Tensor& x, double dropout_rate, const TrainMode& mode) const {
        Tensor h = relu(c1(x));
        if (mode.training && dropout_rate > 0.0 && mode.rng)
            h = dropout(h, dropout_rate, *mode.rng);
        return relu(add(x, c2(h)));
    }
};

struct Encoder {
    Conv stem;                    // 4 -> hidden, stride 2
    std::vector<ResBlock> stage1;
    Conv down;                    // hidden -> hidden, stride 2 (two-stage only)
    std::vector<ResBlock> stage2;
    Conv head_mean;
    Conv head_logvar;
};

struct SdeNet {
    Conv f1, f2;  // drift; final layer zero-initialized (identity transition)
    Conv s1, s2;  // diffusion; sigma = softplus(raw) + sigma_floor
};

struct Decoder {
    Conv up1;  // D -> hidden after first x2 upsample
    std::vector<ResBlock> stage1;
    Conv up2;  // hidden -> hidden after second x2 upsample (two-stage only)
    std::vector<ResBlock> stage2;
    Conv fuse;  // hidden + satellite + elevation -> hidden
    std::vector<ResBlock> fusion;
    Conv head_delta;
    Conv head_logvar;
};

struct NspModel {
    ModelConfig cfg;
    Encoder enc;
    SdeNet sde;
    Decoder dec;

    static NspModel init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        NspModel m;
        m.cfg = cfg;
        Rng rng(derive_seed(seed, "model-init"));
        const int h = cfg.hidden, d = cfg.latent_channels, sh = cfg.sde_hidden;
        m.enc.stem = Conv::make(4, h, 3, 2, rng);
        for (int i = 0; i < cfg.stage_blocks; ++i) m.enc.stage1.push_back(ResBlock::make(h, rng));
        if (cfg.stages() == 2) {
            m.enc.down = Conv::make(h, h, 3, 2, rng);
            for (int i = 0; i < cfg.stage_blocks; ++i)
                m.enc.stage2.push_back(ResBlock::make(h, rng));
        }
        m.enc.head_mean = Conv::make(h, d, 3, 1, rng);
        m.enc.head_logvar = Conv::make(h, d, 3, 1, rng, false, -1.0);

        m.sde.f1 = Conv::make(d, sh, 3, 1, rng);
        m.sde.f2 = Conv::make(sh, d, 3, 1, rng, /*zero_init=*/true);
        m.sde.s1 = Conv::make(d, sh, 3, 1, rng);
        m.sde.s2 = Conv::make(sh, d, 3, 1, rng);

        m.dec.up1 = Conv::make(d, h, 3, 1, rng);
        for (int i = 0; i < cfg.stage_blocks; ++i) m.dec.stage1.push_back(ResBlock::make(h, rng));
        if (cfg.stages() == 2) {
            m.dec.up2 = Conv::make(h, h, 3, 1, rng);
            for (int i = 0; i < cfg.stage_blocks; ++i)
                m.dec.stage2.push_back(ResBlock::make(h, rng));
        }
        m.dec.fuse = Conv::make(h + 2, h, 3, 1, rng);
        for (int i = 0; i < cfg.fusion_blocks; ++i) m.dec.fusion.push_back(ResBlock::make(h, rng));
        m.dec.head_delta = Conv::make(h, 1, 3, 1, rng);
        m.dec.head_logvar = Conv::make(h, 1, 3, 1, rng, false, -1.0);
        return m;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() const {
        std::vector<std::pair<std::string, Tensor>> out;
        auto conv = [&](const std::string& name, const Conv& c) {
            if (!c.w.defined()) return;
            out.emplace_back(name + ".w", c.w);
            out.emplace_back(name + ".b", c.b);
        };
        auto blocks = [&](const std::string& name, const std::vector<ResBlock>& bs) {
            for (std::size_t i = 0; i < bs.size(); ++i) {
                conv(name + "." + std::to_string(i) + ".c1", bs[i].c1);
                conv(name + "." + std::to_string(i) + ".c2", bs[i].c2);
            }
        };
        conv("enc.stem", enc.stem);
        blocks("enc.stage1", enc.stage1);
        conv("enc.down", enc.down);
        blocks("enc.stage2", enc.stage2);
        conv("enc.head_mean", enc.head_mean);
        conv("enc.head_logvar", enc.head_logvar);
        conv("sde.f1", sde.f1);
        conv("sde.f2", sde.f2);
        conv("sde.s1", sde.s1);
        conv("sde.s2", sde.s2);
        conv("dec.up1", dec.up1);
        blocks("dec.stage1", dec.stage1);
        conv("dec.up2", dec.up2);
        blocks("dec.stage2", dec.stage2);
        conv("dec.fuse", dec.fuse);
        blocks("dec.fusion", dec.fusion);
        conv("dec.head_delta", dec.head_delta);
        conv("dec.head_logvar", dec.head_logvar);
        return out;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named_params()) n += t.numel();
        return n;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_params()) out.push_back(t);
        return out;
    }

    /// Parameters whose names start with the given prefix (a parameter group).
    std::vector<Tensor> param_group(const std::string& prefix) const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_params())
            if (name.rfind(prefix, 0) == 0) out.push_back(t);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Forward operations.
// ---------------------------------------------------------------------------

/// Converts a normalized stack into a padded [1, 4, Hp, Wp] tensor where Hp
/// and Wp are the next multiples of the downsampling ratio.
inline Tensor stack_to_tensor(const InputStack& stack, const ModelConfig& cfg) {
    Tensor x = Tensor::from({1, 4, stack.height, stack.width}, stack.data);
    const int hp = pad_to_multiple(stack.height, cfg.downsample);
    const int wp = pad_to_multiple(stack.width, cfg.downsample);
    return pad2d(x, hp - stack.height, wp - stack.width);
}

/// Encoder posterior over the latent field. Input must be padded to a
/// multiple of the downsampling ratio.
inline LatentPosterior encode(const NspModel& m, const Tensor& x, const TrainMode& mode = {}) {
    for (double v : x.values())
        if (!std::isfinite(v)) throw NumericError("encode: non-finite input");
    if (x.ndim() != 4 || x.dim(1) != 4) throw ShapeError("encode: expected [1,4,H,W] input");
    if (x.dim(2) % m.cfg.downsample != 0 || x.dim(3) % m.cfg.downsample != 0)
        throw ShapeError("encode: input dims must be multiples of the downsampling ratio");
    Tensor h = relu(m.enc.stem(x));
    for (const auto& b : m.enc.stage1) h = b.forward(h, m.cfg.dropout, mode);
    if (m.cfg.stages() == 2) {
        h = relu(m.enc.down(h));
        for (const auto& b : m.enc.stage2) h = b.forward(h, m.cfg.dropout, mode);
    }
    LatentPosterior post;
    post.mean = m.enc.head_mean(h);
    post.log_var = clamp(m.enc.head_logvar(h), m.cfg.logvar_min, m.cfg.logvar_max);
    return post;
}

/// z = mu + exp(log_var / 2) * noise; gradients flow through mu and log_var.
inline Tensor reparameterize(const LatentPosterior& post, const Tensor& noise) {
    if (noise.shape() != post.mean.shape()) throw ShapeError("reparameterize: noise shape");
    return add(post.mean, mul(exp_op(scale(post.log_var, 0.5)), noise));
}

inline Tensor sample_noise_like(const Tensor& like, Rng& rng) {
    std::vector<double> v(like.numel());
    for (auto& e : v) e = rng.normal();
    return Tensor::from(like.shape(), std::move(v));
}

/// One Euler-Maruyama step of the latent SDE from state z.
inline TransitionGaussian sde_step(const NspModel& m, const Tensor& z, double dt = -1.0) {
    if (dt <= 0.0) dt = m.cfg.dt;
    Tensor fh = relu(m.sde.f1(z));
    Tensor f = m.sde.f2(fh);
    Tensor sh = relu(m.sde.s1(z));
    Tensor sigma = add_scalar(softplus(m.sde.s2(sh)), m.cfg.sigma_floor);
    TransitionGaussian t;
    t.mean = add(z, scale(f, dt));
    t.var = scale(square(sigma), dt);
    t.dt = dt;
    return t;
}

/// Draws z_{t+1} ~ N(mean, var) from a transition.
inline Tensor sample_transition(const TransitionGaussian& t, Rng& rng) {
    Tensor noise = sample_noise_like(t.mean, rng);
    // sqrt(var) via exp(0.5 log var); var is strictly positive
    Tensor sd = exp_op(scale(log_op(t.var), 0.5));
    return add(t.mean, mul(sd, noise));
}

/// Residual prediction: delta and log-variance heads over the fused decoder
/// trunk; y_hat = max(0, expm1(log1p(satellite) + delta)), cropped to the
/// un-padded grid. Tensors in the result are [1, 1, H, W].
struct Prediction {
    Tensor delta;
    Tensor y_hat;
    Tensor log_var_y;
};

/// sat_norm / elev_norm are the padded [1,1,Hp,Wp] normalized channels
/// (satellite in log1p space); out_h/out_w give the crop back to grid size.
/// With use_residual false the delta head is decoded directly as log1p(y).
inline Prediction decode(const NspModel& m, const Tensor& z, const Tensor& sat_norm,
                         const Tensor& elev_norm, int out_h, int out_w,
                         const TrainMode& mode = {}, bool use_residual = true) {
    Tensor h = relu(m.dec.up1(upsample_nearest(z, 2)));
    for (const auto& b : m.dec.stage1) h = b.forward(h, m.cfg.dropout, mode);
    if (m.cfg.stages() == 2) {
        h = relu(m.dec.up2(upsample_nearest(h, 2)));
        for (const auto& b : m.dec.stage2) h = b.forward(h, m.cfg.dropout, mode);
    }
    if (h.dim(2) != sat_norm.dim(2) || h.dim(3) != sat_norm.dim(3))
        throw ShapeError("decode: latent/satellite spatial mismatch");
    h = relu(m.dec.fuse(concat_channels({h, sat_norm, elev_norm})));
    for (const auto& b : m.dec.fusion) h = b.forward(h, m.cfg.dropout, mode);
    Prediction pred;
    pred.delta = crop2d(m.dec.head_delta(h), out_h, out_w);
    pred.log_var_y = clamp(crop2d(m.dec.head_logvar(h), out_h, out_w), m.cfg.logvar_min,
                           m.cfg.logvar_max);
    Tensor log1p_y = use_residual ? add(crop2d(sat_norm, out_h, out_w), pred.delta) : pred.delta;
    pred.y_hat = relu(expm1_op(log1p_y));
    return pred;
}

// ---------------------------------------------------------------------------
// Inference modes.
// ---------------------------------------------------------------------------

enum class InferMode { Standard, PureRollout, Hybrid };

struct InferOptions {
    InferMode mode = InferMode::Standard;
    double alpha = 0.5;            // hybrid blend: z = alpha * rollout + (1 - alpha) * encoded
    const Tensor* z_prev = nullptr;  // latent carried from the previous hour
    bool deterministic_latent = false;  // use the posterior mean instead of a sample
    bool use_residual = true;
};

struct InferResult {
    Prediction pred;
    Tensor z;                              // latent used by the decoder
    std::optional<LatentPosterior> posterior;  // absent in pure rollout
};

/// Runs one frame through the model. Standard mode encodes the frame and
/// decodes a sampled latent; pure rollout propagates z_prev through the SDE
/// mean without encoding; hybrid linearly blends the two latents.
inline InferResult infer(const NspModel& m, const SampleFrame& frame,
                         const std::vector<GaugeObservation>& context,
                         const InferOptions& opt, Rng& rng) {
    const int H = frame.satellite.spec.height, W = frame.satellite.spec.width;
    InputStack stack = normalize_inputs(frame, context);
    Tensor x = stack_to_tensor(stack, m.cfg);
    const int hp = x.dim(2), wp = x.dim(3);
    // channel copies for the decoder
    std::vector<double> satv(static_cast<std::size_t>(hp) * wp),
        elevv(static_cast<std::size_t>(hp) * wp);
    std::copy(x.values().begin(), x.values().begin() + satv.size(), satv.begin());
    std::copy(x.values().begin() + satv.size(), x.values().begin() + 2 * satv.size(),
              elevv.begin());
    Tensor sat_norm = Tensor::from({1, 1, hp, wp}, std::move(satv));
    Tensor elev_norm = Tensor::from({1, 1, hp, wp}, std::move(elevv));

    InferResult res;
    if (opt.mode == InferMode::PureRollout) {
        if (!opt.z_prev) throw NumericError("infer: rollout mode requires z_prev");
        res.z = sde_step(m, *opt.z_prev).mean;
    } else {
        LatentPosterior post = encode(m, x);
        Tensor z_enc = opt.deterministic_latent
                           ? post.mean
                           : reparameterize(post, sample_noise_like(post.mean, rng));
        if (opt.mode == InferMode::Hybrid) {
            if (!opt.z_prev) throw NumericError("infer: hybrid mode requires z_prev");
            Tensor z_roll = sde_step(m, *opt.z_prev).mean;
            res.z = add(scale(z_roll, opt.alpha), scale(z_enc, 1.0 - opt.alpha));
        } else {
            res.z = z_enc;
        }
        res.posterior = std::move(post);
    }
    res.pred = decode(m, res.z, sat_norm, elev_norm, H, W, {}, opt.use_residual);
    return res;
}

// ---------------------------------------------------------------------------
// Checkpoint format: 8-byte magic "NSPCKPT1", little-endian u32 header
// length, JSON header (architecture, seed, step, named parameter shapes),
// then float32 little-endian parameter blobs in header order.
// ---------------------------------------------------------------------------

namespace detail {
constexpr char kCkptMagic[8] = {'N', 'S', 'P', 'C', 'K', 'P', 'T', '1'};
}

inline void save_checkpoint(const std::string& path, const NspModel& m, std::uint64_t seed,
                            std::int64_t step) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint: " + path);
    os.write(detail::kCkptMagic, 8);
    nlohmann::ordered_json header;
    header["schema_version"] = 1;
    header["config"] = {{"hidden", m.cfg.hidden},
                        {"latent_channels", m.cfg.latent_channels},
                        {"downsample", m.cfg.downsample},
                        {"stage_blocks", m.cfg.stage_blocks},
                        {"fusion_blocks", m.cfg.fusion_blocks},
                        {"sde_hidden", m.cfg.sde_hidden},
                        {"dropout", m.cfg.dropout},
                        {"logvar_min", m.cfg.logvar_min},
                        {"logvar_max", m.cfg.logvar_max},
                        {"sigma_floor", m.cfg.sigma_floor},
                        {"dt", m.cfg.dt}};
    header["seed"] = seed;
    header["step"] = step;
    auto params = m.named_params();
    auto plist = nlohmann::ordered_json::array();
    for (const auto& [name, t] : params) {
        nlohmann::ordered_json e;
        e["name"] = name;
        e["shape"] = t.shape();
        plist.push_back(std::move(e));
    }
    header["params"] = std::move(plist);
    const std::string hs = header.dump();
    detail::write_u32_le(os, static_cast<std::uint32_t>(hs.size()));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : params) {
        std::vector<float> blob(t.numel());
        for (std::size_t i = 0; i < blob.size(); ++i)
            blob[i] = static_cast<float>(t.values()[i]);
        os.write(reinterpret_cast<const char*>(blob.data()),
                 static_cast<std::streamsize>(blob.size() * 4));
    }
    if (!os) throw DataError("checkpoint write failed: " + path);
}

struct Checkpoint {
    NspModel model;
    std::uint64_t seed = 0;
    std::int64_t step = 0;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw DataError("checkpoint: bad magic in " + path);
    const std::uint32_t hlen = detail::read_u32_le(is);
    std::string hs(hlen, '\0');
    is.read(hs.data(), hlen);
    if (!is) throw DataError("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint: malformed header: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    ModelConfig cfg;
    try {
        const auto& c = header.at("config");
        cfg.hidden = c.at("hidden").get<int>();
        cfg.latent_channels = c.at("latent_channels").get<int>();
        cfg.downsample = c.at("downsample").get<int>();
        cfg.stage_blocks = c.at("stage_blocks").get<int>();
        cfg.fusion_blocks = c.at("fusion_blocks").get<int>();
        cfg.sde_hidden = c.at("sde_hidden").get<int>();
        cfg.dropout = c.at("dropout").get<double>();
        cfg.logvar_min = c.at("logvar_min").get<double>();
        cfg.logvar_max = c.at("logvar_max").get<double>();
        cfg.sigma_floor = c.at("sigma_floor").get<double>();
        cfg.dt = c.at("dt").get<double>();
        ckpt.seed = header.at("seed").get<std::uint64_t>();
        ckpt.step = header.at("step").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint: missing key: " + std::string(e.what()));
    }
    ckpt.model = NspModel::init(cfg, ckpt.seed);
    auto params = ckpt.model.named_params();
    const auto& plist = header.at("params");
    if (plist.size() != params.size())
        throw DataError("checkpoint: parameter list mismatch (architecture changed?)");
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = plist[i];
        if (e.at("name").get<std::string>() != params[i].first)
            throw DataError("checkpoint: parameter order mismatch at " + params[i].first);
        auto shape = e.at("shape").get<std::vector<int>>();
        if (shape != params[i].second.shape())
            throw DataError("checkpoint: shape mismatch at " + params[i].first);
        std::vector<float> blob(params[i].second.numel());
        is.read(reinterpret_cast<char*>(blob.data()),
                static_cast<std::streamsize>(blob.size() * 4));
        if (!is) throw DataError("checkpoint: truncated blob at " + params[i].first);
        auto& vals = const_cast<Tensor&>(params[i].second).values_mut();
        for (std::size_t j = 0; j < blob.size(); ++j) vals[j] = static_cast<double>(blob[j]);
    }
    return ckpt;
}

}  // namespace nsp
