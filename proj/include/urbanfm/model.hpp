#pragma once

#include <memory>
#include <string>

#include "urbanfm/external.hpp"
#include "urbanfm/flow_grid.hpp"

namespace urbanfm {

enum class Variant { Full, NoExternal, StructuralLoss };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::NoExternal: return "ne";
        case Variant::StructuralLoss: return "sl";
    }
    return "?";
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "full") return Variant::Full;
    if (s == "ne") return Variant::NoExternal;
    if (s == "sl") return Variant::StructuralLoss;
    throw ConfigError("unknown variant '" + s + "' (expected full|ne|sl)");
}

struct UrbanFMConfig {
    int M = 16;    // residual blocks
    int F = 128;   // filters
    int N = 4;     // upscaling factor
    int I = 32;    // coarse rows
    int J = 32;    // coarse cols
    Variant variant = Variant::Full;
    int F_o = 1;
    float eps = 1e-7f;  // block-normalization epsilon
    float bn_momentum = 0.1f;
    float bn_eps = 1e-5f;
    std::optional<ExternalConfig> external;

    void validate() const {
        if (N < 2) throw ConfigError("UrbanFMConfig: N must be >= 2");
        if (M < 1 || F < 1 || I < 1 || J < 1) throw ConfigError("UrbanFMConfig: bad dimensions");
        if (variant == Variant::Full && !external)
            throw ConfigError("UrbanFMConfig: variant 'full' requires an external config");
        if (variant == Variant::NoExternal && external)
            throw ConfigError("UrbanFMConfig: variant 'ne' forbids an external config");
    }
    bool has_external() const { return external.has_value(); }
};

template <typename T>
struct ResidualBlock {
    nn::Tensor<T> conv1_w, conv1_b, conv2_w, conv2_b;
    nn::Tensor<T> bn1_gamma, bn1_beta, bn2_gamma, bn2_beta;
    nn::BatchNormState<T> bn1_state, bn2_state;

    void init(int F, std::mt19937& rng) {
        auto mk_conv = [&](nn::Tensor<T>& w, nn::Tensor<T>& b) {
            w = nn::Tensor<T>({F, F, 3, 3}, T(0), true);
            b = nn::Tensor<T>({F}, T(0), true);
            nn::init_fan_in_gaussian(w, F * 9, rng);
        };
        auto mk_bn = [&](nn::Tensor<T>& g, nn::Tensor<T>& b, nn::BatchNormState<T>& s) {
            g = nn::Tensor<T>({F}, T(1), true);
            b = nn::Tensor<T>({F}, T(0), true);
            s.running_mean.assign(F, T(0));
            s.running_var.assign(F, T(1));
        };
        mk_conv(conv1_w, conv1_b);
        mk_bn(bn1_gamma, bn1_beta, bn1_state);
        mk_conv(conv2_w, conv2_b);
        mk_bn(bn2_gamma, bn2_beta, bn2_state);
    }

    nn::Tensor<T> forward(const nn::Tensor<T>& x, bool train, T mom, T eps) {
        auto h = nn::conv2d(x, conv1_w, conv1_b);
        h = nn::batch_norm2d(h, bn1_gamma, bn1_beta, bn1_state, train, mom, eps);
        h = nn::relu(h);
        h = nn::conv2d(h, conv2_w, conv2_b);
        h = nn::batch_norm2d(h, bn2_gamma, bn2_beta, bn2_state, train, mom, eps);
        return nn::add(x, h);
    }
};

// The UrbanFM network: feature extraction over the coarse grid, sub-pixel
// upscaling, block normalization into a per-superregion distribution, and
// optional external factor fusion.
template <typename T>
class UrbanFMModelT {
public:
    UrbanFMConfig cfg;

    nn::Tensor<T> input_conv_w, input_conv_b;
    std::vector<ResidualBlock<T>> resblocks;
    nn::Tensor<T> post_conv_w, post_conv_b, post_bn_gamma, post_bn_beta;
    nn::BatchNormState<T> post_bn_state;
    std::vector<SubPixelBlock<T>> subpixel;
    nn::Tensor<T> output_conv_w, output_conv_b;
    std::optional<ExternalFusion<T>> external;

    static UrbanFMModelT build(const UrbanFMConfig& cfg, unsigned seed) {
        cfg.validate();
        UrbanFMModelT m;
        m.cfg = cfg;
        std::mt19937 rng(seed);
        const int F = cfg.F;
        const int in_c = cfg.has_external() ? 2 : 1;

        m.input_conv_w = nn::Tensor<T>({F, in_c, 9, 9}, T(0), true);
        m.input_conv_b = nn::Tensor<T>({F}, T(0), true);
        nn::init_fan_in_gaussian(m.input_conv_w, in_c * 81, rng);

        m.resblocks.resize(cfg.M);
        for (auto& rb : m.resblocks) rb.init(F, rng);

        m.post_conv_w = nn::Tensor<T>({F, F, 3, 3}, T(0), true);
        m.post_conv_b = nn::Tensor<T>({F}, T(0), true);
        nn::init_fan_in_gaussian(m.post_conv_w, F * 9, rng);
        m.post_bn_gamma = nn::Tensor<T>({F}, T(1), true);
        m.post_bn_beta = nn::Tensor<T>({F}, T(0), true);
        m.post_bn_state.running_mean.assign(F, T(0));
        m.post_bn_state.running_var.assign(F, T(1));

        for (int f : prime_factors(cfg.N)) {
            SubPixelBlock<T> blk;
            blk.init(F, f, rng);
            m.subpixel.push_back(std::move(blk));
        }

        const int out_in_c = cfg.has_external() ? F + 1 : F;
        m.output_conv_w = nn::Tensor<T>({cfg.F_o, out_in_c, 9, 9}, T(0), true);
        m.output_conv_b = nn::Tensor<T>({cfg.F_o}, T(0), true);
        nn::init_fan_in_gaussian(m.output_conv_w, out_in_c * 81, rng);

        if (cfg.has_external()) {
            m.external.emplace();
            m.external->init(*cfg.external, cfg.I, cfg.J, cfg.N, rng);
        }
        return m;
    }

    // coarse_norm: (B,1,I,J) min-max-scaled coarse maps. Returns the
    // distribution map (full/ne) or the normalized-space prediction (sl),
    // shape (B,1,NI,NJ).
    nn::Tensor<T> forward(const nn::Tensor<T>& coarse_norm,
                          const std::vector<ExternalRecord>* records, bool train,
                          std::mt19937* dropout_rng = nullptr) {
        if (coarse_norm.ndim() != 4 || coarse_norm.dim(1) != 1 || coarse_norm.dim(2) != cfg.I ||
            coarse_norm.dim(3) != cfg.J)
            throw ShapeError("forward: expected coarse input of shape (B,1,I,J)");
        const int B = coarse_norm.dim(0);
        const T mom = static_cast<T>(cfg.bn_momentum), beps = static_cast<T>(cfg.bn_eps);

        typename ExternalFusion<T>::Output ext;
        if (cfg.has_external()) {
            if (!records || static_cast<int>(records->size()) != B)
                throw ConfigError("forward: external records required for this variant");
            std::mt19937 dummy(0);
            auto e = external->encode(*records);
            ext = external->forward(e, train, dropout_rng ? *dropout_rng : dummy, mom, beps);
        }

        auto x = cfg.has_external() ? nn::concat_channels(ext.coarse, coarse_norm) : coarse_norm;
        auto low = nn::relu(nn::conv2d(x, input_conv_w, input_conv_b));
        auto h = low;
        for (auto& rb : resblocks) h = rb.forward(h, train, mom, beps);
        h = nn::conv2d(h, post_conv_w, post_conv_b);
        h = nn::batch_norm2d(h, post_bn_gamma, post_bn_beta, post_bn_state, train, mom, beps);
        h = nn::add(low, h);
        for (auto& blk : subpixel) h = blk.forward(h, train, mom, beps);
        if (cfg.has_external()) h = nn::concat_channels(h, ext.fine);
        h = nn::conv2d(h, output_conv_w, output_conv_b);
        h = nn::relu(h);
        if (cfg.variant == Variant::StructuralLoss) return h;
        return nn::block_normalize(h, cfg.N, static_cast<T>(cfg.eps));
    }

    struct Inference {
        std::vector<FlowMap> fine;
        std::vector<DistributionMap> dist;  // empty for variant sl
    };

    // Eval-mode inference on raw (physical-unit) coarse maps.
    Inference infer(const std::vector<FlowMap>& coarse_raw,
                    const std::vector<ExternalRecord>* records, double coarse_scaler,
                    double fine_scaler) {
        nn::NoGradGuard ng;
        const int B = static_cast<int>(coarse_raw.size());
        std::vector<T> in(static_cast<size_t>(B) * cfg.I * cfg.J);
        for (int b = 0; b < B; ++b) {
            if (coarse_raw[b].height != cfg.I || coarse_raw[b].width != cfg.J)
                throw ShapeError("infer: coarse map shape does not match model grid");
            for (size_t i = 0; i < coarse_raw[b].size(); ++i)
                in[b * cfg.I * cfg.J + i] = static_cast<T>(coarse_raw[b].values[i] / coarse_scaler);
        }
        auto out = forward(nn::Tensor<T>::from_data({B, 1, cfg.I, cfg.J}, std::move(in)), records,
                           /*train=*/false);
        Inference res;
        const int NH = cfg.N * cfg.I, NW = cfg.N * cfg.J;
        const ScaleFactor scale(cfg.N);
        for (int b = 0; b < B; ++b) {
            const T* p = out.data().data() + static_cast<size_t>(b) * NH * NW;
            if (cfg.variant == Variant::StructuralLoss) {
                FlowMap f(NH, NW);
                for (size_t i = 0; i < f.size(); ++i)
                    f.values[i] = static_cast<double>(p[i]) * fine_scaler;
                res.fine.push_back(std::move(f));
            } else {
                DistributionMap d(NH, NW);
                for (size_t i = 0; i < d.values.size(); ++i) d.values[i] = p[i];
                // The normalization epsilon leaves each block summing to
                // s/(s+eps) < 1; renormalize exactly so the distributed fine
                // map preserves the coarse mass (blocks with no support stay 0).
                for (int bi = 0; bi < cfg.I; ++bi)
                    for (int bj = 0; bj < cfg.J; ++bj) {
                        double s = 0.0;
                        for (int di = 0; di < cfg.N; ++di)
                            for (int dj = 0; dj < cfg.N; ++dj)
                                s += d.at(bi * cfg.N + di, bj * cfg.N + dj);
                        if (s > 0.0)
                            for (int di = 0; di < cfg.N; ++di)
                                for (int dj = 0; dj < cfg.N; ++dj)
                                    d.at(bi * cfg.N + di, bj * cfg.N + dj) /= s;
                    }
                res.fine.push_back(distribute(coarse_raw[b], d, scale));
                res.dist.push_back(std::move(d));
            }
        }
        return res;
    }

    // Named trainable tensors, in a fixed order.
    std::vector<nn::Parameter<T>> params() {
        std::vector<nn::Parameter<T>> ps;
        auto p = [&](const std::string& n, nn::Tensor<T>& t) { ps.push_back({n, t}); };
        p("input_conv.weight", input_conv_w);
        p("input_conv.bias", input_conv_b);
        for (size_t i = 0; i < resblocks.size(); ++i) {
            const std::string b = "resblock." + std::to_string(i) + ".";
            p(b + "conv1.weight", resblocks[i].conv1_w);
            p(b + "conv1.bias", resblocks[i].conv1_b);
            p(b + "bn1.gamma", resblocks[i].bn1_gamma);
            p(b + "bn1.beta", resblocks[i].bn1_beta);
            p(b + "conv2.weight", resblocks[i].conv2_w);
            p(b + "conv2.bias", resblocks[i].conv2_b);
            p(b + "bn2.gamma", resblocks[i].bn2_gamma);
            p(b + "bn2.beta", resblocks[i].bn2_beta);
        }
        p("post_conv.weight", post_conv_w);
        p("post_conv.bias", post_conv_b);
        p("post_bn.gamma", post_bn_gamma);
        p("post_bn.beta", post_bn_beta);
        for (size_t i = 0; i < subpixel.size(); ++i) {
            const std::string b = "subpixel." + std::to_string(i) + ".";
            p(b + "conv.weight", subpixel[i].conv_w);
            p(b + "conv.bias", subpixel[i].conv_b);
            p(b + "bn.gamma", subpixel[i].bn_gamma);
            p(b + "bn.beta", subpixel[i].bn_beta);
        }
        p("output_conv.weight", output_conv_w);
        p("output_conv.bias", output_conv_b);
        if (external) {
            p("external.embed.weather", external->embed_weather);
            p("external.embed.holiday", external->embed_holiday);
            p("external.embed.weekend", external->embed_weekend);
            p("external.embed.day_of_week", external->embed_dow);
            p("external.embed.hour_of_day", external->embed_hour);
            p("external.fc1.weight", external->fc1_w);
            p("external.fc1.bias", external->fc1_b);
            p("external.fc2.weight", external->fc2_w);
            p("external.fc2.bias", external->fc2_b);
            for (size_t i = 0; i < external->subpixel.size(); ++i) {
                const std::string b = "external.subpixel." + std::to_string(i) + ".";
                p(b + "conv.weight", external->subpixel[i].conv_w);
                p(b + "conv.bias", external->subpixel[i].conv_b);
                p(b + "bn.gamma", external->subpixel[i].bn_gamma);
                p(b + "bn.beta", external->subpixel[i].bn_beta);
            }
        }
        return ps;
    }

    // Non-trainable batch-norm statistics, for checkpointing.
    std::vector<std::pair<std::string, std::vector<T>*>> buffers() {
        std::vector<std::pair<std::string, std::vector<T>*>> bs;
        auto b = [&](const std::string& n, nn::BatchNormState<T>& s) {
            bs.push_back({n + ".running_mean", &s.running_mean});
            bs.push_back({n + ".running_var", &s.running_var});
        };
        for (size_t i = 0; i < resblocks.size(); ++i) {
            b("resblock." + std::to_string(i) + ".bn1", resblocks[i].bn1_state);
            b("resblock." + std::to_string(i) + ".bn2", resblocks[i].bn2_state);
        }
        b("post_bn", post_bn_state);
        for (size_t i = 0; i < subpixel.size(); ++i)
            b("subpixel." + std::to_string(i) + ".bn", subpixel[i].bn_state);
        if (external)
            for (size_t i = 0; i < external->subpixel.size(); ++i)
                b("external.subpixel." + std::to_string(i) + ".bn", external->subpixel[i].bn_state);
        return bs;
    }

    size_t param_count() {
        size_t n = 0;
        for (auto& pr : params()) n += pr.tensor.size();
        return n;
    }
};

using UrbanFMModel = UrbanFMModelT<float>;

}  // namespace urbanfm
