#pragma once

#include <optional>
#include <vector>

#include "urbanfm/nn/init.hpp"
#include "urbanfm/nn/ops.hpp"

namespace urbanfm {

// One timestamp's external factors.
struct ExternalRecord {
    long long timestamp = 0;
    double temperature = 0.0;  // degrees C
    double wind_speed = 0.0;   // mph
    int weather = 0;
    int holiday = 0;  // 0/1
    int weekend = 0;  // 0/1
    int day_of_week = 0;
    int hour_of_day = 0;
    std::optional<double> ticket_price;
};

// Vocabulary sizes, embedding widths and continuous-feature bounds.
struct ExternalConfig {
    int weather_vocab = 16;
    bool has_ticket_price = false;
    int embed_weather = 3;
    int embed_holiday = 1;
    int embed_weekend = 1;
    int embed_day_of_week = 2;
    int embed_hour_of_day = 3;
    int hidden = 128;
    float dropout_rate = 0.3f;
    // Min-max bounds for scaling continuous features to [0,1].
    double temp_min = -25.0, temp_max = 41.0;
    double wind_min = 0.0, wind_max = 50.0;
    double ticket_min = 0.0, ticket_max = 300.0;

    int feature_length() const {
        return 2 + embed_weather + embed_holiday + embed_weekend + embed_day_of_week +
               embed_hour_of_day + (has_ticket_price ? 1 : 0);
    }
};

// Factors of n in nondecreasing order (n >= 2).
inline std::vector<int> prime_factors(int n) {
    std::vector<int> fs;
    for (int p = 2; p * p <= n; ++p)
        while (n % p == 0) {
            fs.push_back(p);
            n /= p;
        }
    if (n > 1) fs.push_back(n);
    return fs;
}

// One sub-pixel upscaling stage: conv 3x3 -> batch norm -> pixel shuffle -> ReLU.
template <typename T>
struct SubPixelBlock {
    int factor = 2;
    nn::Tensor<T> conv_w, conv_b, bn_gamma, bn_beta;
    nn::BatchNormState<T> bn_state;

    void init(int in_channels, int factor_, std::mt19937& rng) {
        factor = factor_;
        const int out_c = in_channels * factor * factor;
        conv_w = nn::Tensor<T>({out_c, in_channels, 3, 3}, T(0), true);
        conv_b = nn::Tensor<T>({out_c}, T(0), true);
        nn::init_fan_in_gaussian(conv_w, in_channels * 9, rng);
        bn_gamma = nn::Tensor<T>({out_c}, T(1), true);
        bn_beta = nn::Tensor<T>({out_c}, T(0), true);
        bn_state.running_mean.assign(out_c, T(0));
        bn_state.running_var.assign(out_c, T(1));
    }

    nn::Tensor<T> forward(const nn::Tensor<T>& x, bool train, T bn_momentum, T bn_eps) {
        auto h = nn::conv2d(x, conv_w, conv_b);
        h = nn::batch_norm2d(h, bn_gamma, bn_beta, bn_state, train, bn_momentum, bn_eps);
        h = nn::pixel_shuffle(h, factor);
        return nn::relu(h);
    }
};

// External factor fusion subnet: encodes a record batch into the vector e,
// then produces coarse and fine spatial feature maps.
template <typename T>
struct ExternalFusion {
    ExternalConfig cfg;
    int grid_i = 0, grid_j = 0, scale = 2;

    nn::Tensor<T> embed_weather, embed_holiday, embed_weekend, embed_dow, embed_hour;
    nn::Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b;
    std::vector<SubPixelBlock<T>> subpixel;

    void init(const ExternalConfig& c, int I, int J, int N, std::mt19937& rng) {
        cfg = c;
        grid_i = I;
        grid_j = J;
        scale = N;
        auto mk_embed = [&](int vocab, int width) {
            nn::Tensor<T> t({vocab, width}, T(0), true);
            nn::init_uniform(t, -0.1, 0.1, rng);
            return t;
        };
        embed_weather = mk_embed(cfg.weather_vocab, cfg.embed_weather);
        embed_holiday = mk_embed(2, cfg.embed_holiday);
        embed_weekend = mk_embed(2, cfg.embed_weekend);
        embed_dow = mk_embed(7, cfg.embed_day_of_week);
        embed_hour = mk_embed(24, cfg.embed_hour_of_day);

        const int e_len = cfg.feature_length();
        fc1_w = nn::Tensor<T>({cfg.hidden, e_len}, T(0), true);
        fc1_b = nn::Tensor<T>({cfg.hidden}, T(0), true);
        nn::init_fan_in_gaussian(fc1_w, e_len, rng);
        fc2_w = nn::Tensor<T>({I * J, cfg.hidden}, T(0), true);
        fc2_b = nn::Tensor<T>({I * J}, T(0), true);
        nn::init_fan_in_gaussian(fc2_w, cfg.hidden, rng);

        for (int f : prime_factors(N)) {
            SubPixelBlock<T> blk;
            blk.init(1, f, rng);
            subpixel.push_back(std::move(blk));
        }
    }

    // e = [temperature; wind; weather emb; holiday emb; weekend emb;
    //      day-of-week emb; hour emb; ticket price?], continuous min-max scaled.
    nn::Tensor<T> encode(const std::vector<ExternalRecord>& records) const {
        const int B = static_cast<int>(records.size());
        auto scale01 = [](double v, double lo, double hi) {
            return hi > lo ? (v - lo) / (hi - lo) : 0.0;
        };
        std::vector<T> cont(static_cast<size_t>(B) * 2);
        std::vector<int> w_id(B), hol_id(B), wkd_id(B), dow_id(B), hour_id(B);
        std::vector<T> ticket(B);
        for (int b = 0; b < B; ++b) {
            const auto& r = records[b];
            cont[b * 2 + 0] = static_cast<T>(scale01(r.temperature, cfg.temp_min, cfg.temp_max));
            cont[b * 2 + 1] = static_cast<T>(scale01(r.wind_speed, cfg.wind_min, cfg.wind_max));
            w_id[b] = r.weather;
            hol_id[b] = r.holiday;
            wkd_id[b] = r.weekend;
            dow_id[b] = r.day_of_week;
            hour_id[b] = r.hour_of_day;
            if (cfg.has_ticket_price) {
                if (!r.ticket_price)
                    throw DomainError("encode_external: record lacks ticket_price");
                ticket[b] = static_cast<T>(scale01(*r.ticket_price, cfg.ticket_min, cfg.ticket_max));
            }
        }
        std::vector<nn::Tensor<T>> parts;
        parts.push_back(nn::Tensor<T>::from_data({B, 2}, std::move(cont)));
        parts.push_back(nn::embedding_lookup(embed_weather, w_id, "weather"));
        parts.push_back(nn::embedding_lookup(embed_holiday, hol_id, "holiday"));
        parts.push_back(nn::embedding_lookup(embed_weekend, wkd_id, "weekend"));
        parts.push_back(nn::embedding_lookup(embed_dow, dow_id, "day_of_week"));
        parts.push_back(nn::embedding_lookup(embed_hour, hour_id, "hour_of_day"));
        if (cfg.has_ticket_price)
            parts.push_back(nn::Tensor<T>::from_data({B, 1}, std::move(ticket)));
        return nn::concat_cols(parts);
    }

    struct Output {
        nn::Tensor<T> coarse;  // (B,1,I,J)
        nn::Tensor<T> fine;    // (B,1,NI,NJ)
    };

    Output forward(const nn::Tensor<T>& e, bool train, std::mt19937& rng, T bn_momentum,
                   T bn_eps) {
        if (e.dim(1) != cfg.feature_length())
            throw ShapeError("external_forward: feature vector length mismatch");
        const int B = e.dim(0);
        auto h = nn::dense(e, fc1_w, fc1_b);
        h = nn::dropout(h, static_cast<T>(cfg.dropout_rate), train, rng);
        h = nn::relu(h);
        h = nn::dense(h, fc2_w, fc2_b);
        h = nn::relu(h);
        auto hc = h.reshape({B, 1, grid_i, grid_j});
        auto hf = hc;
        for (auto& blk : subpixel) hf = blk.forward(hf, train, bn_momentum, bn_eps);
        return {hc, hf};
    }
};

}  // namespace urbanfm
