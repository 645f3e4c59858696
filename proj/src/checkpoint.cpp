#include "urbanfm/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

namespace urbanfm {
namespace {

constexpr char kMagic[8] = {'F', 'L', 'O', 'W', 'M', 'A', 'G', '1'};

void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}
uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw ParseError("checkpoint: truncated file");
    return v;
}

void write_blob(std::ostream& os, const std::string& name, const std::vector<int>& shape,
                const float* data, size_t count) {
    write_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<uint32_t>(shape.size()));
    for (int d : shape) write_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
}

struct Blob {
    std::vector<int> shape;
    std::vector<float> data;
};

}  // namespace

nlohmann::json config_to_json(const UrbanFMConfig& cfg) {
    nlohmann::json j{{"M", cfg.M},          {"F", cfg.F},
                     {"N", cfg.N},          {"I", cfg.I},
                     {"J", cfg.J},          {"variant", variant_name(cfg.variant)},
                     {"F_o", cfg.F_o},      {"eps", cfg.eps},
                     {"bn_momentum", cfg.bn_momentum}, {"bn_eps", cfg.bn_eps}};
    if (cfg.external) {
        const auto& e = *cfg.external;
        j["external"] = {{"weather_vocab", e.weather_vocab},
                         {"has_ticket_price", e.has_ticket_price},
                         {"embed_weather", e.embed_weather},
                         {"embed_holiday", e.embed_holiday},
                         {"embed_weekend", e.embed_weekend},
                         {"embed_day_of_week", e.embed_day_of_week},
                         {"embed_hour_of_day", e.embed_hour_of_day},
                         {"hidden", e.hidden},
                         {"dropout_rate", e.dropout_rate},
                         {"temp_min", e.temp_min},
                         {"temp_max", e.temp_max},
                         {"wind_min", e.wind_min},
                         {"wind_max", e.wind_max},
                         {"ticket_min", e.ticket_min},
                         {"ticket_max", e.ticket_max}};
    }
    return j;
}

UrbanFMConfig config_from_json(const nlohmann::json& j) {
    UrbanFMConfig cfg;
    cfg.M = j.at("M");
    cfg.F = j.at("F");
    cfg.N = j.at("N");
    cfg.I = j.at("I");
    cfg.J = j.at("J");
    cfg.variant = variant_from_name(j.at("variant"));
    cfg.F_o = j.at("F_o");
    cfg.eps = j.at("eps");
    cfg.bn_momentum = j.at("bn_momentum");
    cfg.bn_eps = j.at("bn_eps");
    if (j.contains("external")) {
        const auto& je = j.at("external");
        ExternalConfig e;
        e.weather_vocab = je.at("weather_vocab");
        e.has_ticket_price = je.at("has_ticket_price");
        e.embed_weather = je.at("embed_weather");
        e.embed_holiday = je.at("embed_holiday");
        e.embed_weekend = je.at("embed_weekend");
        e.embed_day_of_week = je.at("embed_day_of_week");
        e.embed_hour_of_day = je.at("embed_hour_of_day");
        e.hidden = je.at("hidden");
        e.dropout_rate = je.at("dropout_rate");
        e.temp_min = je.at("temp_min");
        e.temp_max = je.at("temp_max");
        e.wind_min = je.at("wind_min");
        e.wind_max = je.at("wind_max");
        e.ticket_min = je.at("ticket_min");
        e.ticket_max = je.at("ticket_max");
        cfg.external = e;
    }
    return cfg;
}

void save_checkpoint(const std::string& path, UrbanFMModel& model, const nn::Adam<float>* opt,
                     const nlohmann::json& extra) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, 8);

    nlohmann::json header{{"config", config_to_json(model.cfg)}, {"extra", extra}};
    if (opt) header["adam"] = {{"t", opt->t}, {"beta1", opt->beta1}, {"beta2", opt->beta2},
                               {"eps", opt->eps}};
    const std::string hs = header.dump();
    write_u32(os, static_cast<uint32_t>(hs.size()));
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));

    auto params = model.params();
    auto buffers = model.buffers();
    uint32_t n = static_cast<uint32_t>(params.size() + buffers.size() +
                                       (opt ? 2 * params.size() : 0));
    write_u32(os, n);
    for (auto& p : params)
        write_blob(os, p.name, p.tensor.shape(), p.tensor.data().data(), p.tensor.size());
    for (auto& [name, buf] : buffers)
        write_blob(os, name, {static_cast<int>(buf->size())}, buf->data(), buf->size());
    if (opt) {
        for (size_t i = 0; i < params.size(); ++i) {
            write_blob(os, "adam.m." + params[i].name, params[i].tensor.shape(),
                       opt->m[i].data(), opt->m[i].size());
            write_blob(os, "adam.v." + params[i].name, params[i].tensor.shape(),
                       opt->v[i].data(), opt->v[i].size());
        }
    }
    if (!os) throw IoError("checkpoint: write failed for '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw ParseError("checkpoint: bad magic (not a FLOWMAG1 file)");
    const uint32_t hlen = read_u32(is);
    std::string hs(hlen, '\0');
    is.read(hs.data(), hlen);
    if (!is) throw ParseError("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: bad header JSON: ") + e.what());
    }

    std::map<std::string, Blob> blobs;
    const uint32_t n = read_u32(is);
    for (uint32_t i = 0; i < n; ++i) {
        const uint32_t nlen = read_u32(is);
        std::string name(nlen, '\0');
        is.read(name.data(), nlen);
        const uint32_t ndim = read_u32(is);
        Blob b;
        size_t count = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            b.shape.push_back(static_cast<int>(read_u32(is)));
            count *= static_cast<size_t>(b.shape.back());
        }
        b.data.resize(count);
        is.read(reinterpret_cast<char*>(b.data.data()), static_cast<std::streamsize>(count * 4));
        if (!is) throw ParseError("checkpoint: truncated tensor data for '" + name + "'");
        blobs.emplace(std::move(name), std::move(b));
    }

    LoadedCheckpoint out{UrbanFMModel::build(config_from_json(header.at("config")), 0),
                         nn::Adam<float>{}, false, header.value("extra", nlohmann::json::object())};
    auto params = out.model.params();
    for (auto& p : params) {
        auto it = blobs.find(p.name);
        if (it == blobs.end())
            throw ParseError("checkpoint: missing parameter '" + p.name + "'");
        if (it->second.data.size() != p.tensor.size())
            throw ParseError("checkpoint: size mismatch for '" + p.name + "'");
        p.tensor.data() = it->second.data;
    }
    for (auto& [name, buf] : out.model.buffers()) {
        auto it = blobs.find(name);
        if (it == blobs.end()) throw ParseError("checkpoint: missing buffer '" + name + "'");
        if (it->second.data.size() != buf->size())
            throw ParseError("checkpoint: size mismatch for '" + name + "'");
        *buf = it->second.data;
    }
    if (header.contains("adam")) {
        out.has_opt = true;
        out.opt.t = header["adam"].at("t");
        out.opt.beta1 = header["adam"].at("beta1");
        out.opt.beta2 = header["adam"].at("beta2");
        out.opt.eps = header["adam"].at("eps");
        for (auto& p : params) {
            auto im = blobs.find("adam.m." + p.name);
            auto iv = blobs.find("adam.v." + p.name);
            if (im == blobs.end() || iv == blobs.end())
                throw ParseError("checkpoint: missing optimizer state for '" + p.name + "'");
            out.opt.m.push_back(im->second.data);
            out.opt.v.push_back(iv->second.data);
        }
    }
    return out;
}

}  // namespace urbanfm
