#include "urbanfm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace urbanfm {

namespace fs = std::filesystem;

const std::vector<Sample>& Dataset::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "valid") return valid;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "'");
}

// ---------------------------------------------------------------------------
// Grid text format

void write_flow_stack(const std::string& path, const std::vector<FlowMap>& maps) {
    if (maps.empty()) throw DomainError("write_flow_stack: empty map sequence");
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    const int H = maps[0].height, W = maps[0].width;
    os << maps.size() << ' ' << H << ' ' << W << '\n';
    char buf[32];
    for (const auto& m : maps) {
        if (m.height != H || m.width != W)
            throw ShapeError("write_flow_stack: inconsistent map shapes");
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                std::snprintf(buf, sizeof(buf), "%.6g", m.at(i, j));
                os << (j ? " " : "") << buf;
            }
            os << '\n';
        }
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

std::vector<FlowMap> read_flow_stack(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string line;
    int lineno = 0;
    auto next_line = [&]() {
        if (!std::getline(is, line))
            throw ParseError(path + ":" + std::to_string(lineno + 1) + ": unexpected end of file");
        ++lineno;
    };
    next_line();
    long t = 0, h = 0, w = 0;
    {
        std::istringstream ss(line);
        if (!(ss >> t >> h >> w) || t < 1 || h < 1 || w < 1)
            throw ParseError(path + ":1: bad header (expected 'T H W')");
    }
    std::vector<FlowMap> maps;
    maps.reserve(static_cast<size_t>(t));
    for (long s = 0; s < t; ++s) {
        FlowMap m(static_cast<int>(h), static_cast<int>(w));
        for (int i = 0; i < h; ++i) {
            next_line();
            std::istringstream ss(line);
            for (int j = 0; j < w; ++j)
                if (!(ss >> m.at(i, j)))
                    throw ParseError(path + ":" + std::to_string(lineno) + ": expected " +
                                     std::to_string(w) + " values");
            double extra;
            if (ss >> extra)
                throw ParseError(path + ":" + std::to_string(lineno) + ": expected " +
                                 std::to_string(w) + " values, got more");
        }
        maps.push_back(std::move(m));
    }
    return maps;
}

// ---------------------------------------------------------------------------
// Externals CSV

void write_externals_csv(const std::string& path, const std::vector<ExternalRecord>& records,
                         bool has_ticket_price) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "timestamp,temperature,wind_speed,weather,holiday,weekend,day_of_week,hour_of_day";
    if (has_ticket_price) os << ",ticket_price";
    os << '\n';
    char buf[32];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%.6g", r.temperature);
        os << r.timestamp << ',' << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.6g", r.wind_speed);
        os << buf << ',' << r.weather << ',' << r.holiday << ',' << r.weekend << ','
           << r.day_of_week << ',' << r.hour_of_day;
        if (has_ticket_price) {
            if (!r.ticket_price) throw DomainError("write_externals_csv: missing ticket_price");
            std::snprintf(buf, sizeof(buf), "%.6g", *r.ticket_price);
            os << ',' << buf;
        }
        os << '\n';
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

std::vector<ExternalRecord> read_externals_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw ParseError(path + ":1: empty file");
    std::vector<std::string> cols;
    {
        std::istringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
    }
    std::map<std::string, int> idx;
    for (size_t i = 0; i < cols.size(); ++i) idx[cols[i]] = static_cast<int>(i);
    for (const char* req : {"timestamp", "temperature", "wind_speed", "weather", "holiday",
                            "weekend", "day_of_week", "hour_of_day"})
        if (!idx.count(req)) throw ParseError(path + ":1: missing column '" + std::string(req) + "'");
    const bool has_ticket = idx.count("ticket_price") > 0;

    std::vector<ExternalRecord> out;
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::istringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) f.push_back(c);
        if (f.size() != cols.size())
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected " +
                             std::to_string(cols.size()) + " fields");
        try {
            ExternalRecord r;
            r.timestamp = std::stoll(f[idx["timestamp"]]);
            r.temperature = std::stod(f[idx["temperature"]]);
            r.wind_speed = std::stod(f[idx["wind_speed"]]);
            r.weather = std::stoi(f[idx["weather"]]);
            r.holiday = std::stoi(f[idx["holiday"]]);
            r.weekend = std::stoi(f[idx["weekend"]]);
            r.day_of_week = std::stoi(f[idx["day_of_week"]]);
            r.hour_of_day = std::stoi(f[idx["hour_of_day"]]);
            if (has_ticket) r.ticket_price = std::stod(f[idx["ticket_price"]]);
            out.push_back(r);
        } catch (const std::exception&) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": bad field value");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest

void write_manifest(const std::string& path, const DatasetManifest& m) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "name=" << m.name << '\n'
       << "I=" << m.I << '\n'
       << "J=" << m.J << '\n'
       << "N=" << m.N << '\n'
       << "interval_minutes=" << m.interval_minutes << '\n'
       << "coarse_scaler=" << m.coarse_scaler << '\n'
       << "fine_scaler=" << m.fine_scaler << '\n'
       << "weather_vocab=" << m.external_schema.weather_vocab << '\n'
       << "has_ticket_price=" << (m.external_schema.has_ticket_price ? 1 : 0) << '\n'
       << "temp_min=" << m.external_schema.temp_min << '\n'
       << "temp_max=" << m.external_schema.temp_max << '\n'
       << "wind_min=" << m.external_schema.wind_min << '\n'
       << "wind_max=" << m.external_schema.wind_max << '\n'
       << "ticket_min=" << m.external_schema.ticket_min << '\n'
       << "ticket_max=" << m.external_schema.ticket_max << '\n';
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(path + ":" + std::to_string(lineno) + ": expected key=value");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    auto req = [&](const std::string& k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw ParseError(path + ": missing key '" + k + "'");
        return it->second;
    };
    DatasetManifest m;
    m.name = req("name");
    m.I = std::stoi(req("I"));
    m.J = std::stoi(req("J"));
    m.N = std::stoi(req("N"));
    m.interval_minutes = std::stoi(req("interval_minutes"));
    m.coarse_scaler = std::stod(req("coarse_scaler"));
    m.fine_scaler = std::stod(req("fine_scaler"));
    m.external_schema.weather_vocab = std::stoi(req("weather_vocab"));
    m.external_schema.has_ticket_price = std::stoi(req("has_ticket_price")) != 0;
    m.external_schema.temp_min = std::stod(req("temp_min"));
    m.external_schema.temp_max = std::stod(req("temp_max"));
    m.external_schema.wind_min = std::stod(req("wind_min"));
    m.external_schema.wind_max = std::stod(req("wind_max"));
    m.external_schema.ticket_min = std::stod(req("ticket_min"));
    m.external_schema.ticket_max = std::stod(req("ticket_max"));
    return m;
}

// ---------------------------------------------------------------------------
// Dataset directory

void write_dataset(const Dataset& d, const std::string& dir) {
    fs::create_directories(dir);
    write_manifest((fs::path(dir) / "manifest.txt").string(), d.manifest);
    auto dump = [&](const std::string& name, const std::vector<Sample>& split) {
        if (split.empty()) return;
        std::vector<FlowMap> fine;
        std::vector<ExternalRecord> ext;
        for (const auto& s : split) {
            fine.push_back(s.fine);
            ext.push_back(s.external);
        }
        write_flow_stack((fs::path(dir) / ("fine_" + name + ".txt")).string(), fine);
        write_externals_csv((fs::path(dir) / ("external_" + name + ".csv")).string(), ext,
                            d.manifest.external_schema.has_ticket_price);
    };
    dump("train", d.train);
    dump("valid", d.valid);
    dump("test", d.test);
}

Dataset read_dataset(const std::string& dir) {
    Dataset d;
    d.manifest = read_manifest((fs::path(dir) / "manifest.txt").string());
    const ScaleFactor scale(d.manifest.N);
    auto load = [&](const std::string& name) {
        const auto fine_path = fs::path(dir) / ("fine_" + name + ".txt");
        if (!fs::exists(fine_path)) return std::vector<Sample>{};
        auto fine = read_flow_stack(fine_path.string());
        auto ext = read_externals_csv((fs::path(dir) / ("external_" + name + ".csv")).string());
        if (ext.size() != fine.size())
            throw ParseError("dataset '" + dir + "': split '" + name + "' has " +
                             std::to_string(fine.size()) + " flow maps but " +
                             std::to_string(ext.size()) + " external records");
        std::vector<Sample> out;
        for (size_t i = 0; i < fine.size(); ++i) {
            Sample s;
            s.timestamp = ext[i].timestamp;
            s.fine = std::move(fine[i]);
            s.coarse = coarsen(s.fine, scale);
            s.external = ext[i];
            out.push_back(std::move(s));
        }
        return out;
    };
    d.train = load("train");
    d.valid = load("valid");
    d.test = load("test");
    validate_samples(d.train, d.manifest);
    validate_samples(d.valid, d.manifest);
    validate_samples(d.test, d.manifest);
    return d;
}

void validate_samples(const std::vector<Sample>& samples, const DatasetManifest& manifest) {
    const ScaleFactor scale(manifest.N);
    for (const auto& s : samples) {
        const std::string where = " (timestamp " + std::to_string(s.timestamp) + ")";
        try {
            s.fine.validate();
            s.coarse.validate();
        } catch (const DomainError& e) {
            throw DomainError(std::string(e.what()) + where);
        }
        if (s.coarse.height != manifest.I || s.coarse.width != manifest.J)
            throw DomainError("sample coarse shape mismatch" + where);
        double worst = 0.0;
        const FlowMap agg = coarsen(s.fine, scale);
        for (size_t i = 0; i < agg.size(); ++i)
            worst = std::max(worst, std::abs(agg.values[i] - s.coarse.values[i]) /
                                        std::max(1.0, std::abs(s.coarse.values[i])));
        if (worst > 1e-6)
            throw DomainError("sample violates aggregation consistency" + where);
        const auto& e = s.external;
        if (e.weather < 0 || e.weather >= manifest.external_schema.weather_vocab)
            throw DomainError("weather id out of vocabulary" + where);
        if (e.day_of_week < 0 || e.day_of_week > 6 || e.hour_of_day < 0 || e.hour_of_day > 23 ||
            (e.holiday != 0 && e.holiday != 1) || (e.weekend != 0 && e.weekend != 1))
            throw DomainError("time feature out of range" + where);
        if (e.temperature < manifest.external_schema.temp_min ||
            e.temperature > manifest.external_schema.temp_max)
            throw DomainError("temperature outside declared bounds" + where);
        if (e.wind_speed < manifest.external_schema.wind_min ||
            e.wind_speed > manifest.external_schema.wind_max)
            throw DomainError("wind speed outside declared bounds" + where);
        if (manifest.external_schema.has_ticket_price && !e.ticket_price)
            throw DomainError("missing ticket price" + where);
    }
}

// ---------------------------------------------------------------------------
// Split / filter

Dataset split_filter(std::vector<Sample> samples, const DatasetManifest& manifest,
                     SplitRatios ratios, double zero_threshold) {
    if (ratios.train <= 0 || ratios.valid <= 0 || ratios.test <= 0)
        throw ConfigError("split_filter: ratios must be positive");
    std::vector<Sample> kept;
    for (auto& s : samples) {
        size_t zeros = 0;
        for (double v : s.coarse.values)
            if (v == 0.0) ++zeros;
        if (static_cast<double>(zeros) / s.coarse.size() <= zero_threshold)
            kept.push_back(std::move(s));
    }
    const double total = ratios.train + ratios.valid + ratios.test;
    const size_t n = kept.size();
    const size_t n_train = static_cast<size_t>(std::floor(n * ratios.train / total));
    const size_t n_valid = static_cast<size_t>(std::floor(n * ratios.valid / total));
    Dataset d;
    d.manifest = manifest;
    d.train.assign(kept.begin(), kept.begin() + n_train);
    d.valid.assign(kept.begin() + n_train, kept.begin() + n_train + n_valid);
    d.test.assign(kept.begin() + n_train + n_valid, kept.end());
    if (d.train.empty() || d.valid.empty() || d.test.empty())
        throw DomainError("split_filter: a split came out empty (" + std::to_string(n) +
                          " samples after filtering)");
    return d;
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

double bump(int hour, double peak, double width) {
    double d = hour - peak;
    if (d > 12) d -= 24;
    if (d < -12) d += 24;
    return std::exp(-0.5 * (d / width) * (d / width));
}

}  // namespace

SynthOutput synth_generate(const SynthConfig& cfg) {
    const int n = cfg.scale;
    const int FH = cfg.coarse_h * n, FW = cfg.coarse_w * n;
    std::mt19937 rng(cfg.seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    // Region semantics: 0 office, 1 residence, 2 park.
    std::vector<int> semantic(static_cast<size_t>(FH) * FW);
    std::vector<double> base(semantic.size());
    for (auto& s : semantic) {
        const double u = uni(rng);
        s = u < 0.4 ? 0 : (u < 0.8 ? 1 : 2);
    }
    for (auto& b : base) b = 0.5 + uni(rng);

    const int weather_vocab = 8;
    int weather = 0;
    std::vector<Sample> samples;
    const ScaleFactor scale(n);
    int holiday_today = 0;

    for (int t = 0; t < cfg.steps; ++t) {
        const int hour = t % 24;
        const int day = t / 24;
        const int dow = day % 7;
        const int weekend = dow >= 5 ? 1 : 0;
        if (hour == 0) {
            holiday_today = uni(rng) < 0.05 ? 1 : 0;
            // reconsider the weather once a day plus hourly persistence below
        }
        if (uni(rng) > 0.85) weather = static_cast<int>(uni(rng) * weather_vocab) % weather_vocab;

        ExternalRecord e;
        e.timestamp = t;
        e.hour_of_day = hour;
        e.day_of_week = dow;
        e.weekend = weekend;
        e.holiday = holiday_today;
        e.weather = weather;
        e.temperature = 15.0 + 8.0 * std::sin(2.0 * M_PI * day / 30.0) +
                        5.0 * std::sin(2.0 * M_PI * (hour - 9) / 24.0) + gauss(rng);
        e.temperature = std::clamp(e.temperature, -9.0, 39.0);
        e.wind_speed = std::clamp(std::abs(6.0 + 3.0 * gauss(rng)), 0.0, 19.5);

        double activity[3];
        if (cfg.stationary) {
            activity[0] = activity[1] = activity[2] = 1.0;
        } else {
            const bool good_weather = weather < 5;
            const bool workday = weekend == 0 && holiday_today == 0;
            activity[0] = workday ? 0.25 + 1.5 * bump(hour, 10, 3) + 0.8 * bump(hour, 17, 2)
                                  : 0.25;
            activity[1] = 0.4 + 1.4 * bump(hour, 21, 3) + 0.5 * bump(hour, 7, 2);
            activity[2] = 0.15 + (workday ? 0.5 : 1.6) * bump(hour, 14, 3) *
                                     (good_weather ? 1.0 : 0.3);
        }

        FlowMap fine(FH, FW);
        for (size_t c = 0; c < fine.size(); ++c) {
            double v = 30.0 * base[c] * activity[semantic[c]];
            if (cfg.noise > 0.0) v *= std::max(0.0, 1.0 + cfg.noise * gauss(rng));
            fine.values[c] = v;
        }
        Sample s;
        s.timestamp = t;
        s.coarse = coarsen(fine, scale);
        s.fine = std::move(fine);
        s.external = e;
        samples.push_back(std::move(s));
    }

    // Scalers from the long-tail quantile of the generated flows.
    std::vector<double> cvals, fvals;
    for (const auto& s : samples) {
        cvals.insert(cvals.end(), s.coarse.values.begin(), s.coarse.values.end());
        fvals.insert(fvals.end(), s.fine.values.begin(), s.fine.values.end());
    }
    auto quantile = [](std::vector<double>& v, double q) {
        std::sort(v.begin(), v.end());
        return v[static_cast<size_t>(q * (v.size() - 1))];
    };
    DatasetManifest m;
    m.name = "synthetic";
    m.I = cfg.coarse_h;
    m.J = cfg.coarse_w;
    m.N = n;
    m.interval_minutes = 60;
    m.coarse_scaler = std::ceil(quantile(cvals, 0.999));
    m.fine_scaler = std::ceil(quantile(fvals, 0.999));
    m.external_schema.weather_vocab = weather_vocab;
    m.external_schema.has_ticket_price = false;
    m.external_schema.temp_min = -10.0;
    m.external_schema.temp_max = 40.0;
    m.external_schema.wind_min = 0.0;
    m.external_schema.wind_max = 20.0;
    return {std::move(samples), std::move(m)};
}

}  // namespace urbanfm
