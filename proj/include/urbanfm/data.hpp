#pragma once

#include <string>
#include <vector>

#include "urbanfm/external.hpp"
#include "urbanfm/flow_grid.hpp"

namespace urbanfm {

// One paired (coarse, fine, external) observation.
struct Sample {
    long long timestamp = 0;
    FlowMap coarse;
    FlowMap fine;
    ExternalRecord external;
};

struct DatasetManifest {
    std::string name = "dataset";
    int I = 0, J = 0, N = 2;
    int interval_minutes = 60;
    double coarse_scaler = 1500.0;
    double fine_scaler = 100.0;
    ExternalConfig external_schema;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<Sample> train, valid, test;

    const std::vector<Sample>& split(const std::string& name) const;
};

// --- grid text format: header "T H W", then T blocks of H lines of W floats.
void write_flow_stack(const std::string& path, const std::vector<FlowMap>& maps);
std::vector<FlowMap> read_flow_stack(const std::string& path);

void write_externals_csv(const std::string& path, const std::vector<ExternalRecord>& records,
                         bool has_ticket_price);
std::vector<ExternalRecord> read_externals_csv(const std::string& path);

void write_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& path);

// Dataset directory layout: manifest.txt, fine_<split>.txt, external_<split>.csv.
// Coarse maps are derived by aggregating the stored fine maps.
void write_dataset(const Dataset& d, const std::string& dir);
Dataset read_dataset(const std::string& dir);

// Remove samples whose coarse map is mostly zeros, then split chronologically.
struct SplitRatios {
    double train = 2, valid = 1, test = 1;
};
Dataset split_filter(std::vector<Sample> samples, const DatasetManifest& manifest,
                     SplitRatios ratios = {}, double zero_threshold = 0.9);

// --- synthetic generator -----------------------------------------------------

struct SynthConfig {
    int coarse_h = 16, coarse_w = 16;
    int scale = 2;
    int steps = 600;
    unsigned seed = 0;
    double noise = 0.05;     // multiplicative noise level
    bool stationary = false;  // time-invariant allocation weights
};

struct SynthOutput {
    std::vector<Sample> samples;
    DatasetManifest manifest;
};

// Fine flows from per-cell base intensities modulated by region semantics
// (office / residence / park) responding to hour, weekend and weather;
// coarse maps by aggregation, so the structural constraint holds exactly.
SynthOutput synth_generate(const SynthConfig& cfg);

// Sample invariants (nonnegativity, aggregation consistency, external ids
// within schema). Throws DomainError naming the timestamp on violation.
void validate_samples(const std::vector<Sample>& samples, const DatasetManifest& manifest);

}  // namespace urbanfm
