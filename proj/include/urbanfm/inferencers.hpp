#pragma once

#include "urbanfm/baselines.hpp"
#include "urbanfm/metrics.hpp"
#include "urbanfm/model.hpp"

namespace urbanfm {

class MeanInferencer : public Inferencer {
public:
    explicit MeanInferencer(int scale) : scale_(scale) {}
    std::string name() const override { return "mean"; }
    std::vector<FlowMap> infer_batch(const std::vector<Sample>& batch) override {
        std::vector<FlowMap> out;
        for (const auto& s : batch) out.push_back(mean_partition(s.coarse, ScaleFactor(scale_)));
        return out;
    }

private:
    int scale_;
};

class HAInferencer : public Inferencer {
public:
    explicit HAInferencer(HAModel model) : model_(std::move(model)) {}
    std::string name() const override { return "ha"; }
    std::vector<FlowMap> infer_batch(const std::vector<Sample>& batch) override {
        std::vector<FlowMap> out;
        for (const auto& s : batch) out.push_back(ha_infer(model_, s.coarse));
        return out;
    }
    const HAModel& model() const { return model_; }

private:
    HAModel model_;
};

class ModelInferencer : public Inferencer {
public:
    ModelInferencer(UrbanFMModel& model, double coarse_scaler, double fine_scaler)
        : model_(model), coarse_scaler_(coarse_scaler), fine_scaler_(fine_scaler) {}
    std::string name() const override { return "urbanfm-" + variant_name(model_.cfg.variant); }
    std::vector<FlowMap> infer_batch(const std::vector<Sample>& batch) override {
        std::vector<FlowMap> coarse;
        std::vector<ExternalRecord> records;
        for (const auto& s : batch) {
            coarse.push_back(s.coarse);
            records.push_back(s.external);
        }
        auto res = model_.infer(coarse, model_.cfg.has_external() ? &records : nullptr,
                                coarse_scaler_, fine_scaler_);
        return std::move(res.fine);
    }

private:
    UrbanFMModel& model_;
    double coarse_scaler_, fine_scaler_;
};

}  // namespace urbanfm
