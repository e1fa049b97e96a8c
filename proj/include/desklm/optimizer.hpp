#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "desklm/encoder.hpp"

namespace desklm::nn {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double eps = 1e-6;
    double weight_decay = 0.01;
};

// Adam with decoupled weight decay over a fixed set of (param, grad) slots.
// Slot order is the registration order, which follows the parameter manifest;
// the update is fully deterministic.
template <class T>
class AdamW {
   public:
    explicit AdamW(AdamConfig cfg = {}) : cfg_(cfg) {}

    void add_slot(Mat<T>* param, const Mat<T>* grad) {
        Slot s;
        s.param = param;
        s.grad = grad;
        s.m = Mat<T>::Zero(param->rows(), param->cols());
        s.v = Mat<T>::Zero(param->rows(), param->cols());
        slots_.push_back(std::move(s));
    }

    void add_model(EncoderParams<T>& params, EncoderParams<T>& grads) {
        std::vector<Mat<T>*> ps, gs;
        for_each_tensor(params, [&](const std::string&, Mat<T>& m) { ps.push_back(&m); });
        for_each_tensor(grads, [&](const std::string&, Mat<T>& m) { gs.push_back(&m); });
        for (size_t i = 0; i < ps.size(); ++i) {
            add_slot(ps[i], gs[i]);
        }
    }

    int64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    size_t slot_count() const { return slots_.size(); }
    Mat<T>& moment1(size_t i) { return slots_[i].m; }
    Mat<T>& moment2(size_t i) { return slots_[i].v; }
    void set_step_count(int64_t t) { t_ = t; }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(cfg_.beta1);
        const T b2 = static_cast<T>(cfg_.beta2);
        const T one_minus_b1 = static_cast<T>(1.0 - cfg_.beta1);
        const T one_minus_b2 = static_cast<T>(1.0 - cfg_.beta2);
        const T eps = static_cast<T>(cfg_.eps);
        const T step_size = static_cast<T>(lr / bc1);
        const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
        const T decay = static_cast<T>(lr * cfg_.weight_decay);
        for (auto& s : slots_) {
            s.m = b1 * s.m + one_minus_b1 * (*s.grad);
            s.v = (b2 * s.v.array() + one_minus_b2 * s.grad->array().square()).matrix();
            auto denom = (s.v.array().sqrt() * denom_scale + eps);
            s.param->array() -= step_size * (s.m.array() / denom);
            if (cfg_.weight_decay > 0.0) {
                s.param->array() -= decay * s.param->array();
            }
        }
    }

   private:
    struct Slot {
        Mat<T>* param;
        const Mat<T>* grad;
        Mat<T> m;
        Mat<T> v;
    };
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    int64_t t_ = 0;
};

template <class T>
void zero_grads(EncoderParams<T>& grads) {
    for_each_tensor(grads, [](const std::string&, Mat<T>& m) { m.setZero(); });
}

template <class T>
void scale_grads(EncoderParams<T>& grads, T factor) {
    for_each_tensor(grads, [factor](const std::string&, Mat<T>& m) { m *= factor; });
}

}  // namespace desklm::nn
