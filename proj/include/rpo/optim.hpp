#pragma once

#include <cmath>
#include <stdexcept>

#include "rpo/common.hpp"

namespace rpo {

// Adam with decoupled weight decay
struct AdamW {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    Vec m, v;
    long step_count = 0;

    void init(std::size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        step_count = 0;
    }

    void step(Vec& theta, const Vec& grad) {
        if (m.size() != theta.size()) init(theta.size());
        if (grad.size() != theta.size())
            throw std::invalid_argument("AdamW: grad/param size mismatch");
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            theta[i] -= lr * weight_decay * theta[i];
            theta[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
};

// scales grad in place when its global L2 norm exceeds max_norm; returns
// the pre-clip norm. max_norm <= 0 disables clipping.
inline double clip_grad_norm(Vec& grad, double max_norm) {
    double norm = nrm2(grad);
    if (max_norm > 0.0 && norm > max_norm && norm > 0.0) {
        double scale = max_norm / norm;
        for (double& g : grad) g *= scale;
    }
    return norm;
}

}  // namespace rpo
