#pragma once

// Small random models shared by the unit, integration and acceptance suites.

#include <cmath>

#include "idprune/nn.hpp"
#include "idprune/rng.hpp"

namespace idprune::testing {

inline FullyConnected random_fc(std::size_t in, std::size_t out, Rng& rng, double bias_scale = 0.1) {
    FullyConnected fc;
    fc.weight = Matrix(in, out);
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    for (double& v : fc.weight.values()) v = s * rng.normal();
    fc.bias.resize(out);
    for (double& v : fc.bias) v = bias_scale * rng.normal();
    return fc;
}

inline Conv2d random_conv(std::size_t out, std::size_t in, std::size_t k, Rng& rng, std::size_t stride = 1,
                          std::size_t padding = 0) {
    Conv2d conv;
    conv.weight = Tensor({out, in, k, k});
    const double s = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    for (double& v : conv.weight.values()) v = s * rng.normal();
    conv.bias.resize(out);
    for (double& v : conv.bias) v = 0.1 * rng.normal();
    conv.stride = stride;
    conv.padding = padding;
    return conv;
}

inline Tensor random_input(const Model& model, std::size_t batch, Rng& rng) {
    Shape s{batch};
    s.insert(s.end(), model.input_shape.begin(), model.input_shape.end());
    Tensor x(s);
    for (double& v : x.values()) v = rng.normal();
    return x;
}

// d -> h1 -> h2 -> classes, ReLU between.
inline Model fc_fixture(Rng& rng, std::size_t d = 12, std::size_t h1 = 16, std::size_t h2 = 10,
                        std::size_t classes = 4) {
    Model m;
    m.name = "fc_fixture";
    m.input_shape = {d};
    m.num_classes = classes;
    m.layers = {random_fc(d, h1, rng), ReLU{}, random_fc(h1, h2, rng), ReLU{}, random_fc(h2, classes, rng)};
    return m;
}

inline Model one_hidden_fixture(Rng& rng, std::size_t d, std::size_t width, std::size_t outputs) {
    Model m;
    m.name = "one_hidden";
    m.input_shape = {d};
    m.num_classes = outputs;
    m.layers = {random_fc(d, width, rng), ReLU{}, random_fc(width, outputs, rng)};
    return m;
}

// conv -> relu -> maxpool -> conv -> relu -> avgpool -> flatten -> fc -> relu -> fc
inline Model conv_fixture(Rng& rng) {
    Model m;
    m.name = "conv_fixture";
    m.input_shape = {2, 12, 12};
    m.num_classes = 3;
    // 12 -> conv(pad 1) 12 -> pool 6 -> conv 4 -> pool 2: flatten = 8 * 2 * 2 features.
    m.layers = {random_conv(6, 2, 3, rng, 1, 1), ReLU{}, MaxPool2d{2, 2},
                random_conv(8, 6, 3, rng),       ReLU{}, AvgPool2d{2, 2},
                Flatten{},                       random_fc(32, 7, rng), ReLU{},
                random_fc(7, 3, rng)};
    return m;
}

// stem conv, two residual blocks of two convs each, pooling head.
inline Model residual_fixture(Rng& rng) {
    Model m;
    m.name = "residual_fixture";
    m.input_shape = {3, 8, 8};
    m.num_classes = 5;
    m.layers = {random_conv(6, 3, 3, rng, 1, 1),
                ReLU{},
                ResidualBlockStart{0},
                random_conv(5, 6, 3, rng, 1, 1),
                ReLU{},
                random_conv(6, 5, 3, rng, 1, 1),
                ResidualBlockEnd{0},
                ReLU{},
                ResidualBlockStart{1},
                random_conv(7, 6, 3, rng, 1, 1),
                ReLU{},
                random_conv(6, 7, 3, rng, 1, 1),
                ResidualBlockEnd{1},
                ReLU{},
                AvgPool2d{4, 4},
                Flatten{},
                random_fc(6 * 2 * 2, 5, rng)};
    return m;
}

inline BatchNorm random_batchnorm(std::size_t c, Rng& rng) {
    BatchNorm bn;
    for (std::size_t i = 0; i < c; ++i) {
        bn.gamma.push_back(1.0 + 0.3 * rng.normal());
        bn.beta.push_back(0.2 * rng.normal());
        bn.mean.push_back(0.2 * rng.normal());
        bn.var.push_back(0.5 + rng.uniform());
    }
    bn.eps = 1e-5;
    return bn;
}

}  // namespace idprune::testing
