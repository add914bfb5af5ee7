#pragma once

// Builders for the small architectures used by the command-line tool and the
// experiments. Parameters are zero; call initialize_parameters afterwards.

#include <string>
#include <vector>

#include "idprune/nn.hpp"

namespace idprune {

// fc -> relu for every hidden width, then a linear output layer.
inline Model make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t outputs,
                      std::string name = "mlp") {
    if (input_dim == 0 || outputs == 0) throw InvalidInput("mlp needs positive input and output sizes");
    Model m;
    m.name = std::move(name);
    m.input_shape = {input_dim};
    m.num_classes = outputs;
    std::size_t prev = input_dim;
    for (std::size_t h : hidden) {
        if (h == 0) throw InvalidInput("mlp hidden widths must be positive");
        m.layers.push_back(FullyConnected{Matrix(prev, h), std::vector<double>(h, 0.0)});
        m.layers.push_back(ReLU{});
        prev = h;
    }
    m.layers.push_back(FullyConnected{Matrix(prev, outputs), std::vector<double>(outputs, 0.0)});
    validate_model(m);
    return m;
}

struct ConvBlockSpec {
    std::size_t channels = 8;
    std::size_t kernel = 3;
    std::size_t padding = 1;
    std::size_t pool = 2;  // max-pool size and stride, 0 or 1 for none
};

// conv -> relu [-> maxpool] per block, flatten, then an mlp head.
inline Model make_convnet(const Shape& input_shape, const std::vector<ConvBlockSpec>& blocks,
                          const std::vector<std::size_t>& hidden, std::size_t outputs, std::string name = "convnet") {
    if (input_shape.size() != 3) throw InvalidInput("convnet input shape must be (channels, height, width)");
    if (outputs == 0) throw InvalidInput("convnet needs a positive output size");
    Model m;
    m.name = std::move(name);
    m.input_shape = input_shape;
    m.num_classes = outputs;
    std::size_t c = input_shape[0];
    for (const ConvBlockSpec& b : blocks) {
        if (b.channels == 0 || b.kernel == 0) throw InvalidInput("convnet blocks need positive channels and kernel");
        Conv2d conv;
        conv.weight = Tensor({b.channels, c, b.kernel, b.kernel});
        conv.bias.assign(b.channels, 0.0);
        conv.padding = b.padding;
        m.layers.push_back(std::move(conv));
        m.layers.push_back(ReLU{});
        if (b.pool > 1) m.layers.push_back(MaxPool2d{b.pool, b.pool});
        c = b.channels;
    }
    m.layers.push_back(Flatten{});
    m.num_classes = 0;
    std::size_t prev = validate_model(m).back()[0];
    m.num_classes = outputs;
    for (std::size_t h : hidden) {
        m.layers.push_back(FullyConnected{Matrix(prev, h), std::vector<double>(h, 0.0)});
        m.layers.push_back(ReLU{});
        prev = h;
    }
    m.layers.push_back(FullyConnected{Matrix(prev, outputs), std::vector<double>(outputs, 0.0)});
    validate_model(m);
    return m;
}

}  // namespace idprune
