#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"

namespace genemoe {

enum class Activation { identity, relu, tanh, sigmoid };

inline Var activate(const Var& x, Activation a)
{
    switch (a) {
    case Activation::relu:
        return relu(x);
    case Activation::tanh:
        return tanh(x);
    case Activation::sigmoid:
        return sigmoid(x);
    case Activation::identity:
        break;
    }
    return x;
}

/// Glorot-uniform initialized matrix.
inline Tensor glorot_uniform(Rng& rng, std::size_t fan_in, std::size_t fan_out)
{
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t({fan_in, fan_out});
    for (auto& v : t.values())
        v = (2.0 * rng.uniform() - 1.0) * limit;
    return t;
}

/// x * W + b followed by an activation.
class DenseLayer {
public:
    DenseLayer(const std::string& name, std::size_t input_dim, std::size_t output_dim, Activation activation,
               Rng& rng)
        : weight(name + ".weight", glorot_uniform(rng, input_dim, output_dim)),
          bias(name + ".bias", Tensor({output_dim}, 0.0)), activation(activation)
    {
    }

    Var forward(Tape& tape, const Var& x) const
    {
        if (x.cols() != input_dim())
            throw DimensionError("dense layer " + weight.name + " expects " + std::to_string(input_dim()) +
                                 " inputs, got " + shape_string(x.shape()));
        return activate(matmul(x, tape.param(weight)) + tape.param(bias), activation);
    }

    std::size_t input_dim() const noexcept { return weight.value.rows(); }
    std::size_t output_dim() const noexcept { return weight.value.cols(); }

    std::vector<Parameter*> parameters() { return {&weight, &bias}; }

    Parameter weight;
    Parameter bias;
    Activation activation;
};

/// Inverted dropout; identity when rate is 0.
inline Var dropout(Tape& tape, const Var& x, double rate, Rng& rng)
{
    if (rate <= 0.0)
        return x;
    Tensor mask(x.shape());
    const double keep = 1.0 - rate;
    for (auto& m : mask.values())
        m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    return x * tape.constant(std::move(mask));
}

} // namespace genemoe
