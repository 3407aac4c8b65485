#pragma once

#include <Eigen/Dense>

#include <random>
#include <string>
#include <vector>

#include "eraselora/tensor_archive.hpp"

namespace eraselora {

/// Low-rank update of one projection W (rows x cols): W' = W + scale * up * down.
struct LoraAdapter {
    std::string name;
    Eigen::MatrixXd down; // rank x cols, seeded init
    Eigen::MatrixXd up;   // rows x rank, zero init
    double scale = 1.0;
    Eigen::MatrixXd grad_down;
    Eigen::MatrixXd grad_up;

    Eigen::MatrixXd delta() const { return scale * up * down; }

    void zero_grad()
    {
        grad_down.setZero(down.rows(), down.cols());
        grad_up.setZero(up.rows(), up.cols());
    }

    /// Accumulates factor gradients from a gradient w.r.t. the effective weight.
    void accumulate(const Eigen::MatrixXd& grad_weight)
    {
        grad_up.noalias() += scale * grad_weight * down.transpose();
        grad_down.noalias() += scale * up.transpose() * grad_weight;
    }

    std::size_t parameter_count() const { return static_cast<std::size_t>(down.size() + up.size()); }
};

struct LoraState {
    int rank = 0;
    std::vector<LoraAdapter> adapters;
    bool merged = false;

    LoraAdapter* find(const std::string& name)
    {
        for (auto& a : adapters)
            if (a.name == name)
                return &a;
        return nullptr;
    }

    const LoraAdapter* find(const std::string& name) const
    {
        for (const auto& a : adapters)
            if (a.name == name)
                return &a;
        return nullptr;
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& a : adapters)
            n += a.parameter_count();
        return n;
    }

    void zero_grad()
    {
        for (auto& a : adapters)
            a.zero_grad();
    }

    std::vector<NamedTensor> tensors() const
    {
        std::vector<NamedTensor> out;
        for (const auto& a : adapters) {
            out.push_back(NamedTensor::from_matrix(a.name + ".lora_down", a.down));
            out.push_back(NamedTensor::from_matrix(a.name + ".lora_up", a.up));
            out.push_back(NamedTensor::scalar(a.name + ".scale", a.scale));
        }
        return out;
    }

    Bytes serialize() const { return encode_tensor_archive(tensors()); }

    std::string digest() const { return sha256_hex(serialize()); }

    static LoraState deserialize(const Bytes& bytes)
    {
        const auto tensors = decode_tensor_archive(bytes);
        require(tensors.size() % 3 == 0, "adapter archive must hold (down, up, scale) triples");
        LoraState state;
        for (std::size_t i = 0; i < tensors.size(); i += 3) {
            const auto& down = tensors[i];
            const auto& up = tensors[i + 1];
            const auto& scale = tensors[i + 2];
            const std::string suffix = ".lora_down";
            require(down.name.size() > suffix.size() &&
                        down.name.compare(down.name.size() - suffix.size(), suffix.size(), suffix) == 0,
                    "unexpected tensor '" + down.name + "' in adapter archive");
            LoraAdapter a;
            a.name = down.name.substr(0, down.name.size() - suffix.size());
            require(up.name == a.name + ".lora_up" && scale.name == a.name + ".scale" && scale.data.size() == 1,
                    "adapter archive entries for '" + a.name + "' are out of order");
            a.down = down.to_matrix();
            a.up = up.to_matrix();
            a.scale = scale.data[0];
            require(a.up.cols() == a.down.rows(), "adapter '" + a.name + "' factors disagree on rank");
            a.zero_grad();
            state.rank = static_cast<int>(a.down.rows());
            state.adapters.push_back(std::move(a));
        }
        return state;
    }
};

} // namespace eraselora
