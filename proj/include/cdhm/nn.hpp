#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cdhm/autodiff.hpp"
#include "cdhm/rng.hpp"
#include "cdhm/tensor.hpp"

namespace cdhm {

/// Named, ordered collection of trainable tensors. Names are hierarchical
/// ("image_encoder.conv1.weight") and stable; the checkpoint format and the
/// optimizer state are keyed on them.
class ParamStore {
public:
    int add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw std::invalid_argument("duplicate param: " + name);
        index_[name] = static_cast<int>(names_.size());
        names_.push_back(name);
        values_.push_back(std::move(init));
        return static_cast<int>(names_.size()) - 1;
    }

    int count() const { return static_cast<int>(names_.size()); }
    const std::string& name(int i) const { return names_[static_cast<size_t>(i)]; }
    Tensor& value(int i) { return values_[static_cast<size_t>(i)]; }
    const Tensor& value(int i) const { return values_[static_cast<size_t>(i)]; }
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    int id(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no param: " + name);
        return it->second;
    }
    Tensor& value(const std::string& name) { return value(id(name)); }

    int64_t total_elements() const {
        int64_t n = 0;
        for (const auto& v : values_) n += v.size();
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor> values_;
    std::unordered_map<std::string, int> index_;
};

/// Per-tape binding of every parameter to a leaf Var. Rebuilt each step.
class ParamBind {
public:
    ParamBind(Tape& tape, ParamStore& store) : tape_(&tape) {
        vars_.reserve(static_cast<size_t>(store.count()));
        for (int i = 0; i < store.count(); ++i)
            vars_.push_back(tape.leaf(store.value(i), /*requires_grad=*/true));
    }
    Var var(int param_id) const { return vars_[static_cast<size_t>(param_id)]; }
    Tape& tape() const { return *tape_; }

private:
    Tape* tape_;
    std::vector<Var> vars_;
};

/// Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero bias.
Tensor uniform_fan_in(const std::vector<int64_t>& shape, int64_t fan_in, Rng& rng);

struct LinearLayer {
    int w = -1, b = -1;
    int64_t in = 0, out = 0;
    void init(ParamStore& ps, const std::string& name, int64_t in_dim,
              int64_t out_dim, Rng& rng);
    Var forward(const ParamBind& pb, Var x) const;
};

struct Conv1dLayer {
    int w = -1, b = -1;
    int64_t ci = 0, co = 0, k = 0;
    int stride = 1, pad = 0;
    void init(ParamStore& ps, const std::string& name, int64_t ci_, int64_t co_,
              int64_t k_, int stride_, int pad_, Rng& rng);
    Var forward(const ParamBind& pb, Var x) const;
};

struct Conv2dLayer {
    int w = -1, b = -1;
    int64_t ci = 0, co = 0, k = 0;
    int stride = 1, pad = 0;
    void init(ParamStore& ps, const std::string& name, int64_t ci_, int64_t co_,
              int64_t k_, int stride_, int pad_, Rng& rng);
    Var forward(const ParamBind& pb, Var x) const;
};

struct ConvTranspose2dLayer {
    int w = -1, b = -1;  // w: [Ci, Co, K, K]
    int64_t ci = 0, co = 0, k = 0;
    int stride = 1, pad = 0;
    void init(ParamStore& ps, const std::string& name, int64_t ci_, int64_t co_,
              int64_t k_, int stride_, int pad_, Rng& rng);
    Var forward(const ParamBind& pb, Var x) const;
};

/// Gamma/beta are trainable; running statistics live here as plain tensors
/// and are serialized with the checkpoint, not with the parameters.
struct BatchNorm2dLayer {
    int gamma = -1, beta = -1;
    Tensor running_mean, running_var;
    double momentum = 0.1;
    void init(ParamStore& ps, const std::string& name, int64_t channels);
    Var forward(const ParamBind& pb, Var x, bool training);
};

/// Gated recurrent cell. Reset/update gates R, Z in (0,1); candidate memory
/// via tanh; update h' = (1-Z) (.) h + Z (.) candidate, so saturating the
/// update gate hands the state over to the candidate entirely.
struct GruCellLayer {
    int w_r = -1, b_r = -1, w_z = -1, b_z = -1, w_h = -1, b_h = -1;
    int64_t in = 0, hidden = 0;
    void init(ParamStore& ps, const std::string& name, int64_t in_dim,
              int64_t hidden_dim, Rng& rng);
    Var forward(const ParamBind& pb, Var x, Var h) const;
    /// Gate activations for a given input, for the (0,1) range property.
    struct Gates {
        Var reset, update;
    };
    Gates gates(const ParamBind& pb, Var x, Var h) const;
};

}  // namespace cdhm
