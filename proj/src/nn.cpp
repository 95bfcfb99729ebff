#include "cdhm/nn.hpp"

#include <cmath>

namespace cdhm {

Tensor uniform_fan_in(const std::vector<int64_t>& shape, int64_t fan_in, Rng& rng) {
    Tensor t(shape);
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

void LinearLayer::init(ParamStore& ps, const std::string& name, int64_t in_dim,
                       int64_t out_dim, Rng& rng) {
    in = in_dim;
    out = out_dim;
    w = ps.add(name + ".weight", uniform_fan_in({out, in}, in, rng));
    b = ps.add(name + ".bias", Tensor({out}));
}

Var LinearLayer::forward(const ParamBind& pb, Var x) const {
    return linear(x, pb.var(w), pb.var(b));
}

void Conv1dLayer::init(ParamStore& ps, const std::string& name, int64_t ci_,
                       int64_t co_, int64_t k_, int stride_, int pad_, Rng& rng) {
    ci = ci_;
    co = co_;
    k = k_;
    stride = stride_;
    pad = pad_;
    w = ps.add(name + ".weight", uniform_fan_in({co, ci, k}, ci * k, rng));
    b = ps.add(name + ".bias", Tensor({co}));
}

Var Conv1dLayer::forward(const ParamBind& pb, Var x) const {
    return conv1d(x, pb.var(w), pb.var(b), stride, pad);
}

void Conv2dLayer::init(ParamStore& ps, const std::string& name, int64_t ci_,
                       int64_t co_, int64_t k_, int stride_, int pad_, Rng& rng) {
    ci = ci_;
    co = co_;
    k = k_;
    stride = stride_;
    pad = pad_;
    w = ps.add(name + ".weight", uniform_fan_in({co, ci, k, k}, ci * k * k, rng));
    b = ps.add(name + ".bias", Tensor({co}));
}

Var Conv2dLayer::forward(const ParamBind& pb, Var x) const {
    return conv2d(x, pb.var(w), pb.var(b), stride, pad);
}

void ConvTranspose2dLayer::init(ParamStore& ps, const std::string& name,
                                int64_t ci_, int64_t co_, int64_t k_, int stride_,
                                int pad_, Rng& rng) {
    ci = ci_;
    co = co_;
    k = k_;
    stride = stride_;
    pad = pad_;
    w = ps.add(name + ".weight", uniform_fan_in({ci, co, k, k}, ci * k * k, rng));
    b = ps.add(name + ".bias", Tensor({co}));
}

Var ConvTranspose2dLayer::forward(const ParamBind& pb, Var x) const {
    return conv_transpose2d(x, pb.var(w), pb.var(b), stride, pad);
}

void BatchNorm2dLayer::init(ParamStore& ps, const std::string& name,
                            int64_t channels) {
    gamma = ps.add(name + ".gamma", Tensor({channels}, 1.0));
    beta = ps.add(name + ".beta", Tensor({channels}));
    running_mean = Tensor({channels}, 0.0);
    running_var = Tensor({channels}, 1.0);
}

Var BatchNorm2dLayer::forward(const ParamBind& pb, Var x, bool training) {
    return batch_norm2d(x, pb.var(gamma), pb.var(beta), running_mean, running_var,
                        training, momentum);
}

void GruCellLayer::init(ParamStore& ps, const std::string& name, int64_t in_dim,
                        int64_t hidden_dim, Rng& rng) {
    in = in_dim;
    hidden = hidden_dim;
    int64_t cat = in + hidden;
    w_r = ps.add(name + ".W_R", uniform_fan_in({hidden, cat}, cat, rng));
    b_r = ps.add(name + ".bias_R", Tensor({hidden}));
    w_z = ps.add(name + ".W_Z", uniform_fan_in({hidden, cat}, cat, rng));
    b_z = ps.add(name + ".bias_Z", Tensor({hidden}));
    w_h = ps.add(name + ".W_H", uniform_fan_in({hidden, cat}, cat, rng));
    b_h = ps.add(name + ".bias_H", Tensor({hidden}));
}

Var GruCellLayer::forward(const ParamBind& pb, Var x, Var h) const {
    Var xh = concat_cols({x, h});
    Var r = sigmoid(linear(xh, pb.var(w_r), pb.var(b_r)));
    Var z = sigmoid(linear(xh, pb.var(w_z), pb.var(b_z)));
    Var xrh = concat_cols({x, mul(r, h)});
    Var cand = tanh_op(linear(xrh, pb.var(w_h), pb.var(b_h)));
    return add(mul(one_minus(z), h), mul(z, cand));
}

GruCellLayer::Gates GruCellLayer::gates(const ParamBind& pb, Var x, Var h) const {
    Var xh = concat_cols({x, h});
    Var r = sigmoid(linear(xh, pb.var(w_r), pb.var(b_r)));
    Var z = sigmoid(linear(xh, pb.var(w_z), pb.var(b_z)));
    return {r, z};
}

}  // namespace cdhm
