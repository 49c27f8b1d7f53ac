#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "midialign/augment.hpp"
#include "midialign/crnn.hpp"
#include "midialign/errors.hpp"
#include "midialign/kernels.hpp"

namespace midialign {

using kernels::Transpose;

namespace {

constexpr double kBnEpsilon = 1e-5;
constexpr double kBnMomentum = 0.1;
constexpr std::size_t kBins = kPitchCount;

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

/// Dropout mask with inverted scaling; drawn in a fixed order from `rng`.
template <typename T>
std::vector<T> dropout_mask(std::size_t n, double p, Rng& rng) {
    std::vector<T> mask(n);
    const T keep = static_cast<T>(1.0 / (1.0 - p));
    for (auto& m : mask) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        m = u < p ? T(0) : keep;
    }
    return mask;
}

template <typename T>
void add_bias_rows(T* y, std::size_t rows, std::size_t cols, const T* bias) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] += bias[c];
}

template <typename T>
void column_sums(const T* x, std::size_t rows, std::size_t cols, T* out) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c] += x[r * cols + c];
}

}  // namespace

std::string_view to_string(RnnCell cell) { return cell == RnnCell::lstm ? "lstm" : "gru"; }

RnnCell rnn_cell_from_string(std::string_view name) {
    if (name == "lstm") return RnnCell::lstm;
    if (name == "gru") return RnnCell::gru;
    throw ConfigError("unknown rnn cell '" + std::string(name) + "' (expected lstm or gru)");
}

// --- parameters ---------------------------------------------------------------------

template <typename T>
struct Crnn<T>::Params {
    struct Tensor {
        std::string name;
        std::vector<std::size_t> shape;
        std::vector<T> value;
        std::vector<T> grad;
        bool trainable = true;
    };
    struct Branch {
        std::size_t conv_w[3], conv_b[3], bn_gamma[3], bn_beta[3], bn_mean[3], bn_var[3];
        std::size_t dense_w, dense_b;
    };
    struct Direction {
        std::size_t w_ih, w_hh, b_ih, b_hh;
    };

    std::vector<Tensor> tensors;
    Branch branch[2];
    Direction dir[2];
    std::size_t out_w = 0, out_b = 0;

    std::size_t add(std::string name, std::vector<std::size_t> shape, bool trainable = true) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        tensors.push_back({std::move(name), std::move(shape), std::vector<T>(n, T(0)),
                           std::vector<T>(trainable ? n : 0, T(0)), trainable});
        return tensors.size() - 1;
    }
    T* v(std::size_t i) { return tensors[i].value.data(); }
    const T* v(std::size_t i) const { return tensors[i].value.data(); }
    T* g(std::size_t i) { return tensors[i].grad.data(); }
};

template <typename T>
struct Crnn<T>::Workspace {
    struct Conv {
        std::size_t cin = 0, cout = 0, width = 0;
        std::vector<T> z;  // pre-normalization
        std::vector<T> a;  // after BatchNorm and ReLU
        std::vector<double> mean, inv_std;
    };
    struct Branch {
        std::vector<T> input;       // [B][1][N][88]
        Conv conv[3];
        std::vector<T> pooled2;     // [B][f2][N][44]
        std::vector<T> pooled3;     // [B][f3][N][22]
        std::vector<T> flat;        // [BN][f3*22]
        std::vector<T> dense;       // after ReLU, before dropout
        std::vector<T> drop_mask;
    };
    struct Direction {
        std::vector<T> gates;   // activated gates [BN][G*H]
        std::vector<T> cell;    // LSTM cell state [BN][H]
        std::vector<T> hidden;  // [BN][H]
        std::vector<T> gh_n;    // GRU recurrent candidate term [BN][H]
    };

    PassOptions opts;
    std::size_t batch = 0, frames = 0;
    Branch branch[2];
    std::vector<T> concat;  // [BN][2E]
    Direction dir[2];
    std::vector<T> rnn_raw;   // [BN][Hout]
    std::vector<T> rnn_mask;
    std::vector<T> rnn_out;   // after dropout
    std::vector<T> probs;
};

template <typename T>
void Crnn<T>::WorkspaceDeleter::operator()(Workspace* ws) const {
    delete ws;
}

template <typename T>
typename Crnn<T>::WorkspacePtr Crnn<T>::make_workspace() {
    return WorkspacePtr(new Workspace);
}

template <typename T>
Crnn<T>::Crnn(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), p_(std::make_unique<Params>()) {
    cfg_.validate();
    Params& P = *p_;
    const std::size_t f[3] = {static_cast<std::size_t>(cfg.conv_filters[0]), static_cast<std::size_t>(cfg.conv_filters[1]),
                              static_cast<std::size_t>(cfg.conv_filters[2])};
    const std::size_t cin[3] = {1, f[0], f[1]};
    const auto E = static_cast<std::size_t>(cfg.dense_embed);
    const auto H = static_cast<std::size_t>(cfg.rnn_hidden);
    const std::size_t G = cfg.rnn_cell == RnnCell::lstm ? 4 : 3;
    const char* names[2] = {"roll", "audio"};
    for (int b = 0; b < 2; ++b) {
        const std::string pre = names[b];
        auto& br = P.branch[b];
        for (int l = 0; l < 3; ++l) {
            const std::string c = pre + ".conv" + std::to_string(l + 1);
            const std::string n = pre + ".bn" + std::to_string(l + 1);
            br.conv_w[l] = P.add(c + ".weight", {f[l], cin[l], 3, 3});
            br.conv_b[l] = P.add(c + ".bias", {f[l]});
            br.bn_gamma[l] = P.add(n + ".gamma", {f[l]});
            br.bn_beta[l] = P.add(n + ".beta", {f[l]});
            br.bn_mean[l] = P.add(n + ".running_mean", {f[l]}, false);
            br.bn_var[l] = P.add(n + ".running_var", {f[l]}, false);
        }
        br.dense_w = P.add(pre + ".dense.weight", {E, f[2] * kPooledPitch});
        br.dense_b = P.add(pre + ".dense.bias", {E});
    }
    const int dirs = cfg.bidirectional ? 2 : 1;
    const char* dnames[2] = {"rnn.fwd", "rnn.bwd"};
    for (int d = 0; d < dirs; ++d) {
        const std::string pre = dnames[d];
        P.dir[d].w_ih = P.add(pre + ".w_ih", {G * H, 2 * E});
        P.dir[d].w_hh = P.add(pre + ".w_hh", {G * H, H});
        P.dir[d].b_ih = P.add(pre + ".b_ih", {G * H});
        P.dir[d].b_hh = P.add(pre + ".b_hh", {G * H});
    }
    P.out_w = P.add("out.weight", {kBins, cfg_.rnn_output_size()});
    P.out_b = P.add("out.bias", {kBins});

    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases, unit
    // BatchNorm scale, unit running variance.
    Rng rng(seed);
    auto fill = [&](std::size_t idx, double fan_in) {
        const double bound = 1.0 / std::sqrt(fan_in);
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& x : P.tensors[idx].value) x = static_cast<T>(u(rng));
    };
    for (int b = 0; b < 2; ++b) {
        auto& br = P.branch[b];
        for (int l = 0; l < 3; ++l) {
            fill(br.conv_w[l], 9.0 * static_cast<double>(cin[l]));
            fill(br.conv_b[l], 9.0 * static_cast<double>(cin[l]));
            std::fill(P.tensors[br.bn_gamma[l]].value.begin(), P.tensors[br.bn_gamma[l]].value.end(), T(1));
            std::fill(P.tensors[br.bn_var[l]].value.begin(), P.tensors[br.bn_var[l]].value.end(), T(1));
        }
        fill(br.dense_w, static_cast<double>(f[2] * kPooledPitch));
        fill(br.dense_b, static_cast<double>(f[2] * kPooledPitch));
    }
    for (int d = 0; d < dirs; ++d)
        for (auto idx : {P.dir[d].w_ih, P.dir[d].w_hh, P.dir[d].b_ih, P.dir[d].b_hh}) fill(idx, static_cast<double>(H));
    fill(P.out_w, static_cast<double>(cfg_.rnn_output_size()));
    fill(P.out_b, static_cast<double>(cfg_.rnn_output_size()));
}

template <typename T>
Crnn<T>::Crnn(const Crnn& o) : cfg_(o.cfg_), p_(std::make_unique<Params>(*o.p_)) {}
template <typename T>
Crnn<T>& Crnn<T>::operator=(const Crnn& o) {
    if (this != &o) {
        cfg_ = o.cfg_;
        p_ = std::make_unique<Params>(*o.p_);
    }
    return *this;
}
template <typename T>
Crnn<T>::Crnn(Crnn&&) noexcept = default;
template <typename T>
Crnn<T>& Crnn<T>::operator=(Crnn&&) noexcept = default;
template <typename T>
Crnn<T>::~Crnn() = default;

template <typename T>
Crnn<T> Crnn<T>::from_store(const WeightStore& store) {
    Crnn model(store.config);
    for (auto& t : model.p_->tensors) {
        const NamedTensor* src = store.find(t.name);
        if (!src) throw LoadError("weights: missing tensor '" + t.name + "'");
        if (src->shape != t.shape) throw LoadError("weights: shape mismatch for tensor '" + t.name + "'");
        if (src->data.size() != t.value.size()) throw LoadError("weights: size mismatch for tensor '" + t.name + "'");
        std::transform(src->data.begin(), src->data.end(), t.value.begin(), [](float x) { return static_cast<T>(x); });
    }
    if (store.tensors.size() != model.p_->tensors.size()) throw LoadError("weights: unexpected extra tensors");
    return model;
}

template <typename T>
WeightStore Crnn<T>::to_store() const {
    WeightStore store;
    store.config = cfg_;
    for (const auto& t : p_->tensors) {
        NamedTensor nt{t.name, t.shape, std::vector<float>(t.value.size())};
        std::transform(t.value.begin(), t.value.end(), nt.data.begin(), [](T x) { return static_cast<float>(x); });
        store.tensors.push_back(std::move(nt));
    }
    return store;
}

template <typename T>
std::size_t Crnn<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : p_->tensors)
        if (t.trainable) n += t.value.size();
    return n;
}

template <typename T>
std::vector<ParameterView<T>> Crnn<T>::parameters() {
    std::vector<ParameterView<T>> out;
    for (auto& t : p_->tensors)
        if (t.trainable) out.push_back({t.name, t.shape, std::span<T>(t.value), std::span<T>(t.grad)});
    return out;
}

template <typename T>
void Crnn<T>::zero_grad() {
    for (auto& t : p_->tensors) std::fill(t.grad.begin(), t.grad.end(), T(0));
}

// --- forward ------------------------------------------------------------------------

namespace {

template <typename T>
void batch_norm_forward(std::vector<T>& z_to_y, const std::vector<T>& z, std::size_t B, std::size_t C, std::size_t plane,
                        const T* gamma, const T* beta, T* run_mean, T* run_var, bool batch_stats, bool update,
                        std::vector<double>& mean, std::vector<double>& inv_std) {
    mean.assign(C, 0.0);
    inv_std.assign(C, 0.0);
    const double count = static_cast<double>(B * plane);
    for (std::size_t c = 0; c < C; ++c) {
        double m, var;
        if (batch_stats) {
            double s = 0;
            for (std::size_t b = 0; b < B; ++b) {
                const T* x = z.data() + (b * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) s += x[i];
            }
            m = s / count;
            double ss = 0;
            for (std::size_t b = 0; b < B; ++b) {
                const T* x = z.data() + (b * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) ss += (x[i] - m) * (x[i] - m);
            }
            var = ss / count;
            if (update) {
                run_mean[c] = static_cast<T>((1 - kBnMomentum) * run_mean[c] + kBnMomentum * m);
                const double unbiased = count > 1 ? var * count / (count - 1) : var;
                run_var[c] = static_cast<T>((1 - kBnMomentum) * run_var[c] + kBnMomentum * unbiased);
            }
        } else {
            m = run_mean[c];
            var = run_var[c];
        }
        mean[c] = m;
        inv_std[c] = 1.0 / std::sqrt(var + kBnEpsilon);
        const T scale = static_cast<T>(gamma[c] * inv_std[c]);
        const T shift = static_cast<T>(beta[c] - gamma[c] * inv_std[c] * m);
        for (std::size_t b = 0; b < B; ++b) {
            const T* x = z.data() + (b * C + c) * plane;
            T* y = z_to_y.data() + (b * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const T v = x[i] * scale + shift;
                y[i] = v > T(0) ? v : T(0);
            }
        }
    }
}

/// Max over adjacent pitch pairs: [B][C][N][W] -> [B][C][N][W/2].
template <typename T>
std::vector<T> pool_pitch(const std::vector<T>& a, std::size_t rows, std::size_t width) {
    const std::size_t half = width / 2;
    std::vector<T> out(rows * half);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t p = 0; p < half; ++p) out[r * half + p] = std::max(a[r * width + 2 * p], a[r * width + 2 * p + 1]);
    return out;
}

template <typename T>
void pool_pitch_backward(const std::vector<T>& a, const std::vector<T>& d_out, std::size_t rows, std::size_t width,
                         std::vector<T>& d_in) {
    const std::size_t half = width / 2;
    d_in.assign(rows * width, T(0));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t p = 0; p < half; ++p) {
            const std::size_t i0 = r * width + 2 * p;
            d_in[a[i0] >= a[i0 + 1] ? i0 : i0 + 1] = d_out[r * half + p];
        }
}

}  // namespace

template <typename T>
std::vector<T> Crnn<T>::forward(const SequenceBatch<T>& batch, const PassOptions& opts, Workspace& ws) const {
    const Params& P = *p_;
    const std::size_t B = batch.batch, N = batch.frames, BN = B * N;
    if (B == 0 || N == 0) throw ArgumentError("crnn forward: empty batch");
    if (batch.roll.size() != BN * kBins || batch.features.size() != BN * kBins)
        throw ArgumentError("crnn forward: piano roll and features must both be B x N x 88");
    ws.opts = opts;
    ws.batch = B;
    ws.frames = N;
    Rng rng(opts.dropout_seed);
    const bool drop = opts.dropout && cfg_.dropout > 0;

    const auto E = static_cast<std::size_t>(cfg_.dense_embed);
    ws.concat.assign(BN * 2 * E, T(0));
    for (int b = 0; b < 2; ++b) {
        const auto& br = P.branch[b];
        auto& wb = ws.branch[b];
        wb.input = b == 0 ? batch.roll : batch.features;
        if (b == 0 && cfg_.blind_transcription) std::fill(wb.input.begin(), wb.input.end(), T(0));

        const std::vector<T>* x = &wb.input;
        std::size_t cin = 1, width = kBins;
        for (int l = 0; l < 3; ++l) {
            auto& cv = wb.conv[l];
            const auto cout = static_cast<std::size_t>(cfg_.conv_filters[static_cast<std::size_t>(l)]);
            cv.cin = cin;
            cv.cout = cout;
            cv.width = width;
            const std::size_t plane = N * width;
            cv.z.assign(B * cout * plane, T(0));
            for (std::size_t s = 0; s < B; ++s)
                kernels::conv3x3_forward(x->data() + s * cin * plane, cin, N, width, P.v(br.conv_w[l]), P.v(br.conv_b[l]),
                                         cout, cv.z.data() + s * cout * plane);
            cv.a.resize(cv.z.size());
            batch_norm_forward(cv.a, cv.z, B, cout, plane, P.v(br.bn_gamma[l]), P.v(br.bn_beta[l]),
                               const_cast<T*>(P.v(br.bn_mean[l])), const_cast<T*>(P.v(br.bn_var[l])),
                               opts.batch_statistics, opts.update_running_stats, cv.mean, cv.inv_std);
            if (l == 0) {
                x = &cv.a;
            } else if (l == 1) {
                wb.pooled2 = pool_pitch(cv.a, B * cout * N, width);
                x = &wb.pooled2;
                width /= 2;
            } else {
                wb.pooled3 = pool_pitch(cv.a, B * cout * N, width);
                width /= 2;
            }
            cin = cout;
        }
        // Flatten (channel, pitch) per frame.
        const std::size_t C3 = cin, K = C3 * width;
        wb.flat.assign(BN * K, T(0));
        for (std::size_t s = 0; s < B; ++s)
            for (std::size_t c = 0; c < C3; ++c)
                for (std::size_t t = 0; t < N; ++t)
                    std::copy_n(wb.pooled3.data() + ((s * C3 + c) * N + t) * width, width,
                                wb.flat.data() + (s * N + t) * K + c * width);
        wb.dense.assign(BN * E, T(0));
        kernels::gemm(Transpose::no, Transpose::yes, BN, E, K, T(1), wb.flat.data(), K, P.v(br.dense_w), K, T(0),
                      wb.dense.data(), E);
        add_bias_rows(wb.dense.data(), BN, E, P.v(br.dense_b));
        for (auto& v : wb.dense) v = v > T(0) ? v : T(0);
        if (drop)
            wb.drop_mask = dropout_mask<T>(BN * E, cfg_.dropout, rng);
        else
            wb.drop_mask.clear();
        for (std::size_t r = 0; r < BN; ++r)
            for (std::size_t k = 0; k < E; ++k) {
                const T v = wb.dense[r * E + k] * (drop ? wb.drop_mask[r * E + k] : T(1));
                ws.concat[r * 2 * E + static_cast<std::size_t>(b) * E + k] = v;
            }
    }

    // Recurrent layer.
    const auto H = static_cast<std::size_t>(cfg_.rnn_hidden);
    const bool lstm = cfg_.rnn_cell == RnnCell::lstm;
    const std::size_t G = lstm ? 4 : 3, GH = G * H, D = cfg_.bidirectional ? 2 : 1, HO = D * H, X = 2 * E;
    ws.rnn_raw.assign(BN * HO, T(0));
    std::vector<T> gh(B * GH), hprev(B * H), cprev(B * H);
    for (std::size_t d = 0; d < D; ++d) {
        const auto& pd = P.dir[d];
        auto& wd = ws.dir[d];
        wd.gates.assign(BN * GH, T(0));
        kernels::gemm(Transpose::no, Transpose::yes, BN, GH, X, T(1), ws.concat.data(), X, P.v(pd.w_ih), X, T(0),
                      wd.gates.data(), GH);
        add_bias_rows(wd.gates.data(), BN, GH, P.v(pd.b_ih));
        if (lstm) add_bias_rows(wd.gates.data(), BN, GH, P.v(pd.b_hh));
        wd.hidden.assign(BN * H, T(0));
        if (lstm)
            wd.cell.assign(BN * H, T(0));
        else
            wd.gh_n.assign(BN * H, T(0));
        std::fill(hprev.begin(), hprev.end(), T(0));
        std::fill(cprev.begin(), cprev.end(), T(0));
        const T* bhh = P.v(pd.b_hh);
        std::vector<T> whh_t(H * GH);  // [H][GH], so the per-step product needs no repacking
        const T* whh = P.v(pd.w_hh);
        for (std::size_t g = 0; g < GH; ++g)
            for (std::size_t k = 0; k < H; ++k) whh_t[k * GH + g] = whh[g * H + k];
        for (std::size_t step = 0; step < N; ++step) {
            const std::size_t t = d == 0 ? step : N - 1 - step;
            if (step == 0) {
                std::fill(gh.begin(), gh.end(), T(0));
            } else {
                kernels::gemm(Transpose::no, Transpose::no, B, GH, H, T(1), hprev.data(), H, whh_t.data(), GH, T(0),
                              gh.data(), GH);
            }
            for (std::size_t s = 0; s < B; ++s) {
                const std::size_t row = s * N + t;
                T* gate = wd.gates.data() + row * GH;
                const T* r = gh.data() + s * GH;
                T* hp = hprev.data() + s * H;
                T* h = wd.hidden.data() + row * H;
                if (lstm) {
                    T* cp = cprev.data() + s * H;
                    T* c = wd.cell.data() + row * H;
                    for (std::size_t k = 0; k < H; ++k) {
                        const T i = sigmoid(gate[k] + r[k]);
                        const T f = sigmoid(gate[H + k] + r[H + k]);
                        const T g = std::tanh(gate[2 * H + k] + r[2 * H + k]);
                        const T o = sigmoid(gate[3 * H + k] + r[3 * H + k]);
                        gate[k] = i;
                        gate[H + k] = f;
                        gate[2 * H + k] = g;
                        gate[3 * H + k] = o;
                        c[k] = f * cp[k] + i * g;
                        h[k] = o * std::tanh(c[k]);
                        cp[k] = c[k];
                        hp[k] = h[k];
                    }
                } else {
                    T* ghn = wd.gh_n.data() + row * H;
                    for (std::size_t k = 0; k < H; ++k) {
                        const T rr = sigmoid(gate[k] + r[k] + bhh[k]);
                        const T z = sigmoid(gate[H + k] + r[H + k] + bhh[H + k]);
                        ghn[k] = r[2 * H + k] + bhh[2 * H + k];
                        const T n = std::tanh(gate[2 * H + k] + rr * ghn[k]);
                        gate[k] = rr;
                        gate[H + k] = z;
                        gate[2 * H + k] = n;
                        h[k] = (T(1) - z) * n + z * hp[k];
                        hp[k] = h[k];
                    }
                }
            }
        }
        for (std::size_t row = 0; row < BN; ++row)
            std::copy_n(wd.hidden.data() + row * H, H, ws.rnn_raw.data() + row * HO + d * H);
    }
    if (drop) {
        ws.rnn_mask = dropout_mask<T>(BN * HO, cfg_.dropout, rng);
        ws.rnn_out.resize(BN * HO);
        for (std::size_t i = 0; i < ws.rnn_out.size(); ++i) ws.rnn_out[i] = ws.rnn_raw[i] * ws.rnn_mask[i];
    } else {
        ws.rnn_mask.clear();
        ws.rnn_out = ws.rnn_raw;
    }

    ws.probs.assign(BN * kBins, T(0));
    kernels::gemm(Transpose::no, Transpose::yes, BN, kBins, HO, T(1), ws.rnn_out.data(), HO, P.v(P.out_w), HO, T(0),
                  ws.probs.data(), kBins);
    add_bias_rows(ws.probs.data(), BN, kBins, P.v(P.out_b));
    const T lo = std::numeric_limits<T>::min();
    const T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
    for (auto& v : ws.probs) v = std::clamp(sigmoid(v), lo, hi);
    return ws.probs;
}

// --- backward -----------------------------------------------------------------------

template <typename T>
double Crnn<T>::backward(Workspace& ws, std::span<const T> target) {
    Params& P = *p_;
    const std::size_t B = ws.batch, N = ws.frames, BN = B * N;
    if (target.size() != ws.probs.size()) throw ArgumentError("crnn backward: target shape mismatch");
    const bool drop = ws.opts.dropout && cfg_.dropout > 0;

    // d(mean BCE)/d(logit); zero where the clamp is active.
    constexpr double kClamp = 1e-7;
    const double count = static_cast<double>(ws.probs.size());
    double loss = 0;
    std::vector<T> dlogit(ws.probs.size());
    for (std::size_t i = 0; i < ws.probs.size(); ++i) {
        const double p = ws.probs[i], t = target[i];
        const double pc = std::clamp(p, kClamp, 1 - kClamp);
        loss -= t * std::log(pc) + (1 - t) * std::log(1 - pc);
        dlogit[i] = (p < kClamp || p > 1 - kClamp) ? T(0) : static_cast<T>((p - t) / count);
    }
    loss /= count;

    const auto H = static_cast<std::size_t>(cfg_.rnn_hidden);
    const auto E = static_cast<std::size_t>(cfg_.dense_embed);
    const bool lstm = cfg_.rnn_cell == RnnCell::lstm;
    const std::size_t G = lstm ? 4 : 3, GH = G * H, D = cfg_.bidirectional ? 2 : 1, HO = D * H, X = 2 * E;

    kernels::gemm(Transpose::yes, Transpose::no, kBins, HO, BN, T(1), dlogit.data(), kBins, ws.rnn_out.data(), HO, T(1),
                  P.g(P.out_w), HO);
    column_sums(dlogit.data(), BN, kBins, P.g(P.out_b));
    std::vector<T> drnn(BN * HO);
    kernels::gemm(Transpose::no, Transpose::no, BN, HO, kBins, T(1), dlogit.data(), kBins, P.v(P.out_w), HO, T(0),
                  drnn.data(), HO);
    if (drop)
        for (std::size_t i = 0; i < drnn.size(); ++i) drnn[i] *= ws.rnn_mask[i];

    std::vector<T> dconcat(BN * X, T(0));
    std::vector<T> dgi(BN * GH), dgh(lstm ? 0 : BN * GH), hprev_all(BN * H);
    std::vector<T> dh_next(B * H), dc_next(B * H), dgate_step(B * GH);
    for (std::size_t d = 0; d < D; ++d) {
        const auto& pd = P.dir[d];
        const auto& wd = ws.dir[d];
        std::fill(dh_next.begin(), dh_next.end(), T(0));
        std::fill(dc_next.begin(), dc_next.end(), T(0));
        std::fill(hprev_all.begin(), hprev_all.end(), T(0));
        for (std::size_t step = N; step-- > 0;) {
            const std::size_t t = d == 0 ? step : N - 1 - step;
            const bool first = step == 0;
            const std::size_t tp = d == 0 ? t - 1 : t + 1;  // previous time in processing order
            for (std::size_t s = 0; s < B; ++s) {
                const std::size_t row = s * N + t;
                const T* gate = wd.gates.data() + row * GH;
                const T* hp = first ? nullptr : wd.hidden.data() + (s * N + tp) * H;
                if (hp) std::copy_n(hp, H, hprev_all.data() + row * H);
                T* dn = dh_next.data() + s * H;
                T* dgs = dgate_step.data() + s * GH;
                T* dgi_row = dgi.data() + row * GH;
                if (lstm) {
                    const T* c = wd.cell.data() + row * H;
                    const T* cp = first ? nullptr : wd.cell.data() + (s * N + tp) * H;
                    T* dcn = dc_next.data() + s * H;
                    for (std::size_t k = 0; k < H; ++k) {
                        const T i = gate[k], f = gate[H + k], g = gate[2 * H + k], o = gate[3 * H + k];
                        const T dh = drnn[row * HO + d * H + k] + dn[k];
                        const T tc = std::tanh(c[k]);
                        const T dc = dh * o * (T(1) - tc * tc) + dcn[k];
                        const T c_prev = cp ? cp[k] : T(0);
                        dgs[k] = dc * g * i * (T(1) - i);
                        dgs[H + k] = dc * c_prev * f * (T(1) - f);
                        dgs[2 * H + k] = dc * i * (T(1) - g * g);
                        dgs[3 * H + k] = dh * tc * o * (T(1) - o);
                        dcn[k] = dc * f;
                    }
                    std::copy_n(dgs, GH, dgi_row);
                } else {
                    const T* ghn = wd.gh_n.data() + row * H;
                    T* dgh_row = dgh.data() + row * GH;
                    for (std::size_t k = 0; k < H; ++k) {
                        const T r = gate[k], z = gate[H + k], n = gate[2 * H + k];
                        const T h_prev = hp ? hp[k] : T(0);
                        const T dh = drnn[row * HO + d * H + k] + dn[k];
                        const T dn_pre = dh * (T(1) - z) * (T(1) - n * n);
                        const T dz_pre = dh * (h_prev - n) * z * (T(1) - z);
                        const T dr_pre = dn_pre * ghn[k] * r * (T(1) - r);
                        dgi_row[k] = dr_pre;
                        dgi_row[H + k] = dz_pre;
                        dgi_row[2 * H + k] = dn_pre;
                        dgh_row[k] = dr_pre;
                        dgh_row[H + k] = dz_pre;
                        dgh_row[2 * H + k] = dn_pre * r;
                        dn[k] = dh * z;  // direct path; recurrent part added below
                    }
                    std::copy_n(dgh_row, GH, dgs);
                }
            }
            if (first) break;
            // dh_prev = dgate W_hh (LSTM: overwrite; GRU: add to the direct path)
            kernels::gemm(Transpose::no, Transpose::no, B, H, GH, T(1), dgate_step.data(), GH, P.v(pd.w_hh), H,
                          lstm ? T(0) : T(1), dh_next.data(), H);
        }
        const std::vector<T>& dgh_all = lstm ? dgi : dgh;
        kernels::gemm(Transpose::yes, Transpose::no, GH, H, BN, T(1), dgh_all.data(), GH, hprev_all.data(), H, T(1),
                      P.g(pd.w_hh), H);
        column_sums(dgh_all.data(), BN, GH, P.g(pd.b_hh));
        kernels::gemm(Transpose::yes, Transpose::no, GH, X, BN, T(1), dgi.data(), GH, ws.concat.data(), X, T(1),
                      P.g(pd.w_ih), X);
        column_sums(dgi.data(), BN, GH, P.g(pd.b_ih));
        kernels::gemm(Transpose::no, Transpose::no, BN, X, GH, T(1), dgi.data(), GH, P.v(pd.w_ih), X, T(1),
                      dconcat.data(), X);
    }

    // Branches.
    for (int b = 0; b < 2; ++b) {
        const auto& br = P.branch[b];
        auto& wb = ws.branch[b];
        std::vector<T> ddense(BN * E);
        for (std::size_t r = 0; r < BN; ++r)
            for (std::size_t k = 0; k < E; ++k) {
                T g = dconcat[r * X + static_cast<std::size_t>(b) * E + k];
                if (drop) g *= wb.drop_mask[r * E + k];
                ddense[r * E + k] = wb.dense[r * E + k] > T(0) ? g : T(0);
            }
        const std::size_t C3 = wb.conv[2].cout, W3 = kPooledPitch, K = C3 * W3;
        kernels::gemm(Transpose::yes, Transpose::no, E, K, BN, T(1), ddense.data(), E, wb.flat.data(), K, T(1),
                      P.g(br.dense_w), K);
        column_sums(ddense.data(), BN, E, P.g(br.dense_b));
        std::vector<T> dflat(BN * K);
        kernels::gemm(Transpose::no, Transpose::no, BN, K, E, T(1), ddense.data(), E, P.v(br.dense_w), K, T(0),
                      dflat.data(), K);
        std::vector<T> dpool(B * C3 * N * W3);
        for (std::size_t s = 0; s < B; ++s)
            for (std::size_t c = 0; c < C3; ++c)
                for (std::size_t t = 0; t < N; ++t)
                    std::copy_n(dflat.data() + (s * N + t) * K + c * W3, W3, dpool.data() + ((s * C3 + c) * N + t) * W3);

        std::vector<T> da;  // gradient w.r.t. the current layer's post-ReLU output
        pool_pitch_backward(wb.conv[2].a, dpool, B * C3 * N, wb.conv[2].width, da);
        for (int l = 2; l >= 0; --l) {
            auto& cv = wb.conv[l];
            const std::size_t plane = N * cv.width, C = cv.cout;
            const T* gamma = P.v(br.bn_gamma[l]);
            T* dgamma = P.g(br.bn_gamma[l]);
            T* dbeta = P.g(br.bn_beta[l]);
            std::vector<T> dz(cv.z.size());
            const double M = static_cast<double>(B * plane);
            for (std::size_t c = 0; c < C; ++c) {
                double sum_dy = 0, sum_dy_xhat = 0;
                for (std::size_t s = 0; s < B; ++s) {
                    const std::size_t off = (s * C + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        const T dy = cv.a[off + i] > T(0) ? da[off + i] : T(0);
                        dz[off + i] = dy;
                        sum_dy += dy;
                        sum_dy_xhat += dy * (cv.z[off + i] - cv.mean[c]) * cv.inv_std[c];
                    }
                }
                dgamma[c] += static_cast<T>(sum_dy_xhat);
                dbeta[c] += static_cast<T>(sum_dy);
                const double gi = gamma[c] * cv.inv_std[c];
                for (std::size_t s = 0; s < B; ++s) {
                    const std::size_t off = (s * C + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        if (ws.opts.batch_statistics) {
                            const double xhat = (cv.z[off + i] - cv.mean[c]) * cv.inv_std[c];
                            dz[off + i] = static_cast<T>(gi / M * (M * dz[off + i] - sum_dy - xhat * sum_dy_xhat));
                        } else {
                            dz[off + i] = static_cast<T>(gi * dz[off + i]);
                        }
                    }
                }
            }
            const std::vector<T>& input = l == 0 ? wb.input : l == 1 ? wb.conv[0].a : wb.pooled2;
            for (std::size_t s = 0; s < B; ++s)
                kernels::conv3x3_backward_weights(dz.data() + s * C * plane, C, N, cv.width,
                                                  input.data() + s * cv.cin * plane, cv.cin, P.g(br.conv_w[l]),
                                                  P.g(br.conv_b[l]));
            if (l == 0) break;
            std::vector<T> dinput(B * cv.cin * plane, T(0));
            for (std::size_t s = 0; s < B; ++s)
                kernels::conv3x3_backward_input(dz.data() + s * C * plane, C, N, cv.width, P.v(br.conv_w[l]), cv.cin,
                                                dinput.data() + s * cv.cin * plane);
            if (l == 2)
                pool_pitch_backward(wb.conv[1].a, dinput, B * cv.cin * N, wb.conv[1].width, da);
            else
                da = std::move(dinput);
        }
    }
    return loss;
}

// --- convenience --------------------------------------------------------------------

template <typename T>
Matrix<T> Crnn<T>::infer(const Matrix<T>& roll, const Matrix<T>& features) const {
    if (roll.cols() != kBins || features.cols() != kBins) throw ArgumentError("crnn infer: inputs must have 88 columns");
    if (roll.rows() != features.rows()) throw ArgumentError("crnn infer: frame counts differ (pad the pair first)");
    SequenceBatch<T> batch{1, roll.rows(), roll.storage(), features.storage()};
    Workspace ws;
    auto probs = forward(batch, PassOptions{}, ws);
    Matrix<T> out(roll.rows(), kBins);
    out.storage() = std::move(probs);
    return out;
}

template <typename T>
std::vector<T> Crnn<T>::embeddings(const SequenceBatch<T>& batch) const {
    Workspace ws;
    forward(batch, PassOptions{}, ws);
    return ws.concat;
}

template class Crnn<float>;
template class Crnn<double>;

// --- loss ---------------------------------------------------------------------------

namespace {

template <typename T>
double bce(std::span<const T> pred, std::span<const T> target) {
    if (pred.size() != target.size()) throw ArgumentError("bce_loss: shape mismatch");
    if (pred.empty()) throw ArgumentError("bce_loss: empty input");
    constexpr double kClamp = 1e-7;
    double s = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = std::clamp(static_cast<double>(pred[i]), kClamp, 1 - kClamp);
        const double t = target[i];
        s -= t * std::log(p) + (1 - t) * std::log(1 - p);
    }
    return s / static_cast<double>(pred.size());
}

}  // namespace

double bce_loss(std::span<const float> pred, std::span<const float> target) { return bce(pred, target); }
double bce_loss(std::span<const double> pred, std::span<const double> target) { return bce(pred, target); }
double bce_loss(const Matrix<float>& pred, const Matrix<float>& target) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ArgumentError("bce_loss: shape mismatch");
    return bce(std::span<const float>(pred.storage()), std::span<const float>(target.storage()));
}

}  // namespace midialign
