#include "cablab/tape.hpp"

#include <cmath>
#include <stdexcept>

#include "cablab/kernels.hpp"
#include "cablab/qmath.hpp"

namespace cablab {

Tape::Id Tape::push(Tensor t) {
    nodes_.push_back(std::move(t));
    return static_cast<Id>(nodes_.size() - 1);
}

Tensor& Tape::node(Id id) { return nodes_[static_cast<std::size_t>(id)]; }

const Tensor& Tape::cnode(Id id) const {
    if (id < 0 || id >= static_cast<Id>(nodes_.size())) {
        throw std::runtime_error("tape node id out of range; no forward recorded for it");
    }
    return nodes_[static_cast<std::size_t>(id)];
}

const Tensor& Tape::value(Id id) const { return cnode(id); }

float Tape::scalar(Id id) const {
    const Tensor& t = cnode(id);
    if (t.size() != 1) {
        throw std::runtime_error("tape node is not a scalar");
    }
    return t.data[0];
}

const std::vector<float>& Tape::grad(Id id) const {
    const Tensor& t = cnode(id);
    if (!ran_backward_) {
        throw std::runtime_error("gradient requested before backward");
    }
    return t.grad;
}

Tape::Id Tape::leaf(const Tensor& t) {
    check_finite(t, "tape leaf");
    Tensor n;
    n.shape = t.shape;
    n.data = t.data;
    return push(std::move(n));
}

Tape::Id Tape::param(Tensor& t) {
    const Id id = leaf(t);
    links_.push_back({id, &t});
    return id;
}

Tape::Id Tape::input(const Tensor& t) { return leaf(t); }

Tape::Id Tape::dense(Id x, Id w, Id b) {
    const Tensor& xv = cnode(x);
    const Tensor& wv = cnode(w);
    const Tensor& bv = cnode(b);
    if (xv.shape.size() != 2 || wv.shape.size() != 2 || bv.shape.size() != 1 ||
        xv.shape[1] != wv.shape[1] || wv.shape[0] != bv.shape[0]) {
        throw std::invalid_argument("dense op shape mismatch: x=" + shape_str(xv.shape) + " w=" +
                                    shape_str(wv.shape) + " b=" + shape_str(bv.shape));
    }
    const int n = xv.shape[0], in = xv.shape[1], out = wv.shape[0];
    Tensor y({n, out});
    for (int r = 0; r < n; ++r) {
        const float* xr = xv.data.data() + static_cast<std::size_t>(r) * in;
        float* yr = y.data.data() + static_cast<std::size_t>(r) * out;
        for (int o = 0; o < out; ++o) {
            const float* wr = wv.data.data() + static_cast<std::size_t>(o) * in;
            float acc = bv.data[static_cast<std::size_t>(o)];
            for (int c = 0; c < in; ++c) acc += xr[c] * wr[c];
            yr[o] = acc;
        }
    }
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, x, w, b, yid, n, in, out]() {
        const auto& gy = node(yid).grad;
        auto& gx = node(x).grad;
        auto& gw = node(w).grad;
        auto& gb = node(b).grad;
        const auto& xd = node(x).data;
        const auto& wd = node(w).data;
        for (int r = 0; r < n; ++r) {
            const float* gyr = gy.data() + static_cast<std::size_t>(r) * out;
            const float* xr = xd.data() + static_cast<std::size_t>(r) * in;
            float* gxr = gx.data() + static_cast<std::size_t>(r) * in;
            for (int o = 0; o < out; ++o) {
                const float g = gyr[o];
                if (g == 0.0f) continue;
                const float* wr = wd.data() + static_cast<std::size_t>(o) * in;
                float* gwr = gw.data() + static_cast<std::size_t>(o) * in;
                for (int c = 0; c < in; ++c) {
                    gxr[c] += g * wr[c];
                    gwr[c] += g * xr[c];
                }
                gb[static_cast<std::size_t>(o)] += g;
            }
        }
    });
    return yid;
}

Tape::Id Tape::conv2d(Id x, Id w, Id b, int stride, int padding) {
    const Tensor& xv = cnode(x);
    const Tensor& wv = cnode(w);
    const Tensor& bv = cnode(b);
    if (wv.shape.size() != 2 || bv.shape.size() != 1 || wv.shape[0] != bv.shape[0]) {
        throw std::invalid_argument("conv2d weight/bias shape mismatch");
    }
    const int out_ch = wv.shape[0];
    // kernel size is implied by the patch width and channel count
    const int patch = wv.shape[1];
    if (xv.shape.size() != 4) {
        throw std::invalid_argument("conv2d input must be (N,C,H,W)");
    }
    const int in_ch = xv.shape[1];
    const int ksq = patch / in_ch;
    const int kernel = static_cast<int>(std::lround(std::sqrt(static_cast<double>(ksq))));
    if (in_ch * kernel * kernel != patch) {
        throw std::invalid_argument("conv2d weight patch width inconsistent with input channels");
    }
    const ConvGeom g = conv_geometry(xv.shape, out_ch, kernel, stride, padding);

    auto cols = im2col(xv, g);
    std::vector<float> rows(static_cast<std::size_t>(g.rows()) * out_ch, 0.0f);
    for (std::int64_t r = 0; r < g.rows(); ++r) {
        const float* cr = cols.data() + static_cast<std::size_t>(r) * patch;
        float* rr = rows.data() + static_cast<std::size_t>(r) * out_ch;
        for (int o = 0; o < out_ch; ++o) {
            const float* wr = wv.data.data() + static_cast<std::size_t>(o) * patch;
            float acc = bv.data[static_cast<std::size_t>(o)];
            for (int c = 0; c < patch; ++c) acc += cr[c] * wr[c];
            rr[o] = acc;
        }
    }
    Tensor y({g.batch, out_ch, g.out_h, g.out_w});
    rows_to_feature_map(rows, g, y.data.data());
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, x, w, b, yid, g, patch, out_ch, cols = std::move(cols)]() {
        std::vector<float> grows;
        feature_map_to_rows(node(yid).grad.data(), g, grows);
        auto& gx = node(x).grad;
        auto& gw = node(w).grad;
        auto& gb = node(b).grad;
        const auto& wd = node(w).data;
        std::vector<float> gcols(cols.size(), 0.0f);
        for (std::int64_t r = 0; r < g.rows(); ++r) {
            const float* gr = grows.data() + static_cast<std::size_t>(r) * out_ch;
            const float* cr = cols.data() + static_cast<std::size_t>(r) * patch;
            float* gcr = gcols.data() + static_cast<std::size_t>(r) * patch;
            for (int o = 0; o < out_ch; ++o) {
                const float gv = gr[o];
                if (gv == 0.0f) continue;
                const float* wr = wd.data() + static_cast<std::size_t>(o) * patch;
                float* gwr = gw.data() + static_cast<std::size_t>(o) * patch;
                for (int c = 0; c < patch; ++c) {
                    gcr[c] += gv * wr[c];
                    gwr[c] += gv * cr[c];
                }
                gb[static_cast<std::size_t>(o)] += gv;
            }
        }
        Tensor dx;
        dx.shape = node(x).shape;
        dx.data.swap(gx);  // accumulate in place
        col2im_accum(gcols, g, dx);
        gx.swap(dx.data);
    });
    return yid;
}

Tape::Id Tape::relu(Id x) {
    const Tensor& xv = cnode(x);
    Tensor y;
    y.shape = xv.shape;
    y.data = xv.data;
    for (auto& v : y.data) v = v > 0.0f ? v : 0.0f;
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, x, yid]() {
        const auto& gy = node(yid).grad;
        const auto& xd = node(x).data;
        auto& gx = node(x).grad;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            // subgradient 0 at exactly 0
            if (xd[i] > 0.0f) gx[i] += gy[i];
        }
    });
    return yid;
}

Tape::Id Tape::reshape(Id x, Shape s) {
    const Tensor& xv = cnode(x);
    if (numel(s) != xv.size()) {
        throw std::invalid_argument("reshape size mismatch");
    }
    Tensor y;
    y.shape = std::move(s);
    y.data = xv.data;
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, x, yid]() {
        const auto& gy = node(yid).grad;
        auto& gx = node(x).grad;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
    return yid;
}

Tape::Id Tape::sigmoid(Id x) {
    const Tensor& xv = cnode(x);
    Tensor y;
    y.shape = xv.shape;
    y.data.resize(xv.data.size());
    for (std::size_t i = 0; i < y.data.size(); ++i) {
        y.data[i] = 1.0f / (1.0f + std::exp(-xv.data[i]));
    }
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, x, yid]() {
        const auto& gy = node(yid).grad;
        const auto& yd = node(yid).data;
        auto& gx = node(x).grad;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            gx[i] += gy[i] * yd[i] * (1.0f - yd[i]);
        }
    });
    return yid;
}

Tape::Id Tape::fake_quant(Id x, float scale, int zero_point, int qmin, int qmax) {
    if (scale <= 0.0f) {
        throw std::invalid_argument("fake_quant scale must be positive");
    }
    const Tensor& xv = cnode(x);
    Tensor y;
    y.shape = xv.shape;
    y.data.resize(xv.data.size());
    std::vector<std::uint8_t> pass(xv.data.size());
    for (std::size_t i = 0; i < y.data.size(); ++i) {
        y.data[i] = fake_quant_value(xv.data[i], scale, zero_point, qmin, qmax);
        pass[i] = quantize_in_range(xv.data[i], scale, zero_point, qmin, qmax) ? 1 : 0;
    }
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, x, yid, pass = std::move(pass)]() {
        const auto& gy = node(yid).grad;
        auto& gx = node(x).grad;
        for (std::size_t i = 0; i < gx.size(); ++i) {
            if (pass[i]) gx[i] += gy[i];
        }
    });
    return yid;
}

Tape::Id Tape::mul_mask(Id x, const Tensor& mask) {
    const Tensor& xv = cnode(x);
    if (mask.size() != xv.size()) {
        throw std::invalid_argument("mask size mismatch");
    }
    Tensor y;
    y.shape = xv.shape;
    y.data.resize(xv.data.size());
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = xv.data[i] * mask.data[i];
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, x, yid, m = mask.data]() {
        const auto& gy = node(yid).grad;
        auto& gx = node(x).grad;
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * m[i];
    });
    return yid;
}

Tape::Id Tape::blend(Id x, Id mask, Id pattern) {
    const Tensor& xv = cnode(x);
    const Tensor& mv = cnode(mask);
    const Tensor& pv = cnode(pattern);
    if (xv.shape.size() != 4 || mv.shape.size() != 2 || pv.shape.size() != 3 ||
        mv.shape[0] != xv.shape[2] || mv.shape[1] != xv.shape[3] || pv.shape[0] != xv.shape[1] ||
        pv.shape[1] != xv.shape[2] || pv.shape[2] != xv.shape[3]) {
        throw std::invalid_argument("blend expects x:(N,C,H,W), mask:(H,W), pattern:(C,H,W)");
    }
    const int n = xv.shape[0], c = xv.shape[1], hw = xv.shape[2] * xv.shape[3];
    Tensor y;
    y.shape = xv.shape;
    y.data.resize(xv.data.size());
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
            const std::size_t pbase = static_cast<std::size_t>(ch) * hw;
            for (int p = 0; p < hw; ++p) {
                const float m = mv.data[static_cast<std::size_t>(p)];
                y.data[base + p] = (1.0f - m) * xv.data[base + p] + m * pv.data[pbase + p];
            }
        }
    }
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, x, mask, pattern, yid, n, c, hw]() {
        const auto& gy = node(yid).grad;
        const auto& xd = node(x).data;
        const auto& md = node(mask).data;
        const auto& pd = node(pattern).data;
        auto& gx = node(x).grad;
        auto& gm = node(mask).grad;
        auto& gp = node(pattern).grad;
        for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t base = (static_cast<std::size_t>(i) * c + ch) * hw;
                const std::size_t pbase = static_cast<std::size_t>(ch) * hw;
                for (int p = 0; p < hw; ++p) {
                    const float g = gy[base + p];
                    gx[base + p] += g * (1.0f - md[static_cast<std::size_t>(p)]);
                    gm[static_cast<std::size_t>(p)] += g * (pd[pbase + p] - xd[base + p]);
                    gp[pbase + p] += g * md[static_cast<std::size_t>(p)];
                }
            }
        }
    });
    return yid;
}

Tape::Id Tape::softmax_cross_entropy(Id logits, const Tensor& targets) {
    const Tensor& lv = cnode(logits);
    if (lv.shape.size() != 2 || targets.shape != lv.shape) {
        throw std::invalid_argument("cross entropy expects matching (N,K) logits and targets");
    }
    const int n = lv.shape[0], k = lv.shape[1];
    for (int r = 0; r < n; ++r) {
        float s = 0.0f;
        for (int j = 0; j < k; ++j) s += targets.data[static_cast<std::size_t>(r) * k + j];
        if (std::fabs(s - 1.0f) > 1e-5f) {
            throw std::invalid_argument("target row " + std::to_string(r) + " sums to " + std::to_string(s) +
                                        ", expected 1");
        }
    }
    Tensor probs({n, k});
    float loss = 0.0f;
    for (int r = 0; r < n; ++r) {
        const float* x = lv.data.data() + static_cast<std::size_t>(r) * k;
        float* p = probs.data.data() + static_cast<std::size_t>(r) * k;
        float mx = x[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, x[j]);
        float sum = 0.0f;
        for (int j = 0; j < k; ++j) {
            p[j] = std::exp(x[j] - mx);
            sum += p[j];
        }
        const float lse = mx + std::log(sum);
        for (int j = 0; j < k; ++j) p[j] /= sum;
        float row = 0.0f;
        for (int j = 0; j < k; ++j) {
            const float t = targets.data[static_cast<std::size_t>(r) * k + j];
            if (t != 0.0f) row -= t * (x[j] - lse);
        }
        loss += row;
    }
    loss /= static_cast<float>(n);
    Tensor y;
    y.shape = {1};
    y.data = {loss};
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, logits, yid, t = targets.data, probs = std::move(probs), n, k]() {
        const float up = node(yid).grad[0];
        auto& gl = node(logits).grad;
        const float inv = up / static_cast<float>(n);
        for (std::size_t i = 0; i < gl.size(); ++i) {
            gl[i] += (probs.data[i] - t[i]) * inv;
        }
    });
    return yid;
}

Tape::Id Tape::kl_divergence(Id logits_p, Id logits_q) {
    const Tensor& av = cnode(logits_p);
    const Tensor& bv = cnode(logits_q);
    if (av.shape.size() != 2 || av.shape != bv.shape) {
        throw std::invalid_argument("kl_divergence expects matching (N,K) logits");
    }
    const int n = av.shape[0], k = av.shape[1];
    auto log_softmax = [k](const float* x, float* out) {
        float mx = x[0];
        for (int j = 1; j < k; ++j) mx = std::max(mx, x[j]);
        float sum = 0.0f;
        for (int j = 0; j < k; ++j) sum += std::exp(x[j] - mx);
        const float lse = mx + std::log(sum);
        for (int j = 0; j < k; ++j) out[j] = x[j] - lse;
    };
    std::vector<float> logp(static_cast<std::size_t>(n) * k), logq(logp.size());
    std::vector<float> row_kl(static_cast<std::size_t>(n), 0.0f);
    float total = 0.0f;
    for (int r = 0; r < n; ++r) {
        float* lp = logp.data() + static_cast<std::size_t>(r) * k;
        float* lq = logq.data() + static_cast<std::size_t>(r) * k;
        log_softmax(av.data.data() + static_cast<std::size_t>(r) * k, lp);
        log_softmax(bv.data.data() + static_cast<std::size_t>(r) * k, lq);
        float kl = 0.0f;
        for (int j = 0; j < k; ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
        row_kl[static_cast<std::size_t>(r)] = kl;
        total += kl;
    }
    total /= static_cast<float>(n);
    Tensor y;
    y.shape = {1};
    y.data = {total};
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, logits_p, logits_q, yid, logp = std::move(logp), logq = std::move(logq),
                             row_kl = std::move(row_kl), n, k]() {
        const float up = node(yid).grad[0] / static_cast<float>(n);
        auto& ga = node(logits_p).grad;
        auto& gb = node(logits_q).grad;
        for (int r = 0; r < n; ++r) {
            const std::size_t base = static_cast<std::size_t>(r) * k;
            for (int j = 0; j < k; ++j) {
                const float p = std::exp(logp[base + j]);
                const float q = std::exp(logq[base + j]);
                ga[base + j] += up * p * ((logp[base + j] - logq[base + j]) - row_kl[static_cast<std::size_t>(r)]);
                gb[base + j] += up * (q - p);
            }
        }
    });
    return yid;
}

Tape::Id Tape::sum(Id x) {
    const Tensor& xv = cnode(x);
    float s = 0.0f;
    for (float v : xv.data) s += v;
    Tensor y;
    y.shape = {1};
    y.data = {s};
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, x, yid]() {
        const float up = node(yid).grad[0];
        auto& gx = node(x).grad;
        for (auto& g : gx) g += up;
    });
    return yid;
}

Tape::Id Tape::weighted_sum(const std::vector<std::pair<float, Id>>& scalar_terms) {
    float s = 0.0f;
    for (const auto& [c, id] : scalar_terms) {
        s += c * scalar(id);
    }
    Tensor y;
    y.shape = {1};
    y.data = {s};
    const Id yid = push(std::move(y));
    backward_ops_.push_back([this, yid, terms = scalar_terms]() {
        const float up = node(yid).grad[0];
        for (const auto& [c, id] : terms) {
            node(id).grad[0] += up * c;
        }
    });
    return yid;
}

void Tape::backward(Id loss) {
    if (nodes_.empty() || backward_ops_.empty()) {
        throw std::runtime_error("backward called without a recorded forward");
    }
    if (ran_backward_) {
        throw std::runtime_error("tape backward already ran");
    }
    const Tensor& lv = cnode(loss);
    if (lv.size() != 1) {
        throw std::runtime_error("backward needs a scalar loss node");
    }
    if (!std::isfinite(lv.data[0])) {
        throw std::runtime_error("loss is not finite");
    }
    for (auto& n : nodes_) {
        n.grad.assign(n.data.size(), 0.0f);
    }
    node(loss).grad[0] = 1.0f;
    for (auto it = backward_ops_.rbegin(); it != backward_ops_.rend(); ++it) {
        (*it)();
    }
    ran_backward_ = true;
    for (const auto& link : links_) {
        link.target->ensure_grad();
        const auto& g = node(link.node).grad;
        auto& dst = link.target->grad;
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }
}

Tape::Id forward_on_tape(Tape& tape, const Model& m, Tape::Id x, const ViewTransforms* view, bool track_params) {
    Tape::Id cur = x;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const Layer& l = m.layers[i];
        const LayerOverride* ov = view ? view->find(static_cast<int>(i)) : nullptr;
        switch (l.kind) {
            case LayerKind::dense:
            case LayerKind::conv2d: {
                Tape::Id w = track_params ? tape.param(const_cast<Tensor&>(l.weight)) : tape.leaf(l.weight);
                Tape::Id b = track_params ? tape.param(const_cast<Tensor&>(l.bias)) : tape.leaf(l.bias);
                if (ov) {
                    if (ov->fake_quant_weights) {
                        w = tape.fake_quant(w, ov->fq_scale, ov->fq_zero_point, ov->fq_qmin, ov->fq_qmax);
                    }
                    if (ov->weight_mask.size() > 0) w = tape.mul_mask(w, ov->weight_mask);
                    if (ov->bias_mask.size() > 0) b = tape.mul_mask(b, ov->bias_mask);
                }
                cur = l.kind == LayerKind::dense ? tape.dense(cur, w, b)
                                                 : tape.conv2d(cur, w, b, l.stride, l.padding);
                break;
            }
            case LayerKind::relu:
                cur = tape.relu(cur);
                break;
            case LayerKind::flatten: {
                const Tensor& v = tape.value(cur);
                const int n = v.shape[0];
                cur = tape.reshape(cur, {n, static_cast<int>(v.size() / n)});
                break;
            }
        }
    }
    return cur;
}

Forward forward(const Model& m, const Tensor& batch, const ViewTransforms* view) {
    if (batch.shape.empty() || batch.shape[0] < 1) {
        throw std::invalid_argument("batch must have a leading batch dimension >= 1");
    }
    Shape sample(batch.shape.begin() + 1, batch.shape.end());
    if (sample != m.input_shape) {
        throw std::invalid_argument("batch sample shape " + shape_str(sample) + " != model input " +
                                    shape_str(m.input_shape));
    }
    m.infer_shapes();
    Forward f;
    f.input = f.tape.input(batch);
    f.logits = forward_on_tape(f.tape, m, f.input, view);
    return f;
}

void sgd_step(Model& m, SgdState& state, float lr, float momentum) {
    if (lr < 0.0f || momentum < 0.0f || momentum >= 1.0f) {
        throw std::invalid_argument("sgd needs lr >= 0 and momentum in [0,1)");
    }
    std::vector<Tensor*> params;
    for (auto& l : m.layers) {
        if (!l.has_params()) continue;
        params.push_back(&l.weight);
        params.push_back(&l.bias);
    }
    if (state.velocity.size() != params.size()) {
        state.velocity.assign(params.size(), {});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        if (!p.has_grad()) {
            throw std::runtime_error("sgd_step: parameter has no gradient");
        }
        auto& v = state.velocity[i];
        if (v.size() != p.data.size()) {
            v.assign(p.data.size(), 0.0f);
        }
        for (std::size_t j = 0; j < p.data.size(); ++j) {
            v[j] = momentum * v[j] + p.grad[j];
            p.data[j] -= lr * v[j];
        }
        p.zero_grad();
    }
}

}  // namespace cablab
