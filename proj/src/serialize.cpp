#include "cablab/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cablab::harness {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace {

constexpr std::uint32_t kDatasetMagic = 0x44424143;  // "CABD"
constexpr std::uint32_t kModelMagic = 0x4D424143;    // "CABM"
constexpr std::uint16_t kVersion = 1;
constexpr std::uint32_t kSectionQuant = 0x4D525051;  // "QPRM"
constexpr std::uint32_t kSectionPrune = 0x50535250;  // "PRSP"

class Writer {
public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) {
            throw std::runtime_error("cannot open " + path + " for writing");
        }
    }
    void u8(std::uint8_t v) { raw(&v, 1); }
    void u16(std::uint16_t v) { raw(&v, 2); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void i16(std::int16_t v) { raw(&v, 2); }
    void f32(float v) { raw(&v, 4); }
    void f32s(const std::vector<float>& v) { raw(v.data(), v.size() * 4); }
    void raw(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void done() {
        out_.flush();
        if (!out_) {
            throw std::runtime_error("write failed");
        }
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
        if (!in_) {
            throw std::runtime_error("cannot open " + path);
        }
        in_.seekg(0, std::ios::end);
        size_ = static_cast<std::size_t>(in_.tellg());
        in_.seekg(0);
    }
    std::uint8_t u8() { return get<std::uint8_t>(); }
    std::uint16_t u16() { return get<std::uint16_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    std::int16_t i16() { return get<std::int16_t>(); }
    float f32() { return get<float>(); }
    void f32s(std::vector<float>& v, std::size_t n) {
        v.resize(n);
        raw(v.data(), n * 4);
    }
    void raw(void* p, std::size_t n) {
        if (pos_ + n > size_) {
            throw std::runtime_error("file truncated or corrupt");
        }
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!in_) {
            throw std::runtime_error("read failed");
        }
        pos_ += n;
    }
    bool at_end() const { return pos_ == size_; }
    std::size_t remaining() const { return size_ - pos_; }

private:
    template <typename T>
    T get() {
        T v;
        raw(&v, sizeof(T));
        return v;
    }
    std::ifstream in_;
    std::size_t pos_ = 0;
    std::size_t size_ = 0;
};

std::uint8_t split_tag(const std::string& split) {
    if (split == "train") return 0;
    if (split == "val") return 1;
    if (split == "calib") return 2;
    if (split == "test") return 3;
    return 4;
}

std::string split_name(std::uint8_t tag) {
    switch (tag) {
        case 0: return "train";
        case 1: return "val";
        case 2: return "calib";
        case 3: return "test";
        default: return "other";
    }
}

void write_quant_params(Writer& w, const quant::QuantParams& p) {
    w.f32(p.scale);
    w.i16(static_cast<std::int16_t>(p.zero_point));
    w.u8(static_cast<std::uint8_t>(p.range));
}

quant::QuantParams read_quant_params(Reader& r) {
    quant::QuantParams p;
    p.scale = r.f32();
    p.zero_point = r.i16();
    const std::uint8_t range = r.u8();
    if (range > 1) {
        throw std::runtime_error("corrupt quantization range tag");
    }
    p.range = static_cast<quant::QRange>(range);
    return p;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
    ds.validate();
    Writer w(path);
    w.u32(kDatasetMagic);
    w.u16(kVersion);
    w.u32(static_cast<std::uint32_t>(ds.count()));
    w.u32(static_cast<std::uint32_t>(ds.images.shape[1]));
    w.u32(static_cast<std::uint32_t>(ds.images.shape[2]));
    w.u32(static_cast<std::uint32_t>(ds.images.shape[3]));
    w.u32(static_cast<std::uint32_t>(ds.num_classes));
    w.u8(split_tag(ds.split));
    for (int l : ds.labels) w.u16(static_cast<std::uint16_t>(l));
    w.f32s(ds.images.data);
    w.done();
}

Dataset load_dataset(const std::string& path) {
    Reader r(path);
    if (r.u32() != kDatasetMagic) {
        throw std::runtime_error(path + ": not a dataset file");
    }
    if (r.u16() != kVersion) {
        throw std::runtime_error(path + ": unsupported dataset version");
    }
    const int count = static_cast<int>(r.u32());
    const int channels = static_cast<int>(r.u32());
    const int height = static_cast<int>(r.u32());
    const int width = static_cast<int>(r.u32());
    const int classes = static_cast<int>(r.u32());
    Dataset ds;
    ds.num_classes = classes;
    ds.split = split_name(r.u8());
    ds.labels.resize(static_cast<std::size_t>(count));
    for (auto& l : ds.labels) l = r.u16();
    ds.images.shape = {count, channels, height, width};
    r.f32s(ds.images.data, static_cast<std::size_t>(numel(ds.images.shape)));
    if (!r.at_end()) {
        throw std::runtime_error(path + ": trailing bytes, file corrupt");
    }
    ds.validate();
    return ds;
}

void save_model(const Model& m, const std::string& path, const ModelAnnotations* annotations) {
    m.validate();
    Writer w(path);
    w.u32(kModelMagic);
    w.u16(kVersion);
    w.u16(static_cast<std::uint16_t>(m.num_classes));
    w.u8(static_cast<std::uint8_t>(m.input_shape.size()));
    for (int d : m.input_shape) w.u32(static_cast<std::uint32_t>(d));
    w.u16(static_cast<std::uint16_t>(m.layers.size()));
    for (const Layer& l : m.layers) {
        w.u8(static_cast<std::uint8_t>(l.kind));
        switch (l.kind) {
            case LayerKind::dense:
                w.u32(static_cast<std::uint32_t>(l.in_features));
                w.u32(static_cast<std::uint32_t>(l.out_features));
                break;
            case LayerKind::conv2d:
                w.u32(static_cast<std::uint32_t>(l.in_channels));
                w.u32(static_cast<std::uint32_t>(l.out_channels));
                w.u32(static_cast<std::uint32_t>(l.kernel));
                w.u32(static_cast<std::uint32_t>(l.stride));
                w.u32(static_cast<std::uint32_t>(l.padding));
                break;
            default:
                break;
        }
    }
    for (const Layer& l : m.layers) {
        if (!l.has_params()) continue;
        w.u64(static_cast<std::uint64_t>(l.weight.size()));
        w.f32s(l.weight.data);
        w.u64(static_cast<std::uint64_t>(l.bias.size()));
        w.f32s(l.bias.data);
    }
    if (annotations && !annotations->quant_layers.empty()) {
        w.u32(kSectionQuant);
        w.u64(static_cast<std::uint64_t>(2 + annotations->quant_layers.size() * (2 + 3 * 7)));
        w.u16(static_cast<std::uint16_t>(annotations->quant_layers.size()));
        for (const auto& [li, lq] : annotations->quant_layers) {
            w.u16(static_cast<std::uint16_t>(li));
            write_quant_params(w, lq.weight);
            write_quant_params(w, lq.input);
            write_quant_params(w, lq.output);
        }
    }
    if (annotations && annotations->prune_spec.has_value()) {
        const auto& spec = *annotations->prune_spec;
        std::uint64_t bytes = 2;
        for (std::size_t i = 0; i < spec.layer_indices.size(); ++i) {
            bytes += 2 + 4 + 4 + 4 + 4ULL * static_cast<std::uint64_t>(spec.dropped(i));
        }
        w.u32(kSectionPrune);
        w.u64(bytes);
        w.u16(static_cast<std::uint16_t>(spec.layer_indices.size()));
        for (std::size_t i = 0; i < spec.layer_indices.size(); ++i) {
            w.u16(static_cast<std::uint16_t>(spec.layer_indices[i]));
            w.f32(spec.rates[i]);
            w.u32(static_cast<std::uint32_t>(spec.keep[i].size()));
            const auto dropped = spec.dropped_filters(i);
            w.u32(static_cast<std::uint32_t>(dropped.size()));
            for (int f : dropped) w.u32(static_cast<std::uint32_t>(f));
        }
    }
    w.done();
}

LoadedModel load_model(const std::string& path) {
    Reader r(path);
    if (r.u32() != kModelMagic) {
        throw std::runtime_error(path + ": not a model file");
    }
    if (r.u16() != kVersion) {
        throw std::runtime_error(path + ": unsupported model version");
    }
    LoadedModel out;
    Model& m = out.model;
    m.num_classes = r.u16();
    const int rank = r.u8();
    for (int i = 0; i < rank; ++i) m.input_shape.push_back(static_cast<int>(r.u32()));
    const int layer_count = r.u16();
    for (int i = 0; i < layer_count; ++i) {
        const std::uint8_t kind = r.u8();
        switch (static_cast<LayerKind>(kind)) {
            case LayerKind::dense: {
                const int in = static_cast<int>(r.u32());
                const int outf = static_cast<int>(r.u32());
                m.layers.push_back(Layer::dense(in, outf));
                break;
            }
            case LayerKind::conv2d: {
                const int in = static_cast<int>(r.u32());
                const int outc = static_cast<int>(r.u32());
                const int k = static_cast<int>(r.u32());
                const int s = static_cast<int>(r.u32());
                const int p = static_cast<int>(r.u32());
                m.layers.push_back(Layer::conv2d(in, outc, k, s, p));
                break;
            }
            case LayerKind::relu:
                m.layers.push_back(Layer::relu());
                break;
            case LayerKind::flatten:
                m.layers.push_back(Layer::flatten());
                break;
            default:
                throw std::runtime_error(path + ": unknown layer kind, file corrupt");
        }
    }
    for (Layer& l : m.layers) {
        if (!l.has_params()) continue;
        const std::uint64_t wn = r.u64();
        if (wn != static_cast<std::uint64_t>(l.weight.size())) {
            throw std::runtime_error(path + ": weight payload size mismatch, file corrupt");
        }
        r.f32s(l.weight.data, wn);
        const std::uint64_t bn = r.u64();
        if (bn != static_cast<std::uint64_t>(l.bias.size())) {
            throw std::runtime_error(path + ": bias payload size mismatch, file corrupt");
        }
        r.f32s(l.bias.data, bn);
    }
    while (!r.at_end()) {
        if (r.remaining() < 12) {
            throw std::runtime_error(path + ": dangling section header, file corrupt");
        }
        const std::uint32_t tag = r.u32();
        const std::uint64_t bytes = r.u64();
        if (bytes > r.remaining()) {
            throw std::runtime_error(path + ": section overruns file, corrupt");
        }
        if (tag == kSectionQuant) {
            const int n = r.u16();
            for (int i = 0; i < n; ++i) {
                const int li = r.u16();
                quant::LayerQuant lq;
                lq.weight = read_quant_params(r);
                lq.input = read_quant_params(r);
                lq.output = read_quant_params(r);
                out.annotations.quant_layers[li] = lq;
            }
        } else if (tag == kSectionPrune) {
            prune::PruneSpec spec;
            const int n = r.u16();
            for (int i = 0; i < n; ++i) {
                spec.layer_indices.push_back(r.u16());
                spec.rates.push_back(r.f32());
                const std::uint32_t filters = r.u32();
                std::vector<std::uint8_t> keep(filters, 1);
                const std::uint32_t dropped = r.u32();
                for (std::uint32_t d = 0; d < dropped; ++d) {
                    const std::uint32_t f = r.u32();
                    if (f >= filters) {
                        throw std::runtime_error(path + ": dropped filter out of range, corrupt");
                    }
                    keep[f] = 0;
                }
                spec.keep.push_back(std::move(keep));
            }
            out.annotations.prune_spec = std::move(spec);
        } else {
            std::vector<char> skip(bytes);
            r.raw(skip.data(), bytes);
        }
    }
    m.validate();
    return out;
}

}  // namespace cablab::harness
