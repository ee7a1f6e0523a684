#pragma once

// Binary model checkpoints: little-endian, magic "NIF1", u32 version, a
// config block, then all parameters as f64 in layout order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "nifkit/models.hpp"

namespace nifkit {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'N', 'I', 'F', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class BinWriter {
public:
    template <class T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const char*>(&v);
        buf_.insert(buf_.end(), p, p + sizeof(T));
    }
    void put_act(const Activation& a) {
        put<std::uint32_t>(static_cast<std::uint32_t>(a.kind));
        put<double>(a.omega0);
    }
    void put_widths(const std::vector<Index>& w) {
        put<std::uint64_t>(w.size());
        for (Index v : w) put<std::int64_t>(v);
    }
    void put_shape(const ShapeNetConfig& s) {
        put<std::int64_t>(s.d_in);
        put<std::int64_t>(s.width);
        put<std::int64_t>(s.n_blocks);
        put<std::int64_t>(s.d_out);
        put_act(s.act);
        put<std::uint32_t>(static_cast<std::uint32_t>(s.style));
    }
    void put_doubles(std::span<const double> v) {
        put<std::uint64_t>(v.size());
        for (double d : v) put<double>(d);
    }
    const std::vector<char>& bytes() const { return buf_; }

private:
    std::vector<char> buf_;
};

class BinReader {
public:
    explicit BinReader(std::vector<char> b) : buf_(std::move(b)) {}

    template <class T>
    T get() {
        if (pos_ + sizeof(T) > buf_.size()) fail(ErrorKind::Parse, "checkpoint truncated at byte " + std::to_string(pos_));
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    Index get_dim(const char* what, Index lo = 0, Index hi = Index{1} << 32) {
        const auto v = get<std::int64_t>();
        if (v < lo || v > hi) fail(ErrorKind::Parse, std::string("checkpoint: invalid ") + what + " " + std::to_string(v));
        return v;
    }
    Activation get_act() {
        const auto k = get<std::uint32_t>();
        if (k > static_cast<std::uint32_t>(ActKind::Sine)) fail(ErrorKind::Parse, "checkpoint: unknown activation tag");
        const double w = get<double>();
        return {static_cast<ActKind>(k), w};
    }
    std::vector<Index> get_widths() {
        const auto n = get<std::uint64_t>();
        if (n > 1024) fail(ErrorKind::Parse, "checkpoint: implausible width list length");
        std::vector<Index> w;
        for (std::uint64_t i = 0; i < n; ++i) w.push_back(get_dim("width", 1));
        return w;
    }
    ShapeNetConfig get_shape() {
        ShapeNetConfig s;
        s.d_in = get_dim("d_in", 1);
        s.width = get_dim("width", 1);
        s.n_blocks = get_dim("n_blocks", 0);
        s.d_out = get_dim("d_out", 1);
        s.act = get_act();
        const auto st = get<std::uint32_t>();
        if (st > 1) fail(ErrorKind::Parse, "checkpoint: unknown block style tag");
        s.style = static_cast<BlockStyle>(st);
        return s;
    }
    std::vector<double> get_doubles(std::uint64_t expected) {
        const auto n = get<std::uint64_t>();
        if (n != expected)
            fail(ErrorKind::Parse, "checkpoint: parameter count " + std::to_string(n) + " does not match config (" +
                                       std::to_string(expected) + ")");
        std::vector<double> v(n);
        for (auto& d : v) d = get<double>();
        return v;
    }
    bool at_end() const { return pos_ == buf_.size(); }

private:
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> serialize_model(const Model& model) {
    detail::BinWriter w;
    for (char c : kCheckpointMagic) w.put<char>(c);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(model.kind()));
    if (const auto* n = dynamic_cast<const NifModel*>(&model)) {
        const NifConfig& c = n->config();
        w.put_shape(c.shape);
        w.put<std::int64_t>(c.pnet.d_in);
        w.put_widths(c.pnet.hidden);
        w.put<std::int64_t>(c.pnet.bottleneck);
        w.put_act(c.pnet.act);
        w.put<std::uint8_t>(c.last_layer_bias ? 1 : 0);
    } else if (const auto* m = dynamic_cast<const MlpModel*>(&model)) {
        w.put_shape(m->config());
        w.put<std::int64_t>(m->cond_dim());
    } else if (const auto* d = dynamic_cast<const DeepONetModel*>(&model)) {
        w.put_widths(d->config().branch);
        w.put_widths(d->config().trunk);
        w.put_act(d->config().act);
    } else if (const auto* f = dynamic_cast<const FourierModel*>(&model)) {
        const FourierFeatureConfig& c = f->config();
        w.put<std::int64_t>(c.d_in);
        w.put<std::int64_t>(c.n_features);
        w.put<double>(c.sigma);
        w.put_shape(c.mlp);
        w.put<std::int64_t>(f->cond_dim());
        const ColMatrix& b = f->frequencies();
        w.put_doubles(std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
    } else {
        fail(ErrorKind::Unsupported, "serialize_model: unknown model type");
    }
    w.put_doubles(model.params());
    return w.bytes();
}

inline std::unique_ptr<Model> deserialize_model(std::vector<char> bytes) {
    detail::BinReader r(std::move(bytes));
    for (char c : kCheckpointMagic)
        if (r.get<char>() != c) fail(ErrorKind::Parse, "not a nifkit checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        fail(ErrorKind::Parse, "unsupported checkpoint version " + std::to_string(version));
    const auto kind_tag = r.get<std::uint32_t>();
    if (kind_tag > static_cast<std::uint32_t>(ModelKind::Fourier)) fail(ErrorKind::Parse, "checkpoint: unknown model tag");
    const auto kind = static_cast<ModelKind>(kind_tag);

    std::unique_ptr<Model> model;
    try {
        switch (kind) {
            case ModelKind::NifFull:
            case ModelKind::NifLastLayer: {
                NifConfig c;
                c.shape = r.get_shape();
                c.pnet.d_in = r.get_dim("parameter net d_in", 1);
                c.pnet.hidden = r.get_widths();
                c.pnet.bottleneck = r.get_dim("bottleneck", 1);
                c.pnet.act = r.get_act();
                c.pnet.target = kind == ModelKind::NifFull ? NifMode::Full : NifMode::LastLayer;
                c.last_layer_bias = r.get<std::uint8_t>() != 0;
                model = std::make_unique<NifModel>(c);
                break;
            }
            case ModelKind::Mlp:
            case ModelKind::Siren: {
                const ShapeNetConfig s = r.get_shape();
                model = std::make_unique<MlpModel>(s, r.get_dim("cond_dim"));
                break;
            }
            case ModelKind::DeepONet: {
                DeepONetConfig c;
                c.branch = r.get_widths();
                c.trunk = r.get_widths();
                c.act = r.get_act();
                model = std::make_unique<DeepONetModel>(c);
                break;
            }
            case ModelKind::Fourier: {
                FourierFeatureConfig c;
                c.d_in = r.get_dim("d_in", 1);
                c.n_features = r.get_dim("n_features", 1);
                c.sigma = r.get<double>();
                c.mlp = r.get_shape();
                auto f = std::make_unique<FourierModel>(c, r.get_dim("cond_dim"));
                const auto b = r.get_doubles(static_cast<std::uint64_t>(c.n_features * c.d_in));
                f->set_frequencies(Eigen::Map<const ColMatrix>(b.data(), c.n_features, c.d_in));
                model = std::move(f);
                break;
            }
        }
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Parse) throw;
        fail(ErrorKind::Parse, std::string("checkpoint config invalid: ") + e.what());
    }
    const std::vector<double> values = r.get_doubles(model->params().size());
    model->params().assign(values.begin(), values.end());
    if (!r.at_end()) fail(ErrorKind::Parse, "checkpoint has trailing bytes");
    return model;
}

inline void save_model(const Model& model, const std::filesystem::path& path) {
    const auto bytes = serialize_model(model);
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "failed writing '" + path.string() + "'");
}

inline std::unique_ptr<Model> load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot open checkpoint '" + path.string() + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_model(std::move(bytes));
}

}  // namespace nifkit
