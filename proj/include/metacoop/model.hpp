#pragma once

// MLP with a shared feature extractor and two heads:
//   fe.*    feature extractor (shared body)
//   head.*  meta-learner head, adapted in the inner loop
//   co.*    co-learner head, consumes the same features

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "metacoop/autodiff.hpp"
#include "metacoop/rng.hpp"
#include "metacoop/tensor.hpp"

namespace metacoop {

enum class Partition : std::uint8_t { FeatureExtractor = 0, MetaHead = 1, CoHead = 2 };

inline const char* partition_name(Partition p) {
    switch (p) {
        case Partition::FeatureExtractor: return "FE";
        case Partition::MetaHead: return "META";
        case Partition::CoHead: return "CO";
    }
    return "?";
}

struct ParamInfo {
    std::string name;
    Partition partition;
    Shape shape;
};

// Ordered name -> value collection sharing an immutable layout. Instantiated
// with Array for stored parameters and with Var for parameters bound to a graph.
template <class T>
class Params {
public:
    Params() : layout_(std::make_shared<const std::vector<ParamInfo>>()) {}

    Params(std::shared_ptr<const std::vector<ParamInfo>> layout, std::vector<T> values)
        : layout_(std::move(layout)), values_(std::move(values)) {
        if (layout_->size() != values_.size()) throw std::invalid_argument("Params: layout/value count mismatch");
        for (std::size_t i = 0; i < layout_->size(); ++i) {
            for (std::size_t j = 0; j < i; ++j) {
                if ((*layout_)[i].name == (*layout_)[j].name) {
                    throw std::invalid_argument("Params: duplicate name " + (*layout_)[i].name);
                }
            }
        }
    }

    std::size_t size() const noexcept { return values_.size(); }
    const ParamInfo& info(std::size_t i) const { return (*layout_)[i]; }
    const std::string& name(std::size_t i) const { return (*layout_)[i].name; }
    Partition partition(std::size_t i) const { return (*layout_)[i].partition; }
    const std::shared_ptr<const std::vector<ParamInfo>>& layout() const noexcept { return layout_; }

    T& operator[](std::size_t i) { return values_[i]; }
    const T& operator[](std::size_t i) const { return values_[i]; }
    std::span<const T> values() const noexcept { return values_; }

    std::optional<std::size_t> find(std::string_view name) const {
        for (std::size_t i = 0; i < layout_->size(); ++i) {
            if ((*layout_)[i].name == name) return i;
        }
        return std::nullopt;
    }

    const T& at(std::string_view name) const {
        auto i = find(name);
        if (!i) throw std::out_of_range("Params: no entry named " + std::string(name));
        return values_[*i];
    }

    std::vector<std::size_t> indices(Partition p) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < size(); ++i) {
            if (partition(i) == p) out.push_back(i);
        }
        return out;
    }

    bool has(Partition p) const {
        return std::any_of(layout_->begin(), layout_->end(), [p](const ParamInfo& e) { return e.partition == p; });
    }

    // Same layout, new values.
    template <class U>
    Params<U> rebind(std::vector<U> values) const {
        return Params<U>(layout_, std::move(values));
    }

    // Copy with every entry of one partition removed.
    Params without(Partition p) const {
        auto layout = std::make_shared<std::vector<ParamInfo>>();
        std::vector<T> values;
        for (std::size_t i = 0; i < size(); ++i) {
            if (partition(i) == p) continue;
            layout->push_back(info(i));
            values.push_back(values_[i]);
        }
        return Params(std::move(layout), std::move(values));
    }

private:
    std::shared_ptr<const std::vector<ParamInfo>> layout_;
    std::vector<T> values_;
};

using ParamSet = Params<Array>;
using ParamVars = Params<Var>;

inline bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.name(i) != b.name(i) || a.partition(i) != b.partition(i) || !(a[i] == b[i])) return false;
    }
    return true;
}

inline bool same_layout(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.name(i) != b.name(i) || a.partition(i) != b.partition(i) || a[i].shape() != b[i].shape()) return false;
    }
    return true;
}

inline std::size_t count_params(const ParamSet& p, Partition part) {
    std::size_t n = 0;
    for (std::size_t i : p.indices(part)) n += p[i].size();
    return n;
}

// FNV-1a over the bit patterns of one partition.
inline std::uint64_t checksum(const ParamSet& p, Partition part) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i : p.indices(part)) {
        for (double v : p[i].values()) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xffU;
                h *= 0x100000001b3ULL;
            }
        }
    }
    return h;
}

enum class Activation : std::uint8_t { Relu };

struct MlpSpec {
    std::size_t input_dim = 1;
    std::vector<std::size_t> hidden{40, 40};
    std::size_t output_dim = 1;
    std::vector<std::size_t> co_hidden{40};
    Activation activation = Activation::Relu;

    std::size_t feature_dim() const { return hidden.empty() ? input_dim : hidden.back(); }
};

inline std::string layer_name(const char* prefix, std::size_t i, const char* suffix) {
    return std::string(prefix) + "." + std::to_string(i) + "." + suffix;
}

// Weights ~ U[-b, b] with b = sqrt(6 / (fan_in + fan_out)); biases zero.
inline ParamSet init_params(const MlpSpec& spec, std::uint64_t seed) {
    auto positive = [](std::size_t d) { return d >= 1; };
    if (!positive(spec.input_dim) || !positive(spec.output_dim) || spec.hidden.empty() ||
        !std::all_of(spec.hidden.begin(), spec.hidden.end(), positive) ||
        !std::all_of(spec.co_hidden.begin(), spec.co_hidden.end(), positive)) {
        throw std::invalid_argument("init_params: every dimension must be >= 1 and at least one hidden layer is required");
    }

    auto layout = std::make_shared<std::vector<ParamInfo>>();
    auto add_layer = [&](const std::string& w, const std::string& b, Partition p, std::size_t in, std::size_t out) {
        layout->push_back({w, p, Shape{in, out}});
        layout->push_back({b, p, Shape{1, out}});
    };

    std::size_t width = spec.input_dim;
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
        add_layer(layer_name("fe", i, "w"), layer_name("fe", i, "b"), Partition::FeatureExtractor, width, spec.hidden[i]);
        width = spec.hidden[i];
    }
    add_layer("head.w", "head.b", Partition::MetaHead, width, spec.output_dim);
    std::size_t co_width = width;
    std::size_t layer = 0;
    for (std::size_t h : spec.co_hidden) {
        add_layer(layer_name("co", layer, "w"), layer_name("co", layer, "b"), Partition::CoHead, co_width, h);
        co_width = h;
        ++layer;
    }
    add_layer(layer_name("co", layer, "w"), layer_name("co", layer, "b"), Partition::CoHead, co_width, spec.output_dim);

    Rng rng(seed);
    std::vector<Array> values;
    values.reserve(layout->size());
    for (const auto& e : *layout) {
        Array a(e.shape);
        if (e.name.back() == 'w') {
            const double bound = std::sqrt(6.0 / static_cast<double>(e.shape[0] + e.shape[1]));
            for (double& v : a.values()) v = rng.uniform(-bound, bound);
        }
        values.push_back(std::move(a));
    }
    return ParamSet(std::move(layout), std::move(values));
}

inline ParamVars bind(Graph& g, const ParamSet& p) {
    std::vector<Var> vars;
    vars.reserve(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) vars.push_back(g.leaf(p[i]));
    return p.rebind(std::move(vars));
}

inline ParamSet values_of(const ParamVars& p) {
    std::vector<Array> values;
    values.reserve(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) values.push_back(p[i].value());
    return p.rebind(std::move(values));
}

namespace detail {

inline std::size_t count_layers(const ParamVars& p, const char* prefix) {
    std::size_t n = 0;
    while (p.find(layer_name(prefix, n, "w"))) ++n;
    return n;
}

inline Var dense(Graph& g, const ParamVars& p, const std::string& w, const std::string& b, const Var& x) {
    return g.add_bias(g.matmul(x, p.at(w)), p.at(b));
}

}  // namespace detail

// Post-activation output of every feature-extractor layer, in order.
inline std::vector<Var> feature_layers(Graph& g, const ParamVars& p, const Var& x) {
    const std::size_t n = detail::count_layers(p, "fe");
    if (n == 0) throw std::invalid_argument("feature_layers: parameters have no feature-extractor partition");
    std::vector<Var> out;
    out.reserve(n);
    Var h = x;
    for (std::size_t i = 0; i < n; ++i) {
        h = g.relu(detail::dense(g, p, layer_name("fe", i, "w"), layer_name("fe", i, "b"), h));
        out.push_back(h);
    }
    return out;
}

inline Var features(Graph& g, const ParamVars& p, const Var& x) { return feature_layers(g, p, x).back(); }

struct MetaForward {
    Var features;
    Var output;
};

inline Var forward_head(Graph& g, const ParamVars& p, const Var& features) {
    if (!p.has(Partition::MetaHead)) throw std::invalid_argument("forward_head: parameters have no meta-learner partition");
    g.tally("forward_meta");
    return detail::dense(g, p, "head.w", "head.b", features);
}

inline MetaForward forward_meta(Graph& g, const ParamVars& p, const Var& x) {
    Var f = features(g, p, x);
    return {f, forward_head(g, p, f)};
}

inline Var forward_co(Graph& g, const ParamVars& p, const Var& features) {
    const std::size_t n = detail::count_layers(p, "co");
    if (n == 0) throw std::invalid_argument("forward_co: parameters have no co-learner partition");
    g.tally("forward_co");
    Var h = features;
    for (std::size_t i = 0; i < n; ++i) {
        h = detail::dense(g, p, layer_name("co", i, "w"), layer_name("co", i, "b"), h);
        if (i + 1 < n) h = g.relu(h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// Checkpoint format, all integers and floats little-endian:
//   "MCPS" u32 version u32 count
//   count x { u32 name_len, name bytes, u8 partition, u32 rank, rank x u64 dim }
//   payload: every entry's values as f64, in entry order
// ---------------------------------------------------------------------------

namespace detail {

template <class U>
void put_le(std::ostream& os, U v) {
    for (std::size_t b = 0; b < sizeof(U); ++b) os.put(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * b)) & 0xffU));
}

template <class U>
U get_le(std::istream& is) {
    std::uint64_t v = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) {
        const int c = is.get();
        if (c == std::char_traits<char>::eof()) throw std::runtime_error("load_params: truncated file");
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
    }
    return static_cast<U>(v);
}

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace detail

inline void save_params(std::ostream& os, const ParamSet& p) {
    os.write("MCPS", 4);
    detail::put_le<std::uint32_t>(os, detail::kCheckpointVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.size()));
    for (std::size_t i = 0; i < p.size(); ++i) {
        const auto& e = p.info(i);
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(e.partition));
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p[i].shape().size()));
        for (std::size_t d : p[i].shape()) detail::put_le<std::uint64_t>(os, d);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
        for (double v : p[i].values()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
}

inline ParamSet load_params(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "MCPS") throw std::runtime_error("load_params: bad magic");
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != detail::kCheckpointVersion) throw std::runtime_error("load_params: unsupported version " + std::to_string(version));
    const auto count = detail::get_le<std::uint32_t>(is);
    auto layout = std::make_shared<std::vector<ParamInfo>>();
    for (std::uint32_t i = 0; i < count; ++i) {
        ParamInfo e;
        const auto len = detail::get_le<std::uint32_t>(is);
        e.name.resize(len);
        is.read(e.name.data(), len);
        const auto part = detail::get_le<std::uint8_t>(is);
        if (part > 2) throw std::runtime_error("load_params: bad partition tag");
        e.partition = static_cast<Partition>(part);
        const auto rank = detail::get_le<std::uint32_t>(is);
        for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(static_cast<std::size_t>(detail::get_le<std::uint64_t>(is)));
        layout->push_back(std::move(e));
    }
    std::vector<Array> values;
    for (const auto& e : *layout) {
        Array a(e.shape);
        for (double& v : a.values()) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
        values.push_back(std::move(a));
    }
    return ParamSet(std::move(layout), std::move(values));
}

inline void save_params(const std::string& path, const ParamSet& p) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_params: cannot open " + path);
    save_params(os, p);
}

inline ParamSet load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_params: cannot open " + path);
    return load_params(is);
}

}  // namespace metacoop
