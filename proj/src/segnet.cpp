#include "cmrssl/segnet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "cmrssl/errors.hpp"
#include "cmrssl/kernels.hpp"

namespace cmrssl::segnet {

void NetConfig::validate() const {
    if (depth < 2) throw BadConfig("U-net depth must be >= 2");
    if (base_channels < 1) throw BadConfig("base_channels must be >= 1");
    if (in_channels < 1) throw BadConfig("in_channels must be >= 1");
    if (num_classes < 2 || num_classes > 255) throw BadConfig("K must be in [2, 255]");
}

std::string_view to_string(Partition p) {
    switch (p) {
    case Partition::encoder: return "encoder";
    case Partition::decoder: return "decoder";
    case Partition::head: return "head";
    }
    return "?";
}

namespace {

Partition parse_partition(const std::string& s) {
    if (s == "encoder") return Partition::encoder;
    if (s == "decoder") return Partition::decoder;
    if (s == "head") return Partition::head;
    throw FormatError("unknown partition '" + s + "'");
}

std::size_t product(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    return n;
}

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

} // namespace

template <typename T>
UNet<T>::UNet(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    int cin = cfg_.in_channels;
    for (int l = 0; l < cfg_.depth; ++l) {
        const int c = cfg_.channels(l);
        const std::string p = "enc" + std::to_string(l);
        Level lv;
        lv.a = add_conv(p + ".conv1", Partition::encoder, -1, {c, cin, 3, 3});
        init_conv(lv.a, cin * 9, rng);
        lv.b = add_conv(p + ".conv2", Partition::encoder, -1, {c, c, 3, 3});
        init_conv(lv.b, c * 9, rng);
        enc_.push_back(lv);
        cin = c;
    }
    up_.resize(cfg_.depth - 1);
    dec_.resize(cfg_.depth - 1);
    for (int l = cfg_.depth - 2; l >= 0; --l) {
        const int c = cfg_.channels(l), below = cfg_.channels(l + 1);
        const std::string p = "dec" + std::to_string(l);
        up_[l] = add_conv(p + ".up", Partition::decoder, -1, {c, 2, 2, below});
        init_conv(up_[l], below, rng);
        dec_[l].a = add_conv(p + ".conv1", Partition::decoder, -1, {c, 2 * c, 3, 3});
        init_conv(dec_[l].a, 2 * c * 9, rng);
        dec_[l].b = add_conv(p + ".conv2", Partition::decoder, -1, {c, c, 3, 3});
        init_conv(dec_[l].b, c * 9, rng);
    }
    heads_.push_back(add_conv("head0", Partition::head, 0, {cfg_.num_classes, cfg_.base_channels}));
    init_conv(heads_[0], cfg_.base_channels, rng);
}

template <typename T>
int UNet<T>::add_param(std::string name, Partition part, int head, std::vector<int> shape) {
    Param<T> p;
    p.name = std::move(name);
    p.partition = part;
    p.head = head;
    p.value.assign(product(shape), T(0));
    p.grad.assign(p.value.size(), T(0));
    p.shape = std::move(shape);
    index_[p.name] = int(params_.size());
    params_.push_back(std::move(p));
    return int(params_.size()) - 1;
}

template <typename T>
typename UNet<T>::Conv UNet<T>::add_conv(const std::string& prefix, Partition part, int head,
                                         std::vector<int> wshape) {
    Conv c;
    c.cout = wshape.front();
    c.w = add_param(prefix + ".weight", part, head, std::move(wshape));
    c.b = add_param(prefix + ".bias", part, head, {c.cout});
    return c;
}

template <typename T>
void UNet<T>::init_conv(const Conv& c, int fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> he(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : params_[c.w].value) v = T(he(rng));
    std::fill(params_[c.b].value.begin(), params_[c.b].value.end(), T(0));
}

template <typename T>
int UNet<T>::head_classes(int head) const {
    if (head < 0 || head >= num_heads()) throw BadConfig("no head " + std::to_string(head));
    return heads_[head].cout;
}

template <typename T>
Param<T>& UNet<T>::param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw BadConfig("no parameter '" + name + "'");
    return params_[it->second];
}

template <typename T>
const Param<T>& UNet<T>::param(const std::string& name) const {
    return const_cast<UNet*>(this)->param(name);
}

template <typename T>
void UNet<T>::reset_head(int head, int num_classes, std::uint64_t seed) {
    if (head < 0 || head >= num_heads()) throw BadConfig("no head " + std::to_string(head));
    if (num_classes < 2 || num_classes > 255) throw BadConfig("K must be in [2, 255]");
    Conv& h = heads_[head];
    h.cout = num_classes;
    auto& wp = params_[h.w];
    auto& bp = params_[h.b];
    wp.shape = {num_classes, cfg_.base_channels};
    wp.value.assign(product(wp.shape), T(0));
    wp.grad.assign(wp.value.size(), T(0));
    bp.shape = {num_classes};
    bp.value.assign(std::size_t(num_classes), T(0));
    bp.grad.assign(bp.value.size(), T(0));
    if (head == 0) cfg_.num_classes = num_classes;
    std::mt19937_64 rng(seed);
    init_conv(h, cfg_.base_channels, rng);
}

template <typename T>
int UNet<T>::add_head(int num_classes, std::uint64_t seed) {
    if (num_classes < 2 || num_classes > 255) throw BadConfig("K must be in [2, 255]");
    const int idx = num_heads();
    heads_.push_back(add_conv("head" + std::to_string(idx), Partition::head, idx,
                              {num_classes, cfg_.base_channels}));
    std::mt19937_64 rng(seed);
    init_conv(heads_.back(), cfg_.base_channels, rng);
    return idx;
}

template <typename T>
void UNet<T>::zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
}

template <typename T>
std::uint64_t UNet<T>::checksum(Partition part) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : params_) {
        if (p.partition != part) continue;
        const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data());
        for (std::size_t i = 0; i < p.value.size() * sizeof(T); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

template <typename T>
Tensor<T> UNet<T>::forward(const Tensor<T>& x, int head) {
    const int d = cfg_.divisor();
    if (x.c != cfg_.in_channels)
        throw BadShape("expected " + std::to_string(cfg_.in_channels) + " input channels, got " +
                       std::to_string(x.c));
    if (x.h % d != 0 || x.w % d != 0 || x.h == 0 || x.w == 0)
        throw BadShape("input " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                       " is not a multiple of " + std::to_string(d) + "; pad first");
    if (head < 0 || head >= num_heads()) throw BadConfig("no head " + std::to_string(head));

    const int depth = cfg_.depth;
    enc_in_.assign(depth, {});
    enc_mid_.assign(depth, {});
    enc_out_.assign(depth, {});
    pool_idx_.assign(depth - 1, {});
    dec_in_.assign(depth - 1, {});
    dec_mid_.assign(depth - 1, {});
    dec_out_.assign(depth - 1, {});

    enc_in_[0] = x;
    for (int l = 0; l < depth; ++l) {
        if (l > 0) kernels::maxpool2_forward(enc_out_[l - 1], enc_in_[l], pool_idx_[l - 1]);
        kernels::conv3x3_forward(enc_in_[l], w(enc_[l].a), b(enc_[l].a), enc_[l].a.cout, enc_mid_[l]);
        kernels::relu_forward(enc_mid_[l]);
        kernels::conv3x3_forward(enc_mid_[l], w(enc_[l].b), b(enc_[l].b), enc_[l].b.cout, enc_out_[l]);
        kernels::relu_forward(enc_out_[l]);
    }
    const Tensor<T>* cur = &enc_out_[depth - 1];
    Tensor<T> up;
    for (int l = depth - 2; l >= 0; --l) {
        kernels::upconv2x2_forward(*cur, w(up_[l]), b(up_[l]), up_[l].cout, up);
        kernels::concat_channels(enc_out_[l], up, dec_in_[l]);
        kernels::conv3x3_forward(dec_in_[l], w(dec_[l].a), b(dec_[l].a), dec_[l].a.cout, dec_mid_[l]);
        kernels::relu_forward(dec_mid_[l]);
        kernels::conv3x3_forward(dec_mid_[l], w(dec_[l].b), b(dec_[l].b), dec_[l].b.cout, dec_out_[l]);
        kernels::relu_forward(dec_out_[l]);
        cur = &dec_out_[l];
    }
    Tensor<T> logits;
    kernels::conv1x1_forward(dec_out_[0], w(heads_[head]), b(heads_[head]), heads_[head].cout, logits);
    cached_head_ = head;
    return logits;
}

template <typename T>
void UNet<T>::backward(const Tensor<T>& dlogits, bool encoder_grads) {
    if (cached_head_ < 0) throw BadShape("backward() called without a preceding forward()");
    const int depth = cfg_.depth;
    const Conv& head = heads_[cached_head_];
    if (dlogits.c != head.cout || dlogits.n != dec_out_[0].n || dlogits.h != dec_out_[0].h ||
        dlogits.w != dec_out_[0].w)
        throw BadShape("logit gradient does not match the last forward pass");

    Tensor<T> g, gm, gin, gup;
    kernels::conv1x1_backward(dec_out_[0], w(head), dlogits, dw(head), db(head), &g);

    std::vector<Tensor<T>> skip_grad(depth - 1);
    for (int l = 0; l <= depth - 2; ++l) {
        kernels::relu_backward(dec_out_[l], g);
        kernels::conv3x3_backward(dec_mid_[l], w(dec_[l].b), g, dw(dec_[l].b), db(dec_[l].b), &gm);
        kernels::relu_backward(dec_mid_[l], gm);
        kernels::conv3x3_backward(dec_in_[l], w(dec_[l].a), gm, dw(dec_[l].a), db(dec_[l].a), &gin);
        kernels::split_channels(gin, enc_out_[l].c, encoder_grads ? &skip_grad[l] : nullptr, &gup);
        const bool into_decoder = l + 1 <= depth - 2;
        const Tensor<T>& up_in = into_decoder ? dec_out_[l + 1] : enc_out_[depth - 1];
        kernels::upconv2x2_backward(up_in, w(up_[l]), gup, dw(up_[l]), db(up_[l]),
                                    (into_decoder || encoder_grads) ? &g : nullptr);
    }
    if (!encoder_grads) return;

    // g now holds the gradient w.r.t. the bottleneck output.
    Tensor<T> gpool;
    for (int l = depth - 1; l >= 0; --l) {
        if (l < depth - 1) {
            g = std::move(gpool);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += skip_grad[l].data[i];
        }
        kernels::relu_backward(enc_out_[l], g);
        kernels::conv3x3_backward(enc_mid_[l], w(enc_[l].b), g, dw(enc_[l].b), db(enc_[l].b), &gm);
        kernels::relu_backward(enc_mid_[l], gm);
        kernels::conv3x3_backward(enc_in_[l], w(enc_[l].a), gm, dw(enc_[l].a), db(enc_[l].a),
                                  l > 0 ? &gin : nullptr);
        if (l > 0) kernels::maxpool2_backward(gin, pool_idx_[l - 1], gpool);
    }
}

template <typename T>
Tensor<T> UNet<T>::predict(const Tensor<T>& x, int head) {
    const int d = cfg_.divisor();
    if (x.h % d == 0 && x.w % d == 0) return forward(x, head);
    const Tensor<T> padded = reflect_pad(x, d);
    const Tensor<T> full = forward(padded, head);
    Tensor<T> out(x.n, full.c, x.h, x.w);
    for (int i = 0; i < x.n; ++i)
        for (int c = 0; c < full.c; ++c)
            for (int y = 0; y < x.h; ++y)
                for (int xx = 0; xx < x.w; ++xx) out.at(i, c, y, xx) = full.at(i, c, y, xx);
    return out;
}

template <typename T>
template <typename U>
UNet<U> UNet<T>::cast() const {
    UNet<U> out;
    out.cfg_ = cfg_;
    out.index_ = index_;
    for (const auto& p : params_) {
        Param<U> q;
        q.name = p.name;
        q.partition = p.partition;
        q.head = p.head;
        q.shape = p.shape;
        q.value.assign(p.value.begin(), p.value.end());
        q.grad.assign(p.value.size(), U(0));
        out.params_.push_back(std::move(q));
    }
    auto conv = [](const Conv& c) { return typename UNet<U>::Conv{c.w, c.b, c.cout}; };
    for (const auto& l : enc_) out.enc_.push_back({conv(l.a), conv(l.b)});
    for (const auto& l : dec_) out.dec_.push_back({conv(l.a), conv(l.b)});
    for (const auto& c : up_) out.up_.push_back(conv(c));
    for (const auto& c : heads_) out.heads_.push_back(conv(c));
    return out;
}

template class UNet<float>;
template class UNet<double>;
template UNet<double> UNet<float>::cast<double>() const;
template UNet<float> UNet<double>::cast<float>() const;

NetworkHandle build_net(const NetConfig& cfg, std::uint64_t seed) { return NetworkHandle(cfg, seed); }

NetworkHandle replace_head(const NetworkHandle& net, int num_classes, std::uint64_t seed) {
    NetworkHandle out = net;
    if (out.num_heads() > 1) {
        // Rebuild without the extra heads: keep encoder/decoder values.
        NetConfig cfg = net.config();
        NetworkHandle fresh(cfg, 0);
        for (auto& p : fresh.params())
            if (p.partition != Partition::head) p.value = net.param(p.name).value;
        out = std::move(fresh);
    }
    out.reset_head(0, num_classes, seed);
    return out;
}

NetworkHandle attach_second_head(const NetworkHandle& net, int num_classes, std::uint64_t seed) {
    if (net.num_heads() != 1) throw BadConfig("attach_second_head expects a single-head network");
    NetworkHandle out = net;
    out.add_head(num_classes, seed);
    return out;
}

template <typename T>
double cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels, Tensor<T>* dlogits) {
    if (labels.size() != std::size_t(logits.n) * logits.plane())
        throw BadShape("label count does not match logits");
    for (auto l : labels)
        if (int(l) >= logits.c) throw BadShape("label value exceeds the number of classes");
    return kernels::softmax_cross_entropy(logits, labels, dlogits);
}

template double cross_entropy<float>(const Tensor<float>&, std::span<const std::uint8_t>, Tensor<float>*);
template double cross_entropy<double>(const Tensor<double>&, std::span<const std::uint8_t>, Tensor<double>*);

Image zscore(const Image& img) {
    double sum = 0, sq = 0;
    for (float v : img.values()) sum += v;
    const double n = double(img.values().size());
    const double mean = sum / n;
    for (float v : img.values()) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / n);
    Image out(img.size());
    const double inv = sd > 1e-12 ? 1.0 / sd : 0.0;
    for (std::size_t i = 0; i < out.values().size(); ++i)
        out.values()[i] = float((img.values()[i] - mean) * inv);
    return out;
}

template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, int divisor) {
    const int h = (x.h + divisor - 1) / divisor * divisor;
    const int w = (x.w + divisor - 1) / divisor * divisor;
    Tensor<T> out(x.n, x.c, h, w);
    for (int i = 0; i < x.n; ++i)
        for (int c = 0; c < x.c; ++c)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx)
                    out.at(i, c, y, xx) = x.at(i, c, reflect_index(y, x.h), reflect_index(xx, x.w));
    return out;
}

template Tensor<float> reflect_pad<float>(const Tensor<float>&, int);
template Tensor<double> reflect_pad<double>(const Tensor<double>&, int);

Grid<std::uint8_t> reflect_pad(const Grid<std::uint8_t>& g, int divisor) {
    const int h = (g.rows() + divisor - 1) / divisor * divisor;
    const int w = (g.cols() + divisor - 1) / divisor * divisor;
    Grid<std::uint8_t> out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out(y, x) = g(reflect_index(y, g.rows()), reflect_index(x, g.cols()));
    return out;
}

Tensor<float> make_batch(std::span<const Image* const> images) {
    if (images.empty()) throw BadShape("empty batch");
    const GridSize s = images.front()->size();
    Tensor<float> t(int(images.size()), 1, s.rows, s.cols);
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i]->size() != s) throw BadShape("batch images differ in shape");
        std::copy(images[i]->values().begin(), images[i]->values().end(), t.sample(int(i)));
    }
    return t;
}

LabelMap argmax_labels(const Tensor<float>& logits, int i) {
    LabelMap out({logits.h, logits.w}, logits.c);
    const std::size_t hw = logits.plane();
    const float* z = logits.sample(i);
    for (std::size_t p = 0; p < hw; ++p) {
        int best = 0;
        for (int c = 1; c < logits.c; ++c)
            if (z[c * hw + p] > z[best * hw + p]) best = c;
        out.grid.values()[p] = std::uint8_t(best);
    }
    return out;
}

namespace {
constexpr char kMagic[8] = {'C', 'M', 'R', 'S', 'S', 'L', 'C', 'K'};
static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");
} // namespace

void save_checkpoint(const std::filesystem::path& path, const NetworkHandle& net,
                     const std::map<std::string, std::string>& meta) {
    using nlohmann::json;
    json j;
    j["schema"] = "cmrssl.checkpoint/1";
    const auto& c = net.config();
    j["config"] = {{"depth", c.depth}, {"base_channels", c.base_channels}, {"in_channels", c.in_channels}};
    j["heads"] = json::array();
    for (int h = 0; h < net.num_heads(); ++h) j["heads"].push_back(net.head_classes(h));
    j["params"] = json::array();
    std::size_t offset = 0;
    for (const auto& p : net.params()) {
        j["params"].push_back({{"name", p.name},
                               {"partition", to_string(p.partition)},
                               {"head", p.head},
                               {"shape", p.shape},
                               {"offset", offset},
                               {"count", p.value.size()}});
        offset += p.value.size();
    }
    j["meta"] = meta;
    const std::string text = j.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(kMagic, 8);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), std::streamsize(len));
    for (const auto& p : net.params())
        out.write(reinterpret_cast<const char*>(p.value.data()), std::streamsize(p.value.size() * sizeof(float)));
    if (!out) throw FormatError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    using nlohmann::json;
    if (!std::filesystem::exists(path)) throw MissingCheckpoint(path.string() + " does not exist");
    std::ifstream in(path, std::ios::binary);
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(magic, 8);
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&len), 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) throw FormatError(path.string() + ": not a checkpoint");
    if (version != kCheckpointVersion)
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    if (len > (1u << 26)) throw FormatError(path.string() + ": implausible metadata length");
    std::string text(len, '\0');
    in.read(text.data(), std::streamsize(len));
    if (!in) throw FormatError(path.string() + ": truncated metadata");

    Checkpoint ck;
    try {
        const json j = json::parse(text);
        NetConfig cfg;
        cfg.depth = j.at("config").at("depth");
        cfg.base_channels = j.at("config").at("base_channels");
        cfg.in_channels = j.at("config").at("in_channels");
        const auto heads = j.at("heads").get<std::vector<int>>();
        if (heads.empty()) throw FormatError(path.string() + ": no heads");
        cfg.num_classes = heads.front();
        ck.net = NetworkHandle(cfg, 0);
        for (std::size_t h = 1; h < heads.size(); ++h) ck.net.add_head(heads[h], 0);
        if (j.at("params").size() != ck.net.params().size())
            throw FormatError(path.string() + ": parameter list does not match the architecture");
        for (const auto& pj : j.at("params")) {
            auto& p = ck.net.param(pj.at("name").get<std::string>());
            if (pj.at("shape").get<std::vector<int>>() != p.shape ||
                parse_partition(pj.at("partition").get<std::string>()) != p.partition)
                throw FormatError(path.string() + ": parameter " + p.name + " has the wrong shape");
            in.read(reinterpret_cast<char*>(p.value.data()), std::streamsize(p.value.size() * sizeof(float)));
        }
        if (!in) throw FormatError(path.string() + ": truncated parameter data");
        if (j.contains("meta")) ck.meta = j.at("meta").get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const BadConfig& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return ck;
}

} // namespace cmrssl::segnet
