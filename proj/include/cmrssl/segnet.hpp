#pragma once

// 2D U-net with named parameter partitions and swappable task heads.
//
// Level l (0-based) has base_channels * 2^l channels. Each level applies two
// 3x3 conv + ReLU; levels below the first start with a 2x2 max-pool. The
// decoder mirrors this with a 2x2 transposed conv, concatenation with the
// encoder output of the same level ([skip, up]) and two 3x3 conv + ReLU. A task
// head is a 1x1 conv from base_channels to K outputs.
//
// Partitions: every encoder conv (including the bottleneck) is `encoder`;
// transposed convs and decoder convs are `decoder`; each head is `head`.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmrssl/image.hpp"
#include "cmrssl/tensor.hpp"

namespace cmrssl::segnet {

struct NetConfig {
    int depth = 4;
    int base_channels = 16;
    int in_channels = 1;
    int num_classes = 10;   // K of the first head

    void validate() const;  // throws BadConfig
    int channels(int level) const { return base_channels << level; }
    /// Spatial sizes must be multiples of this.
    int divisor() const { return 1 << (depth - 1); }
    friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

enum class Partition { encoder, decoder, head };
std::string_view to_string(Partition p);

template <typename T>
struct Param {
    std::string name;
    Partition partition = Partition::encoder;
    int head = -1;                  // head index for Partition::head
    std::vector<int> shape;
    AlignedVector<T> value;
    AlignedVector<T> grad;
};

template <typename T>
class UNet {
public:
    UNet() = default;
    /// He-normal weights, zero biases; deterministic in `seed`.
    UNet(const NetConfig& cfg, std::uint64_t seed);

    const NetConfig& config() const { return cfg_; }
    int num_heads() const { return int(heads_.size()); }
    int head_classes(int head) const;

    /// Logits (N, K_head, H, W). H and W must be multiples of config().divisor()
    /// (BadShape otherwise). Activations are cached for backward().
    Tensor<T> forward(const Tensor<T>& x, int head = 0);

    /// Accumulates gradients of the loss whose logit gradient is `dlogits`
    /// through the last forward() pass. With `encoder_grads` false the pass
    /// stops at the decoder and encoder gradients are left untouched.
    void backward(const Tensor<T>& dlogits, bool encoder_grads = true);

    void zero_grad();

    std::vector<Param<T>>& params() { return params_; }
    const std::vector<Param<T>>& params() const { return params_; }
    Param<T>& param(const std::string& name);
    const Param<T>& param(const std::string& name) const;

    /// Replaces head `head` with a fresh K-way head.
    void reset_head(int head, int num_classes, std::uint64_t seed);
    /// Adds a fresh head and returns its index.
    int add_head(int num_classes, std::uint64_t seed);

    /// Order-sensitive 64-bit FNV-1a digest over the raw bytes of the
    /// parameters in a partition (all heads for Partition::head).
    std::uint64_t checksum(Partition p) const;

    /// Reflect-pads to the divisor, runs forward, crops back.
    Tensor<T> predict(const Tensor<T>& x, int head = 0);

    template <typename U>
    UNet<U> cast() const;

private:
    template <typename U> friend class UNet;

    struct Conv { int w = -1, b = -1; int cout = 0; };
    struct Level { Conv a, b; };

    int add_param(std::string name, Partition part, int head, std::vector<int> shape);
    Conv add_conv(const std::string& prefix, Partition part, int head, std::vector<int> wshape);
    void init_conv(const Conv& c, int fan_in, std::mt19937_64& rng);

    std::span<const T> w(const Conv& c) const { return params_[c.w].value; }
    std::span<const T> b(const Conv& c) const { return params_[c.b].value; }
    std::span<T> dw(const Conv& c) { return params_[c.w].grad; }
    std::span<T> db(const Conv& c) { return params_[c.b].grad; }

    NetConfig cfg_;
    std::vector<Param<T>> params_;
    std::map<std::string, int> index_;
    std::vector<Level> enc_, dec_;
    std::vector<Conv> up_;
    std::vector<Conv> heads_;

    // forward cache
    int cached_head_ = -1;
    std::vector<Tensor<T>> enc_in_, enc_mid_, enc_out_, dec_in_, dec_mid_, dec_out_;
    std::vector<std::vector<std::uint8_t>> pool_idx_;
};

using NetworkHandle = UNet<float>;

NetworkHandle build_net(const NetConfig& cfg, std::uint64_t seed);
/// Copy of `net` whose first head is replaced by a fresh K_new-way head; any
/// further heads are dropped. Encoder and decoder are bitwise unchanged.
NetworkHandle replace_head(const NetworkHandle& net, int num_classes, std::uint64_t seed);
/// Copy of a single-head `net` with a second head (index 1) attached.
NetworkHandle attach_second_head(const NetworkHandle& net, int num_classes, std::uint64_t seed);

template <typename T>
double cross_entropy(const Tensor<T>& logits, std::span<const std::uint8_t> labels,
                     Tensor<T>* dlogits = nullptr);

/// Per-image zero-mean unit-variance normalisation.
Image zscore(const Image& img);

/// Reflect padding (no edge repeat) of a single-channel image to multiples of `divisor`.
template <typename T>
Tensor<T> reflect_pad(const Tensor<T>& x, int divisor);
Grid<std::uint8_t> reflect_pad(const Grid<std::uint8_t>& g, int divisor);

/// Stacks images into a (N, 1, H, W) batch; all images must share a shape.
Tensor<float> make_batch(std::span<const Image* const> images);

/// Per-pixel argmax of (1, K, H, W) logits for sample `i`.
LabelMap argmax_labels(const Tensor<float>& logits, int i);

// Checkpoint archive:
//   bytes 0..7   "CMRSSLCK"
//   u32          format version (1)
//   u64          length L of the JSON metadata
//   L bytes      JSON: {"schema", "config", "heads", "params": [{name, partition,
//                head, shape, offset, count}], "meta": {...}}
//   float32 LE   parameter values concatenated in "params" order
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    NetworkHandle net;
    std::map<std::string, std::string> meta;
};

void save_checkpoint(const std::filesystem::path& path, const NetworkHandle& net,
                     const std::map<std::string, std::string>& meta = {});
/// Throws MissingCheckpoint if the file is absent, FormatError if malformed.
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace cmrssl::segnet
