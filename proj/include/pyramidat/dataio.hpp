#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pyramidat/errors.hpp"
#include "pyramidat/image.hpp"
#include "pyramidat/rng.hpp"

namespace pyramidat {

/// An in-memory dataset with disjoint train/eval splits. Images are stored as
/// uint8 HWC and converted to [0,1] floats when batches are materialized; no
/// mean/std normalization happens anywhere, so perturbation budgets quoted in
/// /255 units mean the same thing here as on raw images.
struct DatasetHandle {
    std::string name;
    int n_classes = 0;
    ImageShape shape;
    std::vector<std::uint8_t> train_images;
    std::vector<int> train_labels;
    std::vector<std::uint8_t> eval_images;
    std::vector<int> eval_labels;

    int n_train() const { return static_cast<int>(train_labels.size()); }
    int n_eval() const { return static_cast<int>(eval_labels.size()); }

    ImageBatch<float> gather(bool train_split, const std::vector<int>& indices) const {
        const auto& imgs = train_split ? train_images : eval_images;
        const auto& labels = train_split ? train_labels : eval_labels;
        const std::size_t px = shape.pixels();
        ImageBatch<float> out;
        out.pixels = Tensor<float>({static_cast<int>(indices.size()), shape.height,
                                    shape.width, shape.channels});
        out.labels.resize(indices.size());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const int idx = indices[i];
            if (idx < 0 || idx >= static_cast<int>(labels.size()))
                throw StructureError("dataset index out of range");
            const std::uint8_t* src = imgs.data() + static_cast<std::size_t>(idx) * px;
            float* dst = out.pixels.data() + i * px;
            for (std::size_t k = 0; k < px; ++k)
                dst[k] = static_cast<float>(src[k]) * (1.0f / 255.0f);
            out.labels[i] = labels[idx];
        }
        return out;
    }
};

struct SyntheticOptions {
    int n_train = 512;
    int n_eval = 128;
    std::uint64_t seed = 7;
};

namespace detail {

// One 32x32x3 shapes image: a filled square (label 0) or circle (label 1)
// over a shaded background, plus per-pixel texture noise. Colors are drawn
// from the same distribution for both classes, so shape is the only class
// signal; foreground/background contrast is kept above 0.25.
inline void render_shape_image(Rng& rng, int label, std::uint8_t* out) {
    constexpr int H = 32, W = 32, C = 3;
    const double bg = 0.2 + 0.5 * rng.uniform();
    const double grad = 0.2 * (rng.uniform() - 0.5);
    double fg[3];
    do {
        for (double& f : fg) f = 0.1 + 0.8 * rng.uniform();
    } while (std::abs((fg[0] + fg[1] + fg[2]) / 3.0 - bg) < 0.25);
    const double cx = 12.0 + 8.0 * rng.uniform();
    const double cy = 12.0 + 8.0 * rng.uniform();
    const double r = 6.0 + 5.0 * rng.uniform();
    const double sigma = 0.01 + 0.03 * rng.uniform();
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const double dx = x - cx, dy = y - cy;
            const bool inside = label == 0
                                    ? (std::abs(dx) <= r && std::abs(dy) <= r)
                                    : (dx * dx + dy * dy <= r * r);
            for (int c = 0; c < C; ++c) {
                double v = inside ? fg[c] : bg + grad * (y - H / 2.0) / H;
                v += sigma * rng.gaussian();
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                out[(y * W + x) * C + c] = static_cast<std::uint8_t>(v * 255.0 + 0.5);
            }
        }
    }
}

inline void fill_synthetic_split(std::vector<std::uint8_t>& images, std::vector<int>& labels,
                                 int n, std::uint64_t seed, std::uint64_t index_base) {
    constexpr std::size_t px = 32 * 32 * 3;
    images.resize(static_cast<std::size_t>(n) * px);
    labels.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        Rng rng(key_mix(key_stream(seed, "synthetic_shapes"), index_base + i));
        const int label = static_cast<int>(rng.bounded(2));
        labels[i] = label;
        render_shape_image(rng, label, images.data() + static_cast<std::size_t>(i) * px);
    }
}

}  // namespace detail

/// Procedurally generated two-class set (squares vs circles); identical bytes
/// for identical options.
inline DatasetHandle make_synthetic_dataset(const SyntheticOptions& opt) {
    if (opt.n_train <= 0 || opt.n_eval < 0)
        throw ConfigError("synthetic dataset sizes must be positive");
    DatasetHandle h;
    h.name = "synthetic";
    h.n_classes = 2;
    h.shape = ImageShape{32, 32, 3};
    detail::fill_synthetic_split(h.train_images, h.train_labels, opt.n_train, opt.seed, 0);
    detail::fill_synthetic_split(h.eval_images, h.eval_labels, opt.n_eval, opt.seed,
                                 static_cast<std::uint64_t>(opt.n_train));
    return h;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary archives
// ---------------------------------------------------------------------------

inline constexpr int kCifarRecordBytes = 1 + 3072;
inline constexpr int kCifarRecordsPerFile = 10000;

/// Reads one CIFAR-format binary file (label byte + 3072 plane-ordered pixel
/// bytes per record) and appends records converted to HWC layout.
inline void read_cifar_file(const std::filesystem::path& path,
                            std::vector<std::uint8_t>& images, std::vector<int>& labels,
                            int n_classes) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open dataset file: " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0, std::ios::beg);
    if (size != static_cast<std::streamoff>(kCifarRecordBytes) * kCifarRecordsPerFile)
        throw DataError("bad archive size (corrupt or truncated file): " + path.string());
    std::vector<std::uint8_t> record(kCifarRecordBytes);
    for (int r = 0; r < kCifarRecordsPerFile; ++r) {
        in.read(reinterpret_cast<char*>(record.data()), kCifarRecordBytes);
        if (!in) throw DataError("short read in dataset file: " + path.string());
        const int label = record[0];
        if (label >= n_classes)
            throw DataError("label out of range in dataset file: " + path.string());
        labels.push_back(label);
        const std::size_t base = images.size();
        images.resize(base + 3072);
        // planes (R,G,B) of 32x32 -> interleaved HWC
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                for (int c = 0; c < 3; ++c)
                    images[base + (static_cast<std::size_t>(y) * 32 + x) * 3 + c] =
                        record[1 + c * 1024 + y * 32 + x];
    }
}

/// Writes records (HWC uint8 + labels) as one CIFAR-format binary file.
inline void write_cifar_file(const std::filesystem::path& path,
                             const std::vector<std::uint8_t>& images,
                             const std::vector<int>& labels, int first, int count) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot create dataset file: " + path.string());
    for (int r = 0; r < count; ++r) {
        const int idx = first + r;
        std::uint8_t record[kCifarRecordBytes];
        record[0] = static_cast<std::uint8_t>(labels[idx]);
        const std::uint8_t* img = images.data() + static_cast<std::size_t>(idx) * 3072;
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                for (int c = 0; c < 3; ++c)
                    record[1 + c * 1024 + y * 32 + x] =
                        img[(static_cast<std::size_t>(y) * 32 + x) * 3 + c];
        out.write(reinterpret_cast<const char*>(record), kCifarRecordBytes);
    }
    if (!out) throw DataError("short write to dataset file: " + path.string());
}

inline DatasetHandle load_cifar10(const std::filesystem::path& root) {
    DatasetHandle h;
    h.name = "cifar10";
    h.n_classes = 10;
    h.shape = ImageShape{32, 32, 3};
    for (int i = 1; i <= 5; ++i) {
        read_cifar_file(root / ("data_batch_" + std::to_string(i) + ".bin"), h.train_images,
                        h.train_labels, h.n_classes);
    }
    read_cifar_file(root / "test_batch.bin", h.eval_images, h.eval_labels, h.n_classes);
    return h;
}

/// Loads a dataset by name: "synthetic" (builtin two-class shapes) or
/// "cifar10" (binary archives under `root`, or under $PYRAMIDAT_DATA_ROOT
/// when `root` is empty).
inline DatasetHandle load_dataset(const std::string& name, const std::string& root,
                                  const SyntheticOptions& synth = SyntheticOptions{}) {
    if (name == "synthetic") return make_synthetic_dataset(synth);
    if (name == "cifar10") {
        std::string dir = root;
        if (dir.empty()) {
            if (const char* env = std::getenv("PYRAMIDAT_DATA_ROOT")) dir = env;
        }
        if (dir.empty())
            throw DataError("cifar10 requires a data root (flag or PYRAMIDAT_DATA_ROOT)");
        return load_cifar10(dir);
    }
    throw ConfigError("unknown dataset name: " + name);
}

// ---------------------------------------------------------------------------
// Augmentation and batch streams
// ---------------------------------------------------------------------------

namespace detail {
inline int reflect_index(int k, int n) {
    while (k < 0 || k >= n) {
        if (k < 0) k = -k - 1;
        if (k >= n) k = 2 * n - 1 - k;
    }
    return k;
}
}  // namespace detail

inline constexpr int kAugmentPad = 4;

/// Mirrors every image in the batch left-right; an involution.
template <class S>
ImageBatch<S> flip_horizontal(const ImageBatch<S>& batch) {
    const ImageShape shape = batch.image_shape();
    ImageBatch<S> out;
    out.pixels = Tensor<S>(batch.pixels.shape());
    out.labels = batch.labels;
    for (int b = 0; b < batch.batch_size(); ++b)
        for (int y = 0; y < shape.height; ++y)
            for (int x = 0; x < shape.width; ++x)
                for (int c = 0; c < shape.channels; ++c)
                    out.pixels.at(b, y, x, c) =
                        batch.pixels.at(b, y, shape.width - 1 - x, c);
    return out;
}

/// Per-image horizontal flip (p = 0.5) and 4-pixel reflect-pad random crop.
/// Deterministic in (seed, image position in batch); labels pass through.
template <class S>
ImageBatch<S> augment(const ImageBatch<S>& batch, std::uint64_t seed) {
    const int B = batch.batch_size();
    const ImageShape shape = batch.image_shape();
    const int H = shape.height, W = shape.width, C = shape.channels;
    ImageBatch<S> out;
    out.pixels = Tensor<S>(batch.pixels.shape());
    out.labels = batch.labels;
    for (int b = 0; b < B; ++b) {
        const std::uint64_t k = key_stream(seed, "augment", static_cast<std::uint64_t>(b));
        const bool flip = key_uniform(key_mix(k, 0)) < 0.5;
        const int oy =
            static_cast<int>(key_uniform(key_mix(k, 1)) * (2 * kAugmentPad + 1));
        const int ox =
            static_cast<int>(key_uniform(key_mix(k, 2)) * (2 * kAugmentPad + 1));
        for (int y = 0; y < H; ++y) {
            const int sy = detail::reflect_index(y + oy - kAugmentPad, H);
            for (int x = 0; x < W; ++x) {
                int sx = detail::reflect_index(x + ox - kAugmentPad, W);
                if (flip) sx = W - 1 - sx;
                for (int c = 0; c < C; ++c)
                    out.pixels.at(b, y, x, c) = batch.pixels.at(b, sy, sx, c);
            }
        }
    }
    return out;
}

/// Deterministic shuffled batch access: the epoch permutation is a pure
/// function of (seed, epoch). Training drops the final partial batch;
/// evaluation keeps it so every example is visited exactly once.
class BatchStream {
  public:
    BatchStream(const DatasetHandle& handle, bool train_split, int batch_size,
                std::uint64_t seed)
        : handle_(&handle), train_(train_split), batch_size_(batch_size), seed_(seed) {
        if (batch_size <= 0) throw ConfigError("batch size must be positive");
        n_ = train_split ? handle.n_train() : handle.n_eval();
        if (n_ <= 0) throw ConfigError("dataset split is empty");
    }

    int batches_per_epoch() const {
        return train_ ? n_ / batch_size_ : (n_ + batch_size_ - 1) / batch_size_;
    }

    std::vector<int> epoch_order(long long epoch) const {
        std::vector<int> order(static_cast<std::size_t>(n_));
        for (int i = 0; i < n_; ++i) order[i] = i;
        if (train_) {
            Rng rng(key_stream(seed_, "epoch_perm", static_cast<std::uint64_t>(epoch)));
            rng.shuffle(order);
        }
        return order;
    }

    ImageBatch<float> get(long long epoch, int index) const {
        const auto order = epoch_order(epoch);
        const int begin = index * batch_size_;
        const int end = train_ ? begin + batch_size_ : std::min(n_, begin + batch_size_);
        if (begin < 0 || end > n_ || begin >= end)
            throw ConfigError("batch index out of range");
        std::vector<int> idx(order.begin() + begin, order.begin() + end);
        return handle_->gather(train_, idx);
    }

    int split_size() const { return n_; }

  private:
    const DatasetHandle* handle_;
    bool train_;
    int batch_size_;
    std::uint64_t seed_;
    int n_ = 0;
};

}  // namespace pyramidat
