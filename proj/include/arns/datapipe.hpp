#ifndef ARNS_DATAPIPE_HPP
#define ARNS_DATAPIPE_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "arns/tensor.hpp"

namespace arns {

/// 8-bit raster image, interleaved rows. channels is 1 (grayscale) or 3 (RGB).
struct RasterImage {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<std::uint8_t> pixels;

    RasterImage() = default;
    RasterImage(int w, int h, int c)
        : width(w), height(h), channels(c),
          pixels(static_cast<std::size_t>(w) * h * c, 0) {}

    std::uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

// Binary PNM I/O: P6 for RGB, P5 for grayscale, maxval 255.
RasterImage read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const RasterImage& image);

/// An RGB image (values [0,255]) with its binary saliency mask.
struct Sample {
    Tensor<double> image;  // 3×S×S
    Tensor<double> mask;   // 1×S×S, values exactly 0 or 1
    std::string id;
};

struct ManifestEntry {
    std::string image;
    std::string mask;
};

/// Line-oriented dataset listing: "#means r g b" header, then one
/// "image<TAB>mask" pair per line. Relative entries resolve against the
/// manifest's directory.
struct DatasetManifest {
    std::filesystem::path dir;
    std::vector<ManifestEntry> entries;
    std::array<double, 3> channel_means{0.0, 0.0, 0.0};

    std::filesystem::path image_path(std::size_t i) const { return dir / entries[i].image; }
    std::filesystem::path mask_path(std::size_t i) const { return dir / entries[i].mask; }
    std::size_t size() const { return entries.size(); }
};

DatasetManifest load_manifest(const std::filesystem::path& file);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& file);

enum class SynthShape { ellipse, rectangle, triangle };

struct SynthSample {
    RasterImage image;
    RasterImage mask;  // values 0 or 255
    std::vector<SynthShape> shapes;
    double foreground_fraction = 0.0;
};

/// One synthetic scene: 1-3 filled shapes over a value-noise textured
/// background, with per-channel colors pushed away from the background base.
/// Redraws until the foreground covers between 5% and 60% of the image.
SynthSample synth_sample(std::mt19937_64& rng, int size);

/// Generates `count` images plus exact masks under `out_dir`, writes
/// manifest.txt with the channel means of the generated set, and returns the
/// manifest. Deterministic for a fixed (count, size, seed).
DatasetManifest synth_generate(int count, int size, std::uint64_t seed, const std::filesystem::path& out_dir);

/// Decodes and resizes an image/mask pair: bilinear for the image,
/// nearest-neighbor for the mask, which is then binarized at 128 (ties go to
/// foreground). Loading at native size performs no resampling.
Sample load_sample(const std::filesystem::path& image_path, const std::filesystem::path& mask_path,
                   int target_size);

/// Image-only variant of load_sample, for inference.
Tensor<double> load_image(const std::filesystem::path& image_path, int target_size);

Tensor<double> image_to_tensor(const RasterImage& image);           // 3×H×W or 1×H×W, values [0,255]
Tensor<double> resize_bilinear(const Tensor<double>& chw, int target_size);
RasterImage resize_nearest(const RasterImage& image, int target_size);

Sample hflip(const Sample& s);

/// Mirrors a C×H×W tensor about the vertical axis.
template <typename T>
Tensor<T> flip_horizontal(const Tensor<T>& t) {
    if (t.rank() != 3) throw std::invalid_argument("flip_horizontal: expected rank-3 tensor");
    Tensor<T> out(t.shape());
    const int C = t.extent(0), H = t.extent(1), W = t.extent(2);
    for (int c = 0; c < C; ++c) {
        for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) out(c, h, W - 1 - w) = t(c, h, w);
        }
    }
    return out;
}

/// Subtracts per-channel means; no further scaling.
template <typename T>
Tensor<T> preprocess(const Sample& s, const std::array<double, 3>& means) {
    Tensor<T> out(s.image.shape());
    const int C = s.image.extent(0), H = s.image.extent(1), W = s.image.extent(2);
    for (int c = 0; c < C; ++c) {
        for (int h = 0; h < H; ++h) {
            for (int w = 0; w < W; ++w) {
                out(c, h, w) = static_cast<T>(s.image(c, h, w) - means[static_cast<std::size_t>(c)]);
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> mask_tensor(const Sample& s) {
    Tensor<T> out(s.mask.shape());
    for (std::int64_t i = 0; i < s.mask.numel(); ++i) out[i] = static_cast<T>(s.mask[i]);
    return out;
}

}  // namespace arns

#endif  // ARNS_DATAPIPE_HPP
