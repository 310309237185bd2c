#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "caflow/tensor.hpp"

namespace caflow {

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// 8-bit interleaved RGB raster.
struct Image {
    int width = 0, height = 0;
    std::vector<std::uint8_t> pixels;  // size 3*width*height

    Image() = default;
    Image(int w, int h) : width(w), height(h), pixels(std::size_t(3) * w * h, 0) {}

    std::uint8_t& at(int x, int y, int ch) {
        return pixels[std::size_t(3) * (std::size_t(y) * width + x) + std::size_t(ch)];
    }
    std::uint8_t at(int x, int y, int ch) const {
        return pixels[std::size_t(3) * (std::size_t(y) * width + x) + std::size_t(ch)];
    }
    bool operator==(const Image& o) const {
        return width == o.width && height == o.height && pixels == o.pixels;
    }
};

// Binary PPM (P6), maxval 255. The reader tolerates comments and arbitrary
// header whitespace; the writer emits the canonical single-space form.
Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);
Image decode_ppm(const std::string& bytes);
std::string encode_ppm(const Image& img);

Tensor image_to_tensor(const Image& img);          // (1,3,H,W), values 0..255
Image tensor_to_image(const Tensor& t, int batch = 0);  // clamps and rounds

enum class Task { Sr4x, Colorize, Inpaint25 };
std::string task_name(Task t);
Task task_from_name(const std::string& s);

// Condition constructors; each returns (y, w) with y the same shape as w.
std::pair<Image, Image> make_sr_pair(const Image& w, int factor = 4);
std::pair<Image, Image> make_color_pair(const Image& w);
std::pair<Image, Image> make_inpaint_pair(const Image& w, double coverage = 0.25);
std::pair<Image, Image> make_pair(Task task, const Image& w);

double rmse(const Image& a, const Image& b);
// 20*log10(255/rmse); +infinity for identical images.
double psnr(const Image& a, const Image& b);

// Procedural target image: flat background plus a few rectangles, all drawn
// from a fixed palette whose entries have well-separated luminances (so the
// grayscale-to-color task has a nearly unique answer).
Image synth_image(int size, Rng& rng);
const std::vector<std::array<std::uint8_t, 3>>& synth_palette();

struct PairedDataset {
    Task task = Task::Colorize;
    int image_size = 8;
    std::uint64_t seed = 0;
    std::vector<Image> train, val, test;  // target images W

    static PairedDataset synthetic(Task task, int image_size, int n_train, int n_val,
                                   int n_test, std::uint64_t seed);
    // Directory layout: root/{train,val,test}/NNNNN.ppm plus manifest.txt.
    static PairedDataset load(const std::string& root);
    void save(const std::string& root) const;

    const std::vector<Image>& split(const std::string& name) const;

    // Batched (y, w) tensors in 0..255 for the given target indices.
    std::pair<Tensor, Tensor> tensor_batch(const std::vector<Image>& items,
                                           const std::vector<int>& indices) const;
};

}  // namespace caflow
