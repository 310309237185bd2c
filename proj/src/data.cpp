#include "caflow/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;

namespace caflow {

namespace {

// Skips whitespace and '#' comments between PPM header tokens.
void skip_ppm_space(const std::string& s, std::size_t& pos) {
    while (pos < s.size()) {
        if (std::isspace(static_cast<unsigned char>(s[pos]))) {
            ++pos;
        } else if (s[pos] == '#') {
            while (pos < s.size() && s[pos] != '\n') ++pos;
        } else {
            break;
        }
    }
}

int read_ppm_int(const std::string& s, std::size_t& pos, const char* what) {
    skip_ppm_space(s, pos);
    if (pos >= s.size() || !std::isdigit(static_cast<unsigned char>(s[pos])))
        throw DataError(std::string("ppm: expected ") + what);
    long v = 0;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
        v = v * 10 + (s[pos] - '0');
        if (v > 1 << 20) throw DataError(std::string("ppm: ") + what + " out of range");
        ++pos;
    }
    return int(v);
}

}  // namespace

Image decode_ppm(const std::string& bytes) {
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6')
        throw DataError("ppm: not a P6 file");
    std::size_t pos = 2;
    const int w = read_ppm_int(bytes, pos, "width");
    const int h = read_ppm_int(bytes, pos, "height");
    const int maxval = read_ppm_int(bytes, pos, "maxval");
    if (w <= 0 || h <= 0) throw DataError("ppm: non-positive dimensions");
    if (maxval != 255) throw DataError("ppm: only maxval 255 supported");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw DataError("ppm: missing separator after maxval");
    ++pos;
    const std::size_t need = std::size_t(3) * w * h;
    if (bytes.size() - pos < need) throw DataError("ppm: truncated pixel data");
    Image img(w, h);
    std::copy_n(reinterpret_cast<const std::uint8_t*>(bytes.data()) + pos, need,
                img.pixels.begin());
    return img;
}

std::string encode_ppm(const Image& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.pixels.size() != std::size_t(3) * img.width * img.height)
        throw DataError("ppm: malformed image");
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) +
                      "\n255\n";
    out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
    return out;
}

Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return decode_ppm(ss.str());
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

void write_ppm(const std::string& path, const Image& img) {
    const std::string bytes = encode_ppm(img);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw DataError("short write to " + path);
}

Tensor image_to_tensor(const Image& img) {
    Shape s(1, 3, img.height, img.width);
    std::vector<float> data(std::size_t(s.numel()));
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                data[std::size_t((c * img.height + y) * img.width + x)] = float(img.at(x, y, c));
    return Tensor::from_data(s, std::move(data));
}

Image tensor_to_image(const Tensor& t, int batch) {
    const Shape s = t.shape();
    if (s.c != 3) throw DataError("tensor_to_image: need 3 channels, got " + std::to_string(s.c));
    if (batch < 0 || batch >= s.b) throw DataError("tensor_to_image: batch index out of range");
    Image img(s.w, s.h);
    const auto& d = t.data();
    const std::size_t base = std::size_t(batch) * 3 * s.h * s.w;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < s.h; ++y)
            for (int x = 0; x < s.w; ++x) {
                float v = d[base + std::size_t((c * s.h + y) * s.w + x)];
                v = std::clamp(std::round(v), 0.0f, 255.0f);
                img.at(x, y, c) = std::uint8_t(v);
            }
    return img;
}

std::string task_name(Task t) {
    switch (t) {
        case Task::Sr4x: return "sr4x";
        case Task::Colorize: return "colorize";
        case Task::Inpaint25: return "inpaint25";
    }
    throw DataError("unknown task");
}

Task task_from_name(const std::string& s) {
    if (s == "sr4x") return Task::Sr4x;
    if (s == "colorize") return Task::Colorize;
    if (s == "inpaint25") return Task::Inpaint25;
    throw DataError("unknown task '" + s + "' (expected sr4x, colorize or inpaint25)");
}

namespace {

// Catmull-Rom cubic kernel (a = -0.5).
double cubic_weight(double t) {
    t = std::abs(t);
    if (t < 1.0) return 1.5 * t * t * t - 2.5 * t * t + 1.0;
    if (t < 2.0) return -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0;
    return 0.0;
}

Image bicubic_resize(const Image& src, int out_w, int out_h) {
    Image dst(out_w, out_h);
    const double sx = double(src.width) / out_w, sy = double(src.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = int(std::floor(fy));
        for (int x = 0; x < out_w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = int(std::floor(fx));
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0, wsum = 0.0;
                for (int j = -1; j <= 2; ++j)
                    for (int i = -1; i <= 2; ++i) {
                        const int px = std::clamp(x0 + i, 0, src.width - 1);
                        const int py = std::clamp(y0 + j, 0, src.height - 1);
                        const double wgt = cubic_weight(fx - (x0 + i)) * cubic_weight(fy - (y0 + j));
                        acc += wgt * src.at(px, py, c);
                        wsum += wgt;
                    }
                dst.at(x, y, c) = std::uint8_t(std::clamp(std::round(acc / wsum), 0.0, 255.0));
            }
        }
    }
    return dst;
}

}  // namespace

std::pair<Image, Image> make_sr_pair(const Image& w, int factor) {
    if (factor < 1) throw DataError("sr pair: factor must be >= 1");
    if (w.width % factor != 0 || w.height % factor != 0)
        throw DataError("sr pair: image side not divisible by factor " + std::to_string(factor));
    Image low(w.width / factor, w.height / factor);
    for (int y = 0; y < low.height; ++y)
        for (int x = 0; x < low.width; ++x)
            for (int c = 0; c < 3; ++c) {
                long acc = 0;
                for (int j = 0; j < factor; ++j)
                    for (int i = 0; i < factor; ++i)
                        acc += w.at(x * factor + i, y * factor + j, c);
                low.at(x, y, c) =
                    std::uint8_t((acc + factor * factor / 2) / (factor * factor));
            }
    return {bicubic_resize(low, w.width, w.height), w};
}

std::pair<Image, Image> make_color_pair(const Image& w) {
    Image y(w.width, w.height);
    for (int py = 0; py < w.height; ++py)
        for (int px = 0; px < w.width; ++px) {
            const double luma = 0.299 * w.at(px, py, 0) + 0.587 * w.at(px, py, 1) +
                                0.114 * w.at(px, py, 2);
            const auto g = std::uint8_t(std::clamp(std::round(luma), 0.0, 255.0));
            y.at(px, py, 0) = y.at(px, py, 1) = y.at(px, py, 2) = g;
        }
    return {y, w};
}

std::pair<Image, Image> make_inpaint_pair(const Image& w, double coverage) {
    if (w.width != w.height) throw DataError("inpaint pair: image must be square");
    const int side = int(std::ceil(std::sqrt(coverage) * w.height));
    const int off = (w.height - side) / 2;
    Image y = w;
    for (int py = off; py < off + side; ++py)
        for (int px = off; px < off + side; ++px)
            for (int c = 0; c < 3; ++c) y.at(px, py, c) = 0;
    return {y, w};
}

std::pair<Image, Image> make_pair(Task task, const Image& w) {
    switch (task) {
        case Task::Sr4x: return make_sr_pair(w, 4);
        case Task::Colorize: return make_color_pair(w);
        case Task::Inpaint25: return make_inpaint_pair(w, 0.25);
    }
    throw DataError("unknown task");
}

double rmse(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height)
        throw DataError("rmse: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = double(a.pixels[i]) - double(b.pixels[i]);
        acc += d * d;
    }
    return std::sqrt(acc / double(a.pixels.size()));
}

double psnr(const Image& a, const Image& b) {
    const double r = rmse(a, b);
    if (r == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(255.0 / r);
}

const std::vector<std::array<std::uint8_t, 3>>& synth_palette() {
    // Luminances (Rec.601, rounded): 37, 75, 119, 147, 179, 230 — pairwise
    // separated by >= 28 so grayscale determines the color.
    static const std::vector<std::array<std::uint8_t, 3>> p = {
        {100, 10, 10}, {10, 120, 10}, {60, 160, 60},
        {240, 120, 40}, {120, 220, 120}, {200, 255, 180},
    };
    return p;
}

Image synth_image(int size, Rng& rng) {
    const auto& pal = synth_palette();
    Image img(size, size);
    const auto bg = pal[rng.next_u64() % pal.size()];
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = bg[std::size_t(c)];
    const int n_rects = 1 + int(rng.next_u64() % 3);
    for (int r = 0; r < n_rects; ++r) {
        const auto col = pal[rng.next_u64() % pal.size()];
        int x0 = int(rng.next_u64() % std::uint64_t(size));
        int y0 = int(rng.next_u64() % std::uint64_t(size));
        int x1 = int(rng.next_u64() % std::uint64_t(size));
        int y1 = int(rng.next_u64() % std::uint64_t(size));
        if (x1 < x0) std::swap(x0, x1);
        if (y1 < y0) std::swap(y0, y1);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
                for (int c = 0; c < 3; ++c) img.at(x, y, c) = col[std::size_t(c)];
    }
    return img;
}

PairedDataset PairedDataset::synthetic(Task task, int image_size, int n_train, int n_val,
                                       int n_test, std::uint64_t seed) {
    if (image_size < 4) throw DataError("synthetic dataset: image_size must be >= 4");
    if (n_train < 0 || n_val < 0 || n_test < 0)
        throw DataError("synthetic dataset: negative split size");
    PairedDataset ds;
    ds.task = task;
    ds.image_size = image_size;
    ds.seed = seed;
    Rng rng(seed);
    const int total = n_train + n_val + n_test;
    std::vector<Image> all;
    all.reserve(std::size_t(total));
    for (int i = 0; i < total; ++i) all.push_back(synth_image(image_size, rng));
    // Seeded Fisher-Yates shuffle before splitting.
    for (int i = total - 1; i > 0; --i) {
        const int j = int(rng.next_u64() % std::uint64_t(i + 1));
        std::swap(all[std::size_t(i)], all[std::size_t(j)]);
    }
    ds.train.assign(all.begin(), all.begin() + n_train);
    ds.val.assign(all.begin() + n_train, all.begin() + n_train + n_val);
    ds.test.assign(all.begin() + n_train + n_val, all.end());
    return ds;
}

const std::vector<Image>& PairedDataset::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw DataError("unknown split '" + name + "'");
}

void PairedDataset::save(const std::string& root) const {
    fs::create_directories(root);
    {
        std::ofstream m(fs::path(root) / "manifest.txt");
        if (!m) throw DataError("cannot write manifest in " + root);
        m << "task=" << task_name(task) << "\n"
          << "seed=" << seed << "\n"
          << "image_size=" << image_size << "\n"
          << "train=" << train.size() << "\n"
          << "val=" << val.size() << "\n"
          << "test=" << test.size() << "\n";
    }
    for (const char* s : {"train", "val", "test"}) {
        const auto dir = fs::path(root) / s;
        fs::create_directories(dir);
        const auto& items = split(s);
        for (std::size_t i = 0; i < items.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "%05zu.ppm", i);
            write_ppm((dir / name).string(), items[i]);
        }
    }
}

PairedDataset PairedDataset::load(const std::string& root) {
    std::ifstream m(fs::path(root) / "manifest.txt");
    if (!m) throw DataError("missing manifest.txt in " + root);
    PairedDataset ds;
    std::size_t counts[3] = {0, 0, 0};
    std::string line;
    while (std::getline(m, line)) {
        const auto eq = line.find('=');
        if (line.empty() || eq == std::string::npos) continue;
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "task") ds.task = task_from_name(val);
        else if (key == "seed") ds.seed = std::stoull(val);
        else if (key == "image_size") ds.image_size = std::stoi(val);
        else if (key == "train") counts[0] = std::stoul(val);
        else if (key == "val") counts[1] = std::stoul(val);
        else if (key == "test") counts[2] = std::stoul(val);
        else throw DataError("manifest: unknown key '" + key + "'");
    }
    const char* names[3] = {"train", "val", "test"};
    std::vector<Image>* dests[3] = {&ds.train, &ds.val, &ds.test};
    for (int s = 0; s < 3; ++s)
        for (std::size_t i = 0; i < counts[s]; ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "%05zu.ppm", i);
            Image img = read_ppm((fs::path(root) / names[s] / name).string());
            if (img.width != ds.image_size || img.height != ds.image_size)
                throw DataError("dataset image size mismatch in " + root);
            dests[s]->push_back(std::move(img));
        }
    return ds;
}

std::pair<Tensor, Tensor> PairedDataset::tensor_batch(const std::vector<Image>& items,
                                                      const std::vector<int>& indices) const {
    if (indices.empty()) throw DataError("tensor_batch: empty index list");
    const int B = int(indices.size());
    const Shape s(B, 3, image_size, image_size);
    std::vector<float> yd(std::size_t(s.numel())), wd(std::size_t(s.numel()));
    const std::size_t per = std::size_t(3) * image_size * image_size;
    for (int b = 0; b < B; ++b) {
        const int idx = indices[std::size_t(b)];
        if (idx < 0 || idx >= int(items.size()))
            throw DataError("tensor_batch: index out of range");
        auto [y, w] = make_pair(task, items[std::size_t(idx)]);
        const Tensor ty = image_to_tensor(y), tw = image_to_tensor(w);
        std::copy(ty.data().begin(), ty.data().end(), yd.begin() + std::size_t(b) * per);
        std::copy(tw.data().begin(), tw.data().end(), wd.begin() + std::size_t(b) * per);
    }
    return {Tensor::from_data(s, std::move(yd)), Tensor::from_data(s, std::move(wd))};
}

}  // namespace caflow
