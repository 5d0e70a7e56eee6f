#include "fme/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "fme/error.hpp"
#include "fme/image_io.hpp"

namespace fs = std::filesystem;

namespace fme::data {

namespace {

float luminance(const img::Image& im, int y, int x) {
    const size_t base = (static_cast<size_t>(y) * im.width + x) * im.channels;
    if (im.channels == 1) return im.pixels[base] / 255.0f;
    // Rec. 601 weights
    return (0.299f * im.pixels[base] + 0.587f * im.pixels[base + 1] +
            0.114f * im.pixels[base + 2]) /
           255.0f;
}

Tensor resize_gray(const img::Image& im, int size) {
    Tensor out(Shape{1, size, size});
    const double sy = static_cast<double>(im.height) / size;
    const double sx = static_cast<double>(im.width) / size;
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            const double srow = (r + 0.5) * sy - 0.5;
            const double scol = (c + 0.5) * sx - 0.5;
            const int r0 = std::clamp(static_cast<int>(std::floor(srow)), 0, im.height - 1);
            const int r1 = std::min(r0 + 1, im.height - 1);
            const int c0 = std::clamp(static_cast<int>(std::floor(scol)), 0, im.width - 1);
            const int c1 = std::min(c0 + 1, im.width - 1);
            const double fr = std::clamp(srow - r0, 0.0, 1.0);
            const double fc = std::clamp(scol - c0, 0.0, 1.0);
            const double v = (1 - fr) * ((1 - fc) * luminance(im, r0, c0) + fc * luminance(im, r0, c1)) +
                             fr * ((1 - fc) * luminance(im, r1, c0) + fc * luminance(im, r1, c1));
            out.at(0, r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    return out;
}

}  // namespace

float bilinear_sample(const Tensor& image, double row, double col) {
    const int H = image.shape[1], W = image.shape[2];
    const int r0 = std::clamp(static_cast<int>(std::floor(row)), 0, H - 1);
    const int r1 = std::min(r0 + 1, H - 1);
    const int c0 = std::clamp(static_cast<int>(std::floor(col)), 0, W - 1);
    const int c1 = std::min(c0 + 1, W - 1);
    const double fr = std::clamp(row - r0, 0.0, 1.0);
    const double fc = std::clamp(col - c0, 0.0, 1.0);
    return static_cast<float>((1 - fr) * ((1 - fc) * image.at(0, r0, c0) + fc * image.at(0, r0, c1)) +
                              fr * ((1 - fc) * image.at(0, r1, c0) + fc * image.at(0, r1, c1)));
}

LoadReport load_dataset(const std::string& root, int image_size) {
    if (image_size < 1) throw ConfigError("load_dataset: image_size must be positive");
    if (!fs::is_directory(root)) throw DatasetError("dataset root is not a directory: " + root);

    std::vector<std::string> classes;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) classes.push_back(entry.path().filename().string());
    std::sort(classes.begin(), classes.end());
    if (classes.empty()) throw DatasetError("no class subdirectories under " + root);

    LoadReport report;
    report.class_names = classes;
    for (size_t ci = 0; ci < classes.size(); ++ci) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(fs::path(root) / classes[ci]))
            if (entry.is_regular_file()) files.push_back(entry.path().string());
        std::sort(files.begin(), files.end());
        size_t loaded = 0;
        for (const auto& file : files) {
            try {
                Sample s;
                s.image = resize_gray(img::decode_image(file), image_size);
                s.label = static_cast<int>(ci);
                s.source_path = file;
                report.samples.push_back(std::move(s));
                ++loaded;
            } catch (const DatasetError& e) {
                report.warnings.push_back(e.what());
            }
        }
        if (loaded == 0)
            throw DatasetError("class '" + classes[ci] + "' has no readable images");
    }
    return report;
}

AugmentPlan draw_augment_plan(Rng& rng) {
    AugmentPlan p;
    p.hflip = rng.uniform() < 0.5;
    p.scaled = rng.uniform() < 0.5;
    if (p.scaled) p.scale_factor = rng.uniform(0.9, 1.1);
    p.sheared = rng.uniform() < 0.5;
    if (p.sheared) p.shear_deg = rng.uniform(-10.0, 10.0);
    p.vflip = rng.uniform() < 0.5;
    return p;
}

Sample apply_augment(const Sample& s, const AugmentPlan& plan) {
    Sample out = s;
    const int H = s.image.shape[1], W = s.image.shape[2];

    if (plan.hflip) {
        Tensor flipped(out.image.shape);
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) flipped.at(0, r, c) = out.image.at(0, r, W - 1 - c);
        out.image = std::move(flipped);
    }
    if (plan.scaled) {
        Tensor scaled(out.image.shape);
        const double cy = (H - 1) / 2.0, cx = (W - 1) / 2.0;
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c)
                scaled.at(0, r, c) = bilinear_sample(out.image, cy + (r - cy) / plan.scale_factor,
                                                     cx + (c - cx) / plan.scale_factor);
        out.image = std::move(scaled);
    }
    if (plan.sheared) {
        Tensor sheared(out.image.shape);
        const double cy = (H - 1) / 2.0;
        const double t = std::tan(plan.shear_deg * 3.14159265358979323846 / 180.0);
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c)
                sheared.at(0, r, c) = bilinear_sample(out.image, r, c + t * (r - cy));
        out.image = std::move(sheared);
    }
    if (plan.vflip) {
        Tensor flipped(out.image.shape);
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c) flipped.at(0, r, c) = out.image.at(0, H - 1 - r, c);
        out.image = std::move(flipped);
    }
    for (auto& v : out.image.data) v = std::clamp(v, 0.0f, 1.0f);
    return out;
}

Sample augment(const Sample& s, Rng& rng) { return apply_augment(s, draw_augment_plan(rng)); }

std::vector<Sample> oversample_balance(const std::vector<Sample>& train, Rng& rng) {
    std::map<int, std::vector<size_t>> by_class;
    for (size_t i = 0; i < train.size(); ++i) by_class[train[i].label].push_back(i);
    if (by_class.empty()) return {};
    size_t target = 0;
    for (const auto& [label, members] : by_class) target = std::max(target, members.size());

    std::vector<Sample> out = train;
    for (const auto& [label, members] : by_class) {
        Rng stream = rng.key(0x6f766572, static_cast<std::uint64_t>(label));
        for (size_t have = members.size(); have < target; ++have) {
            const auto& origin = train[members[stream.below(members.size())]];
            out.push_back(augment(origin, stream));
        }
    }
    return out;
}

DatasetSplit split(const std::vector<Sample>& samples, double f_train, double f_val, double f_test,
                   std::uint64_t seed) {
    if (f_train <= 0 || f_val <= 0 || f_test <= 0)
        throw ConfigError("split: fractions must be positive");
    if (std::abs(f_train + f_val + f_test - 1.0) > 1e-9)
        throw ConfigError("split: fractions sum to " + std::to_string(f_train + f_val + f_test) +
                          ", expected 1");

    std::map<int, std::vector<size_t>> by_class;
    for (size_t i = 0; i < samples.size(); ++i) by_class[samples[i].label].push_back(i);

    DatasetSplit out;
    out.seed = seed;
    Rng master(seed);
    for (auto& [label, members] : by_class) {
        Rng stream = master.key(0x73706c6974, static_cast<std::uint64_t>(label));
        for (size_t i = members.size(); i > 1; --i)
            std::swap(members[i - 1], members[stream.below(i)]);
        const size_t n = members.size();
        const auto n_train = static_cast<size_t>(std::floor(f_train * n));
        const auto n_val = static_cast<size_t>(std::floor(f_val * n));
        for (size_t i = 0; i < n; ++i) {
            const Sample& s = samples[members[i]];
            if (i < n_train)
                out.train.push_back(s);
            else if (i < n_train + n_val)
                out.val.push_back(s);
            else
                out.test.push_back(s);
        }
    }
    return out;
}

const std::array<std::string, 4>& synth_class_names() {
    static const std::array<std::string, 4> names = {"checker", "cross", "gradient", "ring"};
    return names;
}

namespace {

void paint_checker(Tensor& im, int S, Rng& rng) {
    const int cell = std::max(2, S / 8) + static_cast<int>(rng.below(2));
    const float lo = static_cast<float>(rng.uniform(0.10, 0.20));
    const float hi = static_cast<float>(rng.uniform(0.75, 0.90));
    for (int r = 0; r < S; ++r)
        for (int c = 0; c < S; ++c) im.at(0, r, c) = ((r / cell + c / cell) % 2) ? hi : lo;
}

void paint_cross(Tensor& im, int S, Rng& rng) {
    const float bg = static_cast<float>(rng.uniform(0.10, 0.20));
    const float fg = static_cast<float>(rng.uniform(0.75, 0.90));
    const int cy = S / 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(S / 4))) - S / 8;
    const int cx = S / 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(S / 4))) - S / 8;
    const int half = std::max(1, S / 20);
    for (int r = 0; r < S; ++r)
        for (int c = 0; c < S; ++c)
            im.at(0, r, c) = (std::abs(r - cy) <= half || std::abs(c - cx) <= half) ? fg : bg;
}

void paint_gradient(Tensor& im, int S, Rng& rng) {
    // ramp along x with a mild angle jitter so the class mean stays a ramp
    const double theta = rng.uniform(-0.35, 0.35);
    const double dx = std::cos(theta), dy = std::sin(theta);
    const float lo = static_cast<float>(rng.uniform(0.05, 0.15));
    const float hi = static_cast<float>(rng.uniform(0.80, 0.95));
    double pmin = 1e300, pmax = -1e300;
    for (int r = 0; r < S; ++r)
        for (int c = 0; c < S; ++c) {
            const double p = dx * c + dy * r;
            pmin = std::min(pmin, p);
            pmax = std::max(pmax, p);
        }
    for (int r = 0; r < S; ++r)
        for (int c = 0; c < S; ++c) {
            const double p = (dx * c + dy * r - pmin) / (pmax - pmin);
            im.at(0, r, c) = static_cast<float>(lo + (hi - lo) * p);
        }
}

void paint_ring(Tensor& im, int S, Rng& rng) {
    const float bg = static_cast<float>(rng.uniform(0.10, 0.20));
    const float fg = static_cast<float>(rng.uniform(0.75, 0.90));
    const double cy = S / 2.0 + rng.uniform(-S / 8.0, S / 8.0);
    const double cx = S / 2.0 + rng.uniform(-S / 8.0, S / 8.0);
    const double radius = S / 4.0 + rng.uniform(-S / 16.0, S / 16.0);
    const double half_width = std::max(1.0, S / 10.0) / 2.0;
    for (int r = 0; r < S; ++r)
        for (int c = 0; c < S; ++c) {
            const double d = std::hypot(r - cy, c - cx);
            im.at(0, r, c) = std::abs(d - radius) <= half_width ? fg : bg;
        }
}

}  // namespace

std::vector<Sample> synth_generate(int n_per_class, int size, std::uint64_t seed) {
    if (size < 16) throw ConfigError("synth_generate: size must be >= 16");
    if (n_per_class < 1) throw ConfigError("synth_generate: n_per_class must be positive");
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n_per_class) * 4);
    Rng master(seed);
    for (int cls = 0; cls < 4; ++cls) {
        for (int i = 0; i < n_per_class; ++i) {
            Rng rng = master.key(0x73796e7468, static_cast<std::uint64_t>(cls),
                                 static_cast<std::uint64_t>(i));
            Sample s;
            s.image = Tensor(Shape{1, size, size});
            switch (cls) {
                case 0: paint_checker(s.image, size, rng); break;
                case 1: paint_cross(s.image, size, rng); break;
                case 2: paint_gradient(s.image, size, rng); break;
                case 3: paint_ring(s.image, size, rng); break;
            }
            for (auto& v : s.image.data)
                v = std::clamp(v + static_cast<float>(rng.normal() * 0.1), 0.0f, 1.0f);
            s.label = cls;
            s.source_path = "synthetic/" + synth_class_names()[static_cast<size_t>(cls)] + "/" +
                            std::to_string(i);
            out.push_back(std::move(s));
        }
    }
    return out;
}

void export_dataset(const std::vector<Sample>& samples,
                    const std::vector<std::string>& class_names, const std::string& root) {
    fs::create_directories(root);
    std::vector<int> counters(class_names.size(), 0);
    for (const auto& name : class_names) fs::create_directories(fs::path(root) / name);
    for (const auto& s : samples) {
        if (s.label < 0 || s.label >= static_cast<int>(class_names.size()))
            throw DatasetError("export_dataset: label outside class name list");
        const int S = s.image.shape[1];
        std::vector<std::uint8_t> bytes(static_cast<size_t>(S) * S);
        for (size_t i = 0; i < bytes.size(); ++i)
            bytes[i] = static_cast<std::uint8_t>(
                std::lround(std::clamp(s.image.data[i], 0.0f, 1.0f) * 255.0f));
        const auto path = fs::path(root) / class_names[static_cast<size_t>(s.label)] /
                          (std::to_string(counters[static_cast<size_t>(s.label)]++) + ".png");
        img::encode_png_gray(path.string(), S, S, bytes.data());
    }
}

void write_split_manifest(const DatasetSplit& s, const std::string& path) {
    nlohmann::json j;
    j["seed"] = s.seed;
    for (const auto& [name, part] :
         {std::pair{"train", &s.train}, {"val", &s.val}, {"test", &s.test}}) {
        auto& arr = j[name] = nlohmann::json::array();
        for (const auto& sample : *part) arr.push_back(sample.source_path);
    }
    std::ofstream out(path);
    if (!out) throw DatasetError("cannot write split manifest " + path);
    out << j.dump(2) << "\n";
}

}  // namespace fme::data
