#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fme/rng.hpp"
#include "fme/tensor.hpp"

// Dataset ingestion from class-labeled image directories, augmentation,
// class rebalancing, deterministic splits and the synthetic desk-scale
// dataset generator. All geometry is bilinear with edge clamp; all
// randomness flows through explicit Rng streams.

namespace fme::data {

struct Sample {
    Tensor image;  // (1, S, S), values in [0, 1]
    int label = 0;
    std::string source_path;
};

struct LoadReport {
    std::vector<Sample> samples;
    std::vector<std::string> class_names;  // sorted subdirectory order
    std::vector<std::string> warnings;     // one per skipped file
};

// Reads `<root>/<ClassName>/*.{png,jpg,jpeg}` (any decodable file counts),
// converts to single-channel luminance, resizes to S x S, scales to [0,1].
// Unreadable files are skipped with a warning; an empty class is an error.
LoadReport load_dataset(const std::string& root, int image_size);

// One sampled augmentation decision; kept explicit so tests can force paths.
struct AugmentPlan {
    bool hflip = false;
    bool scaled = false;
    double scale_factor = 1.0;  // uniform in [0.9, 1.1] when scaled
    bool sheared = false;
    double shear_deg = 0.0;  // uniform in [-10, 10] when sheared
    bool vflip = false;
};

AugmentPlan draw_augment_plan(Rng& rng);
Sample apply_augment(const Sample& s, const AugmentPlan& plan);

// Each transform applied independently with probability 1/2; label kept.
Sample augment(const Sample& s, Rng& rng);

// Resamples minority classes (originals retained, augmented copies added)
// until every class count equals the majority count.
std::vector<Sample> oversample_balance(const std::vector<Sample>& train, Rng& rng);

struct DatasetSplit {
    std::vector<Sample> train, val, test;
    std::uint64_t seed = 0;
};

// Stratified-by-class shuffled split, deterministic per seed. Fractions
// must be positive and sum to 1 within 1e-9.
DatasetSplit split(const std::vector<Sample>& samples, double f_train, double f_val, double f_test,
                   std::uint64_t seed);

// Four procedural motif classes (sorted name order): checker, cross,
// gradient, ring; additive noise sigma 0.1, deterministic per seed.
std::vector<Sample> synth_generate(int n_per_class, int size, std::uint64_t seed);
const std::array<std::string, 4>& synth_class_names();

// Writes samples as 8-bit grayscale PNGs in the class-directory layout.
void export_dataset(const std::vector<Sample>& samples,
                    const std::vector<std::string>& class_names, const std::string& root);

// UTF-8 JSON manifest listing the source paths of each split.
void write_split_manifest(const DatasetSplit& s, const std::string& path);

// Bilinear lookup with edge clamp on a (1, S, S) image tensor.
float bilinear_sample(const Tensor& image, double row, double col);

}  // namespace fme::data
