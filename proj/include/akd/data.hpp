#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "akd/rng.hpp"
#include "akd/tensor.hpp"

namespace akd {

// Immutable after construction. Row order is load-bearing: the subsetting
// protocols below are defined on the stored sequence.
struct Dataset {
    Tensor features;          // [n x d]
    std::vector<int> labels;  // each in [0, num_classes)
    Index num_classes = 0;
    std::string name;

    Index size() const { return features.rank() == 0 ? 0 : features.rows(); }
    Index dim() const { return features.rank() == 0 ? 0 : features.cols(); }
};

void check_dataset(const Dataset& d, const char* where);

enum class SyntheticKind { Blobs, Spirals };

struct SyntheticSpec {
    SyntheticKind kind = SyntheticKind::Blobs;
    Index num_classes = 2;
    Index samples_per_class = 100;
    Index input_dim = 2;  // blobs; spirals are always 2-D
    double spread = 1.0;  // noise stddev (blobs: per dimension; spirals: angular)
    std::uint64_t seed = 0;
};

// Blobs: class centers drawn once on the unit hypersphere scaled by 4,
// samples are center + Normal(0, spread^2) per dimension. Spirals: one
// interleaved 2-D arm per class with Gaussian angular noise. Rows are
// class-major, draw order within a class. Every sample's draw is keyed by
// (seed, class, index), so a longer run of the same spec extends a shorter
// one sample-for-sample.
Dataset gen_synthetic(const SyntheticSpec& spec);

// First `train_per_class` rows of each class go to the first dataset, the
// remainder to the second; relative order preserved on both sides.
std::pair<Dataset, Dataset> split_per_class(const Dataset& d, Index train_per_class);

// The default desk benchmark: 20 classes in 32 dimensions, 100 train + 50
// test samples per class, spread tuned so an MLP teacher lands in the
// 80-95% test-accuracy band.
std::pair<Dataset, Dataset> blobs_hard(std::uint64_t seed);

// For each class in `classes`, keep only its first `cap` samples in stored
// order; other classes are untouched. Row order preserved.
Dataset make_imbalanced(const Dataset& d, const std::set<int>& classes, Index cap);

// First floor(p * n) rows in stored order, 0 < p <= 1.
Dataset take_fraction(const Dataset& d, double p);

struct Batch {
    Tensor features;
    std::vector<int> labels;
};

// Splits the dataset into consecutive batches, optionally through a
// seed-deterministic permutation; the final partial batch is emitted.
std::vector<Batch> batch_iter(const Dataset& d, Index batch_size, Rng& rng, bool shuffle);

// Per-dimension z-score fitted on one dataset (population std, floored at
// eps) and applied to any other.
struct Standardizer {
    Tensor mean;  // [1 x d]
    Tensor std;   // [1 x d]
};

Standardizer fit_standardizer(const Dataset& train, double eps = 1e-12);
Dataset apply_standardizer(const Standardizer& s, const Dataset& d);

// IDX (big-endian) image/label pair. Images use magic 0x00000803 with
// dimensions count x rows x cols and unsigned-byte pixels scaled to [0, 1]
// on load; labels use magic 0x00000801. Loading rejects wrong magics
// (format error naming the value), disagreeing counts (format error) and
// truncated files (IO error). Writing quantizes features to the byte grid,
// so write-then-read is exact for data already on the grid.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path);

}  // namespace akd
