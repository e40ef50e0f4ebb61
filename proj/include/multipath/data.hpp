#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "multipath/rng.hpp"

namespace multipath {

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageValues = kImageChannels * kImageSide * kImageSide;
inline constexpr double kGamma = 2.2;

enum class Origin : std::uint8_t { mnist = 0, cifar = 1 };

/// Images as stored in the source files: 8-bit samples, channel-major.
struct RawImages {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t stride() const { return channels * height * width; }
  /// Image i scaled to [0,1].
  std::vector<float> image(std::size_t i) const;
};

/// IDX image (magic 2051) and label (magic 2049) files.
RawImages load_mnist(const std::filesystem::path& images, const std::filesystem::path& labels);
/// CIFAR-10 binary batches: records of one label byte and 3072 pixel bytes.
RawImages load_cifar(std::span<const std::filesystem::path> batches);

struct LabeledImage {
  /// 3x32x32 gamma-encoded values in [0,1], channel-major.
  std::vector<float> pixels;
  int label = 0;
  Origin origin = Origin::cifar;
};

struct Dataset {
  std::string kind;
  std::vector<std::string> class_names;
  std::vector<LabeledImage> images;

  std::size_t size() const { return images.size(); }
  std::size_t classes() const { return class_names.size(); }
};

/// 28x28 -> 32x32 bilinear interpolation with corner-aligned sampling.
std::vector<float> resize_mnist(std::span<const float> image, std::size_t side = 28);

/// Two colors uniform in the unit RGB cube, at least `min_distance` apart.
std::array<std::array<float, 3>, 2> random_color_pair(Rng& rng, double min_distance = 0.3);
/// Maps gray level v to (1-v)·c1 + v·c2 per channel.
std::vector<float> recolor(std::span<const float> gray, const std::array<std::array<float, 3>, 2>& colors);
std::vector<float> recolor(std::span<const float> gray, Rng& rng);

enum class DatasetKind { hybrid, cifar10, cifar2, cifar5 };
DatasetKind parse_dataset_kind(std::string_view text);
std::string_view to_string(DatasetKind kind);

/// MNIST digits 0-4 keep labels 0-4; CIFAR airplane, automobile, deer, horse
/// and frog become 5-9 in that order. MNIST digits are resized and recolored.
Dataset build_hybrid(const RawImages& mnist, const RawImages& cifar, std::uint64_t seed);

/// CIFAR-2: horse 1, other 0. CIFAR-5: cat 0, dog 1, deer 2, horse 3, other 4.
Dataset relabel_cifar(const RawImages& cifar, DatasetKind variant, std::uint64_t seed);

/// Random integer shifts in [-4,4] on both axes and, for CIFAR images, a
/// horizontal flip with probability 0.5. Exposed pixels take the image's mean
/// color computed in linear light.
struct AugmentDraw {
  int dx = 0;
  int dy = 0;
  bool flip = false;
};
AugmentDraw draw_augmentation(Origin origin, Rng& rng);
std::vector<float> apply_augmentation(std::span<const float> image, const AugmentDraw& draw);
std::vector<float> augment(std::span<const float> image, Origin origin, Rng& rng);

struct DatasetSplits {
  Dataset train;
  Dataset validation;
  Dataset test;
};

/// Holds out `validation_fraction` of `training` (seeded), then draws at most
/// `train_size` / `validation_size` examples from each part (0 keeps all).
DatasetSplits split_dataset(Dataset training, Dataset test, double validation_fraction,
                            std::size_t train_size, std::size_t validation_size,
                            std::size_t test_size, std::uint64_t seed);

/// Binary cache: "MPDS" magic, u32 version, u32 count, u32 class count, class
/// names as u32 length + bytes, then per image one label byte, one origin byte
/// and 3072 samples quantized as round(255·v).
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Locations of the canonical source files under a data directory.
struct SourceFiles {
  std::filesystem::path mnist_train_images, mnist_train_labels;
  std::filesystem::path mnist_test_images, mnist_test_labels;
  std::vector<std::filesystem::path> cifar_train;
  std::filesystem::path cifar_test;

  static SourceFiles under(const std::filesystem::path& root);
  /// Paths that do not exist.
  std::vector<std::filesystem::path> missing(bool need_mnist) const;
};

}  // namespace multipath
