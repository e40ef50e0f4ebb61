#include "multipath/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "multipath/errors.hpp"

namespace multipath {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t big_endian(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

void require(bool ok, const fs::path& path, const std::string& what) {
  if (!ok) throw FormatError(path.string() + ": " + what);
}

}  // namespace

std::vector<float> RawImages::image(std::size_t i) const {
  const std::size_t n = stride();
  std::vector<float> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = static_cast<float>(pixels[i * n + k]) / 255.0f;
  return out;
}

RawImages load_mnist(const fs::path& images, const fs::path& labels) {
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  require(ib.size() >= 16, images, "truncated header");
  require(lb.size() >= 8, labels, "truncated header");
  require(big_endian(ib, 0) == 2051, images, "bad magic (expected 2051)");
  require(big_endian(lb, 0) == 2049, labels, "bad magic (expected 2049)");
  const std::size_t count = big_endian(ib, 4);
  const std::size_t rows = big_endian(ib, 8);
  const std::size_t cols = big_endian(ib, 12);
  require(big_endian(lb, 4) == count, labels, "label count differs from image count");
  require(ib.size() == 16 + count * rows * cols, images, "size disagrees with header");
  require(lb.size() == 8 + count, labels, "size disagrees with header");

  RawImages out;
  out.channels = 1;
  out.height = rows;
  out.width = cols;
  out.pixels.assign(ib.begin() + 16, ib.end());
  out.labels.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.labels.push_back(lb[8 + i]);
  return out;
}

RawImages load_cifar(std::span<const fs::path> batches) {
  constexpr std::size_t record = 1 + kImageValues;
  RawImages out;
  out.channels = kImageChannels;
  out.height = kImageSide;
  out.width = kImageSide;
  for (const fs::path& path : batches) {
    const auto bytes = read_file(path);
    require(bytes.size() % record == 0, path,
            "size " + std::to_string(bytes.size()) + " is not a multiple of 3073");
    for (std::size_t off = 0; off < bytes.size(); off += record) {
      require(bytes[off] < 10, path, "label " + std::to_string(bytes[off]) + " out of range");
      out.labels.push_back(bytes[off]);
      out.pixels.insert(out.pixels.end(), bytes.begin() + static_cast<std::ptrdiff_t>(off + 1),
                        bytes.begin() + static_cast<std::ptrdiff_t>(off + record));
    }
  }
  return out;
}

std::vector<float> resize_mnist(std::span<const float> image, std::size_t side) {
  if (image.size() != side * side)
    throw ShapeError("resize_mnist: expected " + std::to_string(side * side) + " pixels");
  std::vector<float> out(kImageSide * kImageSide);
  const double step = static_cast<double>(side - 1) / static_cast<double>(kImageSide - 1);
  for (std::size_t y = 0; y < kImageSide; ++y) {
    const double sy = static_cast<double>(y) * step;
    const auto y0 = std::min(static_cast<std::size_t>(sy), side - 1);
    const std::size_t y1 = std::min(y0 + 1, side - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < kImageSide; ++x) {
      const double sx = static_cast<double>(x) * step;
      const auto x0 = std::min(static_cast<std::size_t>(sx), side - 1);
      const std::size_t x1 = std::min(x0 + 1, side - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1 - fx) * image[y0 * side + x0] + fx * image[y0 * side + x1];
      const double bottom = (1 - fx) * image[y1 * side + x0] + fx * image[y1 * side + x1];
      out[y * kImageSide + x] = static_cast<float>((1 - fy) * top + fy * bottom);
    }
  }
  return out;
}

std::array<std::array<float, 3>, 2> random_color_pair(Rng& rng, double min_distance) {
  for (;;) {
    std::array<std::array<float, 3>, 2> c{};
    double d2 = 0;
    for (int k = 0; k < 2; ++k)
      for (int ch = 0; ch < 3; ++ch) c[k][ch] = static_cast<float>(rng.uniform());
    for (int ch = 0; ch < 3; ++ch) {
      const double d = static_cast<double>(c[0][ch]) - c[1][ch];
      d2 += d * d;
    }
    if (std::sqrt(d2) >= min_distance) return c;
  }
}

std::vector<float> recolor(std::span<const float> gray,
                           const std::array<std::array<float, 3>, 2>& colors) {
  const std::size_t plane = gray.size();
  std::vector<float> out(3 * plane);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t k = 0; k < plane; ++k) {
      const float v = gray[k];
      out[ch * plane + k] = (1 - v) * colors[0][ch] + v * colors[1][ch];
    }
  return out;
}

std::vector<float> recolor(std::span<const float> gray, Rng& rng) {
  return recolor(gray, random_color_pair(rng));
}

DatasetKind parse_dataset_kind(std::string_view text) {
  for (DatasetKind k : {DatasetKind::hybrid, DatasetKind::cifar10, DatasetKind::cifar2,
                        DatasetKind::cifar5})
    if (to_string(k) == text) return k;
  throw ArgumentError("unknown dataset kind '" + std::string(text) + "'");
}

std::string_view to_string(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::hybrid: return "hybrid";
    case DatasetKind::cifar10: return "cifar10";
    case DatasetKind::cifar2: return "cifar2";
    case DatasetKind::cifar5: return "cifar5";
  }
  return "unknown";
}

namespace {

constexpr std::array<int, 5> kHybridCifarClasses{0, 1, 4, 7, 6};

void shuffle_images(std::vector<LabeledImage>& images, Rng& rng) {
  const auto order = permutation(images.size(), rng);
  std::vector<LabeledImage> shuffled;
  shuffled.reserve(images.size());
  for (std::size_t i : order) shuffled.push_back(std::move(images[i]));
  images = std::move(shuffled);
}

}  // namespace

Dataset build_hybrid(const RawImages& mnist, const RawImages& cifar, std::uint64_t seed) {
  if (mnist.channels != 1 || mnist.height != mnist.width)
    throw ShapeError("build_hybrid: MNIST images must be square and single-channel");
  if (cifar.stride() != kImageValues) throw ShapeError("build_hybrid: CIFAR images must be 3x32x32");
  Dataset out;
  out.kind = "hybrid";
  out.class_names = {"0", "1", "2", "3", "4", "airplane", "automobile", "deer", "horse", "frog"};

  std::array<std::size_t, 10> counts{};
  for (std::size_t i = 0; i < mnist.size(); ++i) {
    const int digit = mnist.labels[i];
    if (digit > 4) continue;
    Rng rng = Rng::derive(seed, {0x6d6e6973ULL, i});
    out.images.push_back({recolor(resize_mnist(mnist.image(i), mnist.height), rng), digit,
                          Origin::mnist});
    ++counts[static_cast<std::size_t>(digit)];
  }
  for (std::size_t i = 0; i < cifar.size(); ++i) {
    const auto it = std::find(kHybridCifarClasses.begin(), kHybridCifarClasses.end(), cifar.labels[i]);
    if (it == kHybridCifarClasses.end()) continue;
    const int label = 5 + static_cast<int>(it - kHybridCifarClasses.begin());
    out.images.push_back({cifar.image(i), label, Origin::cifar});
    ++counts[static_cast<std::size_t>(label)];
  }
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] == 0)
      throw FormatError("build_hybrid: no source images for class '" + out.class_names[c] + "'");
  Rng rng = Rng::derive(seed, {0x73687566ULL});
  shuffle_images(out.images, rng);
  return out;
}

Dataset relabel_cifar(const RawImages& cifar, DatasetKind variant, std::uint64_t seed) {
  if (cifar.stride() != kImageValues) throw ShapeError("relabel_cifar: CIFAR images must be 3x32x32");
  Dataset out;
  out.kind = std::string(to_string(variant));
  std::array<int, 10> map{};
  switch (variant) {
    case DatasetKind::cifar10:
      out.class_names = {"airplane", "automobile", "bird", "cat", "deer",
                         "dog", "frog", "horse", "ship", "truck"};
      for (int c = 0; c < 10; ++c) map[static_cast<std::size_t>(c)] = c;
      break;
    case DatasetKind::cifar2:
      out.class_names = {"other", "horse"};
      map.fill(0);
      map[7] = 1;
      break;
    case DatasetKind::cifar5:
      out.class_names = {"cat", "dog", "deer", "horse", "other"};
      map.fill(4);
      map[3] = 0;
      map[5] = 1;
      map[4] = 2;
      map[7] = 3;
      break;
    case DatasetKind::hybrid:
      throw ArgumentError("relabel_cifar: hybrid is not a CIFAR relabeling");
  }
  out.images.reserve(cifar.size());
  for (std::size_t i = 0; i < cifar.size(); ++i)
    out.images.push_back({cifar.image(i), map.at(static_cast<std::size_t>(cifar.labels[i])),
                          Origin::cifar});
  Rng rng = Rng::derive(seed, {0x73687566ULL});
  shuffle_images(out.images, rng);
  return out;
}

AugmentDraw draw_augmentation(Origin origin, Rng& rng) {
  AugmentDraw d;
  d.dx = static_cast<int>(rng.between(-4, 4));
  d.dy = static_cast<int>(rng.between(-4, 4));
  d.flip = origin == Origin::cifar && rng.bernoulli(0.5);
  return d;
}

std::vector<float> apply_augmentation(std::span<const float> image, const AugmentDraw& draw) {
  if (image.size() != kImageValues) throw ShapeError("augment: expected a 3x32x32 image");
  constexpr auto side = static_cast<int>(kImageSide);
  constexpr std::size_t plane = kImageSide * kImageSide;
  std::vector<float> out(kImageValues);
  for (std::size_t ch = 0; ch < kImageChannels; ++ch) {
    double linear = 0;
    for (std::size_t k = 0; k < plane; ++k) linear += std::pow(image[ch * plane + k], kGamma);
    const auto fill = static_cast<float>(std::pow(linear / plane, 1.0 / kGamma));
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const int sy = y - draw.dy;
        int sx = x - draw.dx;
        float v = fill;
        if (sy >= 0 && sy < side && sx >= 0 && sx < side) {
          if (draw.flip) sx = side - 1 - sx;
          v = image[ch * plane + static_cast<std::size_t>(sy * side + sx)];
        }
        out[ch * plane + static_cast<std::size_t>(y * side + x)] = v;
      }
  }
  return out;
}

std::vector<float> augment(std::span<const float> image, Origin origin, Rng& rng) {
  return apply_augmentation(image, draw_augmentation(origin, rng));
}

namespace {

Dataset subset(const Dataset& source, std::span<const std::size_t> order, std::size_t begin,
               std::size_t end, std::size_t limit) {
  Dataset out;
  out.kind = source.kind;
  out.class_names = source.class_names;
  const std::size_t take = limit == 0 ? end - begin : std::min(limit, end - begin);
  out.images.reserve(take);
  for (std::size_t k = begin; k < begin + take; ++k) out.images.push_back(source.images[order[k]]);
  return out;
}

}  // namespace

DatasetSplits split_dataset(Dataset training, Dataset test, double validation_fraction,
                            std::size_t train_size, std::size_t validation_size,
                            std::size_t test_size, std::uint64_t seed) {
  if (!(validation_fraction > 0 && validation_fraction < 1))
    throw ConfigError("data.validation_fraction", "must lie strictly between 0 and 1");
  Rng rng = Rng::derive(seed, {0x73706c74ULL});
  const auto order = permutation(training.size(), rng);
  const auto held = static_cast<std::size_t>(
      std::llround(validation_fraction * static_cast<double>(training.size())));
  DatasetSplits out;
  out.validation = subset(training, order, 0, held, validation_size);
  out.train = subset(training, order, held, training.size(), train_size);
  std::vector<std::size_t> identity(test.size());
  for (std::size_t i = 0; i < identity.size(); ++i) identity[i] = i;
  out.test = subset(test, identity, 0, test.size(), test_size);
  if (out.train.size() == 0 || out.validation.size() == 0)
    throw ConfigError("data", "split leaves an empty training or validation set");
  return out;
}

namespace {

constexpr char kMagic[4] = {'M', 'P', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& bytes, std::size_t& offset,
                      const fs::path& path) {
  require(offset + 4 <= bytes.size(), path, "truncated");
  const std::uint32_t v = std::uint32_t{bytes[offset]} | (std::uint32_t{bytes[offset + 1]} << 8) |
                          (std::uint32_t{bytes[offset + 2]} << 16) |
                          (std::uint32_t{bytes[offset + 3]} << 24);
  offset += 4;
  return v;
}

}  // namespace

void save_dataset(const Dataset& dataset, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(dataset.size()));
  put_u32(out, static_cast<std::uint32_t>(dataset.classes()));
  for (const std::string& name : dataset.class_names) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
  }
  std::vector<char> record(2 + kImageValues);
  for (const LabeledImage& image : dataset.images) {
    if (image.pixels.size() != kImageValues) throw ShapeError("save_dataset: image is not 3x32x32");
    record[0] = static_cast<char>(image.label);
    record[1] = static_cast<char>(image.origin);
    for (std::size_t k = 0; k < kImageValues; ++k) {
      const float v = std::clamp(image.pixels[k], 0.0f, 1.0f);
      record[2 + k] = static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
    }
    out.write(record.data(), static_cast<std::streamsize>(record.size()));
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

Dataset load_dataset(const fs::path& path) {
  const auto bytes = read_file(path);
  require(bytes.size() >= 16 && std::memcmp(bytes.data(), kMagic, 4) == 0, path,
          "not a dataset cache (bad magic)");
  std::size_t off = 4;
  const std::uint32_t version = get_u32(bytes, off, path);
  require(version == kVersion, path, "unsupported cache version " + std::to_string(version));
  const std::uint32_t count = get_u32(bytes, off, path);
  const std::uint32_t classes = get_u32(bytes, off, path);
  Dataset out;
  for (std::uint32_t c = 0; c < classes; ++c) {
    const std::uint32_t len = get_u32(bytes, off, path);
    require(off + len <= bytes.size(), path, "truncated class map");
    out.class_names.emplace_back(reinterpret_cast<const char*>(bytes.data() + off), len);
    off += len;
  }
  const std::size_t record = 2 + kImageValues;
  require(bytes.size() - off == std::size_t{count} * record, path, "record area size mismatch");
  out.images.resize(count);
  for (std::uint32_t i = 0; i < count; ++i, off += record) {
    LabeledImage& image = out.images[i];
    image.label = bytes[off];
    require(image.label < static_cast<int>(classes), path, "label out of range");
    require(bytes[off + 1] <= 1, path, "unknown origin byte");
    image.origin = static_cast<Origin>(bytes[off + 1]);
    image.pixels.resize(kImageValues);
    for (std::size_t k = 0; k < kImageValues; ++k)
      image.pixels[k] = static_cast<float>(bytes[off + 2 + k]) / 255.0f;
  }
  return out;
}

SourceFiles SourceFiles::under(const fs::path& root) {
  SourceFiles s;
  const fs::path mnist = root / "mnist";
  s.mnist_train_images = mnist / "train-images-idx3-ubyte";
  s.mnist_train_labels = mnist / "train-labels-idx1-ubyte";
  s.mnist_test_images = mnist / "t10k-images-idx3-ubyte";
  s.mnist_test_labels = mnist / "t10k-labels-idx1-ubyte";
  const fs::path cifar = root / "cifar-10-batches-bin";
  for (int b = 1; b <= 5; ++b)
    s.cifar_train.push_back(cifar / ("data_batch_" + std::to_string(b) + ".bin"));
  s.cifar_test = cifar / "test_batch.bin";
  return s;
}

std::vector<fs::path> SourceFiles::missing(bool need_mnist) const {
  std::vector<fs::path> all = cifar_train;
  all.push_back(cifar_test);
  if (need_mnist)
    for (const auto& p : {mnist_train_images, mnist_train_labels, mnist_test_images, mnist_test_labels})
      all.push_back(p);
  std::vector<fs::path> out;
  for (const auto& p : all)
    if (!fs::exists(p)) out.push_back(p);
  return out;
}

}  // namespace multipath
