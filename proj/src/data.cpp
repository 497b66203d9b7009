#include "ekp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ekp/errors.hpp"

namespace ekp::data {

namespace {

void compute_channel_stats(Dataset& ds) {
  const int n = ds.count(), c = ds.images.dim(1);
  const std::size_t hw =
      static_cast<std::size_t>(ds.images.dim(2)) * ds.images.dim(3);
  ds.channel_mean.assign(static_cast<std::size_t>(c), 0.0);
  ds.channel_std.assign(static_cast<std::size_t>(c), 0.0);
  const std::size_t per_ch = static_cast<std::size_t>(n) * hw;
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < c; ++k) {
      const double* p = ds.images.data() + (static_cast<std::size_t>(i) * c + k) * hw;
      for (std::size_t j = 0; j < hw; ++j) ds.channel_mean[static_cast<std::size_t>(k)] += p[j];
    }
  for (auto& m : ds.channel_mean) m /= static_cast<double>(per_ch);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < c; ++k) {
      const double* p = ds.images.data() + (static_cast<std::size_t>(i) * c + k) * hw;
      const double m = ds.channel_mean[static_cast<std::size_t>(k)];
      for (std::size_t j = 0; j < hw; ++j)
        ds.channel_std[static_cast<std::size_t>(k)] += (p[j] - m) * (p[j] - m);
    }
  for (auto& s : ds.channel_std) s = std::max(std::sqrt(s / static_cast<double>(per_ch)), 1e-8);
}

}  // namespace

SplitIndices make_splits(const Dataset& ds, const SplitSpec& spec) {
  if (ds.num_classes <= 0) throw InsufficientDataError("dataset has no class labels");
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (int i = 0; i < ds.count(); ++i)
    by_class[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])].push_back(i);

  Rng rng(spec.seed);
  SplitIndices out;
  for (int c = 0; c < ds.num_classes; ++c) {
    auto& ids = by_class[static_cast<std::size_t>(c)];
    const int need = spec.per_class_subset + spec.per_class_val;
    if (static_cast<int>(ids.size()) < need)
      throw InsufficientDataError("class " + std::to_string(c) + " has " +
                                  std::to_string(ids.size()) + " examples, needs " +
                                  std::to_string(need));
    std::shuffle(ids.begin(), ids.end(), rng);
    out.subset.insert(out.subset.end(), ids.begin(), ids.begin() + spec.per_class_subset);
    out.val.insert(out.val.end(), ids.begin() + spec.per_class_subset,
                   ids.begin() + need);
  }
  return out;
}

void save_split(const std::filesystem::path& path, const std::vector<int>& ids) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  for (int id : ids) f << id << "\n";
  if (!f) throw IoError("short write: " + path.string());
}

std::vector<int> load_split(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  std::vector<int> ids;
  int v = 0;
  while (f >> v) ids.push_back(v);
  return ids;
}

AugmentationPolicy AugmentationPolicy::search() {
  return {AugStage::Search, {}};
}

AugmentationPolicy AugmentationPolicy::finetune_base() {
  AugmentationPolicy p;
  p.stage = AugStage::FinetuneBase;
  p.ops.push_back({AugOp::Kind::HorizontalFlip, 0.5, 0, 0.0});
  p.ops.push_back({AugOp::Kind::PadCrop, 1.0, 4, 0.0});
  return p;
}

AugmentationPolicy AugmentationPolicy::finetune_extra() {
  AugmentationPolicy p = finetune_base();
  p.stage = AugStage::FinetuneExtra;
  p.ops.push_back({AugOp::Kind::Brightness, 1.0, 0, 0.2});
  p.ops.push_back({AugOp::Kind::Contrast, 1.0, 0, 0.2});
  p.ops.push_back({AugOp::Kind::Saturation, 1.0, 0, 0.2});
  return p;
}

AugmentationPolicy AugmentationPolicy::identity() {
  return {AugStage::FinetuneBase, {}};
}

AugmentationPolicy AugmentationPolicy::flip_always() {
  AugmentationPolicy p;
  p.stage = AugStage::FinetuneBase;
  p.ops.push_back({AugOp::Kind::HorizontalFlip, 1.0, 0, 0.0});
  return p;
}

namespace {

void flip_horizontal(ad::Tensor& img) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y) {
      double* row = img.data() + (static_cast<std::size_t>(k) * h + y) * w;
      for (int x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
    }
}

ad::Tensor pad_crop(const ad::Tensor& img, int pad, int dy, int dx) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  ad::Tensor out({c, h, w});
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int sy = y + dy - pad;
        const int sx = x + dx - pad;
        double v = 0.0;
        if (sy >= 0 && sy < h && sx >= 0 && sx < w)
          v = img[(static_cast<std::size_t>(k) * h + sy) * w + sx];
        out[(static_cast<std::size_t>(k) * h + y) * w + x] = v;
      }
  return out;
}

void jitter(ad::Tensor& img, AugOp::Kind kind, double factor) {
  const int c = img.dim(0);
  const std::size_t hw = img.size() / static_cast<std::size_t>(c);
  switch (kind) {
    case AugOp::Kind::Brightness:
      for (std::size_t i = 0; i < img.size(); ++i) img[i] *= factor;
      break;
    case AugOp::Kind::Contrast: {
      double mean = 0.0;
      for (std::size_t i = 0; i < img.size(); ++i) mean += img[i];
      mean /= static_cast<double>(img.size());
      for (std::size_t i = 0; i < img.size(); ++i)
        img[i] = mean + (img[i] - mean) * factor;
      break;
    }
    case AugOp::Kind::Saturation: {
      // gray = per-pixel channel mean; identity on single-channel images.
      for (std::size_t j = 0; j < hw; ++j) {
        double gray = 0.0;
        for (int k = 0; k < c; ++k) gray += img[static_cast<std::size_t>(k) * hw + j];
        gray /= static_cast<double>(c);
        for (int k = 0; k < c; ++k) {
          auto& v = img[static_cast<std::size_t>(k) * hw + j];
          v = gray + (v - gray) * factor;
        }
      }
      break;
    }
    default:
      break;
  }
}

}  // namespace

ad::Tensor apply_augmentation(const ad::Tensor& image, const AugmentationPolicy& policy,
                              Rng& rng) {
  if (image.rank() != 3) throw ShapeError("apply_augmentation: image must be [C,H,W]");
  ad::Tensor out = image;
  for (const auto& op : policy.ops) {
    switch (op.kind) {
      case AugOp::Kind::HorizontalFlip: {
        const double u = uniform(rng, 0.0, 1.0);
        if (u < op.probability) flip_horizontal(out);
        break;
      }
      case AugOp::Kind::PadCrop: {
        std::uniform_int_distribution<int> d(0, 2 * op.pad);
        const int dy = d(rng);
        const int dx = d(rng);
        out = pad_crop(out, op.pad, dy, dx);
        break;
      }
      case AugOp::Kind::Brightness:
      case AugOp::Kind::Contrast:
      case AugOp::Kind::Saturation: {
        const double factor = 1.0 + uniform(rng, -op.magnitude, op.magnitude);
        jitter(out, op.kind, factor);
        break;
      }
    }
  }
  return out;
}

std::pair<ad::Tensor, ad::Tensor> augment_pair(const ad::Tensor& image,
                                               const AugmentationPolicy& policy,
                                               Rng& rng) {
  if (policy.stage == AugStage::Search)
    throw ConfigError("augment_pair requires a finetune-stage policy");
  auto a = apply_augmentation(image, policy, rng);
  auto b = apply_augmentation(image, policy, rng);
  return {std::move(a), std::move(b)};
}

ad::Tensor example_image(const Dataset& ds, int id) {
  const int c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
  ad::Tensor img({c, h, w});
  const std::size_t stride = static_cast<std::size_t>(c) * h * w;
  const double* src = ds.images.data() + static_cast<std::size_t>(id) * stride;
  std::copy(src, src + stride, img.data());
  return img;
}

namespace {

void write_normalized(const Dataset& ds, const ad::Tensor& img, double* dst) {
  const int c = img.dim(0);
  const std::size_t hw = img.size() / static_cast<std::size_t>(c);
  for (int k = 0; k < c; ++k) {
    const double m = ds.channel_mean[static_cast<std::size_t>(k)];
    const double s = ds.channel_std[static_cast<std::size_t>(k)];
    const double* src = img.data() + static_cast<std::size_t>(k) * hw;
    double* out = dst + static_cast<std::size_t>(k) * hw;
    for (std::size_t j = 0; j < hw; ++j) out[j] = (src[j] - m) / s;
  }
}

}  // namespace

Batch make_batch(const Dataset& ds, std::span<const int> ids) {
  const int c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
  Batch b;
  b.x = ad::Tensor({static_cast<int>(ids.size()), c, h, w});
  const std::size_t stride = static_cast<std::size_t>(c) * h * w;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto img = example_image(ds, ids[i]);
    write_normalized(ds, img, b.x.data() + i * stride);
    b.labels.push_back(ds.labels[static_cast<std::size_t>(ids[i])]);
    b.ids.push_back(ids[i]);
  }
  return b;
}

std::pair<Batch, Batch> make_augmented_pair(const Dataset& ds, std::span<const int> ids,
                                            const AugmentationPolicy& policy, Rng& rng) {
  const int c = ds.images.dim(1), h = ds.images.dim(2), w = ds.images.dim(3);
  Batch a, b;
  a.x = ad::Tensor({static_cast<int>(ids.size()), c, h, w});
  b.x = ad::Tensor({static_cast<int>(ids.size()), c, h, w});
  const std::size_t stride = static_cast<std::size_t>(c) * h * w;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto img = example_image(ds, ids[i]);
    auto [va, vb] = augment_pair(img, policy, rng);
    write_normalized(ds, va, a.x.data() + i * stride);
    write_normalized(ds, vb, b.x.data() + i * stride);
    const int label = ds.labels[static_cast<std::size_t>(ids[i])];
    a.labels.push_back(label);
    b.labels.push_back(label);
    a.ids.push_back(ids[i]);
    b.ids.push_back(ids[i]);
  }
  return {std::move(a), std::move(b)};
}

std::vector<Batch> eval_batches(const Dataset& ds, const std::vector<int>& ids,
                                int batch_size) {
  std::vector<Batch> out;
  for (std::size_t off = 0; off < ids.size(); off += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min(static_cast<std::size_t>(batch_size), ids.size() - off);
    out.push_back(make_batch(ds, std::span<const int>(ids.data() + off, n)));
  }
  return out;
}

Dataset synthetic_dataset(const SyntheticSpec& spec) {
  Dataset ds;
  const int n = spec.classes * spec.per_class;
  ds.images = ad::Tensor({n, spec.channels, spec.height, spec.width});
  ds.num_classes = spec.classes;
  Rng rng(spec.seed);

  const double cy = (spec.height - 1) / 2.0;
  const double cx = (spec.width - 1) / 2.0;
  const double radius = std::min(spec.height, spec.width) / 4.0;
  const double sigma = std::min(spec.height, spec.width) / 5.0;

  const std::size_t hw = static_cast<std::size_t>(spec.height) * spec.width;
  int idx = 0;
  for (int c = 0; c < spec.classes; ++c) {
    const double theta = 2.0 * M_PI * c / spec.classes;
    const double by = cy + radius * std::sin(theta);
    const double bx = cx + radius * std::cos(theta);
    for (int e = 0; e < spec.per_class; ++e, ++idx) {
      const double jy = by + normal(rng, 0.0, 1.0);
      const double jx = bx + normal(rng, 0.0, 1.0);
      const double amp = uniform(rng, 0.8, 1.2);
      for (int k = 0; k < spec.channels; ++k) {
        double* img = ds.images.data() +
                      (static_cast<std::size_t>(idx) * spec.channels + k) * hw;
        for (int y = 0; y < spec.height; ++y)
          for (int x = 0; x < spec.width; ++x) {
            const double d2 = (y - jy) * (y - jy) + (x - jx) * (x - jx);
            img[static_cast<std::size_t>(y) * spec.width + x] =
                amp * std::exp(-d2 / (2.0 * sigma * sigma)) +
                normal(rng, 0.0, spec.noise);
          }
      }
      ds.labels.push_back(c);
    }
  }
  compute_channel_stats(ds);
  return ds;
}

TrainTest synthetic_train_test(const SyntheticSpec& spec, int test_per_class) {
  SyntheticSpec train_spec = spec;
  TrainTest tt;
  tt.train = synthetic_dataset(train_spec);
  SyntheticSpec test_spec = spec;
  test_spec.per_class = test_per_class;
  test_spec.seed = mix_seed(spec.seed, 0x7e57);
  tt.test = synthetic_dataset(test_spec);
  // Test set uses training statistics.
  tt.test.channel_mean = tt.train.channel_mean;
  tt.test.channel_std = tt.train.channel_std;
  return tt;
}

namespace {

Dataset read_cifar_batches(const std::vector<std::filesystem::path>& files) {
  constexpr int kRecord = 1 + 3 * 32 * 32;
  Dataset ds;
  ds.num_classes = 10;
  std::vector<unsigned char> buf;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw IoError("cannot read " + f.string());
    in.seekg(0, std::ios::end);
    const auto size = in.tellg();
    in.seekg(0);
    if (size % kRecord != 0) throw IoError("bad CIFAR batch size: " + f.string());
    const std::size_t old = buf.size();
    buf.resize(old + static_cast<std::size_t>(size));
    in.read(reinterpret_cast<char*>(buf.data() + old), size);
    if (!in) throw IoError("short read: " + f.string());
  }
  const std::size_t n = buf.size() / kRecord;
  ds.images = ad::Tensor({static_cast<int>(n), 3, 32, 32});
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = buf.data() + i * kRecord;
    ds.labels.push_back(static_cast<int>(rec[0]));
    double* img = ds.images.data() + i * 3 * 32 * 32;
    for (std::size_t j = 0; j < 3 * 32 * 32; ++j)
      img[j] = static_cast<double>(rec[1 + j]) / 255.0;
  }
  return ds;
}

}  // namespace

TrainTest load_cifar10(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::path base = dir;
  if (fs::exists(dir / "cifar-10-batches-bin")) base = dir / "cifar-10-batches-bin";
  std::vector<fs::path> train_files;
  for (int i = 1; i <= 5; ++i)
    train_files.push_back(base / ("data_batch_" + std::to_string(i) + ".bin"));
  TrainTest tt;
  tt.train = read_cifar_batches(train_files);
  compute_channel_stats(tt.train);
  tt.test = read_cifar_batches({base / "test_batch.bin"});
  tt.test.channel_mean = tt.train.channel_mean;
  tt.test.channel_std = tt.train.channel_std;
  return tt;
}

}  // namespace ekp::data
