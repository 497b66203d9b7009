#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "ekp/data.hpp"
#include "ekp/errors.hpp"

using namespace ekp;
using namespace ekp::data;

TEST_CASE("splits: paper-scale counts, disjointness, determinism") {
  SyntheticSpec spec;
  spec.classes = 10;
  spec.per_class = 300;  // enough for 256 + 32
  spec.seed = 5;
  auto ds = synthetic_dataset(spec);

  SplitSpec split{256, 32, 9};
  auto s1 = make_splits(ds, split);
  CHECK(s1.subset.size() == 2560);
  CHECK(s1.val.size() == 320);

  std::set<int> subset(s1.subset.begin(), s1.subset.end());
  std::set<int> val(s1.val.begin(), s1.val.end());
  CHECK(subset.size() == s1.subset.size());
  CHECK(val.size() == s1.val.size());
  for (int id : val) CHECK(subset.count(id) == 0);

  auto s2 = make_splits(ds, split);
  CHECK(s1.subset == s2.subset);
  CHECK(s1.val == s2.val);

  // per-class balance
  std::vector<int> counts(10, 0);
  for (int id : s1.subset) counts[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(id)])]++;
  for (int c : counts) CHECK(c == 256);
}

TEST_CASE("splits: tiny two-class case and insufficiency error") {
  SyntheticSpec spec;
  spec.classes = 2;
  spec.per_class = 2;
  auto ds = synthetic_dataset(spec);
  auto s = make_splits(ds, {1, 1, 3});
  CHECK(s.subset.size() == 2);
  CHECK(s.val.size() == 2);
  std::set<int> all(s.subset.begin(), s.subset.end());
  all.insert(s.val.begin(), s.val.end());
  CHECK(all.size() == 4);

  CHECK_THROWS_AS(make_splits(ds, {2, 1, 3}), InsufficientDataError);
}

TEST_CASE("split files round trip") {
  const auto path = std::filesystem::temp_directory_path() / "ekp_split_test.txt";
  std::vector<int> ids{5, 1, 9, 300, 2};
  save_split(path, ids);
  CHECK(load_split(path) == ids);
  std::filesystem::remove(path);
}

TEST_CASE("augment: identity and flip-always") {
  SyntheticSpec spec;
  spec.classes = 2;
  spec.per_class = 3;
  auto ds = synthetic_dataset(spec);
  auto img = example_image(ds, 1);
  Rng rng(7);

  auto [a, b] = augment_pair(img, AugmentationPolicy::identity(), rng);
  for (std::size_t i = 0; i < img.size(); ++i) {
    CHECK(a[i] == img[i]);
    CHECK(b[i] == img[i]);
  }

  auto [fa, fb] = augment_pair(img, AugmentationPolicy::flip_always(), rng);
  const int h = img.dim(1), w = img.dim(2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      CHECK(fa[static_cast<std::size_t>(y) * w + x] ==
            img[static_cast<std::size_t>(y) * w + (w - 1 - x)]);
      CHECK(fa[static_cast<std::size_t>(y) * w + x] == fb[static_cast<std::size_t>(y) * w + x]);
    }
}

TEST_CASE("augment: search policy has no ops; finetune policy draws vary") {
  CHECK(AugmentationPolicy::search().ops.empty());
  auto extra = AugmentationPolicy::finetune_extra();
  // flip, pad-crop, brightness, contrast, saturation
  CHECK(extra.ops.size() == 5);

  SyntheticSpec spec;
  spec.classes = 2;
  spec.per_class = 3;
  auto ds = synthetic_dataset(spec);
  auto img = example_image(ds, 0);
  Rng rng(11);
  auto [a, b] = augment_pair(img, extra, rng);
  CHECK(a.same_shape(img));
  CHECK(b.same_shape(img));
  bool differ = false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) differ = true;
  CHECK(differ);  // two independent draws

  Rng rng2(11);
  auto [c, d] = augment_pair(img, extra, rng2);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i] == c[i]);
    CHECK(b[i] == d[i]);
  }
}

TEST_CASE("augment_pair rejects the search stage") {
  SyntheticSpec spec;
  spec.classes = 2;
  spec.per_class = 2;
  auto ds = synthetic_dataset(spec);
  auto img = example_image(ds, 0);
  Rng rng(1);
  CHECK_THROWS_AS(augment_pair(img, AugmentationPolicy::search(), rng), ConfigError);
}

TEST_CASE("eval batches: normalized, ordered, shaped") {
  SyntheticSpec spec;
  spec.classes = 3;
  spec.per_class = 10;
  auto ds = synthetic_dataset(spec);
  std::vector<int> ids;
  for (int i = 0; i < 25; ++i) ids.push_back(i);
  auto batches = eval_batches(ds, ids, 10);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].x.dim(0) == 10);
  CHECK(batches[2].x.dim(0) == 5);
  CHECK(batches[1].ids[0] == 10);

  // normalization: overall mean ~0, std ~1 when taken across the whole set
  std::vector<int> all;
  for (int i = 0; i < ds.count(); ++i) all.push_back(i);
  auto full = eval_batches(ds, all, ds.count())[0];
  double mean = 0;
  for (std::size_t i = 0; i < full.x.size(); ++i) mean += full.x[i];
  mean /= static_cast<double>(full.x.size());
  CHECK(std::abs(mean) < 1e-9);
}

TEST_CASE("synthetic train/test share normalization statistics") {
  SyntheticSpec spec;
  spec.classes = 4;
  spec.per_class = 20;
  auto tt = synthetic_train_test(spec, 10);
  CHECK(tt.test.count() == 40);
  CHECK(tt.test.channel_mean == tt.train.channel_mean);
  CHECK(tt.test.channel_std == tt.train.channel_std);
}
