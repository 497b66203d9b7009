#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <random>

#include "ekp/membank.hpp"
#include "ekp/model_zoo.hpp"
#include "ekp/nnops.hpp"
#include "testutil.hpp"

using namespace ekp;
using namespace ekp::membank;

namespace {

// Brute-force oracle for Eq.-style teacher selection.
std::vector<int> select_teachers_oracle(const std::map<int, double>& losses,
                                        double l_star, double l_0, int K) {
  std::vector<int> out;
  for (int k = 1; k <= K; ++k) {
    const double target = (double(K - k) / K) * l_star + (double(k) / K) * l_0;
    int best = -1;
    double best_d = 1e300;
    for (auto& [it, loss] : losses) {
      const double d = std::abs(target - loss);
      if (d < best_d || (d == best_d && it > best)) {
        best_d = d;
        best = it;
      }
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace

TEST_CASE("teacher targets: the interpolation ladder") {
  // l_star=1, l_0=0, K=5 -> targets 0.8, 0.6, 0.4, 0.2, 0.0 and the ladder
  // {0.79, 0.61, 0.40, 0.18, 0.02} picks iterations in order.
  std::map<int, double> losses{{0, 0.02}, {1, 0.18}, {2, 0.40}, {3, 0.61}, {4, 0.79}};
  auto picks = select_teachers(losses, 1.0, 0.0, 5);
  CHECK(picks == std::vector<int>{4, 3, 2, 1, 0});
  CHECK(picks == select_teachers_oracle(losses, 1.0, 0.0, 5));
}

TEST_CASE("teacher selection matches brute force on random ladders") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::map<int, double> losses;
    const int n = 3 + static_cast<int>(rng() % 10);
    for (int i = 0; i < n; ++i)
      losses[i] = std::uniform_real_distribution<double>(0.0, 2.0)(rng);
    const double l0 = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    const double ls = l0 + std::uniform_real_distribution<double>(0.1, 1.5)(rng);
    const int K = 1 + static_cast<int>(rng() % 6);
    CHECK(select_teachers(losses, ls, l0, K) == select_teachers_oracle(losses, ls, l0, K));
  }
}

TEST_CASE("teacher selection: K=1 picks the iteration nearest L0") {
  std::map<int, double> losses{{0, 0.9}, {1, 0.5}, {2, 0.11}};
  CHECK(select_teachers(losses, 0.9, 0.1, 1) == std::vector<int>{2});
}

TEST_CASE("teacher selection: ties break toward the later iteration") {
  std::map<int, double> losses{{3, 0.4}, {7, 0.6}};
  // target 0.5 is equidistant; later iteration 7 wins
  auto picks = select_teachers(losses, 0.5, 0.5, 1);
  CHECK(picks == std::vector<int>{7});
}

TEST_CASE("empty interim set raises") {
  CHECK_THROWS_AS(select_teachers({}, 1.0, 0.0, 3), NoTeachersError);
}

TEST_CASE("bank build: shapes, recomputable losses, ordering") {
  data::SyntheticSpec spec;
  spec.classes = 3;
  spec.per_class = 10;
  spec.seed = 21;
  auto train = data::synthetic_dataset(spec);

  // Two teachers: an unpruned toy net and a pruned view of it; the pruned one
  // has the higher loss in expectation, so order is (weak, strong) = (k=1, k=2)
  auto strong = net::toy_cnn({1, 12, 12, 3}, {6, 8}, {1, 2}, 31);
  auto weak = strong.mask({{1, 0}, {1, 1}, {1, 2}, {4, 0}}).materialize();

  std::vector<net::PrunableNetwork> nets{weak, strong};
  std::vector<int> iters{5, 1};
  MemoryBank bank;
  bool built = false;
  try {
    bank = MemoryBank::build(nets, iters, train, 16);
    built = true;
  } catch (const StructuralError&) {
    // random init can invert the order; swap and rebuild
    bank = MemoryBank::build({strong, weak}, {1, 5}, train, 16);
  }
  (void)built;

  CHECK(bank.teacher_count() == 2);
  CHECK(bank.train_count() == 30);
  CHECK(bank.classes() == 3);
  CHECK(bank.teacher_logits(1).size() == 30 * 3);

  // teacher_loss recomputed from stored logits matches within 1e-6
  for (const auto& t : bank.teachers()) {
    ad::Tensor logits({30, 3});
    auto view = bank.teacher_logits(t.k);
    std::copy(view.begin(), view.end(), logits.data());
    CHECK(std::abs(ad::cross_entropy_value(logits, train.labels) - t.teacher_loss) < 1e-6);
  }
  CHECK(bank.teachers()[0].teacher_loss >= bank.teachers()[1].teacher_loss - 1e-12);
}

TEST_CASE("ensemble gating matches brute force over random banks") {
  // Build synthetic banks directly through save/load to control losses.
  std::mt19937_64 rng(17);
  const auto dir = std::filesystem::temp_directory_path() / "ekp_membank_gate";

  for (int trial = 0; trial < 100; ++trial) {
    const int K = 1 + static_cast<int>(rng() % 5);
    const int n = 4 + static_cast<int>(rng() % 8);
    const int classes = 2 + static_cast<int>(rng() % 4);

    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    std::vector<double> losses(static_cast<std::size_t>(K));
    for (auto& l : losses) l = std::uniform_real_distribution<double>(0.1, 2.0)(rng);
    std::sort(losses.rbegin(), losses.rend());  // non-increasing in k

    std::vector<ad::Tensor> arrays;
    {
      std::ofstream m(dir / "manifest");
      m << "format ekp-membank 1\n";
      m << "teachers " << K << "\ntrain_count " << n << "\nclasses " << classes << "\n";
      m.precision(17);
      for (int k = 1; k <= K; ++k)
        m << "teacher k=" << k << " iteration=" << k << " loss="
          << losses[static_cast<std::size_t>(k - 1)] << "\n";
    }
    for (int k = 1; k <= K; ++k) {
      ad::Tensor t({n, classes});
      for (std::size_t i = 0; i < t.size(); ++i)
        t[i] = std::normal_distribution<double>(0.0, 1.0)(rng);
      io::write_arr(dir / ("teacher_" + std::to_string(k) + ".arr"), t);
      arrays.push_back(std::move(t));
    }
    auto bank = MemoryBank::load(dir, trial % 2 == 0);  // exercise both paths

    const double current =
        std::uniform_real_distribution<double>(0.0, 2.5)(rng);
    std::vector<int> ids;
    for (int i = 0; i < n; ++i) ids.push_back(i);
    auto targets = bank.ensemble_targets(current, ids);

    // brute force: mean over qualifying subset, strongest teacher fallback
    std::vector<int> q;
    for (int k = 1; k <= K; ++k)
      if (losses[static_cast<std::size_t>(k - 1)] <= current) q.push_back(k);
    if (q.empty()) q.push_back(K);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < classes; ++c) {
        double want = 0.0;
        for (int k : q)
          want += arrays[static_cast<std::size_t>(k - 1)]
                        [static_cast<std::size_t>(i) * classes + c];
        want /= static_cast<double>(q.size());
        CHECK(targets[static_cast<std::size_t>(i) * classes + c] ==
              doctest::Approx(want).epsilon(1e-12));
      }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("gating monotonicity and single-teacher linearity") {
  // lowering current_loss never enlarges the qualifying set
  const auto dir = std::filesystem::temp_directory_path() / "ekp_membank_mono";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream m(dir / "manifest");
    m << "format ekp-membank 1\nteachers 3\ntrain_count 2\nclasses 2\n";
    m << "teacher k=1 iteration=9 loss=1.5\n";
    m << "teacher k=2 iteration=5 loss=1.0\n";
    m << "teacher k=3 iteration=2 loss=0.5\n";
  }
  for (int k = 1; k <= 3; ++k) {
    ad::Tensor t({2, 2}, {1.0 * k, 2.0 * k, 3.0 * k, 4.0 * k});
    io::write_arr(dir / ("teacher_" + std::to_string(k) + ".arr"), t);
  }
  auto bank = MemoryBank::load(dir);

  std::size_t prev = 99;
  for (double loss : {2.0, 1.2, 0.7, 0.1}) {
    const auto q = bank.qualifying(loss);
    CHECK(q.size() <= prev);
    prev = q.size();
  }
  // all qualify at high loss
  CHECK(bank.qualifying(2.0) == std::vector<int>{1, 2, 3});
  // below all losses: strongest teacher fallback
  CHECK(bank.qualifying(0.1) == std::vector<int>{3});

  // single qualifying teacher -> targets equal that teacher's logits exactly
  std::vector<int> ids{0, 1};
  auto t = bank.ensemble_targets(0.6, ids);  // only k=3 qualifies
  CHECK(t[0] == 3.0);
  CHECK(t[3] == 12.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ema tracker starts at the first value and decays") {
  EmaTracker ema(0.9);
  CHECK_FALSE(ema.started());
  ema.update(2.0);
  CHECK(ema.value() == doctest::Approx(2.0));
  ema.update(1.0);
  CHECK(ema.value() == doctest::Approx(0.9 * 2.0 + 0.1 * 1.0));
}
