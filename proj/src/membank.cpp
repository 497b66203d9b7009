#include "ekp/membank.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "ekp/errors.hpp"
#include "ekp/nnops.hpp"

namespace ekp::membank {

std::vector<int> select_teachers(const std::map<int, double>& interim_losses,
                                 double l_star, double l_0, int k_teachers) {
  if (interim_losses.empty()) throw NoTeachersError("no interim sub-networks recorded");
  if (k_teachers < 1) throw NoTeachersError("teacher count must be >= 1");
  std::vector<int> picks;
  for (int k = 1; k <= k_teachers; ++k) {
    const double target =
        (static_cast<double>(k_teachers - k) / k_teachers) * l_star +
        (static_cast<double>(k) / k_teachers) * l_0;
    int best_iter = interim_losses.begin()->first;
    double best_dist = std::abs(target - interim_losses.begin()->second);
    for (const auto& [iter, loss] : interim_losses) {
      const double d = std::abs(target - loss);
      // ties break toward the later iteration (the smaller network)
      if (d < best_dist || (d == best_dist && iter > best_iter)) {
        best_dist = d;
        best_iter = iter;
      }
    }
    picks.push_back(best_iter);
  }
  return picks;
}

std::span<const double> MemoryBank::teacher_logits(int k) const {
  const std::size_t idx = static_cast<std::size_t>(k - 1);
  if (k < 1 || k > teacher_count()) throw NoTeachersError("teacher index out of range");
  if (idx < mapped_.size() && mapped_[idx]) return mapped_[idx]->data();
  const auto& t = owned_[idx];
  return {t.data(), t.size()};
}

std::span<const double> MemoryBank::teacher_row(int k, int example_id) const {
  auto all = teacher_logits(k);
  if (example_id < 0 || example_id >= train_count_)
    throw CoverageError("memory bank does not cover example " + std::to_string(example_id));
  return all.subspan(static_cast<std::size_t>(example_id) * classes_,
                     static_cast<std::size_t>(classes_));
}

std::vector<int> MemoryBank::qualifying(double current_loss) const {
  std::vector<int> q;
  for (const auto& t : teachers_)
    if (t.teacher_loss <= current_loss) q.push_back(t.k);
  if (q.empty()) q.push_back(teacher_count());  // strongest teacher fallback
  return q;
}

ad::Tensor MemoryBank::ensemble_targets(double current_loss,
                                        std::span<const int> ids) const {
  const auto q = qualifying(current_loss);
  ad::Tensor out({static_cast<int>(ids.size()), classes_});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    double* dst = out.data() + i * static_cast<std::size_t>(classes_);
    for (int k : q) {
      const auto row = teacher_row(k, ids[i]);
      for (int c = 0; c < classes_; ++c) dst[c] += row[static_cast<std::size_t>(c)];
    }
    for (int c = 0; c < classes_; ++c) dst[c] /= static_cast<double>(q.size());
  }
  return out;
}

MemoryBank MemoryBank::build(const std::vector<net::PrunableNetwork>& teacher_nets,
                             const std::vector<int>& source_iterations,
                             const data::Dataset& train, int batch_size,
                             net::BatchNormMode bn_mode) {
  if (teacher_nets.empty()) throw NoTeachersError("no teacher networks given");
  if (teacher_nets.size() != source_iterations.size())
    throw NoTeachersError("teacher/iteration count mismatch");

  MemoryBank bank;
  bank.train_count_ = train.count();
  bank.classes_ = train.num_classes;

  std::vector<int> all_ids(static_cast<std::size_t>(train.count()));
  for (int i = 0; i < train.count(); ++i) all_ids[static_cast<std::size_t>(i)] = i;
  const auto batches = data::eval_batches(train, all_ids, batch_size);

  const int K = static_cast<int>(teacher_nets.size());
  for (int idx = 0; idx < K; ++idx) {
    ad::Tensor logits({train.count(), bank.classes_});
    for (std::size_t b = 0; b < batches.size(); ++b) {
      ad::Tensor out;
      try {
        out = teacher_nets[static_cast<std::size_t>(idx)].infer(batches[b].x, bn_mode);
      } catch (const Error& e) {
        throw NumericFailureError("teacher " + std::to_string(idx + 1) + " batch " +
                                  std::to_string(b) + ": " + e.what());
      }
      if (!out.all_finite())
        throw NumericFailureError("teacher " + std::to_string(idx + 1) +
                                  " produced non-finite logits in batch " +
                                  std::to_string(b));
      for (std::size_t r = 0; r < batches[b].ids.size(); ++r) {
        const double* src = out.data() + r * static_cast<std::size_t>(bank.classes_);
        double* dst = logits.data() + static_cast<std::size_t>(batches[b].ids[r]) *
                                          bank.classes_;
        std::copy(src, src + bank.classes_, dst);
      }
    }
    const double loss = ad::cross_entropy_value(logits, train.labels);
    // k is 1-based; teacher_nets arrive ordered k = 1..K
    bank.teachers_.push_back({idx + 1, source_iterations[static_cast<std::size_t>(idx)], loss});
    bank.owned_.push_back(std::move(logits));
  }
  bank.mapped_.assign(static_cast<std::size_t>(K), nullptr);

  for (int k = 1; k < K; ++k)
    if (bank.teachers_[static_cast<std::size_t>(k)].teacher_loss >
        bank.teachers_[static_cast<std::size_t>(k - 1)].teacher_loss + 1e-12)
      throw StructuralError("teacher losses must be non-increasing in k");
  return bank;
}

void MemoryBank::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream m(dir / "manifest");
  if (!m) throw IoError("cannot write membank manifest in " + dir.string());
  m << "format ekp-membank 1\n";
  m << "teachers " << teacher_count() << "\n";
  m << "train_count " << train_count_ << "\n";
  m << "classes " << classes_ << "\n";
  m.precision(17);
  for (const auto& t : teachers_)
    m << "teacher k=" << t.k << " iteration=" << t.source_iteration
      << " loss=" << t.teacher_loss << "\n";
  if (!m) throw IoError("short membank manifest write");
  for (const auto& t : teachers_) {
    ad::Tensor tmp({train_count_, classes_});
    const auto src = teacher_logits(t.k);
    std::copy(src.begin(), src.end(), tmp.data());
    io::write_arr(dir / ("teacher_" + std::to_string(t.k) + ".arr"), tmp);
  }
}

MemoryBank MemoryBank::load(const std::filesystem::path& dir, bool use_mmap) {
  std::ifstream m(dir / "manifest");
  if (!m) throw IoError("cannot read membank manifest in " + dir.string());
  std::string line;
  if (!std::getline(m, line) || line != "format ekp-membank 1")
    throw IoError("unrecognized membank format");
  MemoryBank bank;
  int teachers = 0;
  while (std::getline(m, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "teachers") ss >> teachers;
    else if (tag == "train_count") ss >> bank.train_count_;
    else if (tag == "classes") ss >> bank.classes_;
    else if (tag == "teacher") {
      TeacherInfo t;
      std::string tok;
      while (ss >> tok) {
        const auto eq = tok.find('=');
        const std::string key = tok.substr(0, eq);
        const std::string val = tok.substr(eq + 1);
        if (key == "k") t.k = std::stoi(val);
        else if (key == "iteration") t.source_iteration = std::stoi(val);
        else if (key == "loss") t.teacher_loss = std::stod(val);
      }
      bank.teachers_.push_back(t);
    }
  }
  if (static_cast<int>(bank.teachers_.size()) != teachers)
    throw IoError("membank manifest teacher count mismatch");

  for (const auto& t : bank.teachers_) {
    const auto path = dir / ("teacher_" + std::to_string(t.k) + ".arr");
    if (use_mmap) {
      bank.owned_.emplace_back();
      bank.mapped_.push_back(std::make_shared<io::MappedArray>(path));
      const auto& shape = bank.mapped_.back()->shape();
      if (shape.size() != 2 || shape[0] != bank.train_count_ || shape[1] != bank.classes_)
        throw IoError("teacher array shape mismatch: " + path.string());
    } else {
      io::MappedArray arr(path);
      ad::Tensor tmp({bank.train_count_, bank.classes_});
      std::copy(arr.data().begin(), arr.data().end(), tmp.data());
      bank.owned_.push_back(std::move(tmp));
      bank.mapped_.push_back(nullptr);
    }
  }
  return bank;
}

}  // namespace ekp::membank
