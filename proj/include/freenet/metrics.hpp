#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "freenet/common.hpp"

namespace freenet {

// K x K confusion counts over 1-based class ids; rows = reference, columns =
// prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes) : k_(num_classes) {
    if (num_classes < 1) throw ConfigError("ConfusionMatrix: need at least 1 class");
    counts_.assign(std::size_t(k_) * k_, 0);
  }

  int num_classes() const { return k_; }

  void add(int truth, int pred, std::uint64_t n = 1) {
    if (truth < 1 || truth > k_)
      throw ContractError("ConfusionMatrix: reference id " + std::to_string(truth) + " outside 1.." +
                          std::to_string(k_));
    if (pred < 1 || pred > k_)
      throw ContractError("ConfusionMatrix: prediction id " + std::to_string(pred) + " outside 1.." +
                          std::to_string(k_));
    counts_[std::size_t(truth - 1) * k_ + (pred - 1)] += n;
  }

  // Accumulate every position where mask == wanted (or every labeled
  // position when mask is null).
  void accumulate(const std::vector<std::uint16_t>& truth, const std::vector<std::uint16_t>& pred,
                  const std::vector<std::uint8_t>* mask = nullptr, std::uint8_t wanted = 2) {
    if (truth.size() != pred.size()) throw ShapeError("ConfusionMatrix: raster sizes differ");
    if (mask && mask->size() != truth.size()) throw ShapeError("ConfusionMatrix: mask size differs");
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (mask) {
        if ((*mask)[i] != wanted) continue;
      } else if (truth[i] == 0) {
        continue;
      }
      add(truth[i], pred[i]);
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ShapeError("ConfusionMatrix::merge: class counts differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t count(int truth, int pred) const { return counts_[std::size_t(truth - 1) * k_ + (pred - 1)]; }
  std::uint64_t row_total(int truth) const {
    std::uint64_t n = 0;
    for (int p = 1; p <= k_; ++p) n += count(truth, p);
    return n;
  }
  std::uint64_t col_total(int pred) const {
    std::uint64_t n = 0;
    for (int t = 1; t <= k_; ++t) n += count(t, pred);
    return n;
  }
  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto c : counts_) n += c;
    return n;
  }
  std::uint64_t diagonal() const {
    std::uint64_t n = 0;
    for (int t = 1; t <= k_; ++t) n += count(t, t);
    return n;
  }

  double overall_accuracy() const {
    const std::uint64_t n = total();
    if (n == 0) throw DomainError("ConfusionMatrix: no samples accumulated");
    return double(diagonal()) / double(n);
  }

  // Per-class recall; classes with no reference samples yield NaN and are
  // excluded from the average (see warnings()).
  std::vector<double> per_class_accuracy() const {
    std::vector<double> acc(k_, std::numeric_limits<double>::quiet_NaN());
    for (int t = 1; t <= k_; ++t) {
      const std::uint64_t row = row_total(t);
      if (row > 0) acc[t - 1] = double(count(t, t)) / double(row);
    }
    return acc;
  }

  double average_accuracy() const {
    if (total() == 0) throw DomainError("ConfusionMatrix: no samples accumulated");
    double sum = 0;
    int supported = 0;
    for (double a : per_class_accuracy()) {
      if (!std::isnan(a)) {
        sum += a;
        ++supported;
      }
    }
    if (supported == 0) throw DomainError("ConfusionMatrix: no class has reference samples");
    return sum / supported;
  }

  // Cohen's kappa: (p_o - p_e) / (1 - p_e).  When expected agreement is 1
  // (all mass in one row+column cell pair), the statistic degenerates; we
  // define it as 1 for perfect observed agreement, else 0.
  double kappa() const {
    const std::uint64_t n = total();
    if (n == 0) throw DomainError("ConfusionMatrix: no samples accumulated");
    const double po = double(diagonal()) / double(n);
    long double pe = 0;
    for (int k = 1; k <= k_; ++k)
      pe += (long double)(row_total(k)) * (long double)(col_total(k));
    pe /= (long double)(n) * (long double)(n);
    if (pe >= 1.0L) return po >= 1.0 ? 1.0 : 0.0;
    return double((po - pe) / (1.0L - pe));
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> out;
    for (int t = 1; t <= k_; ++t)
      if (row_total(t) == 0)
        out.push_back("class " + std::to_string(t) + " has no reference samples; excluded from average accuracy");
    return out;
  }

 private:
  int k_;
  std::vector<std::uint64_t> counts_;
};

// Human-readable metrics table.
inline void write_report(std::ostream& os, const ConfusionMatrix& cm,
                         const std::vector<std::string>& class_names = {}) {
  const auto acc = cm.per_class_accuracy();
  os << std::left << std::setw(6) << "class" << std::setw(24) << "name" << std::setw(12) << "samples"
     << "accuracy\n";
  for (int k = 1; k <= cm.num_classes(); ++k) {
    std::string name = k <= int(class_names.size()) ? class_names[k - 1] : ("class" + std::to_string(k));
    os << std::left << std::setw(6) << k << std::setw(24) << name << std::setw(12) << cm.row_total(k);
    if (std::isnan(acc[k - 1]))
      os << "n/a\n";
    else
      os << std::fixed << std::setprecision(4) << acc[k - 1] << '\n';
    os.unsetf(std::ios_base::floatfield);
  }
  os << std::fixed << std::setprecision(4);
  os << "overall_accuracy " << cm.overall_accuracy() << '\n';
  os << "average_accuracy " << cm.average_accuracy() << '\n';
  os << "kappa " << cm.kappa() << '\n';
  os.unsetf(std::ios_base::floatfield);
  for (const auto& w : cm.warnings()) os << "warning: " << w << '\n';
}

// Machine-readable CSV: one row per class, then the three summary rows.
inline void write_csv(std::ostream& os, const ConfusionMatrix& cm,
                      const std::vector<std::string>& class_names = {}) {
  const auto acc = cm.per_class_accuracy();
  os << "metric,class,name,samples,value\n";
  os << std::setprecision(10);
  for (int k = 1; k <= cm.num_classes(); ++k) {
    std::string name = k <= int(class_names.size()) ? class_names[k - 1] : ("class" + std::to_string(k));
    os << "class_accuracy," << k << ',' << name << ',' << cm.row_total(k) << ',';
    if (std::isnan(acc[k - 1]))
      os << "nan\n";
    else
      os << acc[k - 1] << '\n';
  }
  os << "overall_accuracy,,," << cm.total() << ',' << cm.overall_accuracy() << '\n';
  os << "average_accuracy,,," << cm.total() << ',' << cm.average_accuracy() << '\n';
  os << "kappa,,," << cm.total() << ',' << cm.kappa() << '\n';
}

}  // namespace freenet
