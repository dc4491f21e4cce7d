#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>

#include "mixsize/error.hpp"

namespace mixsize {

inline constexpr const char* kTrainMetricsSchema = "mixsize.train-steps.v1";
inline constexpr const char* kEpochMetricsSchema = "mixsize.train-epochs.v1";
inline constexpr const char* kSweepSchema = "mixsize.eval-sweep.v1";
inline constexpr const char* kGradientSchema = "mixsize.gradient-stats.v1";

/// One optimizer step.
struct MetricsRecord {
  std::int64_t step = 0;
  int epoch = 0;
  int size = 0;
  int batch = 0;
  int duplicates = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double grad_norm = 0.0;      // g_t
  double smoothed_norm = 0.0;  // g_bar_t
  double multiplier = 1.0;
  double wall_ms = 0.0;

  static const char* header() {
    return "step,epoch,size,batch,duplicates,lr,train_loss,grad_norm,smoothed_norm,multiplier,wall_ms";
  }

  void write(std::ostream& os) const {
    os << step << ',' << epoch << ',' << size << ',' << batch << ',' << duplicates << ',' << lr << ','
       << train_loss << ',' << grad_norm << ',' << smoothed_norm << ',' << multiplier << ',' << wall_ms << '\n';
  }
};

/// End-of-epoch summary.
struct EpochRecord {
  int epoch = 0;
  std::int64_t steps = 0;        // cumulative optimizer steps
  std::int64_t epoch_steps = 0;  // steps in this epoch
  double train_loss = 0.0;
  double test_top1 = -1.0;  // -1 when not evaluated

  static const char* header() { return "epoch,steps,epoch_steps,train_loss,test_top1"; }

  void write(std::ostream& os) const {
    os << epoch << ',' << steps << ',' << epoch_steps << ',' << train_loss << ',' << test_top1 << '\n';
  }
};

/// CSV file whose first line is "# schema=<name>" followed by the header row.
class CsvFile {
 public:
  CsvFile(const std::filesystem::path& path, const char* schema, const char* header, int flush_every = 50)
      : out_(path), flush_every_(flush_every) {
    if (!out_) throw DataError("cannot write " + path.string());
    out_.precision(10);
    out_ << "# schema=" << schema << '\n' << header << '\n';
    out_.flush();
  }

  template <class Row>
  void append(const Row& row) {
    row.write(out_);
    if (++rows_ % flush_every_ == 0) out_.flush();
  }

  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
  int flush_every_;
  std::int64_t rows_ = 0;
};

}  // namespace mixsize
