#pragma once

// CSV helpers shared by every module that writes tables. Numbers are written
// with 17 significant digits so files round-trip bit-exactly.

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "smot/autodiff.hpp"

namespace smot::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string format_double(double v);

class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);

  CsvWriter& cell(double v);
  CsvWriter& cell(std::size_t v);
  CsvWriter& cell(const std::string& v);
  void end_row();

 private:
  std::ofstream os_;
  std::filesystem::path path_;
  bool row_started_ = false;
};

// Header "x_1,...,x_d"; one row per sample.
void write_samples_csv(const std::filesystem::path& path, const ad::Tensor& samples);
ad::Tensor read_samples_csv(const std::filesystem::path& path);

std::vector<std::string> numbered_columns(const std::string& prefix, std::size_t count);

}  // namespace smot::io
