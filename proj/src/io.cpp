#include "smot/io.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace smot::io {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

CsvWriter::CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
    : os_(path), path_(path) {
  if (!os_) throw IoError("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < header.size(); ++i) os_ << (i ? "," : "") << header[i];
  os_ << '\n';
}

CsvWriter& CsvWriter::cell(const std::string& v) {
  if (row_started_) os_ << ',';
  os_ << v;
  row_started_ = true;
  return *this;
}

CsvWriter& CsvWriter::cell(double v) { return cell(format_double(v)); }
CsvWriter& CsvWriter::cell(std::size_t v) { return cell(std::to_string(v)); }

void CsvWriter::end_row() {
  os_ << '\n';
  row_started_ = false;
  if (!os_) throw IoError("write failed on " + path_.string());
}

std::vector<std::string> numbered_columns(const std::string& prefix, std::size_t count) {
  std::vector<std::string> out;
  for (std::size_t i = 1; i <= count; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

void write_samples_csv(const std::filesystem::path& path, const ad::Tensor& samples) {
  CsvWriter w(path, numbered_columns("x_", samples.cols()));
  for (std::size_t r = 0; r < samples.rows(); ++r) {
    for (std::size_t c = 0; c < samples.cols(); ++c) w.cell(samples(r, c));
    w.end_row();
  }
}

ad::Tensor read_samples_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw IoError(path.string() + ": empty file");
  const std::size_t cols = std::count(line.begin(), line.end(), ',') + 1;
  std::vector<double> data;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::size_t n = 0;
    while (std::getline(ss, field, ',')) {
      double v = 0.0;
      const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
      if (res.ec != std::errc()) throw IoError(path.string() + ": bad number '" + field + "'");
      data.push_back(v);
      ++n;
    }
    if (n != cols) throw IoError(path.string() + ": row " + std::to_string(rows + 1) + " has wrong column count");
    ++rows;
  }
  if (rows == 0) throw IoError(path.string() + ": no samples");
  return ad::Tensor(rows, cols, std::move(data));
}

}  // namespace smot::io
