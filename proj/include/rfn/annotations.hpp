#pragma once

// ICDAR-style line annotations: `x1,y1,x2,y2,x3,y3,x4,y4,transcription` with
// integer pixel coordinates, clockwise corners, one instance per line. The
// transcription "###" marks an ignore region.

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rfn/geometry.hpp"

namespace rfn {

struct Annotation {
  QuadBox quad;
  std::string transcription;
  bool ignore = false;  // true iff transcription == "###"
};

inline Annotation make_annotation(const QuadBox& quad, std::string transcription) {
  if (transcription.empty())
    throw std::invalid_argument("annotation: transcription must be non-empty");
  Annotation a;
  a.quad = quad;
  a.ignore = transcription == "###";
  a.transcription = std::move(transcription);
  return a;
}

inline void write_annotations(const std::vector<Annotation>& annos, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_annotations: cannot open " + path);
  for (const auto& a : annos) {
    for (int k = 0; k < 4; ++k)
      out << static_cast<long>(std::lround(a.quad[k].x)) << ','
          << static_cast<long>(std::lround(a.quad[k].y)) << ',';
    out << a.transcription << '\n';
  }
  if (!out) throw std::runtime_error("write_annotations: write failed for " + path);
}

inline std::vector<Annotation> read_annotations(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_annotations: cannot open " + path);
  std::vector<Annotation> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    // first 8 comma-separated fields are numeric; the remainder (which may
    // itself contain commas) is the transcription
    double coords[8];
    size_t pos = 0;
    for (int f = 0; f < 8; ++f) {
      size_t comma = line.find(',', pos);
      if (comma == std::string::npos)
        throw std::runtime_error("read_annotations: malformed line " + std::to_string(line_no) +
                                 " in " + path + " (expected 8 leading numeric fields)");
      std::string field = line.substr(pos, comma - pos);
      try {
        size_t used = 0;
        coords[f] = std::stod(field, &used);
        if (used != field.size()) throw std::invalid_argument(field);
      } catch (const std::exception&) {
        throw std::runtime_error("read_annotations: malformed line " + std::to_string(line_no) +
                                 " in " + path + " (non-numeric field '" + field + "')");
      }
      pos = comma + 1;
    }
    std::string transcription = line.substr(pos);
    if (transcription.empty())
      throw std::runtime_error("read_annotations: malformed line " + std::to_string(line_no) +
                               " in " + path + " (empty transcription)");
    QuadBox q;
    for (int k = 0; k < 4; ++k) q[k] = Point{coords[2 * k], coords[2 * k + 1]};
    out.push_back(make_annotation(q, std::move(transcription)));
  }
  return out;
}

}  // namespace rfn
