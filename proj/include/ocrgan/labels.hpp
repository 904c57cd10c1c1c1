#pragma once

#include <string>
#include <string_view>

#include "ocrgan/errors.hpp"

namespace ocrgan {

enum class Label { normal, abnormal, unknown };

inline std::string_view to_string(Label l) {
  switch (l) {
    case Label::normal: return "normal";
    case Label::abnormal: return "abnormal";
    case Label::unknown: break;
  }
  return "unknown";
}

inline Label parse_label(std::string_view s) {
  if (s == "normal") return Label::normal;
  if (s == "abnormal") return Label::abnormal;
  if (s == "unknown") return Label::unknown;
  throw std::invalid_argument("unknown label '" + std::string(s) + "'");
}

}  // namespace ocrgan
