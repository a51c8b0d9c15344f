#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace mzs {

inline constexpr std::array<std::string_view, 12> kKnownHeaders = {
    "impression", "findings", "lung parenchyma", "airways",    "pleura",     "mediastinum",
    "heart",      "bones",    "upper abdomen",   "technique", "comparison", "indication",
};

inline constexpr std::array<std::string_view, 3> kLungSectionHeaders = {"lung parenchyma", "airways", "pleura"};

struct ReportSection {
  std::string header;       // normalized, e.g. "lung parenchyma"
  std::string header_line;  // raw line as written, e.g. "Lung Parenchyma:"
  std::string body;         // lines up to the next header, whitespace-trimmed
  std::size_t begin = 0;    // byte offset of the header line
  std::size_t end = 0;      // byte offset one past the body
};

struct ReportSections {
  std::string preamble;  // text before the first header, trimmed
  std::size_t preamble_end = 0;
  std::vector<ReportSection> sections;  // document order, non-overlapping

  const ReportSection* find(std::string_view header) const {
    for (const auto& s : sections)
      if (s.header == header) return &s;
    return nullptr;
  }
};

namespace detail {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace detail

// Lowercase, trim, drop one trailing colon, trim again, collapse inner
// whitespace runs to a single space. "  PLEURA :" -> "pleura".
inline std::string normalize_header(std::string_view line) {
  std::string_view s = detail::trim(line);
  if (!s.empty() && s.back() == ':') s.remove_suffix(1);
  s = detail::trim(s);
  std::string out;
  bool in_space = false;
  for (char c : s) {
    if (detail::is_space(c)) {
      in_space = true;
      continue;
    }
    if (in_space && !out.empty()) out.push_back(' ');
    in_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

inline bool is_known_header(std::string_view normalized) {
  return std::find(kKnownHeaders.begin(), kKnownHeaders.end(), normalized) != kKnownHeaders.end();
}

inline ReportSections parse_report(std::string_view text) {
  ReportSections out;
  std::size_t body_start = 0;
  ReportSection* open = nullptr;
  auto close_open = [&](std::size_t at) {
    const std::string_view body = detail::trim(text.substr(body_start, at - body_start));
    if (open) {
      open->body = std::string(body);
      open->end = at;
    } else {
      out.preamble = std::string(body);
      out.preamble_end = at;
    }
  };

  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    const std::size_t next = eol == std::string_view::npos ? text.size() : eol + 1;
    if (eol == std::string_view::npos) eol = text.size();
    const std::string_view line = text.substr(pos, eol - pos);
    const std::string norm = normalize_header(line);
    if (is_known_header(norm)) {
      close_open(pos);
      out.sections.push_back(ReportSection{norm, std::string(detail::trim(line)), {}, pos, 0});
      open = &out.sections.back();
      body_start = next;
    }
    pos = next;
  }
  close_open(text.size());
  if (open) open->end = text.size();
  return out;
}

enum class TextMode { impression, lung_sections };

struct ExtractedText {
  std::string text;
  bool missing = false;  // true when the requested sections are absent or empty
};

// impression: bodies of "impression" sections; lung_sections: bodies of
// lung parenchyma / airways / pleura in document order. Joined by one space.
inline ExtractedText extract_text(const ReportSections& sections, TextMode mode) {
  ExtractedText out;
  for (const auto& s : sections.sections) {
    const bool wanted =
        mode == TextMode::impression
            ? s.header == "impression"
            : std::find(kLungSectionHeaders.begin(), kLungSectionHeaders.end(), s.header) != kLungSectionHeaders.end();
    if (!wanted || s.body.empty()) continue;
    if (!out.text.empty()) out.text.push_back(' ');
    out.text += s.body;
  }
  out.missing = out.text.empty();
  return out;
}

inline const char* to_string(TextMode m) { return m == TextMode::impression ? "impression" : "lung_sections"; }

}  // namespace mzs
