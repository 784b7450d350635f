#pragma once

// SVG rendering of a layout: page border plus one translucent, class-colored
// rectangle with a text label per element.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "vtn/layout.hpp"

namespace vtn {

struct Palette {
  std::vector<std::string> class_names;

  std::string label(int cls) const {
    if (cls >= 0 && static_cast<std::size_t>(cls) < class_names.size()) {
      return class_names[static_cast<std::size_t>(cls)];
    }
    return "class " + std::to_string(cls);
  }

  // Golden-angle hue walk: neighbouring class ids land far apart on the wheel.
  static double hue(int cls) {
    const double h = std::fmod(static_cast<double>(cls) * 137.50776405, 360.0);
    return h < 0 ? h + 360.0 : h;
  }

  std::string color(int cls) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "hsl(%.1f,70%%,45%%)", hue(cls));
    return buf;
  }
};

inline std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string render_svg(const Layout& layout, const Palette& palette = {}) {
  const double pw = layout.page.width, ph = layout.page.height;
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << layout.page.width << "\" height=\""
     << layout.page.height << "\" viewBox=\"0 0 " << layout.page.width << ' ' << layout.page.height
     << "\">\n";
  os << "  <rect class=\"page\" x=\"0\" y=\"0\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"white\" stroke=\"black\" stroke-width=\"2\"/>\n";
  const double font = std::max(8.0, std::min(pw, ph) / 40.0);
  for (const auto& e : layout.elements) {
    const std::string c = palette.color(e.class_id);
    const double x = e.bbox.left() * pw, y = e.bbox.top() * ph;
    os << "  <rect class=\"element\" x=\"" << x << "\" y=\"" << y << "\" width=\"" << e.bbox.w * pw
       << "\" height=\"" << e.bbox.h * ph << "\" fill=\"" << c << "\" fill-opacity=\"0.35\" stroke=\"" << c
       << "\" stroke-width=\"1.5\"/>\n";
    os << "  <text x=\"" << x + 3 << "\" y=\"" << y + font << "\" font-family=\"sans-serif\" font-size=\""
       << font << "\" fill=\"" << c << "\">" << xml_escape(palette.label(e.class_id)) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace vtn
