#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>

#include "lot/error.hpp"
#include "lot/io.hpp"
#include "lot/landscape.hpp"

namespace lot {

namespace {

constexpr double kPanel = 220.0;
constexpr double kGap = 16.0;
constexpr double kTop = 48.0;
constexpr double kLeft = 80.0;
constexpr std::array<double, 6> kLevels{0.1, 0.25, 0.4, 0.55, 0.7, 0.85};

struct Rgb {
  unsigned char r, g, b;
};
constexpr Rgb kBlue{37, 99, 235};
constexpr Rgb kRed{220, 38, 38};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string hex(Rgb c) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", c.r, c.g, c.b);
  return buf;
}

// Panel-local pixel position of a data point.
struct Mapper {
  Bounds b;
  double ox, oy;

  double x(double v) const { return ox + (v - b.xmin) / (b.xmax - b.xmin) * kPanel; }
  double y(double v) const { return oy + kPanel - (v - b.ymin) / (b.ymax - b.ymin) * kPanel; }
};

// Marching squares over the lattice of cell centres; emits one path per level.
std::string contour_path(const DensityGrid& g, double level, const Mapper& m) {
  const int G = g.size;
  const double cw = g.cell_width();
  const double ch = g.cell_height();
  auto px = [&](double c) { return g.bounds.xmin + (c + 0.5) * cw; };
  auto py = [&](double r) { return g.bounds.ymin + (r + 0.5) * ch; };
  std::string d;
  auto seg = [&](double x0, double y0, double x1, double y1) {
    d += "M" + num(m.x(x0)) + " " + num(m.y(y0)) + "L" + num(m.x(x1)) + " " + num(m.y(y1));
  };
  for (int r = 0; r + 1 < G; ++r) {
    for (int c = 0; c + 1 < G; ++c) {
      const double v00 = g.at(r, c), v01 = g.at(r, c + 1), v11 = g.at(r + 1, c + 1), v10 = g.at(r + 1, c);
      const int idx = (v00 >= level ? 1 : 0) | (v01 >= level ? 2 : 0) | (v11 >= level ? 4 : 0) |
                      (v10 >= level ? 8 : 0);
      if (idx == 0 || idx == 15) continue;
      auto lerp = [&](double a, double b) { return (level - a) / (b - a); };
      // Edge crossings: bottom (r, c..c+1), right, top (r+1), left.
      const double bx = px(c + lerp(v00, v01)), by = py(r);
      const double rx = px(c + 1), ry = py(r + lerp(v01, v11));
      const double tx = px(c + lerp(v10, v11)), ty = py(r + 1);
      const double lx = px(c), ly = py(r + lerp(v00, v10));
      switch (idx) {
        case 1: case 14: seg(lx, ly, bx, by); break;
        case 2: case 13: seg(bx, by, rx, ry); break;
        case 3: case 12: seg(lx, ly, rx, ry); break;
        case 4: case 11: seg(rx, ry, tx, ty); break;
        case 6: case 9: seg(bx, by, tx, ty); break;
        case 7: case 8: seg(lx, ly, tx, ty); break;
        case 5: seg(lx, ly, tx, ty); seg(bx, by, rx, ry); break;
        case 10: seg(lx, ly, bx, by); seg(rx, ry, tx, ty); break;
        default: break;
      }
    }
  }
  return d;
}

void star(std::string& out, double cx, double cy, double r, const std::string& fill) {
  std::string pts;
  for (int i = 0; i < 10; ++i) {
    const double a = -M_PI / 2 + i * M_PI / 5;
    const double rr = i % 2 == 0 ? r : r * 0.45;
    pts += num(cx + rr * std::cos(a)) + "," + num(cy + rr * std::sin(a)) + " ";
  }
  out += "<polygon class=\"anchor correct\" points=\"" + pts + "\" fill=\"" + fill +
         "\" stroke=\"#111\" stroke-width=\"0.8\"/>\n";
}

void cross(std::string& out, double cx, double cy, double r) {
  out += "<path class=\"anchor incorrect\" d=\"M" + num(cx - r) + " " + num(cy - r) + "L" + num(cx + r) + " " +
         num(cy + r) + "M" + num(cx - r) + " " + num(cy + r) + "L" + num(cx + r) + " " + num(cy - r) +
         "\" stroke=\"#111\" stroke-width=\"1.5\" fill=\"none\"/>\n";
}

std::string bin_label(int b, int bins) {
  return std::to_string(100 * b / bins) + "-" + std::to_string(100 * (b + 1) / bins) + "% states";
}

}  // namespace

std::string render_landscape_svg(const LandscapeBundle& bundle, const std::string& title) {
  const double width = kLeft + bundle.bins * (kPanel + kGap);
  const double height = kTop + 2 * (kPanel + kGap) + 8;
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" +
                    num(height) + "\" viewBox=\"0 0 " + num(width) + " " + num(height) + "\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + num(width / 2) + "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" "
         "font-size=\"15\">" + escape_xml(title) + "</text>\n";
  for (int cls = 0; cls < 2; ++cls) {
    const Rgb color = cls == 0 ? kBlue : kRed;
    const double oy = kTop + cls * (kPanel + kGap);
    out += "<text x=\"8\" y=\"" + num(oy + kPanel / 2) + "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" +
           hex(color) + "\">" + (cls == 0 ? "correct" : "incorrect") + "</text>\n";
    for (int b = 0; b < bundle.bins; ++b) {
      const double ox = kLeft + b * (kPanel + kGap);
      const Mapper m{bundle.bounds, ox, oy};
      const auto cls_name = std::string(to_string(cls == 0 ? CorrectnessClass::correct : CorrectnessClass::incorrect));
      out += "<g class=\"panel\" data-bin=\"" + std::to_string(b) + "\" data-class=\"" + cls_name + "\">\n";
      out += "<rect x=\"" + num(ox) + "\" y=\"" + num(oy) + "\" width=\"" + num(kPanel) + "\" height=\"" +
             num(kPanel) + "\" fill=\"none\" stroke=\"#999\"/>\n";
      if (cls == 0) {
        out += "<text x=\"" + num(ox + kPanel / 2) + "\" y=\"" + num(oy - 4) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" + bin_label(b, bundle.bins) +
               "</text>\n";
      }
      const auto& grid = bundle.grids.size() > static_cast<std::size_t>(b)
                             ? bundle.grids[static_cast<std::size_t>(b)][static_cast<std::size_t>(cls)]
                             : std::optional<DensityGrid>{};
      if (!grid) {
        out += "<rect x=\"" + num(ox) + "\" y=\"" + num(oy) + "\" width=\"" + num(kPanel) + "\" height=\"" +
               num(kPanel) + "\" fill=\"" + hex(color) + "\" fill-opacity=\"0.06\"/>\n";
        out += "<text class=\"empty\" x=\"" + num(ox + kPanel / 2) + "\" y=\"" + num(oy + kPanel / 2) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" + hex(color) +
               "\">no " + cls_name + " states</text>\n";
      } else {
        const double peak = *std::max_element(grid->values.begin(), grid->values.end());
        for (std::size_t l = 0; l < kLevels.size(); ++l) {
          const auto d = contour_path(*grid, kLevels[l] * peak, m);
          if (d.empty()) continue;
          out += "<path d=\"" + d + "\" stroke=\"" + hex(color) + "\" stroke-opacity=\"" +
                 num(0.3 + 0.7 * static_cast<double>(l) / (kLevels.size() - 1)) +
                 "\" stroke-width=\"1.2\" fill=\"none\"/>\n";
        }
      }
      for (std::size_t j = 0; j < bundle.anchors.size(); ++j) {
        const double ax = m.x(bundle.anchors[j].x);
        const double ay = m.y(bundle.anchors[j].y);
        if (j == 0) {
          star(out, ax, ay, 7.0, "#facc15");
        } else {
          cross(out, ax, ay, 4.5);
        }
      }
      out += "</g>\n";
    }
  }
  out += "</svg>\n";
  return out;
}

void render_landscape_png(const LandscapeBundle& bundle, const std::filesystem::path& path) {
  int G = 0;
  for (const auto& row : bundle.grids) {
    for (const auto& g : row) {
      if (g) G = std::max(G, g->size);
    }
  }
  if (G == 0) G = 50;
  const int gap = 4;
  const int width = bundle.bins * (G + gap) + gap;
  const int height = 2 * (G + gap) + gap;
  std::vector<unsigned char> img(static_cast<std::size_t>(width * height * 3), 255);
  auto put = [&](int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    auto* p = &img[static_cast<std::size_t>((y * width + x) * 3)];
    p[0] = c.r;
    p[1] = c.g;
    p[2] = c.b;
  };
  for (int cls = 0; cls < 2; ++cls) {
    const Rgb color = cls == 0 ? kBlue : kRed;
    for (int b = 0; b < bundle.bins; ++b) {
      const int ox = gap + b * (G + gap);
      const int oy = gap + cls * (G + gap);
      const auto& grid = bundle.grids[static_cast<std::size_t>(b)][static_cast<std::size_t>(cls)];
      if (grid) {
        const double peak = *std::max_element(grid->values.begin(), grid->values.end());
        for (int r = 0; r < G; ++r) {
          for (int c = 0; c < G; ++c) {
            const int gr = r * grid->size / G;
            const int gc = c * grid->size / G;
            const double t = peak > 0.0 ? grid->at(gr, gc) / peak : 0.0;
            const Rgb px{static_cast<unsigned char>(255 - t * (255 - color.r)),
                         static_cast<unsigned char>(255 - t * (255 - color.g)),
                         static_cast<unsigned char>(255 - t * (255 - color.b))};
            put(ox + c, oy + G - 1 - r, px);
          }
        }
      }
      for (int i = 0; i < G; ++i) {
        put(ox + i, oy, {160, 160, 160});
        put(ox + i, oy + G - 1, {160, 160, 160});
        put(ox, oy + i, {160, 160, 160});
        put(ox + G - 1, oy + i, {160, 160, 160});
      }
      for (std::size_t j = 0; j < bundle.anchors.size(); ++j) {
        const auto& bd = bundle.bounds;
        const int ax = ox + static_cast<int>((bundle.anchors[j].x - bd.xmin) / (bd.xmax - bd.xmin) * (G - 1));
        const int ay = oy + G - 1 - static_cast<int>((bundle.anchors[j].y - bd.ymin) / (bd.ymax - bd.ymin) * (G - 1));
        for (int d = -2; d <= 2; ++d) {
          if (j == 0) {
            put(ax + d, ay, {0, 0, 0});
            put(ax, ay + d, {0, 0, 0});
          } else {
            put(ax + d, ay + d, {0, 0, 0});
            put(ax + d, ay - d, {0, 0, 0});
          }
        }
      }
    }
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(tmp.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("cannot write " + tmp.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("cannot encode " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) png_write_row(png, &img[static_cast<std::size_t>(y * width * 3)]);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  fp.reset();
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("cannot rename " + tmp.string() + ": " + ec.message());
}

std::string render_metrics_svg(const std::vector<BinMetrics>& rows, int bins) {
  constexpr double kW = 300.0;
  constexpr double kH = 180.0;
  const std::array<const char*, 3> names{"consistency", "uncertainty", "perplexity"};
  const double width = 3 * (kW + 40) + 20;
  const double height = kH + 90;
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" +
                    num(height) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t mi = 0; mi < names.size(); ++mi) {
    auto value = [&](const BinMetrics& r) {
      return mi == 0 ? r.consistency : mi == 1 ? r.uncertainty : r.perplexity;
    };
    double top = 0.0;
    for (const auto& r : rows) top = std::max(top, value(r));
    if (!(top > 0.0)) top = 1.0;
    const double ox = 40 + mi * (kW + 40);
    const double oy = 40;
    out += "<g class=\"chart\" data-metric=\"" + std::string(names[mi]) + "\">\n";
    out += "<text x=\"" + num(ox + kW / 2) + "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"13\">" + names[mi] + "</text>\n";
    out += "<path d=\"M" + num(ox) + " " + num(oy) + "V" + num(oy + kH) + "H" + num(ox + kW) +
           "\" stroke=\"#333\" fill=\"none\"/>\n";
    out += "<text x=\"" + num(ox - 4) + "\" y=\"" + num(oy + 4) + "\" text-anchor=\"end\" font-family=\"sans-serif\" "
           "font-size=\"9\">" + num(top) + "</text>\n";
    const double slot = kW / bins;
    for (const auto& r : rows) {
      const double bw = slot * 0.35;
      const double x = ox + r.bin * slot + slot * 0.1 + (r.correctness == CorrectnessClass::correct ? 0 : bw);
      const double h = value(r) / top * kH;
      out += "<rect class=\"bar " + std::string(to_string(r.correctness)) + "\" x=\"" + num(x) + "\" y=\"" +
             num(oy + kH - h) + "\" width=\"" + num(bw) + "\" height=\"" + num(h) + "\" fill=\"" +
             hex(r.correctness == CorrectnessClass::correct ? kBlue : kRed) + "\"/>\n";
    }
    for (int b = 0; b < bins; ++b) {
      out += "<text x=\"" + num(ox + (b + 0.5) * slot) + "\" y=\"" + num(oy + kH + 14) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"9\">" +
             std::to_string(100 * b / bins) + "-" + std::to_string(100 * (b + 1) / bins) + "%</text>\n";
    }
    out += "</g>\n";
  }
  out += "</svg>\n";
  return out;
}

LandscapeFiles render_landscape(const LandscapeBundle& bundle, const std::filesystem::path& dir,
                                const std::string& title) {
  if (bundle.grids.size() != static_cast<std::size_t>(bundle.bins)) throw ArgumentError("incomplete landscape bundle");
  std::error_code ec;
  std::filesystem::create_directories(dir / "grids", ec);
  if (ec) throw Error("cannot create " + (dir / "grids").string() + ": " + ec.message());
  LandscapeFiles files;
  files.svg = dir / "landscape.svg";
  write_file_atomic(files.svg, render_landscape_svg(bundle, title));
  files.png = dir / "landscape.png";
  render_landscape_png(bundle, files.png);
  for (int b = 0; b < bundle.bins; ++b) {
    for (int cls = 0; cls < 2; ++cls) {
      const auto& g = bundle.grids[static_cast<std::size_t>(b)][static_cast<std::size_t>(cls)];
      if (!g) continue;
      auto p = dir / "grids" /
               ("bin" + std::to_string(b) + "_" +
                std::string(to_string(cls == 0 ? CorrectnessClass::correct : CorrectnessClass::incorrect)) + ".grid");
      write_grid(p, *g);
      files.grids.push_back(std::move(p));
    }
  }
  return files;
}

}  // namespace lot
