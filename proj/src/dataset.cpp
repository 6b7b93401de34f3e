// SPDX-License-Identifier: Apache-2.0
#include "dataset.hpp"

#include "rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace dfkd {

namespace fs = std::filesystem;

Tensor LabeledImages::gather(const std::vector<std::size_t> &idx) const {
  require(images.rank() == 4, "LabeledImages: images must be [N,C,H,W]");
  Shape s = images.shape();
  const std::size_t inner = images.numel() / s[0];
  s[0] = idx.size();
  Tensor out(s);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] < size(), "LabeledImages::gather: index out of range");
    std::copy_n(images.data() + idx[i] * inner, inner, out.data() + i * inner);
  }
  return out;
}

std::vector<int>
LabeledImages::gather_labels(const std::vector<std::size_t> &idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (auto i : idx)
    out.push_back(labels.at(i));
  return out;
}

std::vector<std::size_t> LabeledImages::class_counts() const {
  std::vector<std::size_t> c(num_classes, 0);
  for (int y : labels)
    ++c.at(static_cast<std::size_t>(y));
  return c;
}

// ---------------------------------------------------------------- shapes

namespace {

struct Style {
  double amp_lo, amp_hi;
  double bg_lo, bg_hi;
  double thick_lo, thick_hi;
  double noise;
  double gradient; // max background slope per pixel
};

Style style_for(const std::string &domain) {
  if (domain == "photo")
    return {0.9, 1.3, -0.6, -0.4, 1.6, 2.4, 0.15, 0.02};
  if (domain == "sketch")
    return {0.35, 0.6, -0.05, 0.05, 0.8, 1.2, 0.04, 0.0};
  throw ConfigError("unknown shapes domain '" + domain +
                    "' (expected photo|sketch|mixed)");
}

double seg_dist(double px, double py, double ax, double ay, double bx,
                double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

// Distance from pixel centre to the class's stroke geometry.
double shape_dist(int cls, double px, double py, double cx, double cy,
                  double r) {
  const double d = r * std::numbers::sqrt2 / 2;
  switch (cls) {
  case 0: // horizontal bar
    return seg_dist(px, py, cx - r, cy, cx + r, cy);
  case 1: // vertical bar
    return seg_dist(px, py, cx, cy - r, cx, cy + r);
  case 2: // ring
    return std::fabs(std::hypot(px - cx, py - cy) - r * 0.8);
  case 3: // plus
    return std::min(seg_dist(px, py, cx - r, cy, cx + r, cy),
                    seg_dist(px, py, cx, cy - r, cx, cy + r));
  case 4: // main diagonal
    return seg_dist(px, py, cx - d, cy - d, cx + d, cy + d);
  case 5: // anti diagonal
    return seg_dist(px, py, cx - d, cy + d, cx + d, cy - d);
  case 6: { // square outline
    const double h = r * 0.75;
    return std::min({seg_dist(px, py, cx - h, cy - h, cx + h, cy - h),
                     seg_dist(px, py, cx - h, cy + h, cx + h, cy + h),
                     seg_dist(px, py, cx - h, cy - h, cx - h, cy + h),
                     seg_dist(px, py, cx + h, cy - h, cx + h, cy + h)});
  }
  case 7: // X
    return std::min(seg_dist(px, py, cx - d, cy - d, cx + d, cy + d),
                    seg_dist(px, py, cx - d, cy + d, cx + d, cy - d));
  case 8: // filled disk
    return std::max(0.0, std::hypot(px - cx, py - cy) - r * 0.55);
  default: // T shape
    return std::min(seg_dist(px, py, cx - r, cy - r, cx + r, cy - r),
                    seg_dist(px, py, cx, cy - r, cx, cy + r));
  }
}

} // namespace

LabeledImages make_shapes(const ShapesSpec &spec) {
  if (spec.num_classes == 0 || spec.num_classes > kMaxShapeClasses)
    throw ConfigError("shapes: num_classes must be in [1," +
                      std::to_string(kMaxShapeClasses) + "]");
  if (spec.image_size < 8)
    throw ConfigError("shapes: image_size must be >= 8");
  if (spec.per_class == 0)
    throw ConfigError("shapes: per_class must be positive");
  const bool mixed = spec.domain == "mixed";
  const Style photo = style_for("photo"), sketch = style_for("sketch");
  const Style fixed = mixed ? photo : style_for(spec.domain);
  const std::size_t s = spec.image_size;
  const std::size_t n = spec.num_classes * spec.per_class;
  LabeledImages out;
  out.num_classes = spec.num_classes;
  out.images = Tensor({n, 1, s, s});
  out.labels.resize(n);
  Rng rng(spec.seed);
  const double side = static_cast<double>(s);
  const double half = side / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    // Interleave classes so any prefix is balanced.
    const int cls = static_cast<int>(i % spec.num_classes);
    out.labels[i] = cls;
    const Style &st = mixed && rng.uniform() < 0.5 ? sketch : fixed;
    const double cx = half + rng.uniform(-side / 8.0, side / 8.0);
    const double cy = half + rng.uniform(-side / 8.0, side / 8.0);
    const double r = rng.uniform(side * 0.22, side * 0.32);
    const double thick = rng.uniform(st.thick_lo, st.thick_hi);
    const double amp = rng.uniform(st.amp_lo, st.amp_hi);
    const double bg = rng.uniform(st.bg_lo, st.bg_hi);
    const double gx = rng.uniform(-st.gradient, st.gradient);
    const double gy = rng.uniform(-st.gradient, st.gradient);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        const double dist = shape_dist(cls, px, py, cx, cy, r);
        const double ink = std::clamp(thick / 2.0 + 0.5 - dist, 0.0, 1.0);
        out.images[(i * s + y) * s + x] = bg + gx * (px - half) +
                                           gy * (py - half) + amp * ink +
                                           st.noise * rng.normal();
      }
  }
  return out;
}

LabeledImages make_uniform_noise(std::size_t count, std::size_t channels,
                                 std::size_t size, std::uint64_t seed) {
  LabeledImages out;
  out.num_classes = 1;
  out.images = Tensor({count, channels, size, size});
  Rng rng(seed);
  for (auto &v : out.images.vec())
    v = rng.uniform(-1.0, 1.0);
  out.labels.assign(count, 0);
  return out;
}

// ------------------------------------------------------------ image files

void write_pfm(const fs::path &path, const Tensor &image) {
  Shape s = image.shape();
  if (s.size() == 2)
    s.insert(s.begin(), 1);
  require(s.size() == 3 && (s[0] == 1 || s[0] == 3),
          "write_pfm: expected [1|3,H,W], got " + shape_str(image.shape()));
  const std::size_t c = s[0], h = s[1], w = s[2];
  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw IoError("cannot open " + path.string() + " for writing");
  f << (c == 1 ? "Pf" : "PF") << '\n' << w << ' ' << h << "\n-1.0\n";
  std::vector<float> row(w * c);
  // PFM stores rows bottom to top, channels interleaved.
  for (std::size_t y = h; y-- > 0;) {
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        row[x * c + ch] = static_cast<float>(image[(ch * h + y) * w + x]);
    f.write(reinterpret_cast<const char *>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!f)
    throw IoError("write failed: " + path.string());
}

Tensor read_pfm(const fs::path &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw IoError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0;
  double scale = 0.0;
  f >> magic >> w >> h >> scale;
  f.get();
  if (!f || (magic != "Pf" && magic != "PF") || w == 0 || h == 0)
    throw IoError("malformed PFM header in " + path.string());
  if (scale > 0)
    throw IoError("big-endian PFM not supported: " + path.string());
  const std::size_t c = magic == "Pf" ? 1 : 3;
  Tensor out({c, h, w});
  std::vector<float> row(w * c);
  for (std::size_t y = h; y-- > 0;) {
    f.read(reinterpret_cast<char *>(row.data()),
           static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!f)
      throw IoError("truncated PFM: " + path.string());
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch)
        out[(ch * h + y) * w + x] = row[x * c + ch];
  }
  return out;
}

void write_pgm(const fs::path &path, const Tensor &image, double lo,
               double hi) {
  const Shape &s = image.shape();
  require((s.size() == 2) || (s.size() == 3 && s[0] == 1),
          "write_pgm: expected [H,W] or [1,H,W]");
  require(hi > lo, "write_pgm: empty value window");
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw IoError("cannot open " + path.string() + " for writing");
  f << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> px(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double v = std::clamp((image[i] - lo) / (hi - lo), 0.0, 1.0);
    px[i] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  f.write(reinterpret_cast<const char *>(px.data()),
          static_cast<std::streamsize>(px.size()));
  if (!f)
    throw IoError("write failed: " + path.string());
}

// --------------------------------------------------------------- manifest

namespace {
constexpr const char *kManifestName = "manifest.tsv";
constexpr const char *kManifestMagic = "# dfkd-manifest v1";

std::string format_confidence(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9f", v);
  return buf;
}
} // namespace

std::vector<std::size_t> Manifest::class_counts(std::size_t num_classes) const {
  std::vector<std::size_t> c(num_classes, 0);
  for (const auto &r : records) {
    require(r.label >= 0 && static_cast<std::size_t>(r.label) < num_classes,
            "manifest: label " + std::to_string(r.label) + " out of range");
    ++c[static_cast<std::size_t>(r.label)];
  }
  return c;
}

void write_manifest(const fs::path &dir, const Manifest &m) {
  std::ostringstream os;
  os << kManifestMagic << '\n';
  os << "# config_hash=" << m.config_hash
     << " status=" << (m.valid ? "valid" : "invalid") << '\n';
  os << "# columns: path label harvest_t round teacher_confidence "
        "lca_applied seed\n";
  int max_label = -1;
  for (const auto &r : m.records) {
    os << r.path << '\t' << r.label << '\t' << r.harvest_t << '\t' << r.round
       << '\t' << format_confidence(r.teacher_confidence) << '\t'
       << (r.lca_applied ? 1 : 0) << '\t' << r.seed << '\n';
    max_label = std::max(max_label, r.label);
  }
  os << "# class_counts:";
  const auto counts = m.class_counts(static_cast<std::size_t>(max_label + 1));
  for (std::size_t c = 0; c < counts.size(); ++c)
    os << ' ' << c << '=' << counts[c];
  os << '\n';

  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path tmp = dir / (std::string(kManifestName) + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f)
      throw IoError("cannot write manifest in " + dir.string());
    const std::string text = os.str();
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f)
      throw IoError("manifest write failed in " + dir.string());
  }
  fs::rename(tmp, dir / kManifestName, ec);
  if (ec)
    throw IoError("cannot finalise manifest in " + dir.string() + ": " +
                  ec.message());
}

Manifest read_manifest(const fs::path &dir) {
  std::ifstream f(dir / kManifestName);
  if (!f)
    throw IoError("no manifest in " + dir.string());
  Manifest m;
  std::string line;
  if (!std::getline(f, line) || line != kManifestMagic)
    throw IoError("not a dfkd manifest: " + (dir / kManifestName).string());
  while (std::getline(f, line)) {
    if (line.empty())
      continue;
    if (line[0] == '#') {
      if (line.rfind("# config_hash=", 0) == 0) {
        std::istringstream is(line.substr(2));
        std::string kv;
        while (is >> kv) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos)
            continue;
          const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
          if (k == "config_hash")
            m.config_hash = v;
          else if (k == "status")
            m.valid = v == "valid";
        }
      }
      continue;
    }
    std::istringstream is(line);
    ManifestRecord r;
    std::string conf;
    int lca = 0;
    std::getline(is, r.path, '\t');
    is >> r.label >> r.harvest_t >> r.round >> conf >> lca >> r.seed;
    if (!is && !is.eof())
      throw IoError("malformed manifest line: " + line);
    r.teacher_confidence = std::stod(conf);
    r.lca_applied = lca != 0;
    m.records.push_back(std::move(r));
  }
  return m;
}

void invalidate_manifest(const fs::path &dir, const std::string &config_hash) {
  Manifest m;
  try {
    m = read_manifest(dir);
  } catch (const IoError &) {
    m.config_hash = config_hash;
  }
  m.valid = false;
  write_manifest(dir, m);
}

void save_labeled_images(const fs::path &dir, const LabeledImages &data,
                         const std::string &config_hash) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  if (ec)
    throw IoError("cannot create " + (dir / "images").string());
  Manifest m;
  m.config_hash = config_hash;
  const std::size_t inner = data.images.numel() / std::max<std::size_t>(1, data.size());
  Shape item(data.images.shape().begin() + 1, data.images.shape().end());
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.pfm", i);
    Tensor img(item, std::vector<double>(data.images.data() + i * inner,
                                         data.images.data() + (i + 1) * inner));
    write_pfm(dir / name, img);
    ManifestRecord r;
    r.path = name;
    r.label = data.labels[i];
    m.records.push_back(r);
  }
  write_manifest(dir, m);
}

LabeledImages load_labeled_images(const fs::path &dir,
                                  std::size_t num_classes) {
  const Manifest m = read_manifest(dir);
  if (!m.valid)
    throw IoError("manifest in " + dir.string() + " is marked invalid");
  if (m.records.empty())
    throw ConfigError("dataset in " + dir.string() + " is empty");
  std::vector<Tensor> imgs;
  LabeledImages out;
  out.num_classes = num_classes;
  for (const auto &r : m.records) {
    if (r.label < 0 || static_cast<std::size_t>(r.label) >= num_classes)
      throw ConfigError("dataset label " + std::to_string(r.label) +
                        " outside the configured class space");
    Tensor t = read_pfm(dir / r.path);
    Shape s = t.shape();
    s.insert(s.begin(), 1);
    imgs.push_back(t.reshaped(s));
    out.labels.push_back(r.label);
  }
  out.images = concat0(imgs);
  return out;
}

} // namespace dfkd
