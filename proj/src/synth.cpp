#include "partseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace partseg::synth {

namespace fs = std::filesystem;
using nlohmann::json;

const char* viewpoint_name(Viewpoint v) {
  switch (v) {
    case Viewpoint::kLeft: return "left";
    case Viewpoint::kRight: return "right";
    case Viewpoint::kFront: return "front";
    case Viewpoint::kBack: return "back";
    case Viewpoint::kFrontLeft: return "front-left";
    case Viewpoint::kFrontRight: return "front-right";
    case Viewpoint::kBackLeft: return "back-left";
    case Viewpoint::kBackRight: return "back-right";
  }
  return "?";
}

Viewpoint viewpoint_from_name(const std::string& name) {
  for (int i = 0; i < kNumViewpoints; ++i)
    if (name == viewpoint_name(static_cast<Viewpoint>(i))) return static_cast<Viewpoint>(i);
  throw std::invalid_argument("unknown viewpoint '" + name + "'");
}

std::set<ClassId> visible_classes(Viewpoint v) {
  switch (v) {
    case Viewpoint::kLeft:
      return {kForeground, kWheel, kLeftFrontWindow, kLeftFrontDoor, kLeftBackWindow, kLeftBackDoor};
    case Viewpoint::kRight:
      return {kForeground, kWheel, kRightFrontWindow, kRightFrontDoor, kRightBackWindow, kRightBackDoor};
    case Viewpoint::kFront:
      return {kForeground, kWheel, kPlate, kFrontWindow};
    case Viewpoint::kBack:
      return {kForeground, kWheel, kPlate, kBackWindow};
    case Viewpoint::kFrontLeft:
      return {kForeground, kWheel, kPlate, kFrontWindow, kLeftFrontWindow, kLeftFrontDoor};
    case Viewpoint::kFrontRight:
      return {kForeground, kWheel, kPlate, kFrontWindow, kRightFrontWindow, kRightFrontDoor};
    case Viewpoint::kBackLeft:
      return {kForeground, kWheel, kPlate, kBackWindow, kLeftBackWindow, kLeftBackDoor};
    case Viewpoint::kBackRight:
      return {kForeground, kWheel, kPlate, kBackWindow, kRightBackWindow, kRightBackDoor};
  }
  return {};
}

std::set<ClassId> LabeledSample::present_classes() const {
  std::set<ClassId> out;
  for (std::uint8_t v : mask)
    if (v > 0) out.insert(static_cast<ClassId>(v) - 1);
  return out;
}

namespace {

struct Color {
  double r, g, b;
  Color scaled(double f) const { return {r * f, g * f, b * f}; }
};

Color hsv(double h, double s, double v) {
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  double m = v - c;
  return {r + m, g + m, b + m};
}

// Painter over a label map + color image; coordinates are in 64-unit space
// and scaled to the canvas, optionally mirrored horizontally.
struct Canvas {
  int size;
  bool mirror = false;
  std::vector<std::uint8_t> labels;   // 0 background, class+1 otherwise
  std::vector<double> rgb;            // 3*size*size, channel-major

  explicit Canvas(int s) : size(s), labels(s * s, 0), rgb(3 * s * s, 0.0) {}

  int sc(double u) const { return static_cast<int>(std::lround(u * size / 64.0)); }

  void put(int y, int x, int label, const Color& c) {
    if (y < 0 || y >= size || x < 0 || x >= size) return;
    if (mirror) x = size - 1 - x;
    std::size_t i = static_cast<std::size_t>(y) * size + x;
    labels[i] = static_cast<std::uint8_t>(label + 1);
    std::size_t n = static_cast<std::size_t>(size) * size;
    rgb[i] = c.r;
    rgb[n + i] = c.g;
    rgb[2 * n + i] = c.b;
  }

  // inclusive rect in 64-space
  void rect(double x0, double y0, double x1, double y1, int label, const Color& c) {
    for (int y = sc(y0); y <= sc(y1); ++y)
      for (int x = sc(x0); x <= sc(x1); ++x) put(y, x, label, c);
  }

  void disc(double cx, double cy, double rad, int label, const Color& c) {
    int r = sc(rad);
    int icx = sc(cx), icy = sc(cy);
    for (int y = icy - r; y <= icy + r; ++y)
      for (int x = icx - r; x <= icx + r; ++x)
        if ((y - icy) * (y - icy) + (x - icx) * (x - icx) <= r * r) put(y, x, label, c);
  }

  void fill_background(const Color& c) {
    std::size_t n = static_cast<std::size_t>(size) * size;
    for (std::size_t i = 0; i < n; ++i) {
      rgb[i] = c.r;
      rgb[n + i] = c.g;
      rgb[2 * n + i] = c.b;
    }
  }
};

struct IdentityLook {
  int archetype;        // 0 sedan, 1 suv, 2 van
  Color body, door, window, accent;
  double roof_y;        // 64-space roof line for side views
  double length_pad;    // body length jitter
};

IdentityLook identity_look(int identity) {
  Rng rng(0x1D5EEDull ^ (static_cast<std::uint64_t>(identity) * 0x9E3779B97F4A7C15ull));
  IdentityLook look;
  look.archetype = identity % 3;
  double hue = rng.uniform();
  double sat = rng.uniform(0.45, 0.95);
  double val = rng.uniform(0.45, 0.9);
  look.body = hsv(hue, sat, val);
  look.door = look.body.scaled(0.8);
  look.window = hsv(0.58, rng.uniform(0.25, 0.4), rng.uniform(0.2, 0.35));
  look.accent = look.body.scaled(1.35);
  look.accent = {std::min(1.0, look.accent.r), std::min(1.0, look.accent.g),
                 std::min(1.0, look.accent.b)};
  double roofs[3] = {24, 21, 16};
  look.roof_y = roofs[look.archetype] + rng.uniform(-1.0, 1.0);
  look.length_pad = rng.uniform(-1.5, 1.5);
  return look;
}

const Color kWheelColor{0.08, 0.08, 0.09};
const Color kPlateColor{0.92, 0.9, 0.6};

// side view facing left; mirror flag turns it into the other side
void render_side(Canvas& cv, const IdentityLook& lk, bool right_side, Rng& jit) {
  ClassId fw = right_side ? kRightFrontWindow : kLeftFrontWindow;
  ClassId fd = right_side ? kRightFrontDoor : kLeftFrontDoor;
  ClassId bw = right_side ? kRightBackWindow : kLeftBackWindow;
  ClassId bd = right_side ? kRightBackDoor : kLeftBackDoor;
  cv.mirror = right_side;
  double dx = jit.uniform(-1.5, 1.5), roof = lk.roof_y + jit.uniform(-0.5, 0.5);
  double x0 = 6 + dx - lk.length_pad, x1 = 57 + dx + lk.length_pad;
  // cabin + lower body
  cv.rect(x0 + 12, roof, x1 - 12, 29, kForeground, lk.body);
  cv.rect(x0, 30, x1, 50, kForeground, lk.body);
  // front accent strip marks the car's nose
  cv.rect(x0, 32, x0 + 3, 46, kForeground, lk.accent);
  // windows sit directly on the doors (shared column ranges, touching rows)
  cv.rect(22 + dx, roof + 2, 31 + dx, 29, fw, lk.window);
  cv.rect(33 + dx, roof + 2, 42 + dx, 29, bw, lk.window);
  cv.rect(22 + dx, 30, 31 + dx, 43, fd, lk.door);
  cv.rect(33 + dx, 30, 42 + dx, 43, bd, lk.door);
  // door handles
  cv.rect(23 + dx, 33, 25 + dx, 34, fd, lk.door.scaled(1.5));
  cv.rect(34 + dx, 33, 36 + dx, 34, bd, lk.door.scaled(1.5));
  // wheels clear of the door columns
  cv.disc(14 + dx, 51, 6, kWheel, kWheelColor);
  cv.disc(49 + dx, 51, 6, kWheel, kWheelColor);
  // fuel cap: left side only, breaks the mirror symmetry between views
  if (!right_side) cv.rect(52 + dx, 33, 54 + dx, 35, kForeground, {0.1, 0.1, 0.1});
  cv.mirror = false;
}

void render_frontal(Canvas& cv, const IdentityLook& lk, bool back, Rng& jit) {
  ClassId win = back ? kBackWindow : kFrontWindow;
  double dx = jit.uniform(-1.5, 1.5), roof = lk.roof_y + jit.uniform(-0.5, 0.5);
  cv.rect(18 + dx, roof, 45 + dx, 52, kForeground, lk.body);
  cv.disc(19 + dx, 52, 4.5, kWheel, kWheelColor);
  cv.disc(44 + dx, 52, 4.5, kWheel, kWheelColor);
  cv.rect(21 + dx, roof + 3, 42 + dx, 33, win, lk.window);
  if (!back) {  // headlights
    cv.rect(20 + dx, 40, 24 + dx, 42, kForeground, lk.accent);
    cv.rect(39 + dx, 40, 43 + dx, 42, kForeground, lk.accent);
  }
  cv.rect(27 + dx, 45, 36 + dx, 49, kPlate, kPlateColor);
}

// three-quarter view: frontal face on one end, one side's front or back
// door/window pair on the other
void render_three_quarter(Canvas& cv, const IdentityLook& lk, bool right_side, bool back, Rng& jit) {
  ClassId face_win = back ? kBackWindow : kFrontWindow;
  ClassId side_win = back ? (right_side ? kRightBackWindow : kLeftBackWindow)
                          : (right_side ? kRightFrontWindow : kLeftFrontWindow);
  ClassId side_door = back ? (right_side ? kRightBackDoor : kLeftBackDoor)
                           : (right_side ? kRightFrontDoor : kLeftFrontDoor);
  cv.mirror = right_side;
  double dx = jit.uniform(-1.0, 1.0), roof = lk.roof_y + jit.uniform(-0.5, 0.5);
  // frontal face occupies the left span, side panel the right
  cv.rect(8 + dx, roof, 26 + dx, 52, kForeground, back ? lk.body.scaled(0.9) : lk.body);
  cv.rect(27 + dx, roof, 55 + dx, 50, kForeground, lk.body);
  cv.rect(10 + dx, roof + 3, 24 + dx, 32, face_win, lk.window);
  cv.rect(13 + dx, 44, 21 + dx, 48, kPlate, kPlateColor);
  if (!back) cv.rect(9 + dx, 38, 13 + dx, 40, kForeground, lk.accent);
  cv.rect(32 + dx, roof + 3, 44 + dx, 29, side_win, lk.window);
  cv.rect(32 + dx, 30, 44 + dx, 43, side_door, lk.door);
  cv.rect(33 + dx, 33, 35 + dx, 34, side_door, lk.door.scaled(1.5));
  cv.disc(16 + dx, 52, 5, kWheel, kWheelColor);
  cv.disc(49 + dx, 51, 5.5, kWheel, kWheelColor);
  cv.mirror = false;
}

}  // namespace

LabeledSample generate(const VehicleSpec& spec) {
  Canvas cv(spec.size);
  Rng jit(spec.jitter_seed ^ 0xA5A5A5A5ull);
  IdentityLook lk = identity_look(spec.identity);
  // muted background
  cv.fill_background(hsv(jit.uniform(), jit.uniform(0.05, 0.25), jit.uniform(0.55, 0.95)));

  switch (spec.viewpoint) {
    case Viewpoint::kLeft: render_side(cv, lk, false, jit); break;
    case Viewpoint::kRight: render_side(cv, lk, true, jit); break;
    case Viewpoint::kFront: render_frontal(cv, lk, false, jit); break;
    case Viewpoint::kBack: render_frontal(cv, lk, true, jit); break;
    case Viewpoint::kFrontLeft: render_three_quarter(cv, lk, false, false, jit); break;
    case Viewpoint::kFrontRight: render_three_quarter(cv, lk, true, false, jit); break;
    case Viewpoint::kBackLeft: render_three_quarter(cv, lk, false, true, jit); break;
    case Viewpoint::kBackRight: render_three_quarter(cv, lk, true, true, jit); break;
  }

  // photometric jitter only; labels stay exact
  double gain = jit.uniform(0.85, 1.15);
  double noise = 0.02;
  for (double& v : cv.rgb) {
    v = v * gain + jit.uniform(-noise, noise);
    v = std::min(1.0, std::max(0.0, v));
  }

  LabeledSample out;
  out.width = out.height = spec.size;
  out.identity = spec.identity;
  out.viewpoint = spec.viewpoint;
  out.mask = std::move(cv.labels);
  out.image = Tensor::from({3, spec.size, spec.size}, std::move(cv.rgb));
  return out;
}

namespace {
std::vector<Viewpoint> parse_view_mix(const std::string& mix) {
  std::vector<Viewpoint> views;
  if (mix == "all" || mix.empty()) {
    for (int i = 0; i < kNumViewpoints; ++i) views.push_back(static_cast<Viewpoint>(i));
    return views;
  }
  std::istringstream is(mix);
  std::string tok;
  while (std::getline(is, tok, ',')) views.push_back(viewpoint_from_name(tok));
  if (views.empty()) throw std::invalid_argument("empty view mix");
  return views;
}
}  // namespace

CorpusManifest generate_corpus(const fs::path& dir, int n, std::uint64_t seed, double train_frac,
                               double val_frac, const std::string& view_mix, int size) {
  if (n < 1) throw std::invalid_argument("corpus size must be >= 1");
  if (n < 64) std::fprintf(stderr, "warning: corpus of %d samples may not cover all classes\n", n);
  std::vector<Viewpoint> views = parse_view_mix(view_mix);
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");

  int vc = static_cast<int>(views.size());
  int n_ids = (n + vc - 1) / vc;
  int train_ids = std::max(1, static_cast<int>(std::lround(n_ids * train_frac)));
  int val_ids = std::max(n_ids > 1 ? 1 : 0, static_cast<int>(std::lround(n_ids * val_frac)));
  if (train_ids + val_ids > n_ids) val_ids = std::max(0, n_ids - train_ids);
  Rng rng(seed);
  CorpusManifest man;
  man.seed = seed;
  man.image_size = size;

  int produced = 0;
  for (int id = 0; id < n_ids && produced < n; ++id) {
    // identity ids salted by the corpus seed so different corpora differ
    int identity = static_cast<int>((seed % 100000) * 1000 + id);
    for (int vi = 0; vi < vc && produced < n; ++vi, ++produced) {
      VehicleSpec spec;
      spec.identity = identity;
      spec.viewpoint = views[static_cast<std::size_t>(vi)];
      spec.jitter_seed = rng.fork(static_cast<std::uint64_t>(produced));
      spec.size = size;
      LabeledSample s = generate(spec);
      char img_name[64], msk_name[64];
      std::snprintf(img_name, sizeof(img_name), "images/img_%05d.ppm", produced);
      std::snprintf(msk_name, sizeof(msk_name), "masks/msk_%05d.pgm", produced);
      write_image(dir / img_name, s.image);
      write_mask(dir / msk_name, s.mask, s.width, s.height);
      ManifestEntry e;
      e.image_path = img_name;
      e.mask_path = msk_name;
      e.identity = identity;
      e.viewpoint = viewpoint_name(spec.viewpoint);
      e.present = s.present_classes();
      if (id < train_ids) man.train.push_back(e);
      else if (id < train_ids + val_ids) man.val.push_back(e);
      else man.test.push_back(e);
    }
  }

  json j;
  j["seed"] = seed;
  j["image_size"] = size;
  auto dump_split = [](const std::vector<ManifestEntry>& es) {
    json arr = json::array();
    for (const auto& e : es)
      arr.push_back({{"image", e.image_path},
                     {"mask", e.mask_path},
                     {"identity", e.identity},
                     {"viewpoint", e.viewpoint},
                     {"present", std::vector<int>(e.present.begin(), e.present.end())}});
    return arr;
  };
  j["train"] = dump_split(man.train);
  j["val"] = dump_split(man.val);
  j["test"] = dump_split(man.test);
  std::ofstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("cannot write manifest in " + dir.string());
  f << j.dump(2) << "\n";
  return man;
}

CorpusManifest read_manifest(const fs::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw std::runtime_error("no manifest.json in " + dir.string());
  json j = json::parse(f);
  CorpusManifest man;
  man.seed = j.at("seed").get<std::uint64_t>();
  man.image_size = j.at("image_size").get<int>();
  auto load_split = [](const json& arr) {
    std::vector<ManifestEntry> es;
    for (const auto& je : arr) {
      ManifestEntry e;
      e.image_path = je.at("image").get<std::string>();
      e.mask_path = je.at("mask").get<std::string>();
      e.identity = je.at("identity").get<int>();
      e.viewpoint = je.at("viewpoint").get<std::string>();
      for (int c : je.at("present").get<std::vector<int>>()) e.present.insert(c);
      es.push_back(e);
    }
    return es;
  };
  man.train = load_split(j.at("train"));
  man.val = load_split(j.at("val"));
  man.test = load_split(j.at("test"));
  return man;
}

void write_mask(const fs::path& path, const std::vector<std::uint8_t>& mask, int width, int height) {
  if (mask.size() != static_cast<std::size_t>(width) * height)
    throw std::invalid_argument("mask size does not match dims");
  for (std::uint8_t v : mask)
    if (v > kNumClasses)
      throw std::invalid_argument("mask value " + std::to_string(v) + " exceeds class count");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write mask " + path.string());
  f << "P5\n" << width << " " << height << "\n255\n";
  f.write(reinterpret_cast<const char*>(mask.data()), static_cast<std::streamsize>(mask.size()));
}

namespace {
void read_pnm_header(std::ifstream& f, const std::string& magic, const fs::path& path, int& w,
                     int& h) {
  std::string m;
  f >> m;
  if (m != magic) throw std::runtime_error(path.string() + ": expected " + magic + " header");
  int maxval;
  f >> w >> h >> maxval;
  if (!f || w <= 0 || h <= 0) throw std::runtime_error(path.string() + ": bad PNM dims");
  if (maxval != 255) throw std::runtime_error(path.string() + ": only maxval 255 supported");
  f.get();  // single whitespace after header
}
}  // namespace

std::vector<std::uint8_t> read_mask(const fs::path& path, int& width, int& height) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read mask " + path.string());
  read_pnm_header(f, "P5", path, width, height);
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(width) * height);
  f.read(reinterpret_cast<char*>(mask.data()), static_cast<std::streamsize>(mask.size()));
  if (static_cast<std::size_t>(f.gcount()) != mask.size())
    throw std::runtime_error(path.string() + ": payload shorter than header dims");
  for (std::uint8_t v : mask)
    if (v > kNumClasses)
      throw std::runtime_error(path.string() + ": mask value " + std::to_string(v) +
                               " exceeds class count");
  return mask;
}

void write_image(const fs::path& path, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw std::invalid_argument("image must be (3,H,W)");
  int h = image.dim(1), w = image.dim(2);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write image " + path.string());
  f << "P6\n" << w << " " << h << "\n255\n";
  std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<std::uint8_t> buf(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c)
      buf[3 * i + c] = static_cast<std::uint8_t>(
          std::lround(std::min(1.0, std::max(0.0, image.at(c * n + i))) * 255.0));
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Tensor read_image(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read image " + path.string());
  int w, h;
  read_pnm_header(f, "P6", path, w, h);
  std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<std::uint8_t> buf(3 * n);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(f.gcount()) != buf.size())
    throw std::runtime_error(path.string() + ": payload shorter than header dims");
  std::vector<double> v(3 * n);
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) v[c * n + i] = buf[3 * i + c] / 255.0;
  return Tensor::from({3, h, w}, std::move(v));
}

LabeledSample load_sample(const fs::path& dir, const ManifestEntry& e) {
  LabeledSample s;
  s.image = read_image(dir / e.image_path);
  s.mask = read_mask(dir / e.mask_path, s.width, s.height);
  s.identity = e.identity;
  s.viewpoint = viewpoint_from_name(e.viewpoint);
  return s;
}

}  // namespace partseg::synth
