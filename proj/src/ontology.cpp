#include "partseg/ontology.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace partseg {

const std::array<std::string, kNumClasses>& class_names() {
  static const std::array<std::string, kNumClasses> names = {
      "Foreground",        "Wheel",           "Plate",
      "Front window",      "Back window",     "Left front window",
      "Left front door",   "Left back window", "Left back door",
      "Right front window", "Right front door", "Right back window",
      "Right back door"};
  return names;
}

ClassId class_id_from_name(const std::string& name) {
  const auto& names = class_names();
  for (int i = 0; i < kNumClasses; ++i)
    if (names[static_cast<std::size_t>(i)] == name) return i;
  throw std::invalid_argument("unknown part label '" + name + "'");
}

bool is_left_part(ClassId c) { return c >= kLeftFrontWindow && c <= kLeftBackDoor; }
bool is_right_part(ClassId c) { return c >= kRightFrontWindow && c <= kRightBackDoor; }

namespace {
std::pair<ClassId, ClassId> norm_pair(ClassId a, ClassId b) {
  return {std::min(a, b), std::max(a, b)};
}
void check_class(ClassId c) {
  if (c < 0 || c >= kNumClasses)
    throw std::invalid_argument("class id " + std::to_string(c) + " out of range");
}
}  // namespace

bool PartOntology::has_edge(ClassId a, ClassId b) const {
  return edges.count(norm_pair(a, b)) != 0;
}

double PartOntology::weight(ClassId a, ClassId b) const {
  check_class(a);
  check_class(b);
  return weights[static_cast<std::size_t>(a) * kNumClasses + b];
}

void PartOntology::set_weight(ClassId a, ClassId b, double w) {
  check_class(a);
  check_class(b);
  if (!has_edge(a, b))
    throw std::invalid_argument("no edge between " + std::to_string(a) + " and " + std::to_string(b));
  if (w < 0.0 || w > 1.0)
    throw std::invalid_argument("edge weight " + std::to_string(w) + " outside [0,1]");
  weights[static_cast<std::size_t>(a) * kNumClasses + b] = w;
  weights[static_cast<std::size_t>(b) * kNumClasses + a] = w;
}

std::vector<ClassId> PartOntology::neighbors(ClassId c) const {
  check_class(c);
  std::vector<ClassId> out;
  for (const auto& [a, b] : edges) {
    if (a == c) out.push_back(b);
    if (b == c) out.push_back(a);
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool PartOntology::connected() const {
  std::vector<bool> seen(kNumClasses, false);
  std::vector<ClassId> stack = {0};
  seen[0] = true;
  while (!stack.empty()) {
    ClassId c = stack.back();
    stack.pop_back();
    for (ClassId n : neighbors(c))
      if (!seen[static_cast<std::size_t>(n)]) {
        seen[static_cast<std::size_t>(n)] = true;
        stack.push_back(n);
      }
  }
  return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

void PartOntology::validate() const {
  if (weights.size() != kNumClasses * kNumClasses)
    throw std::invalid_argument("weight matrix must be 13x13");
  for (const auto& [a, b] : edges) {
    check_class(a);
    check_class(b);
    if (a == b) throw std::invalid_argument("self-edge on class " + std::to_string(a));
    if ((is_left_part(a) && is_right_part(b)) || (is_right_part(a) && is_left_part(b)))
      throw std::invalid_argument("edge crosses the bilateral symmetry boundary: " +
                                  std::to_string(a) + "-" + std::to_string(b));
  }
  for (int i = 0; i < kNumClasses; ++i)
    for (int j = 0; j < kNumClasses; ++j) {
      double w = weights[static_cast<std::size_t>(i) * kNumClasses + j];
      if (w < 0.0 || w > 1.0) throw std::invalid_argument("weight outside [0,1]");
      if (w != weights[static_cast<std::size_t>(j) * kNumClasses + i])
        throw std::invalid_argument("asymmetric weight matrix");
      if (w != 0.0 && (i == j || !has_edge(i, j)))
        throw std::invalid_argument("nonzero weight off the edge set at " + std::to_string(i) +
                                    "," + std::to_string(j));
    }
}

PartOntology build_adjacency() {
  PartOntology g;
  g.weights.assign(kNumClasses * kNumClasses, 0.0);
  auto edge = [&](ClassId a, ClassId b) { g.edges.insert(norm_pair(a, b)); };
  // every part touches the vehicle body
  for (ClassId c = kWheel; c < kNumClasses; ++c) edge(kForeground, c);
  // doors to their windows
  edge(kLeftFrontDoor, kLeftFrontWindow);
  edge(kLeftBackDoor, kLeftBackWindow);
  edge(kRightFrontDoor, kRightFrontWindow);
  edge(kRightBackDoor, kRightBackWindow);
  // front and back doors on the same side
  edge(kLeftFrontDoor, kLeftBackDoor);
  edge(kRightFrontDoor, kRightBackDoor);
  // windshield / rear window to the adjacent side windows (assumption: the
  // glass panels meet at the pillars)
  edge(kFrontWindow, kLeftFrontWindow);
  edge(kFrontWindow, kRightFrontWindow);
  edge(kBackWindow, kLeftBackWindow);
  edge(kBackWindow, kRightBackWindow);
  g.validate();
  return g;
}

PartOntology compute_cooccurrence(const PartOntology& ontology,
                                  const std::vector<std::set<ClassId>>& corpus) {
  if (corpus.empty()) throw std::invalid_argument("empty corpus: N must be >= 1");
  for (const auto& s : corpus)
    for (ClassId c : s) check_class(c);
  PartOntology g = ontology;
  std::fill(g.weights.begin(), g.weights.end(), 0.0);
  double n = static_cast<double>(corpus.size());
  for (const auto& [a, b] : g.edges) {
    int count = 0;
    for (const auto& s : corpus)
      if (s.count(a) && s.count(b)) ++count;
    g.set_weight(a, b, count / n);
  }
  return g;
}

std::string serialize_ontology(const PartOntology& g) {
  g.validate();
  std::ostringstream os;
  os << "# vehicle part ontology: edge list + co-occurrence weights\n";
  os << "labels\n";
  for (int i = 0; i < kNumClasses; ++i) os << i << " " << class_names()[static_cast<std::size_t>(i)] << "\n";
  os << "edges\n";
  for (const auto& [a, b] : g.edges)
    os << class_names()[static_cast<std::size_t>(a)] << " | " << class_names()[static_cast<std::size_t>(b)] << "\n";
  os << "weights\n";
  char buf[64];
  for (const auto& [a, b] : g.edges) {
    std::snprintf(buf, sizeof(buf), "%d %d %.17g", a, b, g.weight(a, b));
    os << buf << "\n";
  }
  return os.str();
}

PartOntology parse_ontology(const std::string& text) {
  PartOntology g;
  g.weights.assign(kNumClasses * kNumClasses, 0.0);
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  enum Section { kNone, kLabels, kEdges, kWeights } section = kNone;
  auto fail = [&](const std::string& msg) {
    throw std::invalid_argument("ontology parse error at line " + std::to_string(lineno) + ": " + msg);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (line == "labels") { section = kLabels; continue; }
    if (line == "edges") { section = kEdges; continue; }
    if (line == "weights") { section = kWeights; continue; }
    switch (section) {
      case kLabels: {
        std::istringstream ls(line);
        int id;
        std::string name;
        if (!(ls >> id)) fail("bad label line");
        std::getline(ls, name);
        name.erase(0, name.find_first_not_of(' '));
        if (id < 0 || id >= kNumClasses) fail("label id out of range");
        if (name != class_names()[static_cast<std::size_t>(id)])
          fail("label " + std::to_string(id) + " must be '" +
               class_names()[static_cast<std::size_t>(id)] + "', got '" + name + "'");
        break;
      }
      case kEdges: {
        auto bar = line.find('|');
        if (bar == std::string::npos) fail("edge line needs 'A | B'");
        auto trim = [](std::string s) {
          s.erase(0, s.find_first_not_of(' '));
          s.erase(s.find_last_not_of(' ') + 1);
          return s;
        };
        ClassId a, b;
        try {
          a = class_id_from_name(trim(line.substr(0, bar)));
          b = class_id_from_name(trim(line.substr(bar + 1)));
        } catch (const std::invalid_argument& e) {
          fail(e.what());
          return g;  // unreachable
        }
        if (a == b) fail("self-edge");
        if ((is_left_part(a) && is_right_part(b)) || (is_right_part(a) && is_left_part(b)))
          fail("left-right edge violates bilateral symmetry");
        g.edges.insert(norm_pair(a, b));
        break;
      }
      case kWeights: {
        std::istringstream ws(line);
        int a, b;
        double w;
        if (!(ws >> a >> b >> w)) fail("bad weight line");
        if (a < 0 || a >= kNumClasses || b < 0 || b >= kNumClasses) fail("weight class id out of range");
        if (w < 0.0 || w > 1.0) fail("weight " + std::to_string(w) + " outside [0,1]");
        if (!g.has_edge(a, b)) fail("weight on a non-edge");
        double prev = g.weight(a, b);
        if (prev != 0.0 && prev != w) fail("asymmetric duplicate weight entry");
        g.weights[static_cast<std::size_t>(a) * kNumClasses + b] = w;
        g.weights[static_cast<std::size_t>(b) * kNumClasses + a] = w;
        break;
      }
      default:
        fail("content before any section header");
    }
  }
  g.validate();
  return g;
}

}  // namespace partseg
