#pragma once

#include <array>
#include <set>
#include <string>
#include <vector>

namespace partseg {

using ClassId = int;

constexpr int kNumClasses = 13;

enum PartClass : ClassId {
  kForeground = 0,
  kWheel = 1,
  kPlate = 2,
  kFrontWindow = 3,
  kBackWindow = 4,
  kLeftFrontWindow = 5,
  kLeftFrontDoor = 6,
  kLeftBackWindow = 7,
  kLeftBackDoor = 8,
  kRightFrontWindow = 9,
  kRightFrontDoor = 10,
  kRightBackWindow = 11,
  kRightBackDoor = 12,
};

const std::array<std::string, kNumClasses>& class_names();
ClassId class_id_from_name(const std::string& name);  // throws on unknown name
bool is_left_part(ClassId c);
bool is_right_part(ClassId c);

// Vehicle part graph: 13 nodes, physical-adjacency edges, co-occurrence
// weights in [0,1] on the edges.
struct PartOntology {
  std::set<std::pair<ClassId, ClassId>> edges;      // normalized (min,max) pairs
  std::vector<double> weights;                      // 13x13 symmetric, 0 off-edge

  bool has_edge(ClassId a, ClassId b) const;
  double weight(ClassId a, ClassId b) const;
  void set_weight(ClassId a, ClassId b, double w);  // throws off-edge or out of range
  std::vector<ClassId> neighbors(ClassId c) const;  // sorted, no self
  bool connected() const;
  void validate() const;  // symmetry, range, bilateral rule, support(W) within E
};

// The committed physical adjacency: doors to their windows, front/back doors
// on the same side, windshield/rear window to their side windows, and every
// part to the vehicle body. No left part connects to a right part.
PartOntology build_adjacency();

// W_ij = Count(i and j co-present) / N over edges; presence sets per sample.
PartOntology compute_cooccurrence(const PartOntology& ontology,
                                  const std::vector<std::set<ClassId>>& corpus);

std::string serialize_ontology(const PartOntology& g);
PartOntology parse_ontology(const std::string& text);  // errors carry line numbers

}  // namespace partseg
