#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <set>

#include "doctest.h"
#include "partseg/ontology.hpp"
#include "partseg/tensor.hpp"

using namespace partseg;

TEST_CASE("adjacency realizes the vehicle topology") {
  PartOntology g = build_adjacency();
  CHECK(g.has_edge(kLeftFrontDoor, kLeftFrontWindow));
  CHECK(g.has_edge(kWheel, kForeground));
  CHECK(g.has_edge(kLeftFrontDoor, kLeftBackDoor));
  CHECK_FALSE(g.has_edge(kLeftFrontDoor, kRightFrontDoor));
  CHECK_FALSE(g.has_edge(kLeftFrontWindow, kRightFrontWindow));
  CHECK(g.connected());
  // plate and wheel connect only to the body
  CHECK(g.neighbors(kPlate) == std::vector<ClassId>{kForeground});
  CHECK(g.neighbors(kWheel) == std::vector<ClassId>{kForeground});
  // no left-right edge anywhere
  for (const auto& [a, b] : g.edges) {
    CHECK_FALSE((is_left_part(a) && is_right_part(b)));
    CHECK_FALSE((is_right_part(a) && is_left_part(b)));
  }
}

TEST_CASE("co-occurrence extremes") {
  PartOntology g = build_adjacency();
  std::vector<std::set<ClassId>> corpus = {
      {kForeground, kWheel}, {kForeground, kWheel}, {kForeground, kWheel}};
  PartOntology w = compute_cooccurrence(g, corpus);
  CHECK(w.weight(kForeground, kWheel) == 1.0);
  CHECK(w.weight(kForeground, kPlate) == 0.0);
}

TEST_CASE("co-occurrence 2 of 4 samples") {
  PartOntology g = build_adjacency();
  std::vector<std::set<ClassId>> corpus = {{kForeground, kWheel, kPlate},
                                           {kForeground, kWheel},
                                           {kForeground, kPlate},
                                           {kForeground}};
  PartOntology w = compute_cooccurrence(g, corpus);
  CHECK(w.weight(kForeground, kWheel) == 0.5);
  CHECK(w.weight(kForeground, kPlate) == 0.5);
}

TEST_CASE("co-occurrence equals brute force on random corpora") {
  PartOntology g = build_adjacency();
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    int n = 1 + rng.uniform_int(50);
    std::vector<std::set<ClassId>> corpus;
    for (int s = 0; s < n; ++s) {
      std::set<ClassId> present;
      for (ClassId c = 0; c < kNumClasses; ++c)
        if (rng.uniform() < 0.4) present.insert(c);
      corpus.push_back(present);
    }
    PartOntology w = compute_cooccurrence(g, corpus);
    // brute-force double loop
    for (ClassId i = 0; i < kNumClasses; ++i)
      for (ClassId j = 0; j < kNumClasses; ++j) {
        int count = 0;
        for (const auto& s : corpus)
          if (s.count(i) && s.count(j)) ++count;
        double expect = (i != j && g.has_edge(i, j)) ? count / static_cast<double>(n) : 0.0;
        CHECK(w.weight(i, j) == expect);
      }
  }
}

TEST_CASE("empty corpus rejected") {
  PartOntology g = build_adjacency();
  CHECK_THROWS_AS(compute_cooccurrence(g, {}), std::invalid_argument);
}

TEST_CASE("left-only corpora leave right side at zero") {
  PartOntology g = build_adjacency();
  std::vector<std::set<ClassId>> corpus(8, {kForeground, kWheel, kLeftFrontWindow,
                                            kLeftFrontDoor, kLeftBackWindow, kLeftBackDoor});
  PartOntology w = compute_cooccurrence(g, corpus);
  for (ClassId l : {kLeftFrontWindow, kLeftFrontDoor, kLeftBackWindow, kLeftBackDoor}) {
    CHECK(w.weight(l, kForeground) > 0.0);
    for (ClassId r : {kRightFrontWindow, kRightFrontDoor, kRightBackWindow, kRightBackDoor})
      CHECK(w.weight(l, r) == 0.0);
  }
}

TEST_CASE("serialize/parse round trip") {
  PartOntology g = build_adjacency();
  Rng rng(7);
  for (const auto& [a, b] : g.edges) {
    PartOntology& gm = g;
    gm.set_weight(a, b, rng.uniform());
  }
  PartOntology h = parse_ontology(serialize_ontology(g));
  CHECK(h.edges == g.edges);
  CHECK(h.weights == g.weights);
}

TEST_CASE("parse rejects bad input with line numbers") {
  PartOntology g = build_adjacency();
  std::string text = serialize_ontology(g);

  SUBCASE("out-of-range weight") {
    std::string bad = text + "0 1 1.2\n";
    CHECK_THROWS_WITH_AS(parse_ontology(bad), doctest::Contains("line"), std::invalid_argument);
  }
  SUBCASE("left-right edge") {
    std::string bad = text;
    bad.insert(bad.find("\nweights") + 1, "Left front door | Right front door\n");
    CHECK_THROWS_WITH_AS(parse_ontology(bad), doctest::Contains("bilateral"), std::invalid_argument);
  }
  SUBCASE("unknown label") {
    std::string bad = text;
    bad.insert(bad.find("\nweights") + 1, "Left front door | Spoiler\n");
    CHECK_THROWS_WITH_AS(parse_ontology(bad), doctest::Contains("Spoiler"), std::invalid_argument);
  }
}

TEST_CASE("set_weight range check") {
  PartOntology g = build_adjacency();
  CHECK_THROWS_AS(g.set_weight(kForeground, kWheel, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(g.set_weight(kLeftFrontDoor, kRightFrontDoor, 0.5), std::invalid_argument);
}
