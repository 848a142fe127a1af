#pragma once

#include "dabul/direct.hpp"
#include "dabul/model.hpp"

// Two admin1 areas of three admin2 areas each, with sampled and unsampled
// clusters in every admin2 area.
namespace dabul::testing {

struct Fixture {
  geo::Geography g;
  survey::SurveyData data;
  direct::DirectEstimates direct;

  Fixture() : g(geo::generate_synthetic_geography(2, 3, 1)) {
    data.m1 = g.m1;
    data.m2 = g.m2;
    long id = 1;
    for (int j = 0; j < g.m2; ++j) {
      const int i = g.admin1_of[j];
      data.records.push_back(survey::SurveyRecord{id++, i, j, survey::Stratum::urban, 60, true, 20, j % 3 == 0 ? 0 : 1 + j % 2, 3.0});
      data.records.push_back(survey::SurveyRecord{id++, i, j, survey::Stratum::rural, 80, true, 25, 1 + j % 2, 3.2});
      data.records.push_back(survey::SurveyRecord{id++, i, j, survey::Stratum::rural, 70, false, 0, 0, 0.0});
      data.records.push_back(survey::SurveyRecord{id++, i, j, survey::Stratum::urban, 50, false, 0, 0, 0.0});
    }
    direct = direct::compute_direct_estimates(data);
  }

  model::Model make(model::Variant v) const {
    model::ModelConfig cfg;
    cfg.variant = v;
    return model::assemble_variant(cfg, data, direct, g);
  }
};

}  // namespace dabul::testing
