// Small configurations shared by the pipeline tests and the CLI checks.
#pragma once

#include "support/oracles.hpp"

namespace remedi::fixture {

/// Synthetic pipeline sized to run in a few seconds.
inline PipelineConfig small_pipeline(const std::string& out_dir, std::uint64_t seed = 3) {
  PipelineConfig c;
  c.seed = seed;
  c.output_dir = out_dir;
  SynthConfig s;
  s.n_rows = 4000;
  s.n_features = 12;
  s.noise_features = 3;
  s.positive_rate = 0.05;
  s.seed = seed;
  c.data.synthetic = s;
  c.k_folds = 3;
  c.learners = default_learners();
  for (auto& l : c.learners) {
    l.gbdt.n_trees = 25;
    l.gbdt.max_depth = 3;
    l.gbdt.early_stopping_rounds = 5;
    l.mlp.hidden_sizes = {8};
    l.mlp.epochs = 3;
    l.fm.k = 3;
    l.fm.deep_hidden_sizes = {4};
    l.fm.epochs = 3;
  }
  c.meta.epochs = 4;
  c.meta.learning_rate = 0.01;
  c.student.gbdt.n_trees = 20;
  c.student.gbdt.max_depth = 3;
  c.fusion.stacking_gbdt.n_trees = 20;
  c.fusion.weight_iterations = 20;
  c.evaluation.k = 40;
  c.evaluation.pr_points = 50;
  return c;
}

}  // namespace remedi::fixture
