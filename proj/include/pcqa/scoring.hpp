#pragma once

#include <span>
#include <vector>

#include "pcqa/autodiff.hpp"
#include "pcqa/features.hpp"
#include "pcqa/nn.hpp"
#include "pcqa/sampling.hpp"

namespace pcqa {

struct CloudScore {
  double quality = 0.0;  // Q_f
  std::vector<double> patch_scores;
};

/// Patches -> feature tensors, with the ablation applied.
std::vector<FeatureTensor> cloud_features(const PointCloud& cloud, const SamplingConfig& sampling,
                                          Ablation ablation = Ablation::kFull);

/// Stacks feature tensors into a [B, 9, G, G] float batch.
ad::Tensor<float> feature_batch(std::span<const FeatureTensor* const> features);

/// Evaluation-mode scores, computed in chunks without recording a trace.
/// Scores do not depend on the chunk size.
std::vector<double> score_features(nn::Model<float>& model, const std::vector<FeatureTensor>& features,
                                   std::size_t chunk = 25);

CloudScore predict_cloud(nn::Model<float>& model, const PointCloud& cloud,
                         const SamplingConfig& sampling, Ablation ablation = Ablation::kFull);

}  // namespace pcqa
