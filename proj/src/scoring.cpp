#include "pcqa/scoring.hpp"

#include <algorithm>

#include "pcqa/error.hpp"

namespace pcqa {

std::vector<FeatureTensor> cloud_features(const PointCloud& cloud, const SamplingConfig& sampling,
                                          Ablation ablation) {
  const auto patches = extract_patches(cloud, sampling);
  std::vector<FeatureTensor> out(patches.size());
  const auto n = static_cast<std::ptrdiff_t>(patches.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    out[i] = assemble(patches[i]);
    apply_ablation(out[i], ablation);
  }
  return out;
}

ad::Tensor<float> feature_batch(std::span<const FeatureTensor* const> features) {
  if (features.empty()) throw UsageError("feature_batch: empty batch");
  const std::size_t g = features.front()->grid;
  const std::size_t per = kFeatureChannels * g * g;
  std::vector<float> data;
  data.reserve(features.size() * per);
  for (const FeatureTensor* f : features) {
    if (f->grid != g || f->data.size() != per)
      throw UsageError("feature_batch: feature tensors differ in shape");
    data.insert(data.end(), f->data.begin(), f->data.end());
  }
  const auto gi = static_cast<std::int64_t>(g);
  return ad::Tensor<float>({static_cast<std::int64_t>(features.size()),
                            static_cast<std::int64_t>(kFeatureChannels), gi, gi},
                           std::move(data));
}

std::vector<double> score_features(nn::Model<float>& model, const std::vector<FeatureTensor>& features,
                                   std::size_t chunk) {
  ad::NoGradGuard no_grad;
  std::vector<double> scores;
  scores.reserve(features.size());
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t start = 0; start < features.size(); start += chunk) {
    std::vector<const FeatureTensor*> part;
    for (std::size_t i = start; i < std::min(features.size(), start + chunk); ++i)
      part.push_back(&features[i]);
    const auto out = model.forward(feature_batch(part), false);
    scores.insert(scores.end(), out.values().begin(), out.values().end());
  }
  return scores;
}

CloudScore predict_cloud(nn::Model<float>& model, const PointCloud& cloud,
                         const SamplingConfig& sampling, Ablation ablation) {
  CloudScore s;
  s.patch_scores = score_features(model, cloud_features(cloud, sampling, ablation));
  s.quality = nn::aggregate_quality(s.patch_scores);
  return s;
}

}  // namespace pcqa
