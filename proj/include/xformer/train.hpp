#pragma once

// Synthetic two-class trainability check: oriented-stripe images, full-batch
// gradient descent with cross-entropy on a reduced network. The dataset is
// fixed up front, so a zero learning rate provably leaves the loss curve
// constant and a pinned seed reproduces the run bitwise.

#include "xformer/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace xf {

struct TrainError : std::runtime_error {
  explicit TrainError(const std::string& what) : std::runtime_error(what) {}
};

// One class-conditional image: sinusoidal stripes, horizontal for class 0
// and vertical for class 1, at a randomized period and per-channel phase,
// plus pixel noise. Orientation is the only class signal, and per-image
// statistics are nearly identical across samples (fixed amplitude, zero-mean
// waves). Both properties matter because normalization layers see one image
// at a time during training but pooled running statistics at inference: any
// signal or variation living in per-channel mean/variance would be handled
// differently by the two paths. Every sample draws from its own stream seed.
template <typename Scalar>
Tensor<Scalar> make_toy_sample(int resolution, int label,
                               std::uint64_t stream_seed) {
  check(resolution >= 8, "make_toy_sample: resolution must be >= 8");
  check(label == 0 || label == 1, "make_toy_sample: label must be 0 or 1");
  Rng rng(stream_seed);
  constexpr double two_pi = 6.283185307179586;
  const double period = resolution / 8.0 * (0.75 + 0.5 * rng.uniform());
  const double omega = two_pi / period;
  Tensor<Scalar> img({3, resolution, resolution});
  Scalar* d = img.data();
  for (int ch = 0; ch < 3; ++ch) {
    const double phase = two_pi * rng.uniform();
    for (int y = 0; y < resolution; ++y)
      for (int x = 0; x < resolution; ++x) {
        const double along = label == 0 ? y : x;
        *d++ = static_cast<Scalar>(std::sin(omega * along + phase) +
                                   0.1 * rng.normal());
      }
  }
  return img;
}

template <typename Scalar>
struct ToyDataset {
  std::vector<Tensor<Scalar>> images;
  std::vector<int> labels;
  std::size_t size() const { return images.size(); }
};

// Balanced training set: labels alternate, each sample on stream i.
template <typename Scalar>
ToyDataset<Scalar> make_toy_dataset(int resolution, int size,
                                    std::uint64_t seed) {
  check(size >= 2 && size % 2 == 0, "make_toy_dataset: size must be even");
  ToyDataset<Scalar> ds;
  for (int i = 0; i < size; ++i) {
    const int label = i % 2;
    ds.images.push_back(
        make_toy_sample<Scalar>(resolution, label, Rng::mix(seed, i)));
    ds.labels.push_back(label);
  }
  return ds;
}

// Held-out streams live far from the training streams in seed space.
inline std::uint64_t heldout_stream(std::uint64_t seed, int i) {
  return Rng::mix(seed, (std::uint64_t{1} << 40) + static_cast<std::uint64_t>(i));
}

struct TrainConfig {
  int steps = 200;
  double lr = 0.1;
  std::uint64_t seed = 1234;
  int dataset_size = 32;
};

// Full-batch gradient descent. Returns steps+1 loss values: entry t is the
// mean training loss at the parameters of step t (entry 0 = init, entry
// steps = final). Parameters update after every entry except the last.
//
// Forward passes run with inference statistics: images flow through one at a
// time here, and normalizing each by its own statistics would train the
// network against a per-image rescaling that the pooled running statistics
// cannot reproduce at inference. Freezing the statistics keeps the trained
// network and the deployed network identical.
template <typename Scalar>
std::vector<Scalar> toy_train(XFormerModel<Scalar>& model,
                              const ToyDataset<Scalar>& ds,
                              const TrainConfig& cfg) {
  check(cfg.steps >= 0, "toy_train: steps must be >= 0");
  check(ds.size() > 0, "toy_train: dataset is empty");
  ParamRegistry<Scalar> reg = model.registry();
  const Scalar lr = static_cast<Scalar>(cfg.lr);
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(ds.size());
  std::vector<Scalar> losses;
  losses.reserve(cfg.steps + 1);
  for (int t = 0; t <= cfg.steps; ++t) {
    GradTape<Scalar> tape;
    Tensor<Scalar> loss;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      Tensor<Scalar> logits = model.forward(ds.images[i], /*training=*/false);
      Tensor<Scalar> ce = softmax_cross_entropy(logits, ds.labels[i]);
      loss = loss.valid() ? add(loss, ce) : ce;
    }
    loss = mul_scalar(loss, inv_b);
    const Scalar value = loss.item();
    if (!std::isfinite(static_cast<double>(value)))
      throw TrainError("toy_train: loss diverged at step " +
                       std::to_string(t));
    losses.push_back(value);
    if (t == cfg.steps) break;  // final entry is an assessment only
    tape.backward(loss);
    for (auto& [name, p] : reg.params) {
      if (!p.has_grad()) continue;
      Scalar* w = p.data();
      const Scalar* g = p.grad_data();
      for (std::int64_t j = 0; j < p.numel(); ++j) w[j] -= lr * g[j];
      p.zero_grad();
    }
  }
  return losses;
}

// Fraction of fresh held-out samples the model labels correctly (inference
// statistics mode, no tape).
template <typename Scalar>
double evaluate_accuracy(XFormerModel<Scalar>& model, int resolution,
                         int n_samples, std::uint64_t seed) {
  check(n_samples > 0, "evaluate_accuracy: n_samples must be > 0");
  int correct = 0;
  for (int i = 0; i < n_samples; ++i) {
    const int label = i % 2;
    Tensor<Scalar> img =
        make_toy_sample<Scalar>(resolution, label, heldout_stream(seed, i));
    Tensor<Scalar> logits = model.forward(img, /*training=*/false);
    if (argmax(logits) == label) ++correct;
  }
  return static_cast<double>(correct) / n_samples;
}

}  // namespace xf
