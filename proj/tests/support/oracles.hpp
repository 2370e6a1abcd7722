#pragma once

// Independent double-precision references used by the unit tests and the
// acceptance binary. Nothing here calls into the library's math.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mstd/tensor.hpp"

namespace oracle {

using Vec = std::vector<double>;

Vec to_f64(const mstd::Tensor& t);

// Row-major helpers. Shapes are passed explicitly.
Vec linear(const Vec& x, std::size_t rows, std::size_t in, const Vec& w, const Vec& b, std::size_t out);
Vec relu(Vec x);
Vec sigmoid(Vec x);
Vec softmax_rows(const Vec& x, std::size_t rows, std::size_t cols, double temperature);
/// x: [batch, tokens, dim]; weights [dim, dim], biases [dim].
Vec mhsa(const Vec& x, std::size_t batch, std::size_t tokens, std::size_t dim, int heads, const Vec& wq,
         const Vec& bq, const Vec& wk, const Vec& bk, const Vec& wv, const Vec& bv, const Vec& wo, const Vec& bo);
/// params in MaskNet::parameters() order: proj w/b, q w/b, k w/b, v w/b, o w/b, out w/b.
Vec masknet(const Vec& z, std::size_t batch, std::size_t d_m, std::size_t d_h, int heads,
            const std::vector<Vec>& params);
/// params: fc0 w/b, fc1 w/b.
Vec gatenet(const Vec& logits, std::size_t rows, std::size_t classes, std::size_t hidden, std::size_t teachers,
            const std::vector<Vec>& params);

double kl(const Vec& p, const Vec& q);

/// Source modality of teacher j by walking modalities in order.
int delta_bruteforce(int j, std::span<const int> tap_counts, int target);
/// First k of (value descending, index ascending).
std::vector<int> topk_sort(std::span<const float> values, int k);

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent in double. Returns accuracy on `test`.
double linear_probe(const mstd::Tensor& x, const std::vector<int>& labels, int classes,
                    const std::vector<int>& train, const std::vector<int>& test, int iterations = 300);

// Finite-difference gradient checks.

struct GradResult {
  std::string layer;
  int instances = 0;
  double max_rel_error = 0.0;
};

/// Norm-wise relative error |a - b| / max(|a|, |b|, floor), 0 when all vanish.
double rel_error(const std::vector<float>& analytic, const Vec& numeric, double floor = 0.0);

/// Central differences of sum(weights * f(args)) in double, one argument
/// tensor at a time.
std::vector<Vec> numeric_grad(const std::vector<mstd::Tensor>& args, const Vec& weights,
                              const std::function<Vec(const std::vector<Vec>&)>& f, double eps);

/// All layer types, `instances` random cases each.
std::vector<GradResult> gradient_suite(int instances, std::uint64_t seed, double eps = 1e-3);

}  // namespace oracle
