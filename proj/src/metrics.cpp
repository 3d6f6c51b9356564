// SPDX-License-Identifier: Apache-2.0
#include "nfe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "nfe/loss.hpp"

namespace nfe {

namespace {

void check_rows(const Tensor<double>& p, std::size_t n, const char* what) {
  if (p.rank() != 2 || p.dim(0) != n)
    fail(ErrorKind::shape_mismatch, std::string(what) + ": expected one probability row per label");
}

}  // namespace

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& scores) {
  if (scores.rank() != 2 || scores.dim(1) == 0) fail(ErrorKind::shape_mismatch, "argmax_rows expects [n, C]");
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = scores.data() + i * c;
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k)
      if (row[k] > row[best]) best = k;
    out[i] = static_cast<int>(best);
  }
  return out;
}

template <typename T>
EnsemblePrediction<T> ensemble_predict(std::span<const Tensor<T>> exit_logits) {
  const Tensor<T> z = ensemble_logits(exit_logits);
  EnsemblePrediction<T> p;
  p.probabilities = softmax(z, 1.0);
  p.classes = argmax_rows(z);
  return p;
}

double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  require(predictions.size() == labels.size(), "accuracy: length mismatch");
  require(!labels.empty(), "accuracy: empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double ece(const Tensor<double>& probabilities, std::span<const int> labels, int num_bins) {
  require(num_bins >= 1, "ece: num_bins must be >= 1");
  if (labels.empty()) fail(ErrorKind::invalid_argument, "ece: empty dataset");
  check_rows(probabilities, labels.size(), "ece");
  const std::size_t c = probabilities.dim(1);
  std::vector<double> conf_sum(static_cast<std::size_t>(num_bins), 0.0), hit_sum(conf_sum.size(), 0.0);
  std::vector<std::size_t> count(conf_sum.size(), 0);
  const auto pred = argmax_rows(probabilities);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double conf = probabilities[i * c + static_cast<std::size_t>(pred[i])];
    const long b = std::clamp(static_cast<long>(std::ceil(conf * num_bins)) - 1, 0L, static_cast<long>(num_bins - 1));
    conf_sum[static_cast<std::size_t>(b)] += conf;
    hit_sum[static_cast<std::size_t>(b)] += pred[i] == labels[i] ? 1.0 : 0.0;
    ++count[static_cast<std::size_t>(b)];
  }
  double total = 0.0;
  const double n = static_cast<double>(labels.size());
  for (std::size_t b = 0; b < count.size(); ++b) {
    if (!count[b]) continue;
    const double m = static_cast<double>(count[b]);
    total += (m / n) * std::abs(hit_sum[b] / m - conf_sum[b] / m);
  }
  return total;
}

double nll(const Tensor<double>& probabilities, std::span<const int> labels) {
  require(!labels.empty(), "nll: empty input");
  check_rows(probabilities, labels.size(), "nll");
  const std::size_t c = probabilities.dim(1);
  double s = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    require(y < c, "nll: label out of range");
    s -= std::log(std::max(probabilities[i * c + y], 1e-12));
  }
  return s / static_cast<double>(labels.size());
}

double prediction_disagreement(std::span<const int> a, std::span<const int> b) {
  if (a.size() != b.size()) fail(ErrorKind::shape_mismatch, "prediction_disagreement: length mismatch");
  require(!a.empty(), "prediction_disagreement: empty input");
  std::size_t diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += a[i] != b[i];
  return static_cast<double>(diff) / static_cast<double>(a.size());
}

double cosine_similarity(const Tensor<double>& a, const Tensor<double>& b) {
  if (!a.same_shape(b) || a.rank() != 2) fail(ErrorKind::shape_mismatch, "cosine_similarity: shape mismatch");
  const std::size_t n = a.dim(0), c = a.dim(1);
  require(n > 0, "cosine_similarity: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t k = 0; k < c; ++k) {
      dot += a[i * c + k] * b[i * c + k];
      na += a[i * c + k] * a[i * c + k];
      nb += b[i * c + k] * b[i * c + k];
    }
    if (na == 0.0 || nb == 0.0) fail(ErrorKind::invalid_argument, "cosine_similarity: zero vector");
    total += dot / (std::sqrt(na) * std::sqrt(nb));
  }
  return total / static_cast<double>(n);
}

nlohmann::json EvalReport::to_json() const {
  return {{"per_exit_accuracy", per_exit_accuracy},
          {"ensemble_accuracy", ensemble_accuracy},
          {"nll", nll},
          {"ece", ece},
          {"pairwise_pd", pairwise_pd},
          {"pairwise_cs", pairwise_cs},
          {"flops_ratio", flops_ratio},
          {"num_samples", num_samples},
          {"parameters", parameters}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.per_exit_accuracy = j.at("per_exit_accuracy").get<std::vector<double>>();
    r.ensemble_accuracy = j.at("ensemble_accuracy").get<double>();
    r.nll = j.at("nll").get<double>();
    r.ece = j.at("ece").get<double>();
    r.pairwise_pd = j.at("pairwise_pd").get<std::vector<std::vector<double>>>();
    r.pairwise_cs = j.at("pairwise_cs").get<std::vector<std::vector<double>>>();
    r.flops_ratio = j.value("flops_ratio", 0.0);
    r.num_samples = j.value("num_samples", std::size_t{0});
    r.parameters = j.value("parameters", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, std::string("eval report: ") + e.what());
  }
  return r;
}

template <typename T>
EvalReport evaluate_logits(std::span<const Tensor<T>> exit_logits, std::span<const int> labels, int ece_bins) {
  require(!exit_logits.empty(), "evaluate: no exits");
  const std::size_t n_exits = exit_logits.size();
  std::vector<Tensor<double>> z;
  for (const auto& t : exit_logits) z.push_back(t.template cast<double>());

  EvalReport r;
  r.num_samples = labels.size();
  std::vector<std::vector<int>> preds;
  std::vector<Tensor<double>> probs;
  for (const auto& zi : z) {
    preds.push_back(argmax_rows(zi));
    probs.push_back(softmax(zi, 1.0));
    r.per_exit_accuracy.push_back(accuracy(preds.back(), labels));
  }
  const auto ens = ensemble_predict<double>(z);
  r.ensemble_accuracy = accuracy(ens.classes, labels);
  r.nll = nll(ens.probabilities, labels);
  r.ece = ece(ens.probabilities, labels, ece_bins);
  r.pairwise_pd.assign(n_exits, std::vector<double>(n_exits, 0.0));
  r.pairwise_cs.assign(n_exits, std::vector<double>(n_exits, 1.0));
  for (std::size_t a = 0; a < n_exits; ++a)
    for (std::size_t b = a + 1; b < n_exits; ++b) {
      r.pairwise_pd[a][b] = r.pairwise_pd[b][a] = prediction_disagreement(preds[a], preds[b]);
      r.pairwise_cs[a][b] = r.pairwise_cs[b][a] = cosine_similarity(probs[a], probs[b]);
    }
  return r;
}

template <typename T>
EvalReport evaluate(MultiExitModel<T>& model, const ImageSet& set, const Normalization& norm, std::size_t batch_size,
                    int ece_bins) {
  require(set.size() > 0, "evaluate: empty split");
  require(batch_size >= 1, "evaluate: batch_size must be >= 1");
  const std::size_t n_exits = static_cast<std::size_t>(model.num_exits());
  const std::size_t classes = model.spec.num_classes;
  std::vector<Tensor<T>> all(n_exits, Tensor<T>({set.size(), classes}));
  Executor<T> exec(model);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    const std::size_t stop = std::min(set.size(), start + batch_size);
    idx.clear();
    for (std::size_t i = start; i < stop; ++i) idx.push_back(i);
    const Batch<T> b = make_batch<T>(set, idx, norm);
    const auto& logits = exec.forward(b.x, Mode::eval, false);
    for (std::size_t j = 0; j < n_exits; ++j)
      std::copy(logits[j].storage().begin(), logits[j].storage().end(), all[j].data() + start * classes);
  }
  EvalReport r = evaluate_logits<T>(all, set.labels, ece_bins);
  const FlopsReport f = count_flops(model);
  r.flops_ratio = f.ratio;
  r.parameters = f.parameters;
  return r;
}

std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& rows, const std::string& provenance) {
  std::ostringstream os;
  char line[256];
  if (!provenance.empty()) os << "# " << provenance << "\n";
  std::snprintf(line, sizeof line, "%-28s %5s %8s %7s %7s %7s %7s %7s\n", "model", "exits", "acc(%)", "NLL", "ECE",
                "FLOPs", "PD", "CS");
  os << line;
  for (const auto& [name, r] : rows) {
    double pd = 0, cs = 0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < r.pairwise_pd.size(); ++a)
      for (std::size_t b = a + 1; b < r.pairwise_pd.size(); ++b, ++pairs) {
        pd += r.pairwise_pd[a][b];
        cs += r.pairwise_cs[a][b];
      }
    std::string pd_s = "-", cs_s = "-";
    if (pairs) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.3f", pd / static_cast<double>(pairs));
      pd_s = buf;
      std::snprintf(buf, sizeof buf, "%.3f", cs / static_cast<double>(pairs));
      cs_s = buf;
    }
    std::snprintf(line, sizeof line, "%-28s %5zu %8.2f %7.3f %7.3f %6.2fx %7s %7s\n", name.c_str(),
                  r.per_exit_accuracy.size(), 100.0 * r.ensemble_accuracy, r.nll, r.ece, r.flops_ratio, pd_s.c_str(),
                  cs_s.c_str());
    os << line;
  }
  return os.str();
}

#define NFE_INSTANTIATE_METRICS(T)                                                                    \
  template std::vector<int> argmax_rows<T>(const Tensor<T>&);                                         \
  template EnsemblePrediction<T> ensemble_predict<T>(std::span<const Tensor<T>>);                     \
  template EvalReport evaluate_logits<T>(std::span<const Tensor<T>>, std::span<const int>, int);      \
  template EvalReport evaluate<T>(MultiExitModel<T>&, const ImageSet&, const Normalization&, std::size_t, int);

NFE_INSTANTIATE_METRICS(float)
NFE_INSTANTIATE_METRICS(double)

}  // namespace nfe
