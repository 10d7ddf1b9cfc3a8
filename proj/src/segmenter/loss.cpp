#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "chart/error.hpp"
#include "chart/segmenter.hpp"

namespace chart {

namespace {

void check_target(const HeadOutput& head, const SegTarget& target, const SegmenterConfig& cfg) {
  if (head.class_logits.rank() != 2 || head.class_logits.dim(1) != cfg.classes + 1) {
    throw InputError("segmentation loss: class logits must be [N, " + std::to_string(cfg.classes + 1) + "]");
  }
  if (target.masks.size() != target.labels.size()) throw InputError("segmentation loss: one label per mask");
  const std::size_t hw = head.mask_logits.dim(1);
  for (std::size_t g = 0; g < target.masks.size(); ++g) {
    if (target.masks[g].bits.size() != hw) throw InputError("segmentation loss: mask size does not match logits");
    if (target.labels[g] >= cfg.classes) throw InputError("segmentation loss: label out of range");
  }
}

double focal_term(double logit, bool on, double alpha, double gamma) {
  const double p = 1.0 / (1.0 + std::exp(-logit));
  // log sigma(x) and log(1 - sigma(x)) in overflow-safe form.
  const double log_p = -std::log1p(std::exp(-std::abs(logit))) + std::min(logit, 0.0);
  const double log_q = log_p - logit;
  return on ? -alpha * std::pow(1.0 - p, gamma) * log_p : -(1.0 - alpha) * std::pow(p, gamma) * log_q;
}

std::vector<double> flat_targets(const SegTarget& target, std::span<const std::size_t> order) {
  std::vector<double> out;
  for (std::size_t g : order)
    for (std::uint8_t b : target.masks[g].bits) out.push_back(b ? 1.0 : 0.0);
  return out;
}

}  // namespace

std::vector<double> matching_costs(const HeadOutput& head, const SegTarget& target, const SegmenterConfig& cfg) {
  check_target(head, target, cfg);
  const std::size_t n = head.class_logits.dim(0), c = head.class_logits.dim(1), g_count = target.masks.size();
  const std::size_t hw = head.mask_logits.dim(1);
  const auto cl = head.class_logits.data();
  const auto ml = head.mask_logits.data();
  std::vector<double> costs(n * g_count, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = cl.data() + i * c;
    const double mx = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double* logits = ml.data() + i * hw;
    double prob_sum = 0.0;
    std::vector<double> probs(hw);
    for (std::size_t k = 0; k < hw; ++k) prob_sum += (probs[k] = 1.0 / (1.0 + std::exp(-logits[k])));
    for (std::size_t g = 0; g < g_count; ++g) {
      const auto& bits = target.masks[g].bits;
      double focal = 0.0, inter = 0.0, area = 0.0;
      for (std::size_t k = 0; k < hw; ++k) {
        focal += focal_term(logits[k], bits[k] != 0, cfg.focal_alpha, cfg.focal_gamma);
        if (bits[k]) {
          inter += probs[k];
          area += 1.0;
        }
      }
      const double dice = 1.0 - (2.0 * inter + cfg.dice_epsilon) / (prob_sum + area + cfg.dice_epsilon);
      const double p_cls = std::exp(row[target.labels[g]] - mx) / z;
      costs[i * g_count + g] = -cfg.lambda_cls * p_cls + cfg.lambda_focal * focal / static_cast<double>(hw) +
                               cfg.lambda_dice * dice;
    }
  }
  return costs;
}

Tensor dice_loss(const Tensor& mask_logits, const std::vector<double>& targets, std::size_t rows, double epsilon) {
  if (mask_logits.rank() != 2 || mask_logits.dim(0) != rows || targets.size() != mask_logits.numel()) {
    throw InputError("dice_loss: expected " + std::to_string(rows) + " logit rows matching the targets");
  }
  const std::size_t hw = mask_logits.dim(1);
  const Tensor g = Tensor::from({rows, hw}, targets);
  const Tensor p = sigmoid(mask_logits);
  const Tensor num = add_scalar(scale(sum_axis(mul(p, g), 1), 2.0), epsilon);
  const Tensor den = add_scalar(add(sum_axis(p, 1), sum_axis(g, 1)), epsilon);
  return add_scalar(scale(div(num, den), -1.0), 1.0);
}

LossBreakdown segmentation_loss(const HeadOutput& head, const SegTarget& target, const SegmenterConfig& cfg,
                                std::vector<std::size_t> assignment) {
  check_target(head, target, cfg);
  const std::size_t n = head.class_logits.dim(0), g_count = target.masks.size();
  const std::size_t hw = head.mask_logits.dim(1);
  if (assignment.empty() && g_count > 0) {
    NoGradGuard guard;
    assignment = hungarian_match(matching_costs(head, target, cfg), n, g_count);
  }
  if (assignment.size() != g_count) throw InputError("segmentation loss: assignment must cover every target");

  std::vector<std::size_t> labels(n, cfg.classes);
  for (std::size_t g = 0; g < g_count; ++g) labels.at(assignment[g]) = target.labels[g];
  std::vector<double> weights(cfg.classes + 1, 1.0);
  weights.back() = cfg.no_object_weight;

  LossBreakdown out;
  const Tensor ce = cross_entropy(head.class_logits, labels, weights);
  out.classification = ce.item();
  out.total = scale(ce, cfg.lambda_cls);
  if (g_count > 0) {
    std::vector<std::size_t> order(g_count);
    for (std::size_t g = 0; g < g_count; ++g) order[g] = g;
    const std::vector<double> tg = flat_targets(target, order);
    const Tensor matched = gather_rows(head.mask_logits, assignment);
    const Tensor focal =
        scale(sum(sigmoid_focal(matched, tg, cfg.focal_alpha, cfg.focal_gamma)), 1.0 / static_cast<double>(g_count * hw));
    const Tensor dice = mean(dice_loss(matched, tg, g_count, cfg.dice_epsilon));
    out.focal = focal.item();
    out.dice = dice.item();
    out.total = add(out.total, add(scale(focal, cfg.lambda_focal), scale(dice, cfg.lambda_dice)));
  }
  out.assignment = std::move(assignment);
  return out;
}

TrainSample make_train_sample(const Tensor& image, const InstanceImage& record) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != record.size.height || image.dim(2) != record.size.width) {
    throw InputError("training image does not match the record size of " + record.file_name);
  }
  TrainSample s{image, {}};
  for (const auto& a : record.annotations) {
    Mask m = rasterize(a.polygon, record.size);
    if (m.count() == 0) continue;
    s.target.masks.push_back(std::move(m));
    s.target.labels.push_back(static_cast<std::size_t>(category_id(a.category) - 1));
  }
  return s;
}

SegTrainer::SegTrainer(ChartFormer& model, OptimizerConfig opt)
    : model_(model), optimizer_(std::move(opt), param_tensors(model.params())) {}

double SegTrainer::step(const std::vector<const TrainSample*>& batch) {
  if (batch.empty()) throw InputError("train step needs a non-empty batch");
  const SegmenterConfig& cfg = model_.config();
  double total = 0.0;
  for (const TrainSample* sample : batch) {
    const SegmentationForward f = model_.forward(sample->image);
    if (sample->target.masks.size() > f.final().class_logits.dim(0)) {
      throw InputError("more targets than queries in " + std::to_string(sample->target.masks.size()) + "-instance sample");
    }
    Tensor loss = segmentation_loss(f.final(), sample->target, cfg).total;
    if (cfg.aux_loss) {
      for (std::size_t l = 0; l + 1 < f.layers.size(); ++l) {
        loss = add(loss, segmentation_loss(f.layers[l], sample->target, cfg).total);
      }
    }
    const double value = loss.item();
    if (!std::isfinite(value)) throw std::runtime_error("training loss became non-finite");
    total += value;
    scale(loss, 1.0 / static_cast<double>(batch.size())).backward();
  }
  optimizer_.step();
  return total / static_cast<double>(batch.size());
}

}  // namespace chart
