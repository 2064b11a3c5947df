#include "aerialformer/metrics.hpp"

#include <cstdio>
#include <sstream>

namespace aerialformer::metrics {

using nlohmann::json;

Confusion::Confusion(Index num_classes, std::uint8_t ignore_index)
    : counts_(static_cast<std::size_t>(num_classes)), ignore_(ignore_index) {
  if (num_classes < 1) throw ConfigError("class count must be >= 1");
}

void Confusion::add(const LabelMap& pred, const LabelMap& gt, const std::string& source) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DataError(source + ": prediction " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                    " and ground truth " + std::to_string(gt.height) + "x" + std::to_string(gt.width) +
                    " differ in size");
  }
  const Index classes = num_classes();
  auto where = [&](std::size_t i) {
    const auto flat = static_cast<Index>(i);
    return "(" + std::to_string(flat / gt.width) + ", " + std::to_string(flat % gt.width) + ")";
  };
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    const Index g = gt.ids[i];
    if (g == ignore_) continue;
    const Index p = pred.ids[i];
    if (g >= classes) throw DataError(source + ": ground-truth id " + std::to_string(g) + " out of range at " + where(i));
    if (p >= classes) throw DataError(source + ": predicted id " + std::to_string(p) + " out of range at " + where(i));
    ++evaluated_;
    if (p == g) {
      ++correct_;
      ++counts_[static_cast<std::size_t>(g)].tp;
    } else {
      ++counts_[static_cast<std::size_t>(g)].fn;
      ++counts_[static_cast<std::size_t>(p)].fp;
    }
  }
  // Every other class sees a true negative at each evaluated pixel.
  for (auto& c : counts_) c.tn = evaluated_ - c.tp - c.fp - c.fn;
}

Confusion confusion(const LabelMap& pred, const LabelMap& gt, Index num_classes, std::uint8_t ignore_index) {
  Confusion c(num_classes, ignore_index);
  c.add(pred, gt);
  return c;
}

namespace {

std::optional<double> ratio(Index num, Index den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

std::optional<double> mean_of(const std::vector<ClassMetrics>& cs, std::optional<double> ClassMetrics::*field) {
  double total = 0.0;
  Index n = 0;
  for (const auto& c : cs) {
    if (const auto& v = c.*field) {
      total += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return total / static_cast<double>(n);
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::string name_of(const std::vector<std::string>& names, std::size_t c) {
  return c < names.size() ? names[c] : "class" + std::to_string(c);
}

std::string cell(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

}  // namespace

MetricsReport compute_metrics(const Confusion& conf) {
  MetricsReport r;
  r.pixels = conf.evaluated();
  for (Index c = 0; c < conf.num_classes(); ++c) {
    const ClassCounts& k = conf[c];
    ClassMetrics m;
    m.counts = k;
    m.iou = ratio(k.tp, k.tp + k.fn + k.fp);
    m.acc = ratio(k.tp + k.tn, k.total());
    m.f1 = ratio(2 * k.tp, 2 * k.tp + k.fn + k.fp);
    if (!m.iou) r.undefined_classes.push_back(c);
    r.classes.push_back(m);
  }
  r.miou = mean_of(r.classes, &ClassMetrics::iou);
  r.oa = mean_of(r.classes, &ClassMetrics::acc);
  r.mf1 = mean_of(r.classes, &ClassMetrics::f1);
  r.pixel_accuracy = ratio(conf.correct(), conf.evaluated());
  return r;
}

json to_json(const MetricsReport& r, const std::vector<std::string>& names, bool with_pixel_accuracy) {
  json classes = json::array();
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    const auto& m = r.classes[c];
    classes.push_back({{"id", c},
                       {"name", name_of(names, c)},
                       {"tp", m.counts.tp},
                       {"tn", m.counts.tn},
                       {"fp", m.counts.fp},
                       {"fn", m.counts.fn},
                       {"iou", opt(m.iou)},
                       {"acc", opt(m.acc)},
                       {"f1", opt(m.f1)}});
  }
  json j{{"classes", classes},
         {"mIoU", opt(r.miou)},
         {"OA", opt(r.oa)},
         {"mF1", opt(r.mf1)},
         {"pixels", r.pixels},
         {"undefined_classes", r.undefined_classes}};
  if (with_pixel_accuracy) j["pixel_accuracy"] = opt(r.pixel_accuracy);
  return j;
}

std::string format_table(const MetricsReport& r, const std::vector<std::string>& names, bool with_pixel_accuracy) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %12s %12s %12s %12s %8s %8s %8s\n", "class", "TP", "TN", "FP", "FN",
                "IoU", "Acc", "F1");
  os << line;
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    const auto& m = r.classes[c];
    std::snprintf(line, sizeof line, "%-16s %12lld %12lld %12lld %12lld %8s %8s %8s\n", name_of(names, c).c_str(),
                  static_cast<long long>(m.counts.tp), static_cast<long long>(m.counts.tn),
                  static_cast<long long>(m.counts.fp), static_cast<long long>(m.counts.fn), cell(m.iou).c_str(),
                  cell(m.acc).c_str(), cell(m.f1).c_str());
    os << line;
  }
  std::snprintf(line, sizeof line, "%-16s %12s %12s %12s %12s %8s %8s %8s\n", "mean", "", "", "", "",
                cell(r.miou).c_str(), cell(r.oa).c_str(), cell(r.mf1).c_str());
  os << line;
  os << "mIoU " << cell(r.miou) << "  OA " << cell(r.oa) << "  mF1 " << cell(r.mf1);
  if (with_pixel_accuracy) os << "  pixel accuracy " << cell(r.pixel_accuracy);
  os << "  (" << r.pixels << " pixels)\n";
  if (!r.undefined_classes.empty()) {
    os << "classes absent from prediction and ground truth (excluded from means):";
    for (Index c : r.undefined_classes) os << ' ' << name_of(names, static_cast<std::size_t>(c));
    os << '\n';
  }
  return os.str();
}

}  // namespace aerialformer::metrics
