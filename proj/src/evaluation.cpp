#include "implantformer/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "implantformer/rng.hpp"
#include "json.hpp"

namespace implantformer {

using nlohmann::json;

Box keypoint_box(double x, double y, double size) {
  if (!(size > 0.0)) throw InvalidArgumentError("box size must be positive");
  const double half = size / 2.0;
  return {x - half, y - half, x + half, y + half};
}

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double iy = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

// Deterministic, permutation-invariant prediction order.
bool pred_before(const Detection& a, const Detection& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.x != b.x) return a.x < b.x;
  return a.y < b.y;
}

}  // namespace

MatchResult match_predictions(const std::vector<Detection>& preds,
                              const std::vector<std::pair<double, double>>& gts,
                              double iou_threshold, double box_size) {
  std::vector<Detection> sorted = preds;
  std::sort(sorted.begin(), sorted.end(), pred_before);

  MatchResult res;
  res.gt_count = static_cast<int>(gts.size());
  std::vector<bool> taken(gts.size(), false);

  for (const Detection& p : sorted) {
    const Box pb = keypoint_box(p.x, p.y, box_size);
    int best = -1;
    double best_iou = 0.0;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (taken[gi]) continue;
      const double v = iou(pb, keypoint_box(gts[gi].first, gts[gi].second, box_size));
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(gi);
      }
    }
    PredLabel label{p.confidence, p.x, p.y, best >= 0};
    if (best >= 0) taken[best] = true;
    res.labels.push_back(label);
  }
  for (bool t : taken)
    if (!t) ++res.missed;
  return res;
}

ApResult average_precision(const std::vector<MatchResult>& matches,
                           ApInterpolation interp) {
  int64_t gt_total = 0;
  std::vector<PredLabel> pool;
  for (const auto& m : matches) {
    gt_total += m.gt_count;
    pool.insert(pool.end(), m.labels.begin(), m.labels.end());
  }
  if (gt_total == 0) throw InvalidArgumentError("average_precision: no ground truths");

  std::sort(pool.begin(), pool.end(), [](const PredLabel& a, const PredLabel& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.x != b.x) return a.x < b.x;
    if (a.y != b.y) return a.y < b.y;
    return a.tp < b.tp;
  });

  ApResult res;
  res.curve.reserve(pool.size());
  int64_t tp = 0, fp = 0;
  for (const auto& label : pool) {
    (label.tp ? tp : fp) += 1;
    res.curve.push_back({static_cast<double>(tp) / gt_total,
                         static_cast<double>(tp) / (tp + fp)});
  }

  std::vector<double> env_at(res.curve.size());
  double env = 0.0;
  for (size_t i = res.curve.size(); i-- > 0;) {
    env = std::max(env, res.curve[i].precision);
    env_at[i] = env;
  }

  if (interp == ApInterpolation::eleven_point) {
    double sum = 0.0;
    for (int k = 0; k <= 10; ++k) {
      const double r = k / 10.0;
      double p = 0.0;
      for (size_t i = 0; i < res.curve.size(); ++i)
        if (res.curve[i].recall >= r) {
          p = env_at[i];
          break;
        }
      sum += p;
    }
    res.ap = sum / 11.0;
    return res;
  }

  // Area under the precision envelope (all-point interpolation).
  double ap = 0.0, prev_recall = 0.0;
  for (size_t i = 0; i < res.curve.size(); ++i) {
    ap += (res.curve[i].recall - prev_recall) * env_at[i];
    prev_recall = res.curve[i].recall;
  }
  res.ap = ap;
  return res;
}

DistanceHistogram distance_histogram(
    const std::vector<std::pair<Detection, std::pair<double, double>>>& pairs,
    double bin_width) {
  if (!(bin_width > 0.0)) throw InvalidArgumentError("bin width must be positive");
  DistanceHistogram hist;
  hist.bin_width = bin_width;
  for (const auto& [pred, gt] : pairs) {
    const double d = std::hypot(pred.x - gt.first, pred.y - gt.second);
    const size_t bin = static_cast<size_t>(d / bin_width);
    if (hist.counts.size() <= bin) hist.counts.resize(bin + 1, 0);
    ++hist.counts[bin];
    ++hist.total;
  }
  return hist;
}

std::vector<std::vector<std::string>> five_fold_split(std::vector<std::string> patient_ids,
                                                      uint64_t seed) {
  constexpr int kFolds = 5;
  if (patient_ids.size() < kFolds)
    throw InvalidArgumentError("five-fold split needs at least 5 patients");

  std::sort(patient_ids.begin(), patient_ids.end());
  Rng rng(Rng::mix(seed, 0xF01D5));
  for (size_t i = patient_ids.size() - 1; i > 0; --i) {
    const size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i)));
    std::swap(patient_ids[i], patient_ids[j]);
  }

  std::vector<std::vector<std::string>> folds(kFolds);
  const size_t n = patient_ids.size();
  const size_t base = n / kFolds, extra = n % kFolds;
  size_t pos = 0;
  for (int f = 0; f < kFolds; ++f) {
    const size_t size = base + (static_cast<size_t>(f) < extra ? 1 : 0);
    folds[f].assign(patient_ids.begin() + pos, patient_ids.begin() + pos + size);
    pos += size;
  }
  return folds;
}

namespace {

std::string threshold_key(double t) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(2);
  ss << t;
  return ss.str();
}

}  // namespace

std::string format_mean_std(double mean_fraction, double std_fraction) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(1);
  ss << mean_fraction * 100.0;
  ss << "±";
  ss.precision(4);
  ss << std_fraction * 100.0;
  return ss.str();
}

EvalReport evaluate(const std::vector<DetectionFile>& preds,
                    const std::vector<KeypointTrack>& gts,
                    std::vector<double> thresholds, double box_size, double bin_width,
                    ApInterpolation interp) {
  if (preds.empty() || gts.empty()) throw InvalidArgumentError("evaluate: empty input");
  if (thresholds.empty()) throw InvalidArgumentError("evaluate: no IoU thresholds");

  std::map<std::string, const KeypointTrack*> gt_by_patient;
  for (const auto& t : gts) {
    if (!gt_by_patient.emplace(t.patient, &t).second)
      throw InvalidArgumentError("duplicate ground-truth patient '" + t.patient + "'");
  }

  // Per (threshold, fold_or_all) match results. Fold -1 pools everything.
  EvalReport report;
  report.box_size = box_size;
  report.thresholds = thresholds;

  std::set<int> fold_tags;
  std::map<std::string, int> seen_patients;

  std::vector<std::vector<MatchResult>> pooled(thresholds.size());
  std::map<int, std::vector<std::vector<MatchResult>>> per_fold;
  std::vector<std::pair<Detection, std::pair<double, double>>> hist_pairs;

  // Detection files sorted by patient for order-independent reports.
  std::vector<const DetectionFile*> ordered;
  for (const auto& p : preds) ordered.push_back(&p);
  std::sort(ordered.begin(), ordered.end(),
            [](const DetectionFile* a, const DetectionFile* b) {
              return a->patient < b->patient;
            });

  for (const DetectionFile* file : ordered) {
    auto it = gt_by_patient.find(file->patient);
    if (it == gt_by_patient.end())
      throw InvalidArgumentError("predictions for unknown patient '" + file->patient + "'");
    if (++seen_patients[file->patient] > 1)
      throw InvalidArgumentError("duplicate prediction file for patient '" + file->patient +
                                 "'");
    const KeypointTrack& gt = *it->second;
    if (file->fold >= 0) fold_tags.insert(file->fold);

    std::map<int, const SliceDetections*> by_z;
    for (const auto& s : file->slices) by_z[s.z] = &s;

    std::set<int> gt_zs;
    for (const auto& p : gt.points) gt_zs.insert(p.z);

    auto match_slice = [&](const std::vector<Detection>& dets,
                           const std::vector<std::pair<double, double>>& slice_gts) {
      for (size_t ti = 0; ti < thresholds.size(); ++ti) {
        MatchResult m = match_predictions(dets, slice_gts, thresholds[ti], box_size);
        pooled[ti].push_back(m);
        if (file->fold >= 0) {
          auto& fv = per_fold[file->fold];
          if (fv.empty()) fv.resize(thresholds.size());
          fv[ti].push_back(std::move(m));
        }
      }
    };

    for (const auto& p : gt.points) {
      std::vector<std::pair<double, double>> slice_gts{{p.x, p.y}};
      auto dz = by_z.find(p.z);
      const std::vector<Detection> empty;
      const std::vector<Detection>& dets = dz == by_z.end() ? empty : dz->second->detections;
      match_slice(dets, slice_gts);
      if (!dets.empty()) {
        const Detection top =
            *std::min_element(dets.begin(), dets.end(), pred_before);
        hist_pairs.push_back({top, {p.x, p.y}});
      }
    }
    // Slices with predictions but no ground truth contribute false positives.
    for (const auto& s : file->slices) {
      if (gt_zs.count(s.z) || s.detections.empty()) continue;
      match_slice(s.detections, {});
    }
  }

  for (size_t ti = 0; ti < thresholds.size(); ++ti) {
    ApResult r = average_precision(pooled[ti], interp);
    report.ap.push_back(r.ap);
    report.pr.push_back(std::move(r.curve));
  }
  report.histogram = distance_histogram(hist_pairs, bin_width);

  if (!fold_tags.empty()) {
    for (int f : fold_tags) {
      FoldAp fa;
      fa.fold = f;
      for (size_t ti = 0; ti < thresholds.size(); ++ti)
        fa.ap.push_back(average_precision(per_fold[f][ti], interp).ap);
      report.folds.push_back(std::move(fa));
    }
    for (size_t ti = 0; ti < thresholds.size(); ++ti) {
      double mean = 0.0;
      for (const auto& f : report.folds) mean += f.ap[ti];
      mean /= report.folds.size();
      double var = 0.0;
      for (const auto& f : report.folds) var += (f.ap[ti] - mean) * (f.ap[ti] - mean);
      const double sd = report.folds.size() > 1
                            ? std::sqrt(var / (report.folds.size() - 1))
                            : 0.0;
      report.ap_mean.push_back(mean);
      report.ap_std.push_back(sd);
    }
  }
  return report;
}

std::string EvalReport::to_json() const {
  json j;
  j["box_size"] = box_size;
  j["thresholds"] = thresholds;
  json ap_obj = json::object(), pr_obj = json::object();
  for (size_t i = 0; i < thresholds.size(); ++i) {
    const std::string key = threshold_key(thresholds[i]);
    ap_obj[key] = ap[i];
    json curve = json::array();
    for (const auto& p : pr[i]) curve.push_back({p.recall, p.precision});
    pr_obj[key] = std::move(curve);
  }
  j["ap"] = ap_obj;
  j["pr_curves"] = pr_obj;
  j["distance_histogram"] = {{"bin_width", histogram.bin_width},
                             {"counts", histogram.counts},
                             {"total", histogram.total}};
  if (!folds.empty()) {
    json folds_arr = json::array();
    for (const auto& f : folds) {
      json fj{{"fold", f.fold}};
      json fap = json::object();
      for (size_t i = 0; i < thresholds.size(); ++i) fap[threshold_key(thresholds[i])] = f.ap[i];
      fj["ap"] = fap;
      folds_arr.push_back(std::move(fj));
    }
    j["folds"] = folds_arr;
    json mean_obj = json::object(), std_obj = json::object(), summary = json::object();
    for (size_t i = 0; i < thresholds.size(); ++i) {
      const std::string key = threshold_key(thresholds[i]);
      mean_obj[key] = ap_mean[i];
      std_obj[key] = ap_std[i];
      summary[key] = format_mean_std(ap_mean[i], ap_std[i]);
    }
    j["ap_mean"] = mean_obj;
    j["ap_std"] = std_obj;
    j["summary"] = summary;
  }
  return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad report JSON: ") + e.what());
  }
  EvalReport r;
  r.box_size = j.value("box_size", 21.0);
  r.thresholds = j.value("thresholds", std::vector<double>{});
  for (double t : r.thresholds) {
    const std::string key = threshold_key(t);
    r.ap.push_back(j.at("ap").at(key).get<double>());
    std::vector<PrPoint> curve;
    if (j.contains("pr_curves") && j["pr_curves"].contains(key)) {
      for (const auto& p : j["pr_curves"][key])
        curve.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    }
    r.pr.push_back(std::move(curve));
  }
  const auto& h = j.at("distance_histogram");
  r.histogram.bin_width = h.at("bin_width").get<double>();
  r.histogram.counts = h.at("counts").get<std::vector<int64_t>>();
  r.histogram.total = h.at("total").get<int64_t>();
  return r;
}

void write_histogram_csv(const EvalReport& report, const std::string& csv_path) {
  std::ostringstream ss;
  ss << "bin_start,bin_end,count\n";
  for (size_t i = 0; i < report.histogram.counts.size(); ++i)
    ss << i * report.histogram.bin_width << ',' << (i + 1) * report.histogram.bin_width
       << ',' << report.histogram.counts[i] << '\n';
  write_text_file(csv_path, ss.str());
}

void write_histogram_svg(const EvalReport& report, const std::string& svg_path) {
  const auto& counts = report.histogram.counts;
  const int w = 480, h = 320, margin = 40;
  int64_t max_count = 1;
  for (int64_t c : counts) max_count = std::max(max_count, c);

  std::ostringstream ss;
  ss << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\">\n";
  ss << "<rect width=\"" << w << "\" height=\"" << h << "\" fill=\"white\"/>\n";
  const double plot_w = w - 2.0 * margin, plot_h = h - 2.0 * margin;
  const double bar_w = counts.empty() ? plot_w : plot_w / counts.size();
  for (size_t i = 0; i < counts.size(); ++i) {
    const double bh = plot_h * static_cast<double>(counts[i]) / static_cast<double>(max_count);
    ss << "<rect x=\"" << margin + i * bar_w + 1 << "\" y=\"" << margin + plot_h - bh
       << "\" width=\"" << bar_w - 2 << "\" height=\"" << bh
       << "\" fill=\"#4878a8\"/>\n";
    ss << "<text x=\"" << margin + (i + 0.5) * bar_w << "\" y=\"" << h - margin + 16
       << "\" font-size=\"10\" text-anchor=\"middle\">" << i * report.histogram.bin_width
       << "-" << (i + 1) * report.histogram.bin_width << "</text>\n";
    ss << "<text x=\"" << margin + (i + 0.5) * bar_w << "\" y=\""
       << margin + plot_h - bh - 4 << "\" font-size=\"10\" text-anchor=\"middle\">"
       << counts[i] << "</text>\n";
  }
  ss << "<line x1=\"" << margin << "\" y1=\"" << margin + plot_h << "\" x2=\""
     << w - margin << "\" y2=\"" << margin + plot_h << "\" stroke=\"black\"/>\n";
  ss << "<text x=\"" << w / 2 << "\" y=\"" << h - 6
     << "\" font-size=\"12\" text-anchor=\"middle\">distance to ground truth (px)</text>\n";
  ss << "</svg>\n";
  write_text_file(svg_path, ss.str());
}

}  // namespace implantformer
