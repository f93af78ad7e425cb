#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "implantformer/evaluation.hpp"
#include "implantformer/inference.hpp"
#include "implantformer/io_json.hpp"
#include "implantformer/network.hpp"
#include "implantformer/phantom.hpp"
#include "implantformer/training.hpp"

namespace fs = std::filesystem;
using namespace implantformer;

namespace {

struct ZRange {
  uint32_t lo = 0, hi = 0;  // inclusive
};

// "a..b" inclusive
ZRange parse_range(const std::string& text) {
  const size_t pos = text.find("..");
  if (pos == std::string::npos)
    throw InvalidArgumentError("range must look like 'a..b': " + text);
  ZRange r;
  r.lo = static_cast<uint32_t>(std::stoul(text.substr(0, pos)));
  r.hi = static_cast<uint32_t>(std::stoul(text.substr(pos + 2)));
  if (r.hi < r.lo) throw InvalidArgumentError("empty range: " + text);
  return r;
}

std::vector<uint32_t> range_to_zs(const ZRange& r) {
  std::vector<uint32_t> zs;
  for (uint32_t z = r.lo; z <= r.hi; ++z) zs.push_back(z);
  return zs;
}

std::string patient_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "p%03d", index);
  return buf;
}

int run_phantom_generate(int patients, uint64_t seed, const std::string& out_dir,
                         const PhantomConfig& base, double tilt_max) {
  fs::create_directories(out_dir);
  Rng meta(Rng::mix(seed, 0x9e0));
  for (int i = 0; i < patients; ++i) {
    PhantomConfig cfg = base;
    cfg.seed = Rng::mix(seed, 1000 + static_cast<uint64_t>(i));
    cfg.tilt_x = meta.uniform(-tilt_max, tilt_max);
    cfg.tilt_y = meta.uniform(-tilt_max, tilt_max);
    cfg.gap_index = meta.uniform_int(1, cfg.tooth_count - 2);

    const std::string id = patient_id(i);
    auto [volume, track] = generate_phantom(cfg);
    track.patient = id;
    save_volume(volume, (fs::path(out_dir) / (id + ".ivol")).string());
    save_track(track, (fs::path(out_dir) / (id + ".root.json")).string());
    save_phantom_config(cfg, (fs::path(out_dir) / (id + ".phantom.json")).string());
  }
  std::cout << "wrote " << patients << " phantom patients to " << out_dir << "\n";
  return 0;
}

int run_labels(bool to_crown, const std::string& track_path, const std::string& range_text,
               const std::string& out_path) {
  const KeypointTrack track = load_track(track_path);
  const std::vector<uint32_t> zs = range_to_zs(parse_range(range_text));
  const KeypointTrack out =
      to_crown ? project_root_to_crown(track, zs) : project_crown_to_root(track, zs);
  save_track(out, out_path);
  std::cout << "wrote " << out.points.size() << " projected points to " << out_path << "\n";
  return 0;
}

std::vector<std::string> list_patients(const std::string& data_dir) {
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(data_dir)) {
    if (entry.path().extension() == ".ivol") ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw IoError("no .ivol volumes under " + data_dir);
  return ids;
}

int run_train(const std::string& data_dir, const std::string& net_cfg_path,
              const std::string& train_cfg_path, const std::string& out_path,
              const std::string& log_path, const std::string& region, int root_take,
              uint64_t init_seed, double window_lo, double window_hi) {
  NetConfig net = net_cfg_path.empty()
                      ? NetConfig{}
                      : NetConfig::from_json_text(read_text_file(net_cfg_path));
  TrainConfig cfg = train_cfg_path.empty()
                        ? TrainConfig{}
                        : TrainConfig::from_json_text(read_text_file(train_cfg_path));

  std::vector<TrainSample> dataset;
  for (const std::string& id : list_patients(data_dir)) {
    const Volume volume = load_volume((fs::path(data_dir) / (id + ".ivol")).string());
    const KeypointTrack track =
        load_track((fs::path(data_dir) / (id + ".root.json")).string());
    if (region == "crown")
      append_crown_samples(volume, track, dataset, window_lo, window_hi);
    else if (region == "root")
      append_root_samples(volume, track, dataset, root_take, window_lo, window_hi);
    else
      throw InvalidArgumentError("--region must be crown or root");
  }

  Model<float> model(net, init_seed);
  const TrainResult res = train(model, dataset, cfg, log_path);
  save_checkpoint(out_path, model.config(), model.params());
  std::cout << "trained on " << dataset.size() << " slices, final loss "
            << res.final_loss << ", checkpoint " << out_path << "\n";
  return 0;
}

int run_infer(const std::string& model_path, const std::string& volume_path,
              const std::string& out_path, const std::string& root_track_path, int top_k,
              double min_conf, int fold, std::string patient, double window_lo,
              double window_hi) {
  auto [cfg, params] = load_checkpoint(model_path);
  const Model<float> model(cfg, std::move(params));
  const Volume volume = load_volume(volume_path);
  if (patient.empty()) patient = fs::path(volume_path).stem().string();

  InferOptions opts;
  opts.top_k = top_k;
  opts.min_confidence = min_conf;
  opts.window_lo = window_lo;
  opts.window_hi = window_hi;
  InferResult result = infer_volume(model, volume, opts);
  result.crown.patient = patient;
  result.crown.fold = fold;
  result.crown_track.patient = patient;
  result.root_track.patient = patient;

  save_detections(result.crown, out_path);
  if (result.root_track.points.empty())
    std::cerr << "warning: no detections above the confidence floor; root track is empty\n";
  if (!root_track_path.empty()) save_track(result.root_track, root_track_path);
  std::cout << "wrote detections for " << patient << " to " << out_path << "\n";
  return 0;
}

std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t comma = text.find(',', pos);
    if (comma == std::string::npos) comma = text.size();
    out.push_back(std::stod(text.substr(pos, comma - pos)));
    pos = comma + 1;
  }
  if (out.empty()) throw InvalidArgumentError("no IoU thresholds given");
  return out;
}

int run_eval(const std::string& pred_glob, const std::string& gt_glob,
             const std::string& iou_text, const std::string& out_path, double box_size,
             double bin_width, const std::string& pred_format,
             const std::string& interpolation) {
  std::vector<DetectionFile> preds;
  for (const std::string& path : expand_glob(pred_glob)) {
    if (pred_format == "detections") {
      preds.push_back(load_detections(path));
    } else if (pred_format == "track") {
      const KeypointTrack t = load_track(path);
      DetectionFile f;
      f.patient = t.patient;
      for (const auto& p : t.points) f.slices.push_back({p.z, {{p.x, p.y, 1.0}}});
      preds.push_back(std::move(f));
    } else {
      throw InvalidArgumentError("--pred-format must be detections or track");
    }
  }
  std::vector<KeypointTrack> gts;
  for (const std::string& path : expand_glob(gt_glob)) gts.push_back(load_track(path));

  ApInterpolation interp;
  if (interpolation == "all")
    interp = ApInterpolation::all_point;
  else if (interpolation == "11point")
    interp = ApInterpolation::eleven_point;
  else
    throw InvalidArgumentError("--interpolation must be all or 11point");
  const EvalReport report =
      evaluate(preds, gts, parse_thresholds(iou_text), box_size, bin_width, interp);
  write_text_file(out_path, report.to_json());
  for (size_t i = 0; i < report.thresholds.size(); ++i)
    std::cout << "AP@" << report.thresholds[i] << " = " << report.ap[i] << "\n";
  std::cout << "report written to " << out_path << "\n";
  return 0;
}

int run_render(const std::string& volume_path, const std::string& track_path,
               const std::string& out_path, double radius, int depth, int value) {
  const Volume volume = load_volume(volume_path);
  const KeypointTrack track = load_track(track_path);
  const int d = depth > 0 ? depth : static_cast<int>(volume.crown_boundary);
  const Volume out =
      render_implant_cylinder(volume, track, radius, d, static_cast<int16_t>(value));
  save_volume(out, out_path);
  std::cout << "rendered implant cylinder into " << out_path << "\n";
  return 0;
}

int run_plot(const std::string& report_path, const std::string& csv_path,
             const std::string& svg_path) {
  const EvalReport report = EvalReport::from_json_text(read_text_file(report_path));
  write_histogram_csv(report, csv_path);
  if (!svg_path.empty()) write_histogram_svg(report, svg_path);
  std::cout << "histogram written to " << csv_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ImplantFormer: implant position regression on CBCT-style volumes"};
  app.require_subcommand(1);

  // phantom generate
  auto* phantom = app.add_subcommand("phantom", "synthetic patient volumes");
  auto* gen = phantom->add_subcommand("generate", "generate phantom patients");
  int patients = 1;
  uint64_t seed = 0;
  std::string out_dir = ".";
  PhantomConfig base;
  double tilt_max = 0.2;
  gen->add_option("--patients", patients, "number of patients")->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "base seed");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--size", base.image_size, "slice size in pixels");
  gen->add_option("--depth", base.depth, "slices per volume");
  gen->add_option("--boundary", base.crown_boundary, "crown boundary slice");
  gen->add_option("--teeth", base.tooth_count, "teeth per arch");
  gen->add_option("--noise", base.noise_level, "noise amplitude");
  gen->add_option("--blur", base.root_blur_level, "root blur passes");
  gen->add_option("--tilt-max", tilt_max, "max |tilt| drawn per patient");

  // labels
  auto* labels = app.add_subcommand("labels", "centerline label projection");
  auto* to_crown = labels->add_subcommand("project-to-crown", "root annotations -> crown labels");
  std::string track_path, crown_range, labels_out;
  to_crown->add_option("--track", track_path, "root track JSON")->required();
  to_crown->add_option("--crown-z", crown_range, "crown slice range a..b")->required();
  to_crown->add_option("--out", labels_out, "output track JSON")->required();
  auto* to_root = labels->add_subcommand("project-to-root", "crown predictions -> root positions");
  std::string root_track_in, root_range, root_out;
  to_root->add_option("--track", root_track_in, "crown track JSON")->required();
  to_root->add_option("--root-z", root_range, "root slice range a..b")->required();
  to_root->add_option("--out", root_out, "output track JSON")->required();

  // train
  auto* tr = app.add_subcommand("train", "train the regression network");
  std::string data_dir, net_cfg_path, train_cfg_path, model_out, log_path;
  std::string region = "crown";
  int root_take = 0;
  uint64_t init_seed = 0;
  tr->add_option("--data", data_dir, "directory of <id>.ivol + <id>.root.json")->required();
  tr->add_option("--net-config", net_cfg_path, "network config JSON");
  tr->add_option("--train-config", train_cfg_path, "training config JSON");
  tr->add_option("--out", model_out, "checkpoint path")->required();
  tr->add_option("--log", log_path, "loss log CSV");
  tr->add_option("--region", region, "train on crown or root slices");
  tr->add_option("--root-take", root_take, "root slices per patient (0 = all)");
  tr->add_option("--init-seed", init_seed, "parameter init seed");
  double tr_window_lo = kWindowLo, tr_window_hi = kWindowHi;
  tr->add_option("--window-lo", tr_window_lo, "intensity window floor");
  tr->add_option("--window-hi", tr_window_hi, "intensity window ceiling");

  // infer
  auto* inf = app.add_subcommand("infer", "full-volume inference with back-projection");
  std::string model_path, volume_path, det_out, root_track_out, patient;
  int top_k = 1, fold = -1;
  double min_conf = 0.0;
  inf->add_option("--model", model_path, "checkpoint")->required();
  inf->add_option("--volume", volume_path, "IVOL volume")->required();
  inf->add_option("--out", det_out, "crown detections JSON")->required();
  inf->add_option("--root-track", root_track_out, "back-projected root track JSON");
  inf->add_option("--top-k", top_k, "detections per slice");
  inf->add_option("--min-confidence", min_conf, "confidence floor");
  inf->add_option("--fold", fold, "fold tag for evaluation");
  inf->add_option("--patient", patient, "patient id (default: volume stem)");
  double inf_window_lo = kWindowLo, inf_window_hi = kWindowHi;
  inf->add_option("--window-lo", inf_window_lo, "intensity window floor");
  inf->add_option("--window-hi", inf_window_hi, "intensity window ceiling");

  // eval
  auto* ev = app.add_subcommand("eval", "AP / PR / distance-histogram evaluation");
  std::string pred_glob, gt_glob, iou_text = "0.5,0.75", report_out;
  std::string pred_format = "detections";
  double box_size = 21.0, bin_width = 5.0;
  ev->add_option("--pred", pred_glob, "prediction files (glob)")->required();
  ev->add_option("--gt", gt_glob, "ground-truth track files (glob)")->required();
  ev->add_option("--iou", iou_text, "comma-separated IoU thresholds");
  ev->add_option("--out", report_out, "report JSON path")->required();
  ev->add_option("--box-size", box_size, "keypoint box side in px");
  ev->add_option("--bin-width", bin_width, "distance histogram bin width");
  ev->add_option("--pred-format", pred_format, "detections | track");
  std::string interpolation = "all";
  ev->add_option("--interpolation", interpolation, "AP interpolation: all | 11point");

  // render
  auto* rd = app.add_subcommand("render", "stamp the predicted implant cylinder");
  std::string rd_volume, rd_track, rd_out;
  double radius = 10.0;
  int rd_depth = 0, rd_value = 3100;
  rd->add_option("--volume", rd_volume, "IVOL volume")->required();
  rd->add_option("--track", rd_track, "root track JSON")->required();
  rd->add_option("--out", rd_out, "output IVOL")->required();
  rd->add_option("--radius", radius, "cylinder radius in px");
  rd->add_option("--depth", rd_depth, "implant depth in slices (0 = whole root)");
  rd->add_option("--value", rd_value, "fill intensity");

  // plot
  auto* pl = app.add_subcommand("plot", "figures from evaluation reports");
  auto* hist = pl->add_subcommand("distance-hist", "distance histogram CSV/SVG");
  std::string report_path, csv_out, svg_out;
  hist->add_option("--report", report_path, "report JSON")->required();
  hist->add_option("--out", csv_out, "CSV output")->required();
  hist->add_option("--svg", svg_out, "SVG output");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_phantom_generate(patients, seed, out_dir, base, tilt_max);
    if (to_crown->parsed()) return run_labels(true, track_path, crown_range, labels_out);
    if (to_root->parsed()) return run_labels(false, root_track_in, root_range, root_out);
    if (tr->parsed())
      return run_train(data_dir, net_cfg_path, train_cfg_path, model_out, log_path, region,
                       root_take, init_seed, tr_window_lo, tr_window_hi);
    if (inf->parsed())
      return run_infer(model_path, volume_path, det_out, root_track_out, top_k, min_conf,
                       fold, patient, inf_window_lo, inf_window_hi);
    if (ev->parsed())
      return run_eval(pred_glob, gt_glob, iou_text, report_out, box_size, bin_width,
                      pred_format, interpolation);
    if (rd->parsed()) return run_render(rd_volume, rd_track, rd_out, radius, rd_depth, rd_value);
    if (hist->parsed()) return run_plot(report_path, csv_out, svg_out);
    std::cerr << app.help() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const SizeMismatchError& e) {
    std::cerr << "size mismatch: " << e.what() << "\n";
    return 5;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 4;
  } catch (const DegenerateFitError& e) {
    std::cerr << "degenerate fit: " << e.what() << "\n";
    return 7;
  } catch (const DivergedError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 8;
  } catch (const InvalidArgumentError& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 6;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
