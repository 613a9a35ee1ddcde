#include "posewarp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "posewarp/errors.hpp"
#include "posewarp/image_io.hpp"

namespace posewarp {

namespace fs = std::filesystem;

namespace {

double scale_of(int height, int width) { return std::min(height, width) / 64.0; }

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

struct Capsule {
  double au, av, bu, bv;
  double radius;
  BodyPart part;
  bool textured;
};

// Blend weight towards the secondary colour at limb-local coordinates:
// s along the axis from the first joint, t across it.
float texture_weight(int texture, double s, double t, double length, double sc) {
  auto band = [](double x, double width) { return static_cast<int>(std::floor(x / width)) & 1; };
  switch (texture) {
    case 0: return 0.0f;
    case 1: return static_cast<float>(band(s, 2.0 * sc));
    case 2: return static_cast<float>(band(t + 64.0, 1.5 * sc));
    case 3: return static_cast<float>(band(s, 3.0 * sc) ^ band(t + 64.0, 3.0 * sc));
    case 4: {
      const double p = 4.0 * sc;
      const double ds = s - p * std::round(s / p), dt = t - p * std::round(t / p);
      return ds * ds + dt * dt < (1.3 * sc) * (1.3 * sc) ? 1.0f : 0.0f;
    }
    case 5: return static_cast<float>(band(s + t + 64.0, 2.5 * sc));
    case 6: return t > 0.0 ? 1.0f : 0.0f;
    case 7: return static_cast<float>(band(s, 6.0 * sc));
    case 8: return static_cast<float>(std::clamp(length > 0.0 ? s / length : 0.0, 0.0, 1.0));
    default: return static_cast<float>(band(s, 1.5 * sc) ^ band(t + 64.0, 1.5 * sc));
  }
}

}  // namespace

Appearance make_appearance(std::uint64_t dataset_seed, std::uint64_t identity, int height, int width) {
  std::seed_seq seq{static_cast<std::uint32_t>(dataset_seed), static_cast<std::uint32_t>(dataset_seed >> 32),
                    static_cast<std::uint32_t>(identity), static_cast<std::uint32_t>(identity >> 32), 0xA77u};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Appearance app;
  app.identity = identity;
  app.texture = std::uniform_int_distribution<int>(0, kTextureClasses - 1)(rng);
  for (auto& c : app.colors) c = hsv_to_rgb(unit(rng), 0.45 + 0.5 * unit(rng), 0.65 + 0.35 * unit(rng));
  const double sc = scale_of(height, width);
  app.limb_radius = sc * (2.5 + unit(rng));
  app.torso_radius = sc * (4.5 + unit(rng));
  app.head_radius = sc * (5.0 + 2.0 * unit(rng));
  return app;
}

Tensor render_sprite(const Appearance& app, const Skeleton& skel, int height, int width) {
  if (skel.size() != kDefaultJoints) {
    throw std::invalid_argument("render_sprite: expected an " + std::to_string(kDefaultJoints) + "-joint skeleton");
  }
  if (height <= 0 || width <= 0) throw std::invalid_argument("render_sprite: image size must be positive");
  const auto& j = skel.joints;
  auto cap = [&](int a, int b, double r, BodyPart part) {
    return Capsule{j[a].u, j[a].v, j[b].u, j[b].v, r, part, true};
  };
  const double leg_r = app.limb_radius * 1.15;
  const std::vector<Capsule> shapes{
      cap(kRoot, kLeftFoot, leg_r, kLegPart),
      cap(kRoot, kRightFoot, leg_r, kLegPart),
      cap(kRoot, kHead, app.torso_radius, kTorsoPart),
      cap(kLeftShoulder, kRightShoulder, app.limb_radius, kTorsoPart),
      cap(kLeftShoulder, kLeftHand, app.limb_radius, kArmPart),
      cap(kRightShoulder, kRightHand, app.limb_radius, kArmPart),
      Capsule{j[kHead].u, j[kHead].v, j[kHead].u, j[kHead].v, app.head_radius, kHeadPart, false},
  };
  const double sc = scale_of(height, width);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::vector<float> rgb(3 * plane, kBackgroundLevel);

  for (const Capsule& c : shapes) {
    double du = c.bu - c.au, dv = c.bv - c.av;
    double length = std::hypot(du, dv);
    // Coincident joints degrade to a disk with a fixed axis.
    double ax = 1.0, ay = 0.0;
    if (length > 1e-9) {
      ax = du / length;
      ay = dv / length;
    } else {
      length = 0.0;
    }
    const std::array<float, 3>& primary = app.colors[c.part];
    const int u0 = std::max(0, static_cast<int>(std::floor(std::min(c.au, c.bu) - c.radius - 1.0)));
    const int u1 = std::min(width - 1, static_cast<int>(std::ceil(std::max(c.au, c.bu) + c.radius + 1.0)));
    const int v0 = std::max(0, static_cast<int>(std::floor(std::min(c.av, c.bv) - c.radius - 1.0)));
    const int v1 = std::min(height - 1, static_cast<int>(std::ceil(std::max(c.av, c.bv) + c.radius + 1.0)));
    for (int v = v0; v <= v1; ++v) {
      for (int u = u0; u <= u1; ++u) {
        const double pu = u - c.au, pv = v - c.av;
        const double s = pu * ax + pv * ay;
        const double t = -pu * ay + pv * ax;
        const double sc_clamped = std::clamp(s, 0.0, length);
        const double dist = std::hypot(pu - sc_clamped * ax, pv - sc_clamped * ay);
        const double alpha = std::clamp(c.radius + 0.5 - dist, 0.0, 1.0);
        if (alpha <= 0.0) continue;
        const float w = c.textured ? texture_weight(app.texture, s, t, length, sc) : 0.0f;
        const std::size_t idx = static_cast<std::size_t>(v) * width + u;
        for (int ch = 0; ch < 3; ++ch) {
          const float color = primary[ch] * (1.0f - 0.65f * w);
          float& dst = rgb[ch * plane + idx];
          dst = static_cast<float>((1.0 - alpha) * dst + alpha * color);
        }
      }
    }
  }
  for (float& x : rgb) x = 2.0f * x - 1.0f;
  return Tensor({3, height, width}, std::move(rgb));
}

SkeletonConfig skeleton_config_for(int height, int width) {
  SkeletonConfig c;
  const double sc = scale_of(height, width);
  c.height = height;
  c.width = width;
  c.margin *= sc;
  c.torso_length *= sc;
  c.shoulder_half_width *= sc;
  c.arm_length *= sc;
  c.leg_length *= sc;
  return c;
}

Skeleton build_skeleton(double root_u, double root_v, const PoseAngles& a, const SkeletonConfig& c) {
  Skeleton skel;
  skel.joints.resize(kDefaultJoints);
  auto set = [&](int id, double u, double v) { skel.joints[id] = Joint{u, v, true}; };
  // Torso axis points up (negative v), tilted by the lean angle.
  const double tu = std::sin(a.lean), tv = -std::cos(a.lean);
  // Perpendicular towards the figure's left (larger u when upright).
  const double pu = -tv, pv = tu;
  set(kRoot, root_u, root_v);
  set(kHead, root_u + c.torso_length * tu, root_v + c.torso_length * tv);
  const double nu = root_u + c.neck_fraction * c.torso_length * tu;
  const double nv = root_v + c.neck_fraction * c.torso_length * tv;
  const double lsu = nu + c.shoulder_half_width * pu, lsv = nv + c.shoulder_half_width * pv;
  const double rsu = nu - c.shoulder_half_width * pu, rsv = nv - c.shoulder_half_width * pv;
  set(kLeftShoulder, lsu, lsv);
  set(kRightShoulder, rsu, rsv);
  set(kLeftHand, lsu + c.arm_length * std::sin(a.left_arm), lsv + c.arm_length * std::cos(a.left_arm));
  set(kRightHand, rsu - c.arm_length * std::sin(a.right_arm), rsv + c.arm_length * std::cos(a.right_arm));
  set(kLeftFoot, root_u + c.leg_length * std::sin(a.left_leg), root_v + c.leg_length * std::cos(a.left_leg));
  set(kRightFoot, root_u - c.leg_length * std::sin(a.right_leg), root_v + c.leg_length * std::cos(a.right_leg));
  return skel;
}

RootRegion safe_root_region(const SkeletonConfig& c) {
  const double max_lean = std::max(std::abs(c.lean_min), std::abs(c.lean_max));
  const double neck = c.neck_fraction * c.torso_length;
  const double arm_up = std::max(0.0, -std::cos(std::clamp(c.arm_max, 0.0, std::numbers::pi)));
  const double reach_x = std::max({neck * std::sin(max_lean) + c.shoulder_half_width + c.arm_length,
                                   c.torso_length * std::sin(max_lean),
                                   c.leg_length * std::max(std::sin(std::abs(c.leg_min)), std::sin(c.leg_max))});
  const double reach_up = std::max(c.torso_length, neck + c.shoulder_half_width * std::sin(max_lean) + c.arm_length * arm_up);
  const double reach_down = std::max(c.leg_length, c.arm_length - neck * std::cos(max_lean) + c.shoulder_half_width);
  return {c.margin + reach_x, c.width - 1 - c.margin - reach_x, c.margin + reach_up, c.height - 1 - c.margin - reach_down};
}

Skeleton sample_skeleton(std::mt19937_64& rng, const SkeletonConfig& c) {
  RootRegion region = safe_root_region(c);
  // Degenerate region on tiny frames: sample around the centre and rely on rejection.
  if (region.u_min > region.u_max) region.u_min = region.u_max = (c.width - 1) / 2.0;
  if (region.v_min > region.v_max) region.v_min = region.v_max = (c.height - 1) / 2.0;
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto inside = [&](const Joint& j) {
    return j.u >= c.margin && j.v >= c.margin && j.u <= c.width - 1 - c.margin && j.v <= c.height - 1 - c.margin;
  };
  Skeleton skel;
  for (int attempt = 0; attempt <= c.max_retries; ++attempt) {
    const double ru = uniform(region.u_min, region.u_max);
    const double rv = uniform(region.v_min, region.v_max);
    PoseAngles a;
    a.lean = uniform(c.lean_min, c.lean_max);
    a.left_arm = uniform(c.arm_min, c.arm_max);
    a.right_arm = uniform(c.arm_min, c.arm_max);
    a.left_leg = uniform(c.leg_min, c.leg_max);
    a.right_leg = uniform(c.leg_min, c.leg_max);
    skel = build_skeleton(ru, rv, a, c);
    if (std::all_of(skel.joints.begin(), skel.joints.end(), inside)) return skel;
  }
  for (Joint& j : skel.joints) {
    j.u = std::clamp(j.u, 0.0, c.width - 1.0);
    j.v = std::clamp(j.v, 0.0, c.height - 1.0);
  }
  return skel;
}

// ---------------------------------------------------------------- manifest

namespace {

nlohmann::json entry_to_json(const ManifestEntry& e) {
  return {{"image", e.image}, {"skeleton", skeleton_to_json(e.skeleton)}, {"appearance", e.appearance}, {"label", e.label}};
}

ManifestEntry entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  e.image = j.at("image").get<std::string>();
  e.skeleton = skeleton_from_json(j.at("skeleton"));
  e.appearance = j.at("appearance").get<std::uint64_t>();
  e.label = j.at("label").get<int>();
  return e;
}

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint32_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream,
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

char* format_index(char* buf, std::size_t n, const char* pattern, int i) {
  std::snprintf(buf, n, pattern, i);
  return buf;
}

}  // namespace

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json j;
  j["format"] = format;
  j["seed"] = seed;
  j["height"] = height;
  j["width"] = width;
  j["n_joints"] = n_joints;
  j["n_train"] = train.size();
  j["n_eval"] = eval.size();
  nlohmann::json tr = nlohmann::json::array();
  for (const auto& e : train) tr.push_back(entry_to_json(e));
  j["train"] = std::move(tr);
  nlohmann::json ev = nlohmann::json::array();
  for (const auto& p : eval) {
    ev.push_back({{"source", entry_to_json(p.source)},
                  {"target_skeleton", skeleton_to_json(p.target_skeleton)},
                  {"ground_truth", p.ground_truth}});
  }
  j["eval"] = std::move(ev);
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j, const fs::path& root) {
  DatasetManifest m;
  m.format = j.at("format").get<int>();
  if (m.format != kManifestFormat) {
    throw FormatError("unsupported manifest format " + std::to_string(m.format) + " (expected " +
                      std::to_string(kManifestFormat) + ")");
  }
  m.seed = j.at("seed").get<std::uint64_t>();
  m.height = j.at("height").get<int>();
  m.width = j.at("width").get<int>();
  m.n_joints = j.at("n_joints").get<int>();
  for (const auto& e : j.at("train")) m.train.push_back(entry_from_json(e));
  for (const auto& p : j.at("eval")) {
    m.eval.push_back(EvalPair{entry_from_json(p.at("source")), skeleton_from_json(p.at("target_skeleton")),
                              p.at("ground_truth").get<std::string>()});
  }
  m.root = root;
  return m;
}

DatasetManifest generate_dataset(int n_train, int n_eval, std::uint64_t seed, int height, int width,
                                 const fs::path& out_dir) {
  if (n_train < 1 || n_eval < 0) throw std::invalid_argument("generate_dataset: need n_train >= 1 and n_eval >= 0");
  std::error_code ec;
  fs::create_directories(out_dir / "train", ec);
  if (!ec) fs::create_directories(out_dir / "eval", ec);
  if (ec) throw IoError("cannot create dataset directories under " + out_dir.string() + ": " + ec.message());

  const SkeletonConfig config = skeleton_config_for(height, width);
  DatasetManifest m;
  m.seed = seed;
  m.height = height;
  m.width = width;
  m.root = out_dir;
  char name[64];
  for (int i = 0; i < n_train; ++i) {
    std::mt19937_64 rng = sample_rng(seed, 1, i);
    ManifestEntry e;
    e.appearance = static_cast<std::uint64_t>(i);
    const Appearance app = make_appearance(seed, e.appearance, height, width);
    e.label = app.texture;
    e.skeleton = sample_skeleton(rng, config);
    e.image = format_index(name, sizeof name, "train/img_%06d.ppm", i);
    save_image(out_dir / e.image, render_sprite(app, e.skeleton, height, width));
    m.train.push_back(std::move(e));
  }
  for (int i = 0; i < n_eval; ++i) {
    std::mt19937_64 rng = sample_rng(seed, 2, i);
    EvalPair p;
    p.source.appearance = kEvalIdentityBase + static_cast<std::uint64_t>(i);
    const Appearance app = make_appearance(seed, p.source.appearance, height, width);
    p.source.label = app.texture;
    p.source.skeleton = sample_skeleton(rng, config);
    p.target_skeleton = sample_skeleton(rng, config);
    p.source.image = format_index(name, sizeof name, "eval/src_%04d.ppm", i);
    p.ground_truth = format_index(name, sizeof name, "eval/gt_%04d.ppm", i);
    save_image(out_dir / p.source.image, render_sprite(app, p.source.skeleton, height, width));
    save_image(out_dir / p.ground_truth, render_sprite(app, p.target_skeleton, height, width));
    m.eval.push_back(std::move(p));
  }
  std::ofstream out(out_dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + (out_dir / "manifest.json").string());
  out << m.to_json().dump(1) << '\n';
  if (!out) throw IoError("failed writing " + (out_dir / "manifest.json").string());
  return m;
}

DatasetManifest load_manifest(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    return DatasetManifest::from_json(j, dir);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest " + path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError("malformed manifest " + path.string() + ": " + e.what());
  }
}

Skeleton sample_target_pose(const DatasetManifest& manifest, std::mt19937_64& rng) {
  if (manifest.train.empty()) throw std::invalid_argument("sample_target_pose: manifest has no training entries");
  std::uniform_int_distribution<std::size_t> pick(0, manifest.train.size() - 1);
  return manifest.train[pick(rng)].skeleton;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack: nothing to stack");
  const Shape& s = items.front().shape();
  std::vector<float> data;
  data.reserve(items.front().numel() * items.size());
  for (const Tensor& t : items) {
    if (t.shape() != s) throw ShapeError("stack: shape " + shape_str(t.shape()) + " differs from " + shape_str(s));
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  Shape out{static_cast<int>(items.size())};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor(std::move(out), std::move(data));
}

Tensor unstack(const Tensor& batch, int b) {
  if (batch.rank() < 2 || b < 0 || b >= batch.dim(0)) {
    throw ShapeError("unstack: index " + std::to_string(b) + " out of range for " + shape_str(batch.shape()));
  }
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t n = shape_numel(s);
  auto d = batch.data().subspan(static_cast<std::size_t>(b) * n, n);
  return Tensor(std::move(s), std::vector<float>(d.begin(), d.end()));
}

namespace {

Tensor flip_image(const Tensor& img) {
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<float> out(img.numel());
  for (int ch = 0; ch < c; ++ch)
    for (int v = 0; v < h; ++v)
      for (int u = 0; u < w; ++u) {
        const std::size_t row = (static_cast<std::size_t>(ch) * h + v) * w;
        out[row + u] = img.at(row + (w - 1 - u));
      }
  return Tensor(img.shape(), std::move(out));
}

}  // namespace

TrainingBatch load_batch(const DatasetManifest& manifest, std::span<const int> indices, std::mt19937_64& rng,
                         const BatchOptions& options) {
  if (indices.empty()) throw std::invalid_argument("load_batch: empty index list");
  std::vector<Tensor> images, src_maps, tgt_maps;
  TrainingBatch batch;
  std::bernoulli_distribution coin(0.5);
  for (int idx : indices) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= manifest.train.size()) {
      throw std::out_of_range("load_batch: index " + std::to_string(idx) + " outside the training split");
    }
    const ManifestEntry& e = manifest.train[idx];
    const fs::path path = manifest.root / e.image;
    Tensor img = load_image(path);
    if (img.dim(1) != manifest.height || img.dim(2) != manifest.width) {
      throw FormatError(path.string() + " is " + std::to_string(img.dim(2)) + "x" + std::to_string(img.dim(1)) +
                        ", manifest says " + std::to_string(manifest.width) + "x" + std::to_string(manifest.height));
    }
    Skeleton src = e.skeleton;
    if (options.flip && coin(rng)) {
      img = flip_image(img);
      src = flip_horizontal(src, manifest.width);
    }
    Skeleton tgt = sample_target_pose(manifest, rng);
    images.push_back(std::move(img));
    src_maps.push_back(embed(src, manifest.height, manifest.width, options.variance));
    tgt_maps.push_back(embed(tgt, manifest.height, manifest.width, options.variance));
    batch.skel_source.push_back(std::move(src));
    batch.skel_target.push_back(std::move(tgt));
  }
  batch.images = stack(images);
  batch.maps_source = stack(src_maps);
  batch.maps_target = stack(tgt_maps);
  return batch;
}

}  // namespace posewarp
