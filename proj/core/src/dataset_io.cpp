#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <fstream>
#include <sstream>

#include "dsa/data_noise.hpp"

namespace dsa {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

void DatasetManifest::validate() const {
  if (labeled < 1 || test < 1 || unlabeled < 0) {
    throw ConfigError("dataset split sizes must be positive");
  }
  if (image_size < 1) throw ConfigError("image_size must be positive");
  if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
  if (task == TaskKind::kClassification) {
    if (classes < 2) throw ConfigError("classification needs at least two classes");
    return;
  }
  if (keypoints < 2) throw ConfigError("keypoint task needs K >= 2");
  const auto [a, b] = normalization_pair;
  if (a == b || a < 0 || b < 0 || a >= keypoints || b >= keypoints) {
    throw ConfigError("normalization pair must be two distinct valid keypoints");
  }
  for (const auto& [l, r] : flip_pairs) {
    if (l == r || l < 0 || r < 0 || l >= keypoints || r >= keypoints) {
      throw ConfigError("flip pairs must reference distinct valid keypoints");
    }
  }
}

// ------------------------------------------------------------------ PNM

void write_pnm(const Tensor& image, const fs::path& file) {
  if (image.n() != 1 || (image.c() != 1 && image.c() != 3)) {
    throw InputError("write_pnm expects a (1, 1|3, H, W) image");
  }
  std::ofstream os(file, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + file.string());
  const int C = image.c(), H = image.h(), W = image.w();
  os << (C == 3 ? "P6" : "P5") << "\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<std::size_t>(C) * H * W);
  std::size_t i = 0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < C; ++c) {
        bytes[i++] = static_cast<unsigned char>(
            std::lround(std::clamp(image.at(0, c, y, x), 0.0, 1.0) * 255.0));
      }
    }
  }
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
}

Tensor read_pnm(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw InputError("cannot open image " + file.string());
  std::string magic;
  int W = 0, H = 0, maxval = 0;
  is >> magic >> W >> H >> maxval;
  if ((magic != "P5" && magic != "P6") || W < 1 || H < 1 || maxval != 255) {
    throw InputError("unsupported PNM file " + file.string());
  }
  is.get();
  const int C = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> bytes(static_cast<std::size_t>(C) * H * W);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw InputError("truncated PNM file " + file.string());
  }
  Tensor out({1, C, H, W});
  std::size_t i = 0;
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < C; ++c) out.at(0, c, y, x) = bytes[i++] / 255.0;
    }
  }
  return out;
}

// ------------------------------------------------------------- manifest

namespace {

std::string pairs_to_string(const std::vector<std::pair<int, int>>& pairs) {
  std::string s;
  for (const auto& [a, b] : pairs) {
    if (!s.empty()) s += ";";
    s += std::to_string(a) + ":" + std::to_string(b);
  }
  return s;
}

std::vector<std::pair<int, int>> pairs_from_string(const std::string& s) {
  std::vector<std::pair<int, int>> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ';')) {
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw InputError("malformed keypoint pair '" + item + "'");
    out.emplace_back(std::stoi(item.substr(0, colon)), std::stoi(item.substr(colon + 1)));
  }
  return out;
}

std::string split_name(int s) {
  return s == 0 ? "labeled" : (s == 1 ? "unlabeled" : "test");
}

std::string image_name(int split, int id, const std::string& ext) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d", id);
  return split_name(split) + "_" + buf + "." + ext;
}

std::string at_line(int line_no, const std::string& what) {
  return "labels.csv:" + std::to_string(line_no) + ": " + what;
}

}  // namespace

void write_manifest(const DatasetManifest& m, const fs::path& file) {
  pt::ptree tree;
  tree.put("dataset.task", std::string(task_id(m.task)));
  tree.put("dataset.classes", m.classes);
  tree.put("dataset.keypoints", m.keypoints);
  tree.put("dataset.image_size", m.image_size);
  tree.put("dataset.channels", m.channels);
  tree.put("dataset.labeled", m.labeled);
  tree.put("dataset.unlabeled", m.unlabeled);
  tree.put("dataset.test", m.test);
  tree.put("dataset.normalization_pair",
           pairs_to_string({m.normalization_pair}));
  tree.put("dataset.flip_pairs", pairs_to_string(m.flip_pairs));
  pt::write_ini(file.string(), tree);
}

DatasetManifest read_manifest(const fs::path& file) {
  pt::ptree tree;
  try {
    pt::read_ini(file.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw InputError("cannot read manifest: " + std::string(e.what()));
  }
  DatasetManifest m;
  m.root = file.parent_path();
  try {
    m.task = parse_task(tree.get<std::string>("dataset.task"));
    m.classes = tree.get<int>("dataset.classes", 0);
    m.keypoints = tree.get<int>("dataset.keypoints", 0);
    m.image_size = tree.get<int>("dataset.image_size");
    m.channels = tree.get<int>("dataset.channels");
    m.labeled = tree.get<int>("dataset.labeled");
    m.unlabeled = tree.get<int>("dataset.unlabeled");
    m.test = tree.get<int>("dataset.test");
    const auto np = pairs_from_string(tree.get<std::string>("dataset.normalization_pair", "0:1"));
    if (np.size() != 1) throw InputError("normalization_pair must hold one pair");
    m.normalization_pair = np.front();
    m.flip_pairs = pairs_from_string(tree.get<std::string>("dataset.flip_pairs", ""));
  } catch (const pt::ptree_error& e) {
    throw InputError("manifest " + file.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

// -------------------------------------------------------------- dataset

void write_dataset(const Dataset& data, const fs::path& dir) {
  data.manifest.validate();
  fs::create_directories(dir / "images");
  write_manifest(data.manifest, dir / "manifest");
  const bool kp = data.manifest.task == TaskKind::kKeypoints;
  const int K = data.manifest.keypoints;
  std::ofstream labels(dir / "labels.csv");
  labels << std::setprecision(17);
  labels << "split,id";
  if (kp) {
    for (int k = 0; k < K; ++k) labels << ",x" << k << ",y" << k;
  } else {
    labels << ",class";
  }
  labels << "\n";
  const std::string ext = data.manifest.channels == 3 ? "ppm" : "pgm";
  const Split* splits[] = {&data.labeled, &data.unlabeled, &data.test};
  for (int s = 0; s < 3; ++s) {
    const Split& split = *splits[s];
    for (int i = 0; i < split.size(); ++i) {
      write_pnm(split.images.slice_batch(i, 1),
                dir / "images" / image_name(s, i, ext));
      labels << split_name(s) << "," << i;
      if (kp) {
        for (int k = 0; k < K; ++k) {
          labels << "," << split.keypoints.x(i, k) << "," << split.keypoints.y(i, k);
        }
      } else {
        labels << "," << (i < static_cast<int>(split.labels.size()) ? split.labels[i] : -1);
      }
      labels << "\n";
    }
  }
  if (!labels) throw std::runtime_error("failed writing " + (dir / "labels.csv").string());
}

Dataset read_dataset(const fs::path& dir) {
  Dataset d;
  d.manifest = read_manifest(dir / "manifest");
  d.manifest.root = dir;
  const auto& m = d.manifest;
  const bool kp = m.task == TaskKind::kKeypoints;
  const int sizes[] = {m.labeled, m.unlabeled, m.test};
  Split* splits[] = {&d.labeled, &d.unlabeled, &d.test};
  for (int s = 0; s < 3; ++s) {
    splits[s]->images = Tensor({sizes[s], m.channels, m.image_size, m.image_size});
    splits[s]->labels.assign(sizes[s], -1);
    if (kp) splits[s]->keypoints = KeypointSet(sizes[s], m.keypoints);
  }
  std::ifstream labels(dir / "labels.csv");
  if (!labels) throw InputError("missing labels.csv in " + dir.string());
  std::string line;
  std::getline(labels, line);  // header
  std::vector<std::vector<char>> seen(3);
  for (int s = 0; s < 3; ++s) seen[s].assign(sizes[s], 0);
  int line_no = 1;
  while (std::getline(labels, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream is(line);
    std::string f;
    while (std::getline(is, f, ',')) fields.push_back(f);
    const std::size_t expected = kp ? 2 + 2 * static_cast<std::size_t>(m.keypoints) : 3;
    if (fields.size() != expected) {
      throw InputError(at_line(line_no, "expected " + std::to_string(expected) + " fields"));
    }
    int s = -1;
    for (int k = 0; k < 3; ++k) {
      if (fields[0] == split_name(k)) s = k;
    }
    if (s < 0) throw InputError(at_line(line_no, "unknown split"));
    const int id = std::stoi(fields[1]);
    if (id < 0 || id >= sizes[s]) {
      throw InputError(at_line(line_no, "id out of range"));
    }
    Split& split = *splits[s];
    if (kp) {
      for (int k = 0; k < m.keypoints; ++k) {
        split.keypoints.x(id, k) = std::stod(fields[2 + 2 * k]);
        split.keypoints.y(id, k) = std::stod(fields[3 + 2 * k]);
      }
    } else {
      const int label = std::stoi(fields[2]);
      if (label < -1 || label >= m.classes) {
        throw InputError(at_line(line_no, "class out of range"));
      }
      split.labels[id] = label;
    }
    seen[s][id] = 1;
  }
  const std::string ext = m.channels == 3 ? "ppm" : "pgm";
  for (int s = 0; s < 3; ++s) {
    for (int i = 0; i < sizes[s]; ++i) {
      if (!seen[s][i]) {
        throw InputError("labels.csv: missing row for " + image_name(s, i, ext));
      }
      const Tensor img =
          read_pnm(dir / "images" / image_name(s, i, ext));
      if (img.c() != m.channels || img.h() != m.image_size || img.w() != m.image_size) {
        throw InputError(image_name(s, i, ext) + " does not match manifest");
      }
      std::copy(img.values().begin(), img.values().end(), splits[s]->images.sample(i).begin());
    }
  }
  return d;
}

}  // namespace dsa
