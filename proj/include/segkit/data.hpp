#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "segkit/component.hpp"
#include "segkit/image_io.hpp"
#include "segkit/tensor.hpp"

namespace segkit {

inline constexpr std::int32_t kDefaultIgnoreIndex = 255;

struct SampleRecord {
  std::string image_path;
  std::string label_path;
  std::size_t line_no = 0;
};

struct Sample {
  Image image;
  LabelMap label;
};

// ---- seeding ---------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

inline std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  return mix_seed(mix_seed(seed, epoch), index);
}

// Uniform in [0, 1) from the top 53 bits; identical on every platform, unlike
// std::uniform_real_distribution.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

// ---- file lists and the data checker ---------------------------------------

/// One "<image> <label>" pair per non-blank line; relative paths resolve against
/// the list file's directory.
inline std::vector<SampleRecord> parse_file_list(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw EnvironmentError("cannot open file list " + path);
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return fp.is_absolute() || base.empty() ? fp.string() : (base / fp).string();
  };
  std::vector<SampleRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const std::size_t sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size() || line.find(' ', sp + 1) != std::string::npos) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected '<image_path> <label_path>', got '" + line + "'");
    }
    out.push_back({resolve(line.substr(0, sp)), resolve(line.substr(sp + 1)), line_no});
  }
  if (out.empty()) throw DataError("empty dataset: " + path + " lists no samples");
  return out;
}

struct CheckEntry {
  std::size_t line_no;
  std::string category;  // missing-file | undecodable | size-mismatch | label-out-of-range
  std::string detail;
};

struct CheckReport {
  std::vector<CheckEntry> entries;

  bool ok() const { return entries.empty(); }

  std::string format() const {
    std::ostringstream os;
    for (const auto& e : entries) os << "LINE " << e.line_no << ": " << e.category << ": " << e.detail << '\n';
    if (ok()) os << "OK\n";
    else os << "FAILED (" << entries.size() << " errors)\n";
    return os.str();
  }
};

/// Verifies every record without stopping at the first problem.
inline CheckReport check_dataset(const std::vector<SampleRecord>& records, std::size_t num_classes,
                                 std::int32_t ignore_index = kDefaultIgnoreIndex) {
  CheckReport report;
  for (const auto& r : records) {
    auto add = [&](const char* cat, const std::string& detail) { report.entries.push_back({r.line_no, cat, detail}); };
    std::error_code ec;
    bool present = true;
    for (const auto* p : {&r.image_path, &r.label_path}) {
      if (!std::filesystem::is_regular_file(*p, ec)) {
        add("missing-file", *p);
        present = false;
      }
    }
    if (!present) continue;
    Image img;
    LabelMap label;
    bool decoded = true;
    try {
      img = read_image_png(r.image_path);
    } catch (const Error& e) {
      add("undecodable", e.what());
      decoded = false;
    }
    try {
      label = read_label_png(r.label_path);
    } catch (const Error& e) {
      add("undecodable", e.what());
      decoded = false;
    }
    if (!decoded) continue;
    if (img.height != label.height || img.width != label.width) {
      add("size-mismatch", "image " + std::to_string(img.width) + "x" + std::to_string(img.height) + " vs label " +
                               std::to_string(label.width) + "x" + std::to_string(label.height));
    }
    for (std::size_t i = 0; i < label.data.size(); ++i) {
      const std::int32_t v = label.data[i];
      if (v != ignore_index && (v < 0 || static_cast<std::size_t>(v) >= num_classes)) {
        add("label-out-of-range", "value " + std::to_string(v) + " at (" + std::to_string(i / label.width) + "," +
                                      std::to_string(i % label.width) + ") with num_classes " + std::to_string(num_classes));
        break;
      }
    }
  }
  return report;
}

/// Decodes one record; failures cite the list line.
inline Sample load_sample(const SampleRecord& r) {
  Sample s;
  try {
    s.image = read_image_png(r.image_path);
    s.label = read_label_png(r.label_path);
  } catch (const EnvironmentError& e) {
    throw EnvironmentError("line " + std::to_string(r.line_no) + ": " + e.what());
  } catch (const Error& e) {
    throw DataError("line " + std::to_string(r.line_no) + ": " + e.what());
  }
  if (s.image.height != s.label.height || s.image.width != s.label.width) {
    throw DataError("line " + std::to_string(r.line_no) + ": image and label sizes differ");
  }
  return s;
}

// ---- deterministic sample operations ---------------------------------------

inline Image resize_bilinear(const Image& src, std::size_t oh, std::size_t ow) {
  Image out(src.channels, oh, ow);
  auto taps = [](std::size_t in, std::size_t o, std::size_t i) {
    double pos = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(o) - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(in - 1));
    const std::size_t i0 = static_cast<std::size_t>(pos);
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    return std::tuple<std::size_t, std::size_t, float>{i0, i1, static_cast<float>(pos - static_cast<double>(i0))};
  };
  for (std::size_t y = 0; y < oh; ++y) {
    const auto [y0, y1, fy] = taps(src.height, oh, y);
    for (std::size_t x = 0; x < ow; ++x) {
      const auto [x0, x1, fx] = taps(src.width, ow, x);
      for (std::size_t c = 0; c < src.channels; ++c) {
        const float top = src.at(c, y0, x0) * (1 - fx) + src.at(c, y0, x1) * fx;
        const float bottom = src.at(c, y1, x0) * (1 - fx) + src.at(c, y1, x1) * fx;
        out.at(c, y, x) = top * (1 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

inline LabelMap resize_nearest(const LabelMap& src, std::size_t oh, std::size_t ow) {
  LabelMap out(oh, ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const std::size_t sy = std::min(src.height - 1, (2 * y + 1) * src.height / (2 * oh));
    for (std::size_t x = 0; x < ow; ++x) {
      const std::size_t sx = std::min(src.width - 1, (2 * x + 1) * src.width / (2 * ow));
      out.at(y, x) = src.at(sy, sx);
    }
  }
  return out;
}

inline Sample scale_sample(const Sample& s, double factor) {
  const std::size_t oh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(factor * static_cast<double>(s.image.height))));
  const std::size_t ow = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(factor * static_cast<double>(s.image.width))));
  if (oh == s.image.height && ow == s.image.width) return s;
  return {resize_bilinear(s.image, oh, ow), resize_nearest(s.label, oh, ow)};
}

inline Sample hflip(Sample s) {
  const std::size_t w = s.image.width;
  for (std::size_t c = 0; c < s.image.channels; ++c)
    for (std::size_t y = 0; y < s.image.height; ++y) {
      float* row = &s.image.data[(c * s.image.height + y) * w];
      std::reverse(row, row + w);
    }
  for (std::size_t y = 0; y < s.label.height; ++y) std::reverse(s.label.data.begin() + y * w, s.label.data.begin() + (y + 1) * w);
  return s;
}

inline Sample adjust_brightness(Sample s, double delta) {
  for (auto& v : s.image.data) v = std::clamp(v + static_cast<float>(delta), 0.0f, 1.0f);
  return s;
}

/// Pads bottom/right to at least (h, w): image with the per-channel value,
/// label with ignore.
inline Sample pad_to(const Sample& s, std::size_t h, std::size_t w, const std::vector<float>& pad_value, std::int32_t ignore) {
  const std::size_t oh = std::max(h, s.image.height), ow = std::max(w, s.image.width);
  if (oh == s.image.height && ow == s.image.width) return s;
  Sample out{Image(s.image.channels, oh, ow), LabelMap(oh, ow, ignore)};
  for (std::size_t c = 0; c < s.image.channels; ++c) {
    const float fillv = pad_value.size() == 1 ? pad_value[0] : pad_value.at(c);
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x)
        out.image.at(c, y, x) = (y < s.image.height && x < s.image.width) ? s.image.at(c, y, x) : fillv;
  }
  for (std::size_t y = 0; y < s.label.height; ++y)
    for (std::size_t x = 0; x < s.label.width; ++x) out.label.at(y, x) = s.label.at(y, x);
  return out;
}

inline Sample crop(const Sample& s, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  if (y0 + h > s.image.height || x0 + w > s.image.width) throw ParameterError("crop window exceeds the sample");
  Sample out{Image(s.image.channels, h, w), LabelMap(h, w)};
  for (std::size_t c = 0; c < s.image.channels; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) out.image.at(c, y, x) = s.image.at(c, y0 + y, x0 + x);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) out.label.at(y, x) = s.label.at(y0 + y, x0 + x);
  return out;
}

inline Sample normalize(Sample s, const std::vector<float>& mean, const std::vector<float>& stddev) {
  for (std::size_t c = 0; c < s.image.channels; ++c) {
    const float m = mean.size() == 1 ? mean[0] : mean.at(c);
    const float sd = stddev.size() == 1 ? stddev[0] : stddev.at(c);
    if (!(sd > 0)) throw ParameterError("normalize: std must be positive");
    const std::size_t plane = s.image.height * s.image.width;
    for (std::size_t i = 0; i < plane; ++i) s.image.data[c * plane + i] = (s.image.data[c * plane + i] - m) / sd;
  }
  return s;
}

inline Sample denormalize(Sample s, const std::vector<float>& mean, const std::vector<float>& stddev) {
  for (std::size_t c = 0; c < s.image.channels; ++c) {
    const float m = mean.size() == 1 ? mean[0] : mean.at(c);
    const float sd = stddev.size() == 1 ? stddev[0] : stddev.at(c);
    const std::size_t plane = s.image.height * s.image.width;
    for (std::size_t i = 0; i < plane; ++i) s.image.data[c * plane + i] = s.image.data[c * plane + i] * sd + m;
  }
  return s;
}

// ---- transforms ------------------------------------------------------------

class Transform : public Component {
 public:
  virtual Sample apply(Sample s, std::mt19937_64& rng) const = 0;
  // Random augmentations are skipped at evaluation time.
  virtual bool is_augmentation() const = 0;
};

class RandomScale : public Transform {
 public:
  RandomScale(double lo, double hi) : lo_(lo), hi_(hi) {
    if (!(lo > 0) || lo > hi) throw ParameterError("random_scale: need 0 < lo <= hi");
  }
  std::string component_name() const override { return "random_scale"; }
  bool is_augmentation() const override { return true; }
  Sample apply(Sample s, std::mt19937_64& rng) const override { return scale_sample(s, uniform(rng, lo_, hi_)); }

 private:
  double lo_, hi_;
};

class RandomHFlip : public Transform {
 public:
  explicit RandomHFlip(double p) : p_(p) {
    if (p < 0 || p > 1) throw ParameterError("random_hflip: p must lie in [0, 1]");
  }
  std::string component_name() const override { return "random_hflip"; }
  bool is_augmentation() const override { return true; }
  Sample apply(Sample s, std::mt19937_64& rng) const override { return uniform01(rng) < p_ ? hflip(std::move(s)) : s; }

 private:
  double p_;
};

class RandomBrightness : public Transform {
 public:
  explicit RandomBrightness(double delta) : delta_(delta) {
    if (delta < 0 || delta >= 1) throw ParameterError("random_brightness: delta must lie in [0, 1)");
  }
  std::string component_name() const override { return "random_brightness"; }
  bool is_augmentation() const override { return true; }
  Sample apply(Sample s, std::mt19937_64& rng) const override {
    const double d = uniform(rng, -delta_, delta_);
    return delta_ == 0 ? s : adjust_brightness(std::move(s), d);
  }

 private:
  double delta_;
};

class RandomCropPad : public Transform {
 public:
  RandomCropPad(std::size_t crop_h, std::size_t crop_w, std::vector<float> pad_value, std::int32_t ignore_index)
      : h_(crop_h), w_(crop_w), pad_(std::move(pad_value)), ignore_(ignore_index) {
    if (h_ < 1 || w_ < 1) throw ParameterError("random_crop_pad: crop dims must be >= 1");
    if (pad_.empty()) throw ParameterError("random_crop_pad: pad value needs at least one channel");
  }
  std::string component_name() const override { return "random_crop_pad"; }
  bool is_augmentation() const override { return true; }
  Sample apply(Sample s, std::mt19937_64& rng) const override {
    Sample padded = pad_to(s, h_, w_, pad_, ignore_);
    const std::size_t y = uniform_index(rng, padded.image.height - h_ + 1);
    const std::size_t x = uniform_index(rng, padded.image.width - w_ + 1);
    return crop(padded, y, x, h_, w_);
  }

 private:
  std::size_t h_, w_;
  std::vector<float> pad_;
  std::int32_t ignore_;
};

class Normalize : public Transform {
 public:
  Normalize(std::vector<float> mean, std::vector<float> stddev) : mean_(std::move(mean)), std_(std::move(stddev)) {
    if (mean_.empty() || std_.empty()) throw ParameterError("normalize: mean and std must be non-empty");
    for (float s : std_)
      if (!(s > 0)) throw ParameterError("normalize: std must be positive, got " + std::to_string(s));
  }
  std::string component_name() const override { return "normalize"; }
  bool is_augmentation() const override { return false; }
  Sample apply(Sample s, std::mt19937_64&) const override { return normalize(std::move(s), mean_, std_); }

 private:
  std::vector<float> mean_, std_;
};

using TransformList = std::vector<std::shared_ptr<const Transform>>;

inline Sample apply_transforms(Sample s, const TransformList& transforms, std::uint64_t seed, bool augment = true) {
  std::mt19937_64 rng(seed);
  for (const auto& t : transforms)
    if (augment || !t->is_augmentation()) s = t->apply(std::move(s), rng);
  return s;
}

// ---- datasets --------------------------------------------------------------

class Dataset : public Component {
 public:
  virtual const std::vector<SampleRecord>& records() const = 0;
  // 0 when the dataset does not declare a class count.
  virtual std::size_t num_classes() const = 0;
};

class FileListDataset : public Dataset {
 public:
  // An empty list path builds an unbound dataset whose records() throws.
  FileListDataset(std::string list_path, std::size_t num_classes) : list_path_(std::move(list_path)), num_classes_(num_classes) {
    if (!list_path_.empty()) records_ = parse_file_list(list_path_);
  }
  std::string component_name() const override { return "file_list"; }
  const std::vector<SampleRecord>& records() const override {
    if (list_path_.empty()) throw ConfigError("file_list dataset has no 'list' path");
    return records_;
  }
  std::size_t num_classes() const override { return num_classes_; }
  const std::string& list_path() const { return list_path_; }

 private:
  std::string list_path_;
  std::size_t num_classes_;
  std::vector<SampleRecord> records_;
};

// ---- batching --------------------------------------------------------------

template <typename T>
struct Batch {
  Tensor<T> images;                  // (N,3,h,w)
  std::vector<std::int32_t> labels;  // (N,h,w)
  std::vector<std::size_t> record_indices;
};

struct LoaderOptions {
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool training = true;  // shuffles and drops the last partial batch
};

/// Random-access batch source: batch (epoch, b) is a pure function of the
/// records, transforms, and seed, so worker count and call order never change
/// what is delivered.
template <typename T>
class DataLoader {
 public:
  DataLoader(std::vector<SampleRecord> records, TransformList transforms, LoaderOptions opts)
      : records_(std::move(records)), transforms_(std::move(transforms)), opts_(opts) {
    if (opts_.batch_size < 1) throw ParameterError("batch_size must be >= 1");
    if (records_.empty()) throw DataError("empty dataset");
    if (opts_.training && records_.size() < opts_.batch_size) {
      throw DataError("dataset has " + std::to_string(records_.size()) + " samples, fewer than batch_size " +
                      std::to_string(opts_.batch_size));
    }
  }

  std::size_t size() const { return records_.size(); }
  const std::vector<SampleRecord>& records() const { return records_; }

  std::size_t batches_per_epoch() const {
    return opts_.training ? records_.size() / opts_.batch_size : ceil_div_(records_.size(), opts_.batch_size);
  }

  std::vector<std::size_t> epoch_order(std::size_t epoch) const {
    std::vector<std::size_t> order(records_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (!opts_.training) return order;
    std::mt19937_64 rng(mix_seed(opts_.seed, epoch));
    for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[uniform_index(rng, i + 1)]);
    return order;
  }

  Sample sample(std::size_t epoch, std::size_t record_index) const {
    return apply_transforms(load_sample(records_.at(record_index)), transforms_,
                            sample_seed(opts_.seed, epoch, record_index), opts_.training);
  }

  Batch<T> batch(std::size_t epoch, std::size_t b) const {
    if (b >= batches_per_epoch()) throw ParameterError("batch index out of range");
    const auto order = epoch_order(epoch);
    const std::size_t begin = b * opts_.batch_size;
    const std::size_t end = std::min(begin + opts_.batch_size, records_.size());
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<Sample> samples(idx.size());
    std::vector<std::exception_ptr> errors(idx.size());
    auto work = [&](std::size_t i) {
      try {
        samples[i] = sample(epoch, idx[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    };
    const std::size_t workers = std::min(std::max<std::size_t>(opts_.workers, 1), idx.size());
    if (workers <= 1) {
      for (std::size_t i = 0; i < idx.size(); ++i) work(i);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          for (std::size_t i = w; i < idx.size(); i += workers) work(i);
        });
      for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    return stack(samples, idx);
  }

 private:
  static std::size_t ceil_div_(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

  Batch<T> stack(const std::vector<Sample>& samples, std::vector<std::size_t> idx) const {
    const std::size_t h = samples[0].image.height, w = samples[0].image.width, c = samples[0].image.channels;
    for (std::size_t i = 1; i < samples.size(); ++i) {
      if (samples[i].image.height != h || samples[i].image.width != w) {
        throw DataError("samples in one batch differ in size (line " + std::to_string(records_[idx[i]].line_no) +
                        "); add random_crop_pad or use batch_size 1");
      }
    }
    Batch<T> out;
    out.images = Tensor<T>(Shape{samples.size(), c, h, w});
    out.labels.resize(samples.size() * h * w);
    auto dst = out.images.data();
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::transform(samples[i].image.data.begin(), samples[i].image.data.end(), dst.begin() + static_cast<std::ptrdiff_t>(i * c * h * w),
                     [](float v) { return static_cast<T>(v); });
      std::copy(samples[i].label.data.begin(), samples[i].label.data.end(), out.labels.begin() + static_cast<std::ptrdiff_t>(i * h * w));
    }
    out.record_indices = std::move(idx);
    return out;
  }

  std::vector<SampleRecord> records_;
  TransformList transforms_;
  LoaderOptions opts_;
};

}  // namespace segkit
