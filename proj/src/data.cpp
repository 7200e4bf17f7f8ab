#include "tdaens/data.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "tdaens/errors.hpp"
#include "tdaens/rng.hpp"

namespace tdaens {

Tensor2 Dataset::sample_input(std::size_t i) const {
  Tensor2 t(1, inputs.cols);
  std::copy_n(inputs.data.begin() + static_cast<std::ptrdiff_t>(i * inputs.cols), inputs.cols, t.data.begin());
  return t;
}

std::span<const int> Dataset::sample_targets(std::size_t i) const {
  const std::size_t k = targets_per_sample();
  return {targets.data() + i * k, k};
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset d;
  d.kind = kind;
  d.num_classes = num_classes;
  d.inputs = Tensor2(indices.size(), inputs.cols);
  const std::size_t k = targets_per_sample();
  d.targets.reserve(indices.size() * k);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    if (i >= size()) throw ArgumentError("dataset index out of range");
    std::copy_n(inputs.row(i).begin(), inputs.cols, d.inputs.row(r).begin());
    const auto t = sample_targets(i);
    d.targets.insert(d.targets.end(), t.begin(), t.end());
  }
  return d;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw ArgumentError("dataset slice out of range");
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return subset(idx);
}

void Dataset::validate() const {
  if (inputs.rows == 0) throw ArgumentError("dataset is empty");
  if (inputs.data.size() != inputs.rows * inputs.cols) throw ShapeError("dataset inputs malformed");
  const std::size_t expect = kind == DatasetKind::Classification ? inputs.rows : inputs.rows * inputs.cols;
  if (targets.size() != expect) throw ShapeError("dataset targets do not match inputs");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= num_classes) throw ArgumentError("label out of range");
  if (kind == DatasetKind::Sequence)
    for (double v : inputs.data)
      if (v < 0 || v >= static_cast<double>(num_classes) || v != std::floor(v))
        throw ArgumentError("token out of range");
}

std::string Dataset::digest() const {
  std::uint64_t h = hash_key({static_cast<std::uint64_t>(kind), num_classes, inputs.rows, inputs.cols});
  for (double v : inputs.data) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    h = mix64(h ^ bits);
  }
  for (int t : targets) h = mix64(h ^ static_cast<std::uint64_t>(t));
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset, const std::filesystem::path& path) {
  if (offset + 4 > buf.size())
    throw FormatError(path.string() + ": truncated header at byte offset " + std::to_string(offset));
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

}  // namespace

Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::optional<std::size_t> limit) {
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  if (const auto m = read_be32(img, 0, images); m != 0x00000803)
    throw FormatError(images.string() + ": bad magic at byte offset 0 (expected 0x00000803)");
  if (const auto m = read_be32(lab, 0, labels); m != 0x00000801)
    throw FormatError(labels.string() + ": bad magic at byte offset 0 (expected 0x00000801)");
  const std::size_t n_img = read_be32(img, 4, images);
  const std::size_t rows = read_be32(img, 8, images);
  const std::size_t cols = read_be32(img, 12, images);
  const std::size_t n_lab = read_be32(lab, 4, labels);
  if (n_img != n_lab) throw FormatError("image and label counts differ");
  const std::size_t pixels = rows * cols;
  if (img.size() < 16 + n_img * pixels)
    throw FormatError(images.string() + ": truncated pixel data at byte offset " + std::to_string(img.size()));
  if (lab.size() < 8 + n_lab)
    throw FormatError(labels.string() + ": truncated label data at byte offset " + std::to_string(lab.size()));

  const std::size_t n = limit ? std::min(*limit, n_img) : n_img;
  Dataset d;
  d.kind = DatasetKind::Classification;
  d.num_classes = 10;
  d.inputs = Tensor2(n, pixels);
  d.targets.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < pixels; ++p) d.inputs(i, p) = img[16 + i * pixels + p] / 255.0;
    d.targets[i] = lab[8 + i];
    if (d.targets[i] > 9) throw FormatError(labels.string() + ": label > 9 at byte offset " + std::to_string(8 + i));
  }
  return d;
}

Dataset gen_synthetic_classification(std::size_t n, std::size_t dim, std::size_t classes, double separation,
                                     double label_noise, std::uint64_t seed) {
  if (n == 0 || dim == 0 || classes < 2) throw ArgumentError("synthetic classification needs n, dim > 0 and >= 2 classes");
  if (separation < 0) throw ArgumentError("separation must be non-negative");
  if (!(label_noise >= 0 && label_noise < 1)) throw ArgumentError("label_noise must be in [0, 1)");
  // Class centers: random directions scaled to norm `separation`.
  Tensor2 centers(classes, dim);
  for (std::size_t c = 0; c < classes; ++c) {
    CounterRng rng(hash_key({seed, 0xce, c}));
    double norm = 0;
    for (std::size_t j = 0; j < dim; ++j) {
      centers(c, j) = rng.normal();
      norm += centers(c, j) * centers(c, j);
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < dim; ++j) centers(c, j) *= separation / (norm > 0 ? norm : 1.0);
  }
  Dataset d;
  d.kind = DatasetKind::Classification;
  d.num_classes = classes;
  d.inputs = Tensor2(n, dim);
  d.targets.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(hash_key({seed, 0xda, i}));
    const auto c = static_cast<std::size_t>(rng.below(classes));
    for (std::size_t j = 0; j < dim; ++j) d.inputs(i, j) = centers(c, j) + rng.normal();
    std::size_t label = c;
    if (rng.uniform() < label_noise) label = (c + 1 + rng.below(classes - 1)) % classes;
    d.targets[i] = static_cast<int>(label);
  }
  return d;
}

Tensor2 markov_transition_matrix(std::size_t vocab, std::size_t order, std::uint64_t seed) {
  if (vocab < 2) throw ArgumentError("vocab must be at least 2");
  if (order < 1) throw ArgumentError("Markov order must be at least 1");
  std::size_t states = 1;
  for (std::size_t i = 0; i < order; ++i) states *= vocab;
  Tensor2 T(states, vocab);
  for (std::size_t s = 0; s < states; ++s) {
    CounterRng rng(hash_key({seed, 0x7a, s}));
    double sum = 0;
    // Peaked rows: exponentiated Gaussian scores give a few likely successors.
    for (std::size_t v = 0; v < vocab; ++v) {
      T(s, v) = std::exp(2.0 * rng.normal());
      sum += T(s, v);
    }
    for (std::size_t v = 0; v < vocab; ++v) T(s, v) /= sum;
  }
  return T;
}

Dataset gen_synthetic_sequences(std::size_t n, std::size_t vocab, std::size_t context_len, SequenceGenerator generator,
                                std::size_t order, std::uint64_t seed) {
  if (vocab < 2) throw ArgumentError("vocab must be at least 2");
  if (n == 0 || context_len == 0) throw ArgumentError("sequence dataset needs n, context_len > 0");
  Dataset d;
  d.kind = DatasetKind::Sequence;
  d.num_classes = vocab;
  d.inputs = Tensor2(n, context_len);
  d.targets.resize(n * context_len);
  const Tensor2 T = generator == SequenceGenerator::Markov ? markov_transition_matrix(vocab, order, seed) : Tensor2();
  std::vector<int> stream(context_len + 1);
  for (std::size_t i = 0; i < n; ++i) {
    CounterRng rng(hash_key({seed, 0x5e, i}));
    if (generator == SequenceGenerator::Copy) {
      for (std::size_t t = 0; t < context_len; ++t) stream[t] = static_cast<int>(rng.below(vocab));
      for (std::size_t t = 0; t < context_len; ++t) {
        d.inputs(i, t) = stream[t];
        d.targets[i * context_len + t] = t == 0 ? stream[0] : stream[t - 1];
      }
      continue;
    }
    for (std::size_t t = 0; t < std::min(order, context_len + 1); ++t) stream[t] = static_cast<int>(rng.below(vocab));
    for (std::size_t t = order; t <= context_len; ++t) {
      std::size_t state = 0;
      for (std::size_t k = t - order; k < t; ++k) state = state * vocab + static_cast<std::size_t>(stream[k]);
      double u = rng.uniform();
      std::size_t next = vocab - 1;
      for (std::size_t v = 0; v < vocab; ++v) {
        u -= T(state, v);
        if (u < 0) {
          next = v;
          break;
        }
      }
      stream[t] = static_cast<int>(next);
    }
    for (std::size_t t = 0; t < context_len; ++t) {
      d.inputs(i, t) = stream[t];
      d.targets[i * context_len + t] = stream[t + 1];
    }
  }
  return d;
}

}  // namespace tdaens
