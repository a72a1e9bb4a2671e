// SPDX-License-Identifier: Apache-2.0
#include "mqccaf/data.hpp"

#include "mqccaf/rng.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>

namespace mqccaf::data {

std::string to_string(Domain d) {
  return "D" + std::to_string(static_cast<int>(d));
}

Domain parse_domain(const std::string &tag) {
  if (tag == "D1")
    return Domain::D1;
  if (tag == "D2")
    return Domain::D2;
  if (tag == "D3")
    return Domain::D3;
  if (tag == "D4")
    return Domain::D4;
  throw DataError("unknown domain tag '" + tag + "' (expected D1..D4)");
}

const std::vector<Domain> &all_domains() {
  static const std::vector<Domain> d = {Domain::D1, Domain::D2, Domain::D3,
                                        Domain::D4};
  return d;
}

void WindowSet::append(std::span<const double> w, std::uint32_t label,
                       Domain domain) {
  if (length == 0)
    length = w.size();
  if (w.size() != length)
    throw DataError("window length " + std::to_string(w.size()) +
                    " != set length " + std::to_string(length));
  samples.insert(samples.end(), w.begin(), w.end());
  labels.push_back(label);
  domains.push_back(domain);
}

void WindowSet::append(const WindowSet &other) {
  for (std::size_t i = 0; i < other.size(); ++i)
    append(other.window(i), other.labels[i], other.domains[i]);
}

WindowSet WindowSet::subset(std::span<const std::size_t> indices) const {
  WindowSet out;
  out.length = length;
  out.samples.reserve(indices.size() * length);
  for (auto i : indices)
    out.append(window(i), labels.at(i), domains.at(i));
  return out;
}

WindowSet WindowSet::filter(Domain domain) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < size(); ++i)
    if (domains[i] == domain)
      idx.push_back(i);
  return subset(idx);
}

std::size_t WindowSet::num_classes() const {
  if (labels.empty())
    return 0;
  return *std::max_element(labels.begin(), labels.end()) + 1;
}

WindowSet overlap_window(const RawRecording &rec, std::size_t length,
                         std::size_t stride) {
  if (stride == 0 || length == 0)
    throw DataError("window length and stride must be >= 1");
  if (rec.samples.size() < length)
    throw DataError("recording of " + std::to_string(rec.samples.size()) +
                    " samples is shorter than window length " +
                    std::to_string(length));
  WindowSet ws;
  ws.length = length;
  const std::size_t count = (rec.samples.size() - length) / stride + 1;
  ws.samples.reserve(count * length);
  for (std::size_t i = 0; i < count; ++i)
    ws.append(std::span<const double>(rec.samples).subspan(i * stride, length),
              static_cast<std::uint32_t>(rec.label), rec.domain);
  return ws;
}

WindowSet overlap_window(std::span<const RawRecording> recs,
                         std::size_t length, std::size_t stride) {
  WindowSet ws;
  ws.length = length;
  for (const auto &r : recs)
    ws.append(overlap_window(r, length, stride));
  return ws;
}

std::vector<std::size_t> split_order(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "split"));
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

Split split(const WindowSet &ws, std::uint64_t seed) {
  const std::size_t n = ws.size();
  if (n < 25)
    throw DataError("split needs at least 25 windows, got " +
                    std::to_string(n));
  const auto order = split_order(n, seed);
  const std::size_t n_test = n / 5;
  const std::size_t n_val = (n - n_test) / 5;
  const std::span<const std::size_t> all(order);
  Split s;
  s.test = ws.subset(all.subspan(0, n_test));
  s.val = ws.subset(all.subspan(n_test, n_val));
  s.train = ws.subset(all.subspan(n_test + n_val));
  return s;
}

double signal_power(std::span<const double> x) {
  if (x.empty())
    return 0.0;
  double p = 0.0;
  for (double v : x)
    p += v * v;
  return p / static_cast<double>(x.size());
}

double noise_variance(double p_signal, double snr_db) {
  if (!std::isfinite(snr_db))
    throw DataError("snr_db must be finite");
  return p_signal / std::pow(10.0, snr_db / 10.0);
}

std::vector<double> add_gaussian_noise(std::span<const double> window,
                                       const NoiseSpec &spec) {
  const double ps = signal_power(window);
  if (!(ps > 0.0))
    throw DataError("cannot set SNR on a zero-power window");
  const double sigma = std::sqrt(noise_variance(ps, spec.snr_db));
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, sigma);
  std::vector<double> out(window.begin(), window.end());
  for (auto &v : out)
    v += normal(rng);
  return out;
}

void add_gaussian_noise(WindowSet &ws, double snr_db, std::uint64_t seed) {
  for (std::size_t i = 0; i < ws.size(); ++i) {
    auto w = ws.window(i);
    auto noisy = add_gaussian_noise(
        w, NoiseSpec{snr_db, derive_seed(seed, static_cast<std::uint64_t>(i))});
    std::copy(noisy.begin(), noisy.end(), w.begin());
  }
}

double measure_snr(std::span<const double> clean,
                   std::span<const double> noisy) {
  if (clean.size() != noisy.size())
    throw DataError("measure_snr: length mismatch");
  double pn = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double r = noisy[i] - clean[i];
    pn += r * r;
  }
  if (pn == 0.0)
    return std::numeric_limits<double>::infinity();
  pn /= static_cast<double>(clean.size());
  return 10.0 * std::log10(signal_power(clean) / pn);
}

DomainProfile domain_profile(Domain d) {
  switch (d) {
  case Domain::D1: // increasing speed
    return {0.90, 0.95, 1.00, 2600.0, 900.0};
  case Domain::D2: // decreasing speed
    return {1.10, 1.05, 1.00, 3200.0, 700.0};
  case Domain::D3: // increasing, then decreasing
    return {0.95, 1.10, 0.95, 3800.0, 1100.0};
  case Domain::D4: // decreasing, then increasing
    return {1.05, 0.90, 1.05, 4400.0, 800.0};
  }
  throw DataError("invalid domain");
}

double domain_speed(Domain d, double tau) {
  const auto p = domain_profile(d);
  tau = std::clamp(tau, 0.0, 1.0);
  if (tau <= 0.5)
    return p.speed_start + (p.speed_mid - p.speed_start) * (tau / 0.5);
  return p.speed_mid + (p.speed_end - p.speed_mid) * ((tau - 0.5) / 0.5);
}

namespace {

RawRecording synth_one(const SynthConfig &cfg, std::size_t label, Domain dom,
                       std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto prof = domain_profile(dom);
  const std::size_t n = cfg.recording_length;
  const double fs = cfg.sample_rate;
  std::vector<double> x(n, 0.0);

  // Shaft tone with a weaker second harmonic.
  double phase = 2.0 * std::numbers::pi * unit(rng);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = domain_speed(dom, static_cast<double>(i) /
                                           static_cast<double>(n > 1 ? n - 1 : 1));
    phase += 2.0 * std::numbers::pi * cfg.shaft_hz * s / fs;
    x[i] += cfg.shaft_amplitude * (std::sin(phase) + 0.3 * std::sin(2.0 * phase));
  }

  if (label > 0) {
    const double ring_s = 6.0 / prof.decay_per_s;
    const auto ring_len = static_cast<std::size_t>(ring_s * fs);
    double cycle = unit(rng);
    for (std::size_t i = 0; i < n; ++i) {
      const double s = domain_speed(dom, static_cast<double>(i) /
                                             static_cast<double>(n > 1 ? n - 1 : 1));
      const double rate = static_cast<double>(label) * cfg.fault_spacing_hz * s;
      cycle += rate / fs;
      if (cycle < 1.0)
        continue;
      cycle -= 1.0;
      const double period = fs / rate;
      const auto jitter = static_cast<std::ptrdiff_t>(
          std::lround(cfg.timing_jitter * period * normal(rng)));
      const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(i) + jitter;
      const double amp = cfg.impulse_amplitude * (1.0 + 0.1 * normal(rng));
      for (std::size_t k = 0; k < ring_len; ++k) {
        const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(k);
        if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(n))
          continue;
        const double t = static_cast<double>(k) / fs;
        x[static_cast<std::size_t>(pos)] +=
            amp * std::exp(-prof.decay_per_s * t) *
            std::sin(2.0 * std::numbers::pi * prof.resonance_hz * t);
      }
    }
  }

  // Noise floor: half white, half first-order low-passed (pinkish tilt).
  double lp = 0.0;
  const double a = 0.95, gain = std::sqrt(1.0 - a * a);
  for (std::size_t i = 0; i < n; ++i) {
    lp = a * lp + gain * normal(rng);
    x[i] += cfg.noise_floor * (std::sqrt(0.5) * normal(rng) + std::sqrt(0.5) * lp);
  }

  RawRecording rec;
  rec.samples = std::move(x);
  rec.sample_rate = fs;
  rec.label = label;
  rec.domain = dom;
  return rec;
}

} // namespace

std::vector<RawRecording> synth_generate(const SynthConfig &cfg) {
  if (cfg.num_classes < 2)
    throw DataError("synthetic data needs at least 2 classes");
  if (cfg.recording_length == 0 || cfg.sample_rate <= 0.0)
    throw DataError("synthetic recording length and sample rate must be > 0");
  std::vector<RawRecording> out;
  for (Domain dom : cfg.domains)
    for (std::size_t c = 0; c < cfg.num_classes; ++c)
      for (std::size_t r = 0; r < cfg.recordings_per_class; ++r) {
        const std::string key = to_string(dom) + "/" + std::to_string(c) +
                                "/" + std::to_string(r);
        out.push_back(synth_one(cfg, c, dom, derive_seed(cfg.seed, key)));
      }
  return out;
}

namespace {

std::string trim(const std::string &s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos)
    return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string &s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(',', start);
    out.push_back(trim(s.substr(start, pos - start)));
    if (pos == std::string::npos)
      break;
    start = pos + 1;
  }
  return out;
}

bool parse_double(const std::string &s, double &out) {
  if (s.empty())
    return false;
  const char *b = s.data();
  const char *e = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && ptr == e;
}

} // namespace

RawRecording load_csv(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is)
    throw DataError("cannot open recording " + path.string());
  const std::string where = path.string() + ":";
  std::string line;
  if (!std::getline(is, line) ||
      split_commas(trim(line)) !=
          std::vector<std::string>{"sample_rate", "label", "domain"})
    throw DataError(where + "1: missing header 'sample_rate,label,domain'");
  if (!std::getline(is, line))
    throw DataError(where + "2: missing sample_rate,label,domain values");
  const auto meta = split_commas(trim(line));
  double rate = 0.0, label = 0.0;
  if (meta.size() != 3 || !parse_double(meta[0], rate) ||
      !parse_double(meta[1], label) || rate <= 0.0 || label < 0.0 ||
      label != std::floor(label))
    throw DataError(where + "2: malformed metadata row '" + line + "'");
  RawRecording rec;
  rec.sample_rate = rate;
  rec.label = static_cast<std::size_t>(label);
  try {
    rec.domain = parse_domain(meta[2]);
  } catch (const DataError &e) {
    throw DataError(where + "2: " + e.what());
  }
  std::size_t lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty())
      continue;
    double v = 0.0;
    if (!parse_double(t, v) || !std::isfinite(v))
      throw DataError(where + std::to_string(lineno) +
                      ": non-numeric sample '" + t + "'");
    rec.samples.push_back(v);
  }
  return rec;
}

void save_csv(const RawRecording &rec, const std::filesystem::path &path) {
  std::ofstream os(path);
  if (!os)
    throw DataError("cannot write " + path.string());
  char buf[64];
  os << "sample_rate,label,domain\n";
  std::snprintf(buf, sizeof(buf), "%.17g", rec.sample_rate);
  os << buf << ',' << rec.label << ',' << to_string(rec.domain) << '\n';
  for (double v : rec.samples) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf << '\n';
  }
  if (!os)
    throw DataError("write failed for " + path.string());
}

namespace {
constexpr char kCacheMagic[8] = {'M', 'Q', 'C', 'C', 'A', 'F', 'W', 'S'};
constexpr std::uint32_t kCacheVersion = 1;
} // namespace

void save_window_cache(const WindowSet &ws, const std::filesystem::path &path) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw DataError("cannot write " + path.string());
  auto put = [&](const void *p, std::size_t n) {
    os.write(static_cast<const char *>(p), static_cast<std::streamsize>(n));
  };
  const std::uint64_t t = ws.length, count = ws.size();
  put(kCacheMagic, sizeof(kCacheMagic));
  put(&kCacheVersion, sizeof(kCacheVersion));
  put(&t, sizeof(t));
  put(&count, sizeof(count));
  put(ws.samples.data(), ws.samples.size() * sizeof(double));
  put(ws.labels.data(), ws.labels.size() * sizeof(std::uint32_t));
  put(ws.domains.data(), ws.domains.size());
  if (!os)
    throw DataError("write failed for " + path.string());
}

WindowSet load_window_cache(const std::filesystem::path &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw DataError("cannot open window cache " + path.string());
  auto get = [&](void *p, std::size_t n) {
    is.read(static_cast<char *>(p), static_cast<std::streamsize>(n));
    if (!is)
      throw DataError("truncated window cache " + path.string());
  };
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t t = 0, count = 0;
  get(magic, sizeof(magic));
  if (std::memcmp(magic, kCacheMagic, sizeof(magic)) != 0)
    throw DataError("bad window cache magic in " + path.string());
  get(&version, sizeof(version));
  if (version != kCacheVersion)
    throw DataError("unsupported window cache version");
  get(&t, sizeof(t));
  get(&count, sizeof(count));
  WindowSet ws;
  ws.length = t;
  ws.samples.resize(t * count);
  ws.labels.resize(count);
  ws.domains.resize(count);
  get(ws.samples.data(), ws.samples.size() * sizeof(double));
  get(ws.labels.data(), ws.labels.size() * sizeof(std::uint32_t));
  get(ws.domains.data(), ws.domains.size());
  for (auto d : ws.domains)
    if (static_cast<int>(d) < 1 || static_cast<int>(d) > 4)
      throw DataError("invalid domain byte in window cache");
  return ws;
}

} // namespace mqccaf::data
