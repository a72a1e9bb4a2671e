// SPDX-License-Identifier: Apache-2.0
/**
 * @file   data.hpp
 * @brief  Recordings, overlap windowing, dataset splits, SNR-controlled noise
 *         and the synthetic bearing-signal generator.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mqccaf::data {

/// Malformed or insufficient input data.
class DataError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Load-condition tag. Stored as 1..4 in caches.
enum class Domain : std::uint8_t { D1 = 1, D2 = 2, D3 = 3, D4 = 4 };

std::string to_string(Domain d);
Domain parse_domain(const std::string &tag);
const std::vector<Domain> &all_domains();

struct RawRecording {
  std::vector<double> samples;
  double sample_rate = 0.0;
  std::size_t label = 0;
  Domain domain = Domain::D1;
};

/// Fixed-length windows stored contiguously: window i occupies
/// samples[i*length, (i+1)*length).
struct WindowSet {
  std::size_t length = 0;
  std::vector<double> samples;
  std::vector<std::uint32_t> labels;
  std::vector<Domain> domains;

  std::size_t size() const { return labels.size(); }
  std::span<const double> window(std::size_t i) const {
    return {samples.data() + i * length, length};
  }
  std::span<double> window(std::size_t i) {
    return {samples.data() + i * length, length};
  }
  void append(std::span<const double> w, std::uint32_t label, Domain domain);
  void append(const WindowSet &other);
  WindowSet subset(std::span<const std::size_t> indices) const;
  WindowSet filter(Domain domain) const;
  std::size_t num_classes() const;
};

/// Windows at offsets 0, stride, 2*stride, ...; count = (len - T)/stride + 1.
WindowSet overlap_window(const RawRecording &rec, std::size_t length,
                         std::size_t stride);
WindowSet overlap_window(std::span<const RawRecording> recs,
                         std::size_t length, std::size_t stride);

struct Split {
  WindowSet train, val, test;
};

/// Seeded shuffle, then test = N/5, val = (N - test)/5, train = the rest.
Split split(const WindowSet &ws, std::uint64_t seed);

/// Permutation used by split(); exposed for partition checks.
std::vector<std::size_t> split_order(std::size_t n, std::uint64_t seed);

struct NoiseSpec {
  double snr_db = 0.0;
  std::uint64_t seed = 0;
};

/// Mean of squared samples.
double signal_power(std::span<const double> x);

/// Noise variance that yields `snr_db` against a signal of power `p_signal`.
double noise_variance(double p_signal, double snr_db);

/// Adds N(0, sigma^2) with sigma^2 = P_s / 10^(snr/10), P_s per window.
std::vector<double> add_gaussian_noise(std::span<const double> window,
                                       const NoiseSpec &spec);

/// In-place noise on every window; window i uses a seed derived from
/// (seed, i).
void add_gaussian_noise(WindowSet &ws, double snr_db, std::uint64_t seed);

/// 10*log10(P_s / P_n) with P_n from (noisy - clean); +inf if the residual
/// is exactly zero.
double measure_snr(std::span<const double> clean, std::span<const double> noisy);

/// Synthetic bearing vibration. Class 0 is healthy (shaft tone and noise
/// floor only); class c > 0 adds decaying resonance bursts at a repetition
/// rate of c * fault_spacing_hz * speed(t). Domains differ in speed ramp,
/// structural resonance and burst decay.
struct SynthConfig {
  std::size_t num_classes = 5;
  std::size_t recordings_per_class = 1; // per domain
  std::size_t recording_length = 8384;
  double sample_rate = 12000.0;
  std::vector<Domain> domains = {Domain::D1, Domain::D2, Domain::D3,
                                 Domain::D4};
  double shaft_hz = 25.0;
  double shaft_amplitude = 0.2;
  double fault_spacing_hz = 40.0;
  double impulse_amplitude = 4.0;
  double timing_jitter = 0.01; // fraction of the burst period
  double noise_floor = 0.08;
  std::uint64_t seed = 1;
};

struct DomainProfile {
  double speed_start, speed_mid, speed_end; // piecewise-linear ramp
  double resonance_hz;
  double decay_per_s;
};
DomainProfile domain_profile(Domain d);
/// Speed multiplier at normalized recording time tau in [0, 1].
double domain_speed(Domain d, double tau);

std::vector<RawRecording> synth_generate(const SynthConfig &cfg);

/// Header line `sample_rate,label,domain`, one line of those values, then one
/// sample per line.
RawRecording load_csv(const std::filesystem::path &path);
void save_csv(const RawRecording &rec, const std::filesystem::path &path);

void save_window_cache(const WindowSet &ws, const std::filesystem::path &path);
WindowSet load_window_cache(const std::filesystem::path &path);

} // namespace mqccaf::data
