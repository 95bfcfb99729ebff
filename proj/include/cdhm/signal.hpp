#pragma once

#include <complex>
#include <string>
#include <vector>

#include "cdhm/rng.hpp"
#include "cdhm/tensor.hpp"

namespace cdhm {

struct RawSignal {
    std::vector<double> samples;  // acceleration, arbitrary units
    double sample_rate = 0.0;     // Hz
    std::string source_id;
};

struct DatasetEntry {
    RawSignal signal;
    int label = -1;  // -1 = unlabeled
    int domain = 0;  // 0 source, 1 target
};

using SignalDataset = std::vector<DatasetEntry>;

/// CWT magnitude scalogram resampled to a square grid, pixels in [-1, 1].
struct TimeFrequencyImage {
    Tensor pixels;                  // [H, W], H == W == resolution
    std::vector<double> scale_axis;  // per-row wavelet scale (samples)
    std::vector<double> time_axis;   // per-column time offset (seconds)
};

struct CwtConfig {
    int num_scales = 64;
    double min_scale = 2.0;
    double max_scale = 0.0;     // 0 -> window_len / 4
    double center_freq = 1.0;   // relative (cycles per sample at scale 1)
};

/// Non-overlapping-agnostic sliding windows: window i starts at i*hop.
/// Exactly floor((len - window_len)/hop) + 1 windows, no padding.
std::vector<std::vector<double>> slide_windows(const RawSignal& signal,
                                               int64_t window_len, int64_t hop);

/// signal + n, n zero-mean Gaussian rescaled so that
/// 10*log10(P_signal / P_noise) equals snr_db exactly (P = mean square).
std::vector<double> add_noise_at_snr(const std::vector<double>& signal,
                                     double snr_db, uint64_t seed);

/// Complex-Morlet magnitude scalogram over log-spaced scales, min-max
/// normalized to [-1, 1]. All-constant input maps to the all -1 image.
TimeFrequencyImage cwt_image(const std::vector<double>& window,
                             double sample_rate, int resolution,
                             const CwtConfig& cfg = {});

/// Center frequency (Hz) of the wavelet at a given scale.
double wavelet_center_frequency(double scale, double sample_rate,
                                double center_freq = 1.0);

/// One synthetic working condition: classes are impulse-train frequencies,
/// the machine signature is a decaying resonance at the carrier frequency.
struct SyntheticDomainConfig {
    int num_classes = 4;
    std::vector<double> impulse_freqs_hz;  // one per class
    double carrier_freq_hz = 900.0;
    double resonance_decay = 600.0;  // amplitude decay rate, 1/s
    double noise_floor_std = 0.1;
    double amplitude = 1.0;   // domain-specific gain
    double offset = 0.0;      // domain-specific DC offset
    double sample_rate = 4096.0;
    int64_t signal_len = 384;
    uint64_t seed = 0;
    std::string name = "synth";

    void validate() const;
};

/// n_per_class labeled signals per class; reproducible under cfg.seed.
SignalDataset synth_dataset(const SyntheticDomainConfig& cfg, int n_per_class);

/// Stratified split: per-class counts within 1 of ratio*N, disjoint,
/// deterministic under seed. Classes with fewer than 2 samples are an error.
std::pair<SignalDataset, SignalDataset> split_train_test(
    const SignalDataset& dataset, double ratio, uint64_t seed);

// ---- signal container I/O ----

/// Writes <stem>.f32 (little-endian float32) plus <stem>.json sidecar
/// {sample_rate, label, domain, source_id}. Returns the sidecar path.
std::string save_signal(const std::string& dir, const std::string& stem,
                        const DatasetEntry& entry);

/// Loads from a sidecar JSON path; the signal payload is the sibling
/// .f32 raw file or one-column .csv named in the sidecar.
DatasetEntry load_signal(const std::string& sidecar_path);

/// Manifest: JSON list of {signal_path, label, domain}.
void save_manifest(const std::string& path,
                   const std::vector<std::string>& sidecar_paths,
                   const SignalDataset& dataset);
SignalDataset load_manifest(const std::string& manifest_path);

/// Writes a full dataset directory (signals/ + manifest.json).
std::string write_dataset_dir(const std::string& dir, const SignalDataset& ds);

// ---- FFT (radix-2, used by the CWT; exposed for reuse) ----
void fft_inplace(std::vector<std::complex<double>>& a, bool inverse);

}  // namespace cdhm
