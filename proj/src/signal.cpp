#include "cdhm/signal.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

namespace cdhm {

namespace fs = std::filesystem;
using nlohmann::json;

void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0)
        throw std::invalid_argument("fft: length must be a power of two");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * M_PI / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                std::complex<double> u = a[i + k];
                std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

std::vector<std::vector<double>> slide_windows(const RawSignal& signal,
                                               int64_t window_len, int64_t hop) {
    int64_t len = static_cast<int64_t>(signal.samples.size());
    if (window_len < 1 || hop < 1)
        throw std::invalid_argument("slide_windows: window_len and hop must be >= 1");
    if (window_len > len)
        throw std::invalid_argument("slide_windows: window (" +
                                    std::to_string(window_len) +
                                    ") longer than signal (" + std::to_string(len) + ")");
    int64_t count = (len - window_len) / hop + 1;
    std::vector<std::vector<double>> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        auto begin = signal.samples.begin() + i * hop;
        out.emplace_back(begin, begin + window_len);
    }
    return out;
}

std::vector<double> add_noise_at_snr(const std::vector<double>& signal,
                                     double snr_db, uint64_t seed) {
    if (signal.empty()) throw std::invalid_argument("add_noise_at_snr: empty signal");
    double p_signal = 0.0;
    for (double v : signal) p_signal += v * v;
    p_signal /= static_cast<double>(signal.size());
    if (p_signal <= 0.0)
        throw std::invalid_argument("add_noise_at_snr: zero-power signal, SNR undefined");

    Rng rng(seed);
    std::vector<double> noise(signal.size());
    double p_noise = 0.0;
    for (auto& v : noise) {
        v = rng.normal();
        p_noise += v * v;
    }
    p_noise /= static_cast<double>(noise.size());
    double target = p_signal / std::pow(10.0, snr_db / 10.0);
    double gain = std::sqrt(target / p_noise);

    std::vector<double> out(signal.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = signal[i] + gain * noise[i];
    return out;
}

double wavelet_center_frequency(double scale, double sample_rate,
                                double center_freq) {
    return center_freq * sample_rate / scale;
}

TimeFrequencyImage cwt_image(const std::vector<double>& window,
                             double sample_rate, int resolution,
                             const CwtConfig& cfg) {
    const int64_t n = static_cast<int64_t>(window.size());
    if (n < 8) throw std::invalid_argument("cwt_image: window length must be >= 8");
    if (resolution < 2) throw std::invalid_argument("cwt_image: resolution must be >= 2");
    for (double v : window)
        if (!std::isfinite(v))
            throw std::invalid_argument("cwt_image: non-finite sample");

    double max_scale = cfg.max_scale > 0.0 ? cfg.max_scale
                                           : static_cast<double>(n) / 4.0;
    if (!(cfg.min_scale > 0.0) || max_scale <= cfg.min_scale)
        throw std::invalid_argument("cwt_image: bad scale range");
    const int ns = cfg.num_scales;

    size_t nfft = 1;
    while (nfft < static_cast<size_t>(2 * n)) nfft <<= 1;

    std::vector<std::complex<double>> spectrum(nfft, {0.0, 0.0});
    for (int64_t i = 0; i < n; ++i) spectrum[static_cast<size_t>(i)] = window[static_cast<size_t>(i)];
    fft_inplace(spectrum, false);

    const double w0 = 2.0 * M_PI * cfg.center_freq;
    std::vector<double> scales(static_cast<size_t>(ns));
    double log_min = std::log(cfg.min_scale), log_max = std::log(max_scale);
    for (int s = 0; s < ns; ++s)
        scales[static_cast<size_t>(s)] =
            std::exp(log_min + (log_max - log_min) * (ns > 1 ? static_cast<double>(s) /
                                                                   (ns - 1)
                                                             : 0.0));

    // Analytic Morlet: response exp(-(a*w - w0)^2 / 2) over positive
    // frequencies, flat amplitude normalization so equal-amplitude tones at
    // different frequencies peak equally.
    Tensor mag({ns, n});
    std::vector<std::complex<double>> work(nfft);
    for (int s = 0; s < ns; ++s) {
        double a = scales[static_cast<size_t>(s)];
        for (size_t k = 0; k < nfft; ++k) {
            double w;
            if (k <= nfft / 2)
                w = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(nfft);
            else
                w = -1.0;  // negative frequencies zeroed (analytic wavelet)
            double h = w >= 0.0 ? std::exp(-0.5 * (a * w - w0) * (a * w - w0)) : 0.0;
            work[k] = spectrum[k] * h;
        }
        fft_inplace(work, true);
        for (int64_t i = 0; i < n; ++i)
            mag[s * n + i] = std::abs(work[static_cast<size_t>(i)]);
    }

    // Bilinear resample [ns, n] -> [resolution, resolution]. Row r of the
    // image maps to a point on the log-scale axis; column c to a time point.
    TimeFrequencyImage img;
    img.pixels = Tensor({resolution, resolution});
    img.scale_axis.resize(static_cast<size_t>(resolution));
    img.time_axis.resize(static_cast<size_t>(resolution));
    for (int r = 0; r < resolution; ++r) {
        double fs_pos = resolution > 1
                            ? static_cast<double>(r) * (ns - 1) / (resolution - 1)
                            : 0.0;
        img.scale_axis[static_cast<size_t>(r)] =
            std::exp(log_min + (log_max - log_min) *
                                   (ns > 1 ? fs_pos / (ns - 1) : 0.0));
        int r0 = static_cast<int>(fs_pos);
        int r1 = std::min(r0 + 1, ns - 1);
        double fr = fs_pos - r0;
        for (int c = 0; c < resolution; ++c) {
            double ct = resolution > 1 ? static_cast<double>(c) * (n - 1) /
                                             (resolution - 1)
                                       : 0.0;
            int c0 = static_cast<int>(ct);
            int c1 = std::min<int64_t>(c0 + 1, n - 1);
            double fc = ct - c0;
            double v = (1 - fr) * ((1 - fc) * mag[r0 * n + c0] + fc * mag[r0 * n + c1]) +
                       fr * ((1 - fc) * mag[r1 * n + c0] + fc * mag[r1 * n + c1]);
            img.pixels.at2(r, c) = v;
        }
    }
    for (int c = 0; c < resolution; ++c)
        img.time_axis[static_cast<size_t>(c)] =
            (resolution > 1 ? static_cast<double>(c) * (n - 1) / (resolution - 1)
                            : 0.0) /
            sample_rate;

    // Min-max normalize to [-1, 1]; degenerate range maps to all -1.
    double lo = img.pixels[0], hi = img.pixels[0], amax = 0.0;
    for (int64_t i = 0; i < img.pixels.size(); ++i) {
        lo = std::min(lo, img.pixels[i]);
        hi = std::max(hi, img.pixels[i]);
        amax = std::max(amax, std::fabs(img.pixels[i]));
    }
    if (hi - lo <= 1e-9 * std::max(amax, 1e-300)) {
        img.pixels.fill(-1.0);
    } else {
        double inv = 2.0 / (hi - lo);
        for (int64_t i = 0; i < img.pixels.size(); ++i)
            img.pixels[i] = (img.pixels[i] - lo) * inv - 1.0;
    }
    return img;
}

void SyntheticDomainConfig::validate() const {
    if (num_classes < 2)
        throw std::invalid_argument("synthetic config: num_classes must be >= 2");
    if (static_cast<int>(impulse_freqs_hz.size()) != num_classes)
        throw std::invalid_argument("synthetic config: one impulse frequency per class");
    double nyquist = sample_rate / 2.0;
    for (double f : impulse_freqs_hz)
        if (!(f > 0.0) || f >= nyquist)
            throw std::invalid_argument("synthetic config: impulse frequency outside (0, Nyquist)");
    if (!(carrier_freq_hz > 0.0) || carrier_freq_hz >= nyquist)
        throw std::invalid_argument("synthetic config: carrier frequency outside (0, Nyquist)");
    if (signal_len < 1) throw std::invalid_argument("synthetic config: signal_len < 1");
    if (noise_floor_std < 0.0)
        throw std::invalid_argument("synthetic config: negative noise floor");
    if (!(sample_rate > 0.0))
        throw std::invalid_argument("synthetic config: sample_rate must be > 0");
}

SignalDataset synth_dataset(const SyntheticDomainConfig& cfg, int n_per_class) {
    cfg.validate();
    if (n_per_class < 1)
        throw std::invalid_argument("synth_dataset: n_per_class must be >= 1");

    Rng rng(cfg.seed);
    SignalDataset out;
    out.reserve(static_cast<size_t>(cfg.num_classes * n_per_class));

    const double dt = 1.0 / cfg.sample_rate;
    // Resonance rings until it decays to 0.1% of its initial amplitude.
    const int64_t ring_len = std::min<int64_t>(
        cfg.signal_len,
        static_cast<int64_t>(std::ceil(std::log(1e3) / (cfg.resonance_decay * dt))));

    for (int c = 0; c < cfg.num_classes; ++c) {
        double period = cfg.sample_rate / cfg.impulse_freqs_hz[static_cast<size_t>(c)];
        for (int i = 0; i < n_per_class; ++i) {
            RawSignal sig;
            sig.sample_rate = cfg.sample_rate;
            sig.source_id = cfg.name + "/c" + std::to_string(c) + "/i" + std::to_string(i);
            sig.samples.assign(static_cast<size_t>(cfg.signal_len), 0.0);

            double phase = rng.uniform() * period;  // random first-impact offset
            for (double t0 = phase; t0 < static_cast<double>(cfg.signal_len);
                 t0 += period) {
                double strength = 0.8 + 0.4 * rng.uniform();  // impact-to-impact spread
                int64_t start = static_cast<int64_t>(std::ceil(t0));
                double frac = static_cast<double>(start) - t0;
                for (int64_t k = 0; k < ring_len && start + k < cfg.signal_len; ++k) {
                    double tau = (static_cast<double>(k) + frac) * dt;
                    sig.samples[static_cast<size_t>(start + k)] +=
                        strength * std::exp(-cfg.resonance_decay * tau) *
                        std::sin(2.0 * M_PI * cfg.carrier_freq_hz * tau);
                }
            }
            for (auto& v : sig.samples)
                v = cfg.amplitude * v + cfg.offset + cfg.noise_floor_std * rng.normal();
            out.push_back({std::move(sig), c, 0});
        }
    }
    return out;
}

std::pair<SignalDataset, SignalDataset> split_train_test(
    const SignalDataset& dataset, double ratio, uint64_t seed) {
    if (dataset.empty()) throw std::invalid_argument("split_train_test: empty dataset");
    if (!(ratio > 0.0 && ratio < 1.0))
        throw std::invalid_argument("split_train_test: ratio must be in (0,1)");

    std::map<int, std::vector<size_t>> by_class;
    for (size_t i = 0; i < dataset.size(); ++i)
        by_class[dataset[i].label].push_back(i);

    Rng rng(seed);
    SignalDataset train, test;
    for (auto& [label, idx] : by_class) {
        if (idx.size() < 2)
            throw std::invalid_argument("split_train_test: class " +
                                        std::to_string(label) +
                                        " has fewer than 2 samples");
        rng.shuffle(idx);
        int64_t n_train = std::llround(ratio * static_cast<double>(idx.size()));
        n_train = std::clamp<int64_t>(n_train, 1, static_cast<int64_t>(idx.size()) - 1);
        for (size_t k = 0; k < idx.size(); ++k) {
            if (static_cast<int64_t>(k) < n_train)
                train.push_back(dataset[idx[k]]);
            else
                test.push_back(dataset[idx[k]]);
        }
    }
    return {train, test};
}

// ---- container I/O ----

namespace {

std::string domain_name(int d) { return d == 0 ? "source" : "target"; }

int domain_from_name(const std::string& s) {
    if (s == "source") return 0;
    if (s == "target") return 1;
    throw std::runtime_error("unknown domain tag: " + s);
}

}  // namespace

std::string save_signal(const std::string& dir, const std::string& stem,
                        const DatasetEntry& entry) {
    fs::create_directories(dir);
    fs::path raw = fs::path(dir) / (stem + ".f32");
    {
        std::ofstream f(raw, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + raw.string());
        for (double v : entry.signal.samples) {
            float x = static_cast<float>(v);
            f.write(reinterpret_cast<const char*>(&x), sizeof(float));
        }
    }
    fs::path side = fs::path(dir) / (stem + ".json");
    json j;
    j["sample_rate"] = entry.signal.sample_rate;
    if (entry.label >= 0)
        j["label"] = entry.label;
    else
        j["label"] = nullptr;
    j["domain"] = domain_name(entry.domain);
    j["source_id"] = entry.signal.source_id;
    j["data"] = stem + ".f32";
    std::ofstream f(side);
    f << j.dump(2) << "\n";
    return side.string();
}

DatasetEntry load_signal(const std::string& sidecar_path) {
    std::ifstream f(sidecar_path);
    if (!f) throw std::runtime_error("cannot open sidecar " + sidecar_path);
    json j = json::parse(f);

    DatasetEntry e;
    e.signal.sample_rate = j.at("sample_rate").get<double>();
    e.label = j.contains("label") && !j["label"].is_null() ? j["label"].get<int>() : -1;
    e.domain = j.contains("domain") ? domain_from_name(j["domain"].get<std::string>()) : 0;
    e.signal.source_id =
        j.contains("source_id") ? j["source_id"].get<std::string>() : sidecar_path;

    fs::path base = fs::path(sidecar_path).parent_path();
    std::string data = j.contains("data")
                           ? j["data"].get<std::string>()
                           : fs::path(sidecar_path).stem().string() + ".f32";
    fs::path payload = base / data;
    if (payload.extension() == ".csv") {
        std::ifstream d(payload);
        if (!d) throw std::runtime_error("cannot open " + payload.string());
        std::string line;
        while (std::getline(d, line)) {
            if (line.empty()) continue;
            e.signal.samples.push_back(std::stod(line));
        }
    } else {
        std::ifstream d(payload, std::ios::binary);
        if (!d) throw std::runtime_error("cannot open " + payload.string());
        float x;
        while (d.read(reinterpret_cast<char*>(&x), sizeof(float)))
            e.signal.samples.push_back(static_cast<double>(x));
    }
    if (e.signal.samples.empty())
        throw std::runtime_error("empty signal payload: " + payload.string());
    return e;
}

void save_manifest(const std::string& path,
                   const std::vector<std::string>& sidecar_paths,
                   const SignalDataset& dataset) {
    if (sidecar_paths.size() != dataset.size())
        throw std::invalid_argument("save_manifest: size mismatch");
    json list = json::array();
    fs::path base = fs::path(path).parent_path();
    for (size_t i = 0; i < dataset.size(); ++i) {
        json rec;
        rec["signal_path"] = fs::relative(sidecar_paths[i], base).string();
        if (dataset[i].label >= 0)
            rec["label"] = dataset[i].label;
        else
            rec["label"] = nullptr;
        rec["domain"] = domain_name(dataset[i].domain);
        list.push_back(rec);
    }
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write manifest " + path);
    f << list.dump(2) << "\n";
}

SignalDataset load_manifest(const std::string& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw std::runtime_error("cannot open manifest " + manifest_path);
    json list = json::parse(f);
    if (!list.is_array()) throw std::runtime_error("manifest must be a JSON list");
    fs::path base = fs::path(manifest_path).parent_path();
    SignalDataset out;
    for (const auto& rec : list) {
        DatasetEntry e = load_signal((base / rec.at("signal_path").get<std::string>()).string());
        if (rec.contains("label") && !rec["label"].is_null())
            e.label = rec["label"].get<int>();
        if (rec.contains("domain"))
            e.domain = domain_from_name(rec["domain"].get<std::string>());
        out.push_back(std::move(e));
    }
    return out;
}

std::string write_dataset_dir(const std::string& dir, const SignalDataset& ds) {
    fs::path signals = fs::path(dir) / "signals";
    std::vector<std::string> sidecars;
    int counter = 0;
    for (const auto& e : ds) {
        std::ostringstream stem;
        stem << "sig" << std::setw(6) << std::setfill('0') << counter++;
        sidecars.push_back(save_signal(signals.string(), stem.str(), e));
    }
    std::string manifest = (fs::path(dir) / "manifest.json").string();
    save_manifest(manifest, sidecars, ds);
    return manifest;
}

}  // namespace cdhm
