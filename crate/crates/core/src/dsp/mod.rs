//! Waveforms, STFT analysis/synthesis, and their adjoints.
//!
//! Framing is centered: the input is reflect-padded by `window_size / 2` on
//! both sides, frames start every `hop` samples, and frame count for input
//! length `L` is `L / hop + 1`. Synthesis uses windowed overlap-add with
//! window-square normalization, so `istft(stft(x))` reconstructs `x` to
//! machine precision for any config accepted by [`StftConfig::new`].

pub mod dump;
pub mod wav;

use crate::error::{invalid_arg, shape_err, Error, Result};
use crate::scalar::Scalar;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Floor for the overlap-add window-energy normalizer.
const OLA_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<S: Scalar> {
    pub samples: Vec<S>,
    pub sample_rate: u32,
}

impl<S: Scalar> Waveform<S> {
    pub fn new(samples: Vec<S>, sample_rate: u32) -> Self {
        Waveform { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> S {
        self.samples.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn energy(&self) -> S {
        self.samples.iter().map(|&x| x * x).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    window_size: usize,
    hop: usize,
}

impl StftConfig {
    /// Window must be even and a multiple of `4 * hop`, which keeps the
    /// squared periodic Hann window constant-overlap-add.
    pub fn new(window_size: usize, hop: usize) -> Result<Self> {
        if window_size < 2 || window_size % 2 != 0 {
            return invalid_arg(format!("window_size must be even and >= 2, got {window_size}"));
        }
        if hop == 0 {
            return invalid_arg("hop must be >= 1");
        }
        if window_size % (4 * hop) != 0 {
            return invalid_arg(format!(
                "window_size {window_size} must be a multiple of 4*hop = {}",
                4 * hop
            ));
        }
        Ok(StftConfig { window_size, hop })
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// One-sided bin count `window_size / 2 + 1`.
    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn frames_for_len(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Longest waveform the synthesis side can produce from `frames` frames.
    pub fn max_synthesis_len(&self, frames: usize) -> usize {
        self.hop * (frames - 1) + self.window_size / 2
    }
}

/// One-sided complex spectrogram stored as separate real and imaginary
/// planes, each `bins x frames` row-major (one bin's frames are contiguous).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<S: Scalar> {
    pub re: Vec<S>,
    pub im: Vec<S>,
    pub bins: usize,
    pub frames: usize,
    pub sample_rate: u32,
    /// Bin spacing in Hz: `sample_rate / window_size`.
    pub bin_hz: f64,
}

impl<S: Scalar> ComplexSpectrogram<S> {
    #[inline]
    pub fn idx(&self, bin: usize, frame: usize) -> usize {
        bin * self.frames + frame
    }

    pub fn magnitude(&self, bin: usize, frame: usize) -> S {
        let i = self.idx(bin, frame);
        (self.re[i] * self.re[i] + self.im[i] * self.im[i]).sqrt()
    }
}

/// Periodic Hann window: `w[i] = 0.5 * (1 - cos(2*pi*i/n))`.
pub fn hann_window<S: Scalar>(n: usize) -> Vec<S> {
    assert!(n >= 1, "window length must be >= 1");
    let half = S::from_f64c(0.5);
    (0..n)
        .map(|i| {
            let phase = S::from_f64c(2.0 * std::f64::consts::PI * i as f64 / n as f64);
            half * (S::one() - phase.cos())
        })
        .collect()
}

/// Reflect an arbitrary (possibly out-of-range) index into `[0, len)`,
/// bouncing off both ends without repeating the edge sample.
#[inline]
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= len as isize {
        i = period - i;
    }
    i as usize
}

fn reflect_pad<S: Scalar>(x: &[S], pad: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len() + 2 * pad);
    for i in 0..x.len() + 2 * pad {
        out.push(x[reflect_index(i as isize - pad as isize, x.len())]);
    }
    out
}

pub fn stft<S: Scalar>(wave: &Waveform<S>, cfg: &StftConfig) -> Result<ComplexSpectrogram<S>> {
    if wave.is_empty() {
        return invalid_arg("cannot analyze an empty waveform");
    }
    if wave.samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
    }
    let (re, im, frames) = stft_raw(&wave.samples, cfg);
    Ok(ComplexSpectrogram {
        re,
        im,
        bins: cfg.bins(),
        frames,
        sample_rate: wave.sample_rate,
        bin_hz: wave.sample_rate as f64 / cfg.window_size as f64,
    })
}

pub fn istft<S: Scalar>(
    spec: &ComplexSpectrogram<S>,
    cfg: &StftConfig,
    out_len: usize,
) -> Result<Waveform<S>> {
    if spec.bins != cfg.bins() {
        return shape_err(format!(
            "spectrogram has {} bins but config expects {}",
            spec.bins,
            cfg.bins()
        ));
    }
    if spec.frames == 0 {
        return invalid_arg("cannot synthesize from zero frames");
    }
    if out_len == 0 || out_len > cfg.max_synthesis_len(spec.frames) {
        return invalid_arg(format!(
            "out_len {} outside synthesis range 1..={}",
            out_len,
            cfg.max_synthesis_len(spec.frames)
        ));
    }
    let samples = istft_raw(&spec.re, &spec.im, spec.frames, cfg, out_len);
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Analysis on raw samples; returns `(re, im, frames)` planes shaped
/// `bins x frames`.
pub(crate) fn stft_raw<S: Scalar>(x: &[S], cfg: &StftConfig) -> (Vec<S>, Vec<S>, usize) {
    let w = cfg.window_size;
    let bins = cfg.bins();
    let frames = cfg.frames_for_len(x.len());
    let window = hann_window::<S>(w);
    let padded = reflect_pad(x, w / 2);

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(w);
    let mut buf = vec![Complex::new(S::zero(), S::zero()); w];
    let mut scratch = vec![Complex::new(S::zero(), S::zero()); fft.get_inplace_scratch_len()];

    let mut re = vec![S::zero(); bins * frames];
    let mut im = vec![S::zero(); bins * frames];
    for t in 0..frames {
        let start = t * cfg.hop;
        for i in 0..w {
            buf[i] = Complex::new(padded[start + i] * window[i], S::zero());
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for f in 0..bins {
            re[f * frames + t] = buf[f].re;
            im[f * frames + t] = buf[f].im;
        }
    }
    (re, im, frames)
}

/// Synthesis from raw one-sided planes. The imaginary parts of the DC and
/// Nyquist bins are ignored (the full spectrum is rebuilt by conjugate
/// symmetry, which forces those bins real).
pub(crate) fn istft_raw<S: Scalar>(
    re: &[S],
    im: &[S],
    frames: usize,
    cfg: &StftConfig,
    out_len: usize,
) -> Vec<S> {
    let w = cfg.window_size;
    let bins = cfg.bins();
    let window = hann_window::<S>(w);
    let padded_len = cfg.hop * (frames - 1) + w;

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(w);
    let mut buf = vec![Complex::new(S::zero(), S::zero()); w];
    let mut scratch = vec![Complex::new(S::zero(), S::zero()); ifft.get_inplace_scratch_len()];

    let inv_w = S::from_f64c(1.0 / w as f64);
    let mut acc = vec![S::zero(); padded_len];
    for t in 0..frames {
        buf[0] = Complex::new(re[t], S::zero());
        buf[w / 2] = Complex::new(re[(bins - 1) * frames + t], S::zero());
        for f in 1..w / 2 {
            let v = Complex::new(re[f * frames + t], im[f * frames + t]);
            buf[f] = v;
            buf[w - f] = v.conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop;
        for i in 0..w {
            acc[start + i] += buf[i].re * inv_w * window[i];
        }
    }

    let norm = ola_norm::<S>(cfg, frames);
    let offset = w / 2;
    (0..out_len).map(|i| acc[offset + i] / norm[offset + i]).collect()
}

/// Sum of squared shifted windows at every padded sample, floored at 1e-12.
fn ola_norm<S: Scalar>(cfg: &StftConfig, frames: usize) -> Vec<S> {
    let w = cfg.window_size;
    let window = hann_window::<S>(w);
    let mut norm = vec![S::zero(); cfg.hop * (frames - 1) + w];
    for t in 0..frames {
        let start = t * cfg.hop;
        for i in 0..w {
            norm[start + i] += window[i] * window[i];
        }
    }
    let floor = S::from_f64c(OLA_NORM_FLOOR);
    for v in norm.iter_mut() {
        *v = v.max(floor);
    }
    norm
}

/// Adjoint of [`stft_raw`] as a real-linear map: takes cotangents of the
/// `(re, im)` planes and returns the cotangent of the input samples.
pub(crate) fn stft_adjoint_raw<S: Scalar>(
    g_re: &[S],
    g_im: &[S],
    frames: usize,
    cfg: &StftConfig,
    in_len: usize,
) -> Vec<S> {
    let w = cfg.window_size;
    let bins = cfg.bins();
    let window = hann_window::<S>(w);
    let pad = w / 2;

    let mut planner = FftPlanner::new();
    // Adjoint of the forward DFT restricted to one-sided bins is an
    // unnormalized inverse DFT of the zero-extended cotangent.
    let ifft = planner.plan_fft_inverse(w);
    let mut buf = vec![Complex::new(S::zero(), S::zero()); w];
    let mut scratch = vec![Complex::new(S::zero(), S::zero()); ifft.get_inplace_scratch_len()];

    let mut g_padded = vec![S::zero(); in_len + 2 * pad];
    for t in 0..frames {
        for f in 0..bins {
            buf[f] = Complex::new(g_re[f * frames + t], g_im[f * frames + t]);
        }
        for f in bins..w {
            buf[f] = Complex::new(S::zero(), S::zero());
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * cfg.hop;
        for i in 0..w {
            g_padded[start + i] += buf[i].re * window[i];
        }
    }

    // Fold the reflect-padding cotangent back onto the source samples.
    let mut g_x = vec![S::zero(); in_len];
    for (j, &g) in g_padded.iter().enumerate() {
        g_x[reflect_index(j as isize - pad as isize, in_len)] += g;
    }
    g_x
}

/// Adjoint of [`istft_raw`]: takes the cotangent of the output samples and
/// returns cotangents of the `(re, im)` planes. The imaginary cotangents of
/// DC and Nyquist are zero, mirroring the bins istft ignores.
pub(crate) fn istft_adjoint_raw<S: Scalar>(
    g_wave: &[S],
    cfg: &StftConfig,
    frames: usize,
) -> (Vec<S>, Vec<S>) {
    let w = cfg.window_size;
    let bins = cfg.bins();
    let window = hann_window::<S>(w);
    let padded_len = cfg.hop * (frames - 1) + w;
    let offset = w / 2;

    let norm = ola_norm::<S>(cfg, frames);
    let mut g_acc = vec![S::zero(); padded_len];
    for (i, &g) in g_wave.iter().enumerate() {
        g_acc[offset + i] = g / norm[offset + i];
    }

    let mut planner = FftPlanner::new();
    // Adjoint of (1/W) * Re(inverse DFT) is (1/W) * forward DFT.
    let fft = planner.plan_fft_forward(w);
    let mut buf = vec![Complex::new(S::zero(), S::zero()); w];
    let mut scratch = vec![Complex::new(S::zero(), S::zero()); fft.get_inplace_scratch_len()];

    let inv_w = S::from_f64c(1.0 / w as f64);
    let mut g_re = vec![S::zero(); bins * frames];
    let mut g_im = vec![S::zero(); bins * frames];
    for t in 0..frames {
        let start = t * cfg.hop;
        for i in 0..w {
            buf[i] = Complex::new(g_acc[start + i] * window[i] * inv_w, S::zero());
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        // Fold full-spectrum cotangents back through conjugate symmetry.
        g_re[t] = buf[0].re;
        g_re[(bins - 1) * frames + t] = buf[w / 2].re;
        for f in 1..w / 2 {
            g_re[f * frames + t] = buf[f].re + buf[w - f].re;
            g_im[f * frames + t] = buf[f].im - buf[w - f].im;
        }
    }
    (g_re, g_im)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(w: usize, h: usize) -> StftConfig {
        StftConfig::new(w, h).unwrap()
    }

    /// O(n^2) DFT used as an independent oracle for the FFT path.
    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n / 2 + 1)
            .map(|f| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (i, &v) in x.iter().enumerate() {
                    let phase = -2.0 * std::f64::consts::PI * f as f64 * i as f64 / n as f64;
                    re += v * phase.cos();
                    im += v * phase.sin();
                }
                (re, im)
            })
            .collect()
    }

    fn lcg(seed: &mut u64) -> f64 {
        // Park-Miller style generator; keeps the oracle tests dependency-free.
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random_wave(len: usize, seed: u64) -> Waveform<f64> {
        let mut s = seed;
        Waveform::new((0..len).map(|_| lcg(&mut s)).collect(), 16_000)
    }

    #[test]
    fn hann_small_values() {
        let w: Vec<f64> = hann_window(4);
        let expect = [0.0, 0.5, 1.0, 0.5];
        for (a, b) in w.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        let w1: Vec<f64> = hann_window(1);
        assert_eq!(w1, vec![0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::new(640, 160).is_ok());
        assert!(StftConfig::new(2048, 512).is_ok());
        assert!(StftConfig::new(641, 160).is_err());
        assert!(StftConfig::new(640, 0).is_err());
        // hop = window/2 breaks the squared-window overlap-add condition
        assert!(StftConfig::new(640, 320).is_err());
    }

    #[test]
    fn squared_window_overlap_is_constant() {
        // Periodic Hann at hop = window/4 sums to 1.5 at every interior sample.
        let c = cfg(640, 160);
        let frames = 20;
        let norm = ola_norm::<f64>(&c, frames);
        for i in 640..norm.len() - 640 {
            assert!((norm[i] - 1.5).abs() < 1e-12, "norm[{i}] = {}", norm[i]);
        }
    }

    #[test]
    fn reflect_pad_hand_case() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let padded = reflect_pad(&x, 2);
        assert_eq!(padded, vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
        let single = reflect_pad(&[7.0], 3);
        assert_eq!(single, vec![7.0; 7]);
    }

    #[test]
    fn stft_matches_naive_dft() {
        let c = cfg(16, 4);
        let wave = random_wave(32, 11);
        let spec = stft(&wave, &c).unwrap();
        assert_eq!(spec.frames, 9);
        assert_eq!(spec.bins, 9);

        let window: Vec<f64> = hann_window(16);
        let padded = reflect_pad(&wave.samples, 8);
        for t in 0..spec.frames {
            let frame: Vec<f64> =
                (0..16).map(|i| padded[t * 4 + i] * window[i]).collect();
            for (f, (re, im)) in naive_dft(&frame).into_iter().enumerate() {
                assert!((spec.re[spec.idx(f, t)] - re).abs() < 1e-10);
                assert!((spec.im[spec.idx(f, t)] - im).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pure_tone_lands_in_expected_bin() {
        // 400 Hz at 16 kHz with 640-sample windows: 25 Hz per bin -> bin 16.
        let sr = 16_000u32;
        let samples: Vec<f64> = (0..sr as usize)
            .map(|i| (2.0 * std::f64::consts::PI * 400.0 * i as f64 / sr as f64).sin())
            .collect();
        let spec = stft(&Waveform::new(samples, sr), &cfg(640, 160)).unwrap();
        assert!((spec.bin_hz - 25.0).abs() < 1e-12);
        // Edge frames see the reflected extension of the tone; check the
        // frames whose windows lie fully inside the signal.
        for t in 2..spec.frames - 2 {
            let best = (0..spec.bins)
                .max_by(|&a, &b| {
                    spec.magnitude(a, t).partial_cmp(&spec.magnitude(b, t)).unwrap()
                })
                .unwrap();
            assert_eq!(best, 16, "frame {t}");
        }
    }

    #[test]
    fn stft_is_linear() {
        let c = cfg(64, 16);
        let a = random_wave(200, 1);
        let b = random_wave(200, 2);
        let combo = Waveform::new(
            a.samples.iter().zip(&b.samples).map(|(x, y)| 2.5 * x - 0.75 * y).collect(),
            16_000,
        );
        let sa = stft(&a, &c).unwrap();
        let sb = stft(&b, &c).unwrap();
        let sc = stft(&combo, &c).unwrap();
        for i in 0..sc.re.len() {
            assert!((sc.re[i] - (2.5 * sa.re[i] - 0.75 * sb.re[i])).abs() < 1e-10);
            assert!((sc.im[i] - (2.5 * sa.im[i] - 0.75 * sb.im[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram_and_back() {
        let c = cfg(640, 160);
        let wave = Waveform::new(vec![0.0f64; 4800], 16_000);
        let spec = stft(&wave, &c).unwrap();
        assert!(spec.re.iter().chain(spec.im.iter()).all(|&v| v == 0.0));
        let back = istft(&spec, &c, 4800).unwrap();
        assert!(back.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn roundtrip_is_exact_to_machine_precision() {
        for (w, h, len, seed) in
            [(640, 160, 16_000, 3u64), (640, 160, 16_001, 4), (2048, 512, 44_100, 5), (32, 8, 90, 6)]
        {
            let c = cfg(w, h);
            let wave = random_wave(len, seed);
            let spec = stft(&wave, &c).unwrap();
            assert_eq!(spec.frames, len / h + 1);
            let back = istft(&spec, &c, len).unwrap();
            let num: f64 = wave
                .samples
                .iter()
                .zip(&back.samples)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let den: f64 = wave.energy();
            assert!(
                (num / den).sqrt() < 1e-12,
                "roundtrip rel err {} for ({w},{h},{len})",
                (num / den).sqrt()
            );
        }
    }

    #[test]
    fn istft_length_handling() {
        let c = cfg(640, 160);
        let wave = random_wave(16_000, 9);
        let spec = stft(&wave, &c).unwrap();
        assert_eq!(istft(&spec, &c, 16_000).unwrap().len(), 16_000);
        assert_eq!(istft(&spec, &c, 1000).unwrap().len(), 1000);
        // Just past the synthesis range must error.
        let max = c.max_synthesis_len(spec.frames);
        assert!(istft(&spec, &c, max + 1).is_err());
        assert!(istft(&spec, &c, 0).is_err());
    }

    #[test]
    fn non_finite_input_rejected() {
        let c = cfg(640, 160);
        let mut wave = random_wave(2000, 10);
        wave.samples[17] = f64::NAN;
        assert!(matches!(stft(&wave, &c), Err(Error::InvalidInput(_))));
    }

    /// <Ax, y> == <x, A*y> over random probes pins the adjoint used by
    /// backpropagation to the forward transform.
    #[test]
    fn stft_adjoint_inner_product_identity() {
        let c = cfg(32, 8);
        let len = 100;
        let x = random_wave(len, 21);
        let (re, im, frames) = stft_raw(&x.samples, &c);

        let mut seed = 22u64;
        let y_re: Vec<f64> = (0..re.len()).map(|_| lcg(&mut seed)).collect();
        let y_im: Vec<f64> = (0..im.len()).map(|_| lcg(&mut seed)).collect();

        let lhs: f64 = re.iter().zip(&y_re).map(|(a, b)| a * b).sum::<f64>()
            + im.iter().zip(&y_im).map(|(a, b)| a * b).sum::<f64>();
        let adj = stft_adjoint_raw(&y_re, &y_im, frames, &c, len);
        let rhs: f64 = x.samples.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn istft_adjoint_inner_product_identity() {
        let c = cfg(32, 8);
        let frames = 12;
        let bins = c.bins();
        let out_len = 80;

        let mut seed = 31u64;
        let re: Vec<f64> = (0..bins * frames).map(|_| lcg(&mut seed)).collect();
        let im: Vec<f64> = (0..bins * frames).map(|_| lcg(&mut seed)).collect();
        let y: Vec<f64> = (0..out_len).map(|_| lcg(&mut seed)).collect();

        let wave = istft_raw(&re, &im, frames, &c, out_len);
        let lhs: f64 = wave.iter().zip(&y).map(|(a, b)| a * b).sum();

        let (g_re, g_im) = istft_adjoint_raw(&y, &c, frames);
        // istft ignores the imaginary parts of DC and Nyquist, so the adjoint
        // must place zero cotangent there.
        for t in 0..frames {
            assert_eq!(g_im[t], 0.0);
            assert_eq!(g_im[(bins - 1) * frames + t], 0.0);
        }
        let mut rhs: f64 = re.iter().zip(&g_re).map(|(a, b)| a * b).sum();
        // Imaginary DC/Nyquist inputs do not affect the output, so restrict
        // the pairing to coordinates the forward map actually reads.
        for f in 1..bins - 1 {
            for t in 0..frames {
                rhs += im[f * frames + t] * g_im[f * frames + t];
            }
        }
        assert!((lhs - rhs).abs() / lhs.abs().max(1.0) < 1e-12, "{lhs} vs {rhs}");
    }
}
