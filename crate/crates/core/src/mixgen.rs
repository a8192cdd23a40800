//! Synthetic mixture construction: SDR-targeted source scaling, overlap
//! placement, full-length noise injection, and a deterministic tone-burst
//! source generator for small-scale experiments.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::wav::{write_wav, SampleFormat};
use crate::dsp::Waveform;
use crate::error::invalid_arg;
use crate::{Result, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    pub speaker_sdr_range: (f64, f64),
    pub noise_sdr_range: (f64, f64),
    /// Fraction of the shorter utterance that overlaps the first; drawn
    /// uniformly from [0,1] per mixture when unset.
    pub overlap_ratio: Option<f64>,
    pub duration_seconds: f64,
    pub seed: u64,
}

impl Default for MixSpec {
    fn default() -> Self {
        MixSpec {
            speaker_sdr_range: (-5.0, 5.0),
            noise_sdr_range: (-10.0, 10.0),
            overlap_ratio: None,
            duration_seconds: 4.0,
            seed: 0,
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speaker_sdr_range.0 > self.speaker_sdr_range.1
            || self.noise_sdr_range.0 > self.noise_sdr_range.1
        {
            return invalid_arg("SDR ranges must be ordered (low, high)");
        }
        if let Some(r) = self.overlap_ratio {
            if !(0.0..=1.0).contains(&r) {
                return invalid_arg(format!("overlap_ratio {r} outside [0, 1]"));
            }
        }
        if !(self.duration_seconds > 0.0) {
            return invalid_arg("duration must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixMetadata {
    /// Gain applied to each source before summation (source 0 is 1.0).
    pub gains: Vec<f64>,
    pub noise_gain: f64,
    /// Start sample of each source within the mixture.
    pub offsets: Vec<usize>,
    /// Drawn mixing targets, dB of source 0 against each later source.
    pub speaker_sdr: Vec<f64>,
    pub noise_sdr: f64,
    pub overlap_ratio: f64,
    /// Joint anti-clipping rescale; 1.0 when the sum stayed inside [-1, 1].
    pub rescale: f64,
}

#[derive(Debug, Clone)]
pub struct MixtureExample<S: Scalar> {
    pub mixture: Waveform<S>,
    /// Scaled, placed, zero-padded sources; summing these plus the noise
    /// track reproduces the mixture sample for sample.
    pub references: Vec<Waveform<S>>,
    pub noise: Waveform<S>,
    pub metadata: MixMetadata,
}

fn energy<S: Scalar>(samples: &[S]) -> f64 {
    samples.iter().map(|v| v.to_f64c() * v.to_f64c()).sum()
}

/// Gain for the interferer so the scaled energy ratio hits `target_db`:
/// `10 log10(E_signal / (g^2 E_interferer)) = target_db`.
pub fn gain_for_sdr<S: Scalar>(
    signal: &Waveform<S>,
    interferer: &Waveform<S>,
    target_db: f64,
) -> Result<f64> {
    let es = energy(&signal.samples);
    let ei = energy(&interferer.samples);
    if es == 0.0 || ei == 0.0 {
        return invalid_arg("cannot set a level against a silent signal");
    }
    Ok((es / (ei * 10f64.powf(target_db / 10.0))).sqrt())
}

/// Place, scale, and sum sources plus noise into one example. Source 0
/// starts at sample 0; each later source is offset so its overlap with
/// source 0 covers the requested fraction of the shorter of the two.
/// Noise covers the whole clip and is leveled against the summed scaled
/// speech. If the sum leaves [-1, 1], everything is rescaled jointly to
/// peak 0.9 so the additive decomposition survives.
pub fn make_mixture<S: Scalar>(
    sources: &[Waveform<S>],
    noise: &Waveform<S>,
    spec: &MixSpec,
    rng: &mut ChaCha8Rng,
) -> Result<MixtureExample<S>> {
    spec.validate()?;
    if sources.len() < 2 {
        return invalid_arg("a mixture needs at least two sources");
    }
    let sr = sources[0].sample_rate;
    if sources.iter().any(|s| s.sample_rate != sr) || noise.sample_rate != sr {
        return invalid_arg("sources and noise must share one sample rate");
    }
    let total = (spec.duration_seconds * sr as f64).round() as usize;
    if sources.iter().any(|s| s.is_empty()) {
        return invalid_arg("sources must be non-empty");
    }
    if noise.len() < total {
        return invalid_arg(format!(
            "noise is {} samples but the mixture needs {total}",
            noise.len()
        ));
    }

    let ratio = match spec.overlap_ratio {
        Some(r) => r,
        None => rng.gen_range(0.0..=1.0),
    };
    let l0 = sources[0].len();
    if l0 > total {
        return invalid_arg("source 0 is longer than the mixture duration");
    }

    let mut offsets = vec![0usize];
    let mut gains = vec![1.0f64];
    let mut speaker_sdr = Vec::new();
    let mut refs: Vec<Vec<S>> = vec![Vec::new(); sources.len()];
    refs[0] = padded(&sources[0].samples, 0, total);

    for (k, src) in sources.iter().enumerate().skip(1) {
        let overlap = (ratio * l0.min(src.len()) as f64).round() as usize;
        let start = l0 - overlap;
        if start + src.len() > total {
            return invalid_arg(format!(
                "source {k} at offset {start} runs past the {total}-sample clip; \
                 increase the duration or the overlap"
            ));
        }
        let target = rng.gen_range(spec.speaker_sdr_range.0..=spec.speaker_sdr_range.1);
        let g = gain_for_sdr(&sources[0], src, target)?;
        let mut placed = vec![S::zero(); total];
        let gs = S::from_f64c(g);
        for (i, v) in src.samples.iter().enumerate() {
            placed[start + i] = gs * *v;
        }
        refs[k] = placed;
        offsets.push(start);
        gains.push(g);
        speaker_sdr.push(target);
    }

    let speech_sum: Vec<S> = (0..total)
        .map(|i| refs.iter().fold(S::zero(), |acc, r| acc + r[i]))
        .collect();
    let noise_target = rng.gen_range(spec.noise_sdr_range.0..=spec.noise_sdr_range.1);
    let speech_wave = Waveform::new(speech_sum, sr);
    let noise_cropped = Waveform::new(noise.samples[..total].to_vec(), sr);
    let noise_gain = gain_for_sdr(&speech_wave, &noise_cropped, noise_target)?;
    let ng = S::from_f64c(noise_gain);
    let mut noise_scaled: Vec<S> = noise_cropped.samples.iter().map(|v| ng * *v).collect();

    let sum_at = |refs: &[Vec<S>], noise: &[S], i: usize| {
        refs.iter().fold(S::zero(), |acc, r| acc + r[i]) + noise[i]
    };
    let mut peak = 0.0f64;
    for i in 0..total {
        peak = peak.max(sum_at(&refs, &noise_scaled, i).to_f64c().abs());
    }
    let rescale = if peak > 1.0 { 0.9 / peak } else { 1.0 };
    if rescale != 1.0 {
        let r = S::from_f64c(rescale);
        for track in refs.iter_mut() {
            for v in track.iter_mut() {
                *v = r * *v;
            }
        }
        for v in noise_scaled.iter_mut() {
            *v = r * *v;
        }
    }
    let mixture: Vec<S> = (0..total).map(|i| sum_at(&refs, &noise_scaled, i)).collect();

    Ok(MixtureExample {
        mixture: Waveform::new(mixture, sr),
        references: refs.into_iter().map(|r| Waveform::new(r, sr)).collect(),
        noise: Waveform::new(noise_scaled, sr),
        metadata: MixMetadata {
            gains,
            noise_gain,
            offsets,
            speaker_sdr,
            noise_sdr: noise_target,
            overlap_ratio: ratio,
            rescale,
        },
    })
}

fn padded<S: Scalar>(samples: &[S], start: usize, total: usize) -> Vec<S> {
    let mut out = vec![S::zero(); total];
    out[start..start + samples.len()].copy_from_slice(samples);
    out
}

/// Deterministic stand-in utterances: sums of amplitude-modulated tone
/// bursts, each source confined to its own slice of [0.1, 0.9] Nyquist so
/// any two sources stay spectrally separable.
pub fn synth_sources<S: Scalar>(
    rng: &mut ChaCha8Rng,
    count: usize,
    duration_seconds: f64,
    sample_rate: u32,
) -> Result<Vec<Waveform<S>>> {
    if duration_seconds < 0.5 {
        return invalid_arg("source duration must be at least half a second");
    }
    if count == 0 {
        return invalid_arg("need at least one source");
    }
    let n = (duration_seconds * sample_rate as f64).round() as usize;
    let nyquist = sample_rate as f64 / 2.0;
    let band_lo = 0.1 * nyquist;
    let band_hi = 0.9 * nyquist;
    let band_w = (band_hi - band_lo) / count as f64;
    // Interior margin keeps the tones and their AM sidebands off the
    // shared band edges.
    let margin = 0.1 * band_w;
    let am_max = (margin / 2.0).min(8.0);

    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let lo = band_lo + k as f64 * band_w + margin;
        let hi = band_lo + (k + 1) as f64 * band_w - margin;
        let bursts = rng.gen_range(3..=8);
        let mut samples = vec![0.0f64; n];
        for _ in 0..bursts {
            let freq = rng.gen_range(lo..hi);
            let len = rng.gen_range((sample_rate as usize / 10).max(8)..=(n * 2 / 5).max(9));
            let start = rng.gen_range(0..=n - len.min(n));
            let len = len.min(n - start);
            let amp = rng.gen_range(0.5..1.0);
            let am_rate = rng.gen_range(1.0..am_max.max(1.5));
            let am_phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let ramp = (len / 10).max(1);
            for i in 0..len {
                let t = (start + i) as f64 / sample_rate as f64;
                // sin^2 ramps at both burst edges.
                let edge = if i < ramp {
                    let x = i as f64 / ramp as f64 * std::f64::consts::FRAC_PI_2;
                    x.sin() * x.sin()
                } else if i >= len - ramp {
                    let x = (len - 1 - i) as f64 / ramp as f64 * std::f64::consts::FRAC_PI_2;
                    x.sin() * x.sin()
                } else {
                    1.0
                };
                let am = 0.5 + 0.5 * (std::f64::consts::TAU * am_rate * t + am_phase).sin();
                samples[start + i] +=
                    amp * edge * am * (std::f64::consts::TAU * freq * t + phase).sin();
            }
        }
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let norm = if peak > 0.0 { 0.75 / peak } else { 1.0 };
        let wave: Vec<S> = samples.iter().map(|v| S::from_f64c(v * norm)).collect();
        out.push(Waveform::new(wave, sample_rate));
    }
    Ok(out)
}

/// Full-length noise bed: band-passed uniform noise, peak 0.75.
pub fn synth_noise<S: Scalar>(
    rng: &mut ChaCha8Rng,
    duration_seconds: f64,
    sample_rate: u32,
) -> Result<Waveform<S>> {
    if !(duration_seconds > 0.0) {
        return invalid_arg("noise duration must be positive");
    }
    let n = (duration_seconds * sample_rate as f64).round() as usize;
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // One-pole smoothing tilts the spectrum away from white so the noise
    // is not trivially separable, while keeping generation cheap.
    let mut smoothed = vec![0.0f64; n];
    let mut acc = 0.0;
    for i in 0..n {
        acc = 0.7 * acc + 0.3 * raw[i];
        smoothed[i] = acc;
    }
    let peak = smoothed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = if peak > 0.0 { 0.75 / peak } else { 1.0 };
    Ok(Waveform::new(
        smoothed.iter().map(|v| S::from_f64c(v * norm)).collect(),
        sample_rate,
    ))
}

/// Per-example seed so batch generation can run in any order or in
/// parallel and still produce identical files.
pub fn example_seed(base: u64, index: usize) -> u64 {
    // SplitMix64 step over base + index.
    let mut z = base.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Generate one example from a derived seed: synthesized sources and
/// noise fed through `make_mixture`.
pub fn generate_example<S: Scalar>(
    spec: &MixSpec,
    speakers: usize,
    sample_rate: u32,
    index: usize,
) -> Result<MixtureExample<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(example_seed(spec.seed, index));
    // Half-clip sources keep placement feasible at any overlap ratio:
    // worst case (ratio 0) puts source k right at source 0's end.
    if spec.duration_seconds < 1.0 {
        return invalid_arg("generated examples need a duration of at least 1 second");
    }
    let dur0 = spec.duration_seconds / 2.0;
    let sources = synth_sources::<S>(&mut rng, speakers, dur0, sample_rate)?;
    let noise = synth_noise::<S>(&mut rng, spec.duration_seconds, sample_rate)?;
    make_mixture(&sources, &noise, spec, &mut rng)
}

/// Write `count` examples under `dir` (one subdirectory each) plus a
/// tab-separated manifest of mixture and reference paths. `threads` > 1
/// splits the examples across worker threads; derived per-example seeds
/// keep the output bytes identical regardless of the split.
pub fn write_dataset<S: Scalar>(
    dir: impl AsRef<Path>,
    count: usize,
    speakers: usize,
    sample_rate: u32,
    spec: &MixSpec,
    threads: usize,
) -> Result<PathBuf> {
    spec.validate()?;
    if count == 0 {
        return invalid_arg("dataset needs at least one example");
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let threads = threads.max(1).min(count);

    let write_one = |i: usize| -> Result<()> {
        let ex = generate_example::<S>(spec, speakers, sample_rate, i)?;
        let sub = dir.join(format!("ex{i:04}"));
        std::fs::create_dir_all(&sub)?;
        write_wav(sub.join("mix.wav"), &ex.mixture, SampleFormat::Float32)?;
        for (c, r) in ex.references.iter().enumerate() {
            write_wav(sub.join(format!("s{}.wav", c + 1)), r, SampleFormat::Float32)?;
        }
        write_wav(sub.join("noise.wav"), &ex.noise, SampleFormat::Float32)?;
        Ok(())
    };

    if threads == 1 {
        for i in 0..count {
            write_one(i)?;
        }
    } else {
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for t in 0..threads {
                let write_one = &write_one;
                handles.push(scope.spawn(move || -> Result<()> {
                    let mut i = t;
                    while i < count {
                        write_one(i)?;
                        i += threads;
                    }
                    Ok(())
                }));
            }
            for h in handles {
                h.join().expect("worker panicked")?;
            }
            Ok::<(), crate::Error>(())
        })?;
    }

    let mut manifest = String::new();
    for i in 0..count {
        let mut line = format!("ex{i:04}/mix.wav");
        for c in 0..speakers {
            line.push('\t');
            line.push_str(&format!("ex{i:04}/s{}.wav", c + 1));
        }
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest)?;
    Ok(path)
}
