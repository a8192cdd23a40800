//! End-to-end separation model: analysis transform, band projection, the
//! shared dual-path separator, mask synthesis, and overlap-add resynthesis,
//! plus named presets, checkpointing, and long-form windowed inference.

use std::path::Path;

use crate::bandsplit::{
    band_restore, band_split, make_scheme, register_restore_params, register_split_params,
    BandScheme,
};
use crate::config as cfgtext;
use crate::dsp::{ComplexSpectrogram, StftConfig, Waveform};
use crate::error::invalid_arg;
use crate::separator::{register_separator_params, separate, PathOrder, SeparatorConfig};
use crate::tensor::store::ParameterStore;
use crate::tensor::{checkpoint, Tape, TensorId};
use crate::{Result, Scalar};

/// Everything needed to rebuild a model skeleton: transform geometry, band
/// plan, separator widths, and the output head's source count.
#[derive(Debug, Clone, PartialEq)]
pub struct TigerConfig {
    pub sample_rate: u32,
    pub stft: StftConfig,
    /// Band plan name, resolved against `stft.bins()` and the bin spacing.
    pub scheme: String,
    pub separator: SeparatorConfig,
    pub speakers: usize,
}

impl TigerConfig {
    /// Named presets. `small` and `large` differ only in block count, so
    /// their parameter counts are identical; `tiny` narrows the widths;
    /// `dnr` is the 44.1 kHz three-stem variant.
    pub fn preset(name: &str) -> Result<TigerConfig> {
        let speech = |b: usize, n: usize, h: usize| -> Result<TigerConfig> {
            Ok(TigerConfig {
                sample_rate: 16000,
                stft: StftConfig::new(640, 160)?,
                scheme: "LowFreqNarrowSplit".to_string(),
                separator: SeparatorConfig {
                    n,
                    h,
                    d: 4,
                    b,
                    a: 4,
                    e: 4,
                    path_order: PathOrder::FreqTime,
                },
                speakers: 2,
            })
        };
        match name {
            "small" => speech(4, 128, 256),
            "large" => speech(8, 128, 256),
            "tiny" => speech(4, 24, 64),
            "dnr" => Ok(TigerConfig {
                sample_rate: 44100,
                stft: StftConfig::new(2048, 512)?,
                scheme: "DnR44k".to_string(),
                separator: SeparatorConfig {
                    n: 132,
                    h: 256,
                    d: 4,
                    b: 8,
                    a: 4,
                    e: 4,
                    path_order: PathOrder::FreqTime,
                },
                speakers: 3,
            }),
            other => invalid_arg(format!(
                "unknown preset {other:?} (expected small, large, tiny, or dnr)"
            )),
        }
    }

    /// Frequency spacing of one analysis bin.
    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.stft.window_size() as f64
    }

    pub fn band_scheme(&self) -> Result<BandScheme> {
        make_scheme(&self.scheme, self.stft.bins(), self.bin_hz())
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return invalid_arg("sample_rate must be positive");
        }
        if self.speakers == 0 || self.speakers > 8 {
            return invalid_arg(format!("speakers must be in 1..=8, got {}", self.speakers));
        }
        self.separator.validate()?;
        self.band_scheme()?;
        Ok(())
    }

    /// Sectioned-text form, the exact format embedded in checkpoints.
    pub fn to_text(&self) -> String {
        let model = vec![
            ("sample_rate".into(), self.sample_rate.to_string()),
            ("window_size".into(), self.stft.window_size().to_string()),
            ("hop".into(), self.stft.hop().to_string()),
            ("scheme".into(), self.scheme.clone()),
            ("speakers".into(), self.speakers.to_string()),
        ];
        let s = &self.separator;
        let sep = vec![
            ("n".into(), s.n.to_string()),
            ("h".into(), s.h.to_string()),
            ("d".into(), s.d.to_string()),
            ("b".into(), s.b.to_string()),
            ("a".into(), s.a.to_string()),
            ("e".into(), s.e.to_string()),
            ("path_order".into(), s.path_order.as_str().to_string()),
        ];
        cfgtext::render_sections(&[("model".into(), model), ("separator".into(), sep)])
    }

    /// Parse the `[model]` and `[separator]` sections; other sections are
    /// ignored so one file can also carry training settings.
    pub fn from_text(text: &str) -> Result<TigerConfig> {
        let s = cfgtext::parse_sections(text)?;
        let num = |sec: &str, key: &str| -> Result<usize> {
            cfgtext::parse_num(sec, key, cfgtext::require(&s, sec, key)?)
        };
        let cfg = TigerConfig {
            sample_rate: cfgtext::parse_num(
                "model",
                "sample_rate",
                cfgtext::require(&s, "model", "sample_rate")?,
            )?,
            stft: StftConfig::new(num("model", "window_size")?, num("model", "hop")?)?,
            scheme: cfgtext::require(&s, "model", "scheme")?.to_string(),
            separator: SeparatorConfig {
                n: num("separator", "n")?,
                h: num("separator", "h")?,
                d: num("separator", "d")?,
                b: num("separator", "b")?,
                a: num("separator", "a")?,
                e: num("separator", "e")?,
                path_order: PathOrder::parse(cfgtext::require(&s, "separator", "path_order")?)?,
            },
            speakers: num("model", "speakers")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one dotted `section.key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some((section, field)) = key.split_once('.') else {
            return invalid_arg(format!("override key {key:?} must look like section.key"));
        };
        let parse = |v: &str| -> Result<usize> { cfgtext::parse_num(section, field, v) };
        match (section, field) {
            ("model", "sample_rate") => self.sample_rate = cfgtext::parse_num(section, field, value)?,
            ("model", "window_size") => self.stft = StftConfig::new(parse(value)?, self.stft.hop())?,
            ("model", "hop") => self.stft = StftConfig::new(self.stft.window_size(), parse(value)?)?,
            ("model", "scheme") => self.scheme = value.to_string(),
            ("model", "speakers") => self.speakers = parse(value)?,
            ("separator", "n") => self.separator.n = parse(value)?,
            ("separator", "h") => self.separator.h = parse(value)?,
            ("separator", "d") => self.separator.d = parse(value)?,
            ("separator", "b") => self.separator.b = parse(value)?,
            ("separator", "a") => self.separator.a = parse(value)?,
            ("separator", "e") => self.separator.e = parse(value)?,
            ("separator", "path_order") => self.separator.path_order = PathOrder::parse(value)?,
            _ => return invalid_arg(format!("unknown config key {key:?}")),
        }
        Ok(())
    }
}

/// Register every learnable parameter the forward pass binds.
pub fn register_params<S: Scalar>(store: &mut ParameterStore<S>, cfg: &TigerConfig) -> Result<()> {
    cfg.validate()?;
    let scheme = cfg.band_scheme()?;
    register_split_params(store, &scheme, cfg.separator.n)?;
    register_separator_params(store, &cfg.separator)?;
    register_restore_params(store, &scheme, cfg.separator.n, cfg.speakers)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TigerModel<S: Scalar> {
    pub config: TigerConfig,
    pub store: ParameterStore<S>,
}

impl<S: Scalar> TigerModel<S> {
    /// Seeded build; the same seed and config yield bit-identical parameters.
    pub fn build(config: TigerConfig, seed: u64) -> Result<TigerModel<S>> {
        let mut store = ParameterStore::new(seed);
        register_params(&mut store, &config)?;
        Ok(TigerModel { config, store })
    }

    /// Separate one mixture into `speakers` estimates of the input length.
    /// Inputs shorter than one analysis window are zero-padded internally
    /// and trimmed back after resynthesis.
    pub fn forward(&self, mixture: &Waveform<S>) -> Result<Vec<Waveform<S>>> {
        if mixture.sample_rate != self.config.sample_rate {
            return invalid_arg(format!(
                "mixture is {} Hz but the model expects {} Hz",
                mixture.sample_rate, self.config.sample_rate
            ));
        }
        let len = mixture.len();
        let padded = len.max(self.config.stft.window_size());
        let mut samples = mixture.samples.clone();
        samples.resize(padded, S::zero());

        let mut tape = Tape::new(false);
        let x = tape.constant(samples, vec![padded])?;
        let out = forward_taped(&mut tape, &self.store, &self.config, x)?;
        let est = tape.value(out);
        Ok((0..self.config.speakers)
            .map(|c| Waveform::new(est[c * padded..c * padded + len].to_vec(), mixture.sample_rate))
            .collect())
    }

    /// Sliding-window separation for inputs too long for one pass: fixed
    /// segments, triangular crossfade over the overlaps, and per-segment
    /// source alignment against the stitched prefix.
    pub fn infer_long(
        &self,
        mixture: &Waveform<S>,
        segment_seconds: f64,
        overlap_fraction: f64,
    ) -> Result<Vec<Waveform<S>>> {
        if mixture.sample_rate != self.config.sample_rate {
            return invalid_arg(format!(
                "mixture is {} Hz but the model expects {} Hz",
                mixture.sample_rate, self.config.sample_rate
            ));
        }
        let seg_len = (segment_seconds * self.config.sample_rate as f64).round() as usize;
        if seg_len < self.config.stft.window_size() {
            return invalid_arg(format!(
                "segment of {seg_len} samples is shorter than one {}-sample window",
                self.config.stft.window_size()
            ));
        }
        let outs = infer_long_with(
            &mixture.samples,
            seg_len,
            overlap_fraction,
            self.config.speakers,
            |seg| {
                let w = Waveform::new(seg.to_vec(), self.config.sample_rate);
                Ok(self.forward(&w)?.into_iter().map(|o| o.samples).collect())
            },
        )?;
        Ok(outs
            .into_iter()
            .map(|o| Waveform::new(o, mixture.sample_rate))
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path.as_ref(), &self.config.to_text(), &self.store)
    }

    /// Load a checkpoint and verify it carries exactly the parameter set the
    /// embedded config implies (names and shapes).
    pub fn load(path: impl AsRef<Path>) -> Result<TigerModel<S>> {
        let (text, store) = checkpoint::load::<S>(path.as_ref())?;
        let config = TigerConfig::from_text(&text)?;
        let mut expected = ParameterStore::<S>::new(0);
        register_params(&mut expected, &config)?;
        if expected.len() != store.len() {
            return Err(crate::Error::Format(format!(
                "checkpoint has {} parameters, config implies {}",
                store.len(),
                expected.len()
            )));
        }
        for (name, param) in expected.iter() {
            match store.get(name) {
                Some(got) if got.shape == param.shape => {}
                Some(got) => {
                    return Err(crate::Error::Format(format!(
                        "checkpoint parameter {name} has shape {:?}, config implies {:?}",
                        got.shape, param.shape
                    )))
                }
                None => {
                    return Err(crate::Error::Format(format!(
                        "checkpoint is missing parameter {name}"
                    )))
                }
            }
        }
        Ok(TigerModel { config, store })
    }
}

/// The full differentiable pipeline on an open tape: `wave` is `[len]`,
/// the result is `[speakers, len]`. Gradients flow end to end, so this is
/// also the training forward.
pub fn forward_taped<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    cfg: &TigerConfig,
    wave: TensorId,
) -> Result<TensorId> {
    let shape = tape.shape(wave).to_vec();
    if shape.len() != 1 {
        return invalid_arg(format!("forward expects a [len] waveform, got {shape:?}"));
    }
    let len = shape[0];
    if len < cfg.stft.window_size() {
        return invalid_arg(format!(
            "waveform of {len} samples is shorter than one {}-sample window",
            cfg.stft.window_size()
        ));
    }
    let scheme = cfg.band_scheme()?;

    tape.push_scope("encoder");
    let spec = tape.stft(wave, &cfg.stft)?;
    tape.pop_scope();

    let feats = band_split(tape, store, spec, &scheme, cfg.separator.n)?;
    let feats = separate(tape, store, feats, &cfg.separator)?;
    let masks = band_restore(tape, store, feats, &scheme, cfg.speakers)?;

    tape.push_scope("mask");
    let bins = cfg.stft.bins();
    let frames = tape.shape(spec)[2];
    let x_re = tape.slice_axis(spec, 0, 0, 1)?;
    let x_im = tape.slice_axis(spec, 0, 1, 1)?;
    let mut ests = Vec::with_capacity(cfg.speakers);
    for c in 0..cfg.speakers {
        let mc = tape.slice_axis(masks, 0, c, 1)?;
        let mc = tape.reshape(mc, vec![2, bins, frames])?;
        let m_re = tape.slice_axis(mc, 0, 0, 1)?;
        let m_im = tape.slice_axis(mc, 0, 1, 1)?;
        let rr = tape.mul(m_re, x_re)?;
        let ii = tape.mul(m_im, x_im)?;
        let ri = tape.mul(m_re, x_im)?;
        let ir = tape.mul(m_im, x_re)?;
        let h_re = tape.sub(rr, ii)?;
        let h_im = tape.add(ri, ir)?;
        let h = tape.concat(&[h_re, h_im], 0)?;
        let y = tape.istft(h, &cfg.stft, len)?;
        ests.push(tape.reshape(y, vec![1, len])?);
    }
    let out = tape.concat(&ests, 0)?;
    tape.pop_scope();
    Ok(out)
}

pub type MaskSet<S> = Vec<ComplexSpectrogram<S>>;

/// Elementwise complex product of each mask with the spectrogram.
pub fn apply_masks<S: Scalar>(
    x: &ComplexSpectrogram<S>,
    masks: &[ComplexSpectrogram<S>],
) -> Result<MaskSet<S>> {
    let mut out = Vec::with_capacity(masks.len());
    for m in masks {
        if m.bins != x.bins || m.frames != x.frames {
            return invalid_arg(format!(
                "mask is {}x{} but the spectrogram is {}x{}",
                m.bins, m.frames, x.bins, x.frames
            ));
        }
        let mut h = x.clone();
        for i in 0..x.re.len() {
            h.re[i] = m.re[i] * x.re[i] - m.im[i] * x.im[i];
            h.im[i] = m.re[i] * x.im[i] + m.im[i] * x.re[i];
        }
        out.push(h);
    }
    Ok(out)
}

/// All orderings of `0..c` in lexicographic order.
pub fn permutations(c: usize) -> Vec<Vec<usize>> {
    assert!(c <= 8, "factorial blowup guard");
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(c);
    let mut used = vec![false; c];
    fn rec(c: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if current.len() == c {
            out.push(current.clone());
            return;
        }
        for i in 0..c {
            if !used[i] {
                used[i] = true;
                current.push(i);
                rec(c, current, used, out);
                current.pop();
                used[i] = false;
            }
        }
    }
    rec(c, &mut current, &mut used, &mut out);
    out
}

/// Segment-wise inference with triangular crossfade stitching.
///
/// `process` maps one segment of exactly `seg_len` samples to `speakers`
/// estimates of the same length. Segments start every
/// `seg_len * (1 - overlap_fraction)` samples, with a final segment pinned
/// to the signal end; each new segment's sources are permuted to best
/// correlate with the already-stitched prefix over the shared region.
/// Tent weights normalized by their accumulated sum make the stitched
/// output exactly the input length and an identity process a no-op.
pub fn infer_long_with<S: Scalar, F>(
    samples: &[S],
    seg_len: usize,
    overlap_fraction: f64,
    speakers: usize,
    mut process: F,
) -> Result<Vec<Vec<S>>>
where
    F: FnMut(&[S]) -> Result<Vec<Vec<S>>>,
{
    if !(0.0..1.0).contains(&overlap_fraction) {
        return invalid_arg(format!("overlap_fraction must be in [0, 1), got {overlap_fraction}"));
    }
    if seg_len == 0 {
        return invalid_arg("segments must be at least one sample");
    }
    let len = samples.len();
    let check = |ests: &Vec<Vec<S>>, want: usize| -> Result<()> {
        if ests.len() != speakers || ests.iter().any(|e| e.len() != want) {
            return invalid_arg(format!(
                "process returned {} outputs, expected {speakers} of {want} samples",
                ests.len()
            ));
        }
        Ok(())
    };
    // Inputs the window covers in one shot run through a single pass.
    if seg_len >= len {
        let ests = process(samples)?;
        check(&ests, len)?;
        return Ok(ests);
    }

    let hop = ((seg_len as f64 * (1.0 - overlap_fraction)).round() as usize).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + seg_len <= len {
        starts.push(s);
        s += hop;
    }
    if starts.last().map(|&s| s + seg_len < len).unwrap_or(true) {
        starts.push(len - seg_len);
    }

    let perms = permutations(speakers);
    let mut acc = vec![vec![S::zero(); len]; speakers];
    let mut wsum = vec![S::zero(); len];
    let mut covered = 0usize;
    for &start in &starts {
        let ests = process(&samples[start..start + seg_len])?;
        check(&ests, seg_len)?;

        // Score each source ordering by correlation with the stitched
        // prefix over the part of this segment already covered.
        let mut best = 0usize;
        if covered > start && speakers > 1 {
            let ov = covered.min(start + seg_len) - start;
            let mut best_score = f64::NEG_INFINITY;
            for (pi, perm) in perms.iter().enumerate() {
                let mut score = 0.0;
                for c in 0..speakers {
                    for i in 0..ov {
                        let committed = (acc[c][start + i] / wsum[start + i]).to_f64c();
                        score += committed * ests[perm[c]][i].to_f64c();
                    }
                }
                if score > best_score {
                    best_score = score;
                    best = pi;
                }
            }
        }
        let perm = &perms[best];

        for i in 0..seg_len {
            let w = S::from_usize_c((i + 1).min(seg_len - i));
            wsum[start + i] += w;
            for c in 0..speakers {
                acc[c][start + i] += w * ests[perm[c]][i];
            }
        }
        covered = covered.max(start + seg_len);
    }

    for c in 0..speakers {
        for i in 0..len {
            acc[c][i] /= wsum[i];
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config() -> TigerConfig {
        TigerConfig {
            sample_rate: 8000,
            stft: StftConfig::new(64, 16).unwrap(),
            scheme: "NonSplit".to_string(),
            separator: SeparatorConfig {
                n: 8,
                h: 16,
                d: 2,
                b: 2,
                a: 2,
                e: 2,
                path_order: PathOrder::FreqTime,
            },
            speakers: 2,
        }
    }

    #[test]
    fn presets_match_their_stated_shapes() {
        let small = TigerConfig::preset("small").unwrap();
        assert_eq!(small.stft.window_size(), 640);
        assert_eq!(small.stft.hop(), 160);
        assert_eq!(small.stft.bins(), 321);
        assert_eq!(small.separator.n, 128);
        assert_eq!(small.separator.h, 256);
        assert_eq!(small.separator.b, 4);
        assert_eq!(small.speakers, 2);
        let large = TigerConfig::preset("large").unwrap();
        assert_eq!(large.separator.b, 8);
        let tiny = TigerConfig::preset("tiny").unwrap();
        assert_eq!((tiny.separator.n, tiny.separator.h), (24, 64));
        let dnr = TigerConfig::preset("dnr").unwrap();
        assert_eq!(dnr.sample_rate, 44100);
        assert_eq!(dnr.stft.bins(), 1025);
        assert_eq!(dnr.separator.n, 132);
        assert_eq!(dnr.speakers, 3);
        assert!(TigerConfig::preset("huge").is_err());
        for name in ["small", "large", "tiny", "dnr"] {
            TigerConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn parameter_counts_small_large_tiny() {
        let small = TigerModel::<f64>::build(TigerConfig::preset("small").unwrap(), 1).unwrap();
        let large = TigerModel::<f64>::build(TigerConfig::preset("large").unwrap(), 1).unwrap();
        let tiny = TigerModel::<f64>::build(TigerConfig::preset("tiny").unwrap(), 1).unwrap();
        // Block repetitions share one parameter set, so small == large.
        assert_eq!(small.store.num_scalars(), large.store.num_scalars());
        assert_eq!(small.store.num_scalars(), 780_783);
        assert_eq!(tiny.store.num_scalars(), 90_807);
        assert!(tiny.store.num_scalars() < small.store.num_scalars());
    }

    #[test]
    fn same_seed_same_parameters_different_seed_not() {
        let cfg = micro_config;
        let a = TigerModel::<f32>::build(cfg(), 7).unwrap();
        let b = TigerModel::<f32>::build(cfg(), 7).unwrap();
        let c = TigerModel::<f32>::build(cfg(), 8).unwrap();
        for (name, p) in a.store.iter() {
            assert_eq!(p.data, b.store.get(name).unwrap().data, "{name}");
        }
        assert!(a.store.iter().any(|(n, p)| p.data != c.store.get(n).unwrap().data));
    }

    #[test]
    fn forward_preserves_length_and_outputs_finite() {
        let model = TigerModel::<f64>::build(micro_config(), 3).unwrap();
        let n = 500;
        let wave = Waveform::new(
            (0..n).map(|i| (i as f64 * 0.13).sin() * 0.5).collect::<Vec<f64>>(),
            8000,
        );
        let outs = model.forward(&wave).unwrap();
        assert_eq!(outs.len(), 2);
        for o in &outs {
            assert_eq!(o.len(), n);
            assert!(o.samples.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn short_input_is_padded_and_trimmed() {
        let model = TigerModel::<f64>::build(micro_config(), 3).unwrap();
        let wave = Waveform::new(vec![0.25; 20], 8000);
        let outs = model.forward(&wave).unwrap();
        assert_eq!(outs[0].len(), 20);
        assert_eq!(outs[1].len(), 20);
    }

    #[test]
    fn silent_input_gives_silent_estimates() {
        let model = TigerModel::<f64>::build(micro_config(), 5).unwrap();
        let wave = Waveform::new(vec![0.0; 300], 8000);
        let outs = model.forward(&wave).unwrap();
        for o in &outs {
            // Masks multiply a zero spectrogram, so the output is exactly 0.
            assert!(o.samples.iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn sample_rate_mismatch_is_rejected() {
        let model = TigerModel::<f64>::build(micro_config(), 3).unwrap();
        let wave = Waveform::new(vec![0.1; 300], 16000);
        assert!(model.forward(&wave).is_err());
    }

    #[test]
    fn apply_masks_identity_zero_and_complex_product() {
        let x = ComplexSpectrogram {
            re: vec![1.0; 6],
            im: vec![1.0; 6],
            bins: 2,
            frames: 3,
            sample_rate: 8000,
            bin_hz: 125.0,
        };
        let ones = ComplexSpectrogram { re: vec![1.0; 6], im: vec![0.0; 6], ..x.clone() };
        let zeros = ComplexSpectrogram { re: vec![0.0; 6], im: vec![0.0; 6], ..x.clone() };
        let twos = ComplexSpectrogram { re: vec![2.0; 6], im: vec![0.0; 6], ..x.clone() };
        let out = apply_masks(&x, &[ones, zeros, twos]).unwrap();
        assert_eq!(out[0].re, x.re);
        assert_eq!(out[0].im, x.im);
        assert!(out[1].re.iter().chain(&out[1].im).all(|&v| v == 0.0));
        // (1+1j)(2+0j) = 2+2j
        assert!(out[2].re.iter().all(|&v| v == 2.0));
        assert!(out[2].im.iter().all(|&v| v == 2.0));

        let bad = ComplexSpectrogram {
            re: vec![0.0; 4],
            im: vec![0.0; 4],
            bins: 2,
            frames: 2,
            sample_rate: 8000,
            bin_hz: 125.0,
        };
        assert!(apply_masks(&x, &[bad]).is_err());
    }

    #[test]
    fn config_text_round_trips() {
        for name in ["small", "large", "tiny", "dnr"] {
            let cfg = TigerConfig::preset(name).unwrap();
            let parsed = TigerConfig::from_text(&cfg.to_text()).unwrap();
            assert_eq!(parsed, cfg);
        }
    }

    #[test]
    fn config_overrides_apply_and_reject_unknown_keys() {
        let mut cfg = TigerConfig::preset("small").unwrap();
        cfg.set("separator.b", "8").unwrap();
        assert_eq!(cfg, TigerConfig::preset("large").unwrap());
        cfg.set("model.scheme", "EvenSplit").unwrap();
        assert_eq!(cfg.scheme, "EvenSplit");
        cfg.validate().unwrap();
        assert!(cfg.set("separator.q", "3").is_err());
        assert!(cfg.set("nodots", "3").is_err());
        assert!(cfg.set("separator.b", "eight").is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_forward_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = TigerModel::<f32>::build(micro_config(), 11).unwrap();
        model.save(&path).unwrap();
        let loaded = TigerModel::<f32>::load(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        let wave = Waveform::new(
            (0..400).map(|i| ((i as f32) * 0.21).sin() * 0.4).collect::<Vec<f32>>(),
            8000,
        );
        let a = model.forward(&wave).unwrap();
        let b = loaded.forward(&wave).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.samples, y.samples);
        }
    }

    #[test]
    fn load_rejects_checkpoints_that_disagree_with_their_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = TigerModel::<f32>::build(micro_config(), 11).unwrap();
        // A config claiming three speakers implies restore parameters the
        // two-speaker store does not have.
        let mut wrong = model.config.clone();
        wrong.speakers = 3;
        checkpoint::save(&path, &wrong.to_text(), &model.store).unwrap();
        assert!(TigerModel::<f32>::load(&path).is_err());
    }

    #[test]
    fn permutations_enumerate_all_orderings() {
        assert_eq!(permutations(1), vec![vec![0]]);
        assert_eq!(permutations(2), vec![vec![0, 1], vec![1, 0]]);
        let p3 = permutations(3);
        assert_eq!(p3.len(), 6);
        assert_eq!(p3[0], vec![0, 1, 2]);
        assert_eq!(p3[5], vec![2, 1, 0]);
    }

    #[test]
    fn stitching_an_identity_process_reconstructs_the_input() {
        let n = 2000;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.037).sin()).collect();
        let mut calls = 0;
        let out = infer_long_with(&x, 500, 0.5, 1, |seg| {
            calls += 1;
            Ok(vec![seg.to_vec()])
        })
        .unwrap();
        // (2000 - 500) / 250 + 1 segments at a 250-sample stride.
        assert_eq!(calls, 7);
        assert_eq!(out[0].len(), n);
        let err = out[0]
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err < 1e-12, "max abs err {err}");
    }

    #[test]
    fn stitching_pins_a_tail_segment_when_hops_do_not_divide() {
        let x: Vec<f64> = (0..1030).map(|i| i as f64).collect();
        let out = infer_long_with(&x, 400, 0.5, 1, |seg| Ok(vec![seg.to_vec()])).unwrap();
        assert_eq!(out[0].len(), 1030);
        let err = out[0].iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(err < 1e-9, "max abs err {err}");
    }

    #[test]
    fn short_inputs_fall_back_to_a_single_pass() {
        let x = vec![1.0f64; 100];
        let mut calls = 0;
        let out = infer_long_with(&x, 500, 0.5, 1, |seg| {
            calls += 1;
            assert_eq!(seg.len(), 100);
            Ok(vec![seg.to_vec()])
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(out[0], x);
    }

    #[test]
    fn stitching_realigns_sources_that_a_segment_swaps() {
        let n = 3000;
        let s1: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).sin()).collect();
        let s2: Vec<f64> = (0..n).map(|i| (i as f64 * 0.011).sin().signum() * 0.8).collect();
        let mut call = 0;
        let out = infer_long_with(&s1, 600, 0.5, 2, |seg_ignored| {
            let start = call * 300;
            call += 1;
            let a = s1[start..start + 600].to_vec();
            let b = s2[start..start + 600].to_vec();
            let _ = seg_ignored;
            // Odd segments arrive with the sources swapped.
            if (call - 1) % 2 == 1 {
                Ok(vec![b, a])
            } else {
                Ok(vec![a, b])
            }
        })
        .unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        // Alignment must undo every swap, so channel 0 is s1 throughout.
        assert!(dot(&out[0], &s1) > 10.0 * dot(&out[0], &s2).abs());
        assert!(dot(&out[1], &s2) > 10.0 * dot(&out[1], &s1).abs());
        let err0 = out[0].iter().zip(&s1).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        assert!(err0 < 1e-9, "channel 0 should be s1 exactly, err {err0}");
    }

    #[test]
    fn taped_forward_macs_are_positive_and_istft_lengths_hold() {
        let cfg = micro_config();
        let model = TigerModel::<f64>::build(cfg.clone(), 2).unwrap();
        let mut tape = Tape::<f64>::dry();
        let x = tape.constant(Vec::new(), vec![800]).unwrap();
        let out = forward_taped(&mut tape, &model.store, &cfg, x).unwrap();
        assert_eq!(tape.shape(out), &[2, 800]);
        assert!(tape.total_macs() > 0);
        let scopes = tape.macs_by_scope();
        assert!(scopes.iter().any(|(name, _)| name.contains("separator")));
    }
}
