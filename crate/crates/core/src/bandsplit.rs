//! Frequency-band partitioning and the learned split / restore layers.
//!
//! A [`BandScheme`] partitions the F spectrogram bins into K contiguous
//! sub-bands. [`band_split`] turns a complex spectrogram into the N x K x T
//! feature tensor the separator consumes; [`band_restore`] turns separator
//! output back into per-speaker complex masks. Both use per-band parameters
//! with no sharing across bands, so parameter count scales with K.

use crate::error::{invalid_arg, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParameterStore, Tape, TensorId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandScheme {
    pub name: String,
    /// Bin width of each sub-band, in order from DC upward.
    pub widths: Vec<usize>,
}

impl BandScheme {
    pub fn num_bands(&self) -> usize {
        self.widths.len()
    }

    pub fn total_bins(&self) -> usize {
        self.widths.iter().sum()
    }

    /// A scheme with explicitly listed widths, as read from a config file.
    pub fn custom(widths: Vec<usize>) -> Result<BandScheme> {
        if widths.is_empty() || widths.contains(&0) {
            return invalid_arg("custom scheme needs at least one band, all widths >= 1");
        }
        Ok(BandScheme { name: "Custom".to_string(), widths })
    }
}

fn repeat_widths(blocks: &[(usize, usize)]) -> Vec<usize> {
    let mut w = Vec::new();
    for &(width, count) in blocks {
        w.extend(std::iter::repeat(width).take(count));
    }
    w
}

/// Hz breakpoints for the 44.1 kHz scheme: (range end, sub-band width).
/// Everything above the last breakpoint is one residual band.
const DNR_BANDS_HZ: [(f64, f64); 6] = [
    (1000.0, 50.0),
    (2000.0, 100.0),
    (4000.0, 250.0),
    (8000.0, 500.0),
    (16000.0, 1000.0),
    (20000.0, 2000.0),
];

/// Construct one of the tabulated schemes, or an explicit width list
/// written as `custom:w1,w2,...` (widths must sum to `bins`).
///
/// `bins` must match the scheme's design: 321 (window 640 at 16 kHz) for
/// the named 16 kHz schemes, 1025 (window 2048) for `DnR44k`. `bin_hz` is
/// only consulted by `DnR44k`, whose table is specified in Hz.
pub fn make_scheme(name: &str, bins: usize, bin_hz: f64) -> Result<BandScheme> {
    if let Some(list) = name.strip_prefix("custom:") {
        let mut widths = Vec::new();
        for part in list.split(',') {
            let w: usize = part.trim().parse().map_err(|_| {
                crate::Error::InvalidArgument(format!(
                    "custom scheme width {part:?} is not a positive integer"
                ))
            })?;
            widths.push(w);
        }
        let sum: usize = widths.iter().sum();
        if sum != bins {
            return invalid_arg(format!("custom scheme covers {sum} bins, expected {bins}"));
        }
        let mut scheme = BandScheme::custom(widths)?;
        scheme.name = name.to_string();
        return Ok(scheme);
    }
    let widths = match name {
        "NonSplit" => {
            if bins < 1 {
                return invalid_arg("NonSplit needs at least one bin");
            }
            vec![1; bins]
        }
        "NormalSplit" => {
            require_bins(name, bins, 321)?;
            repeat_widths(&[(2, 20), (4, 10), (10, 8), (20, 8), (1, 1)])
        }
        "LowFreqNarrowSplit" => {
            require_bins(name, bins, 321)?;
            repeat_widths(&[(1, 40), (4, 10), (10, 8), (20, 8), (1, 1)])
        }
        "EvenSplit" => {
            require_bins(name, bins, 321)?;
            repeat_widths(&[(4, 66), (57, 1)])
        }
        "DnR44k" => {
            require_bins(name, bins, 1025)?;
            if bin_hz <= 0.0 {
                return invalid_arg("DnR44k needs the bin spacing in Hz");
            }
            let mut widths = Vec::new();
            let mut prev_bin = 0usize;
            let mut range_start = 0.0f64;
            for &(range_end, step) in &DNR_BANDS_HZ {
                let mut hz = range_start + step;
                while hz <= range_end + 1e-9 {
                    let b = (hz / bin_hz).round() as usize;
                    if b <= prev_bin || b >= bins {
                        return invalid_arg(format!(
                            "DnR44k boundary {hz} Hz maps to bin {b}, not strictly inside (0, {bins})"
                        ));
                    }
                    widths.push(b - prev_bin);
                    prev_bin = b;
                    hz += step;
                }
                range_start = range_end;
            }
            // Residual band above the last tabulated boundary.
            widths.push(bins - prev_bin);
            widths
        }
        other => return invalid_arg(format!("unknown band scheme '{other}'")),
    };
    debug_assert_eq!(widths.iter().sum::<usize>(), bins);
    Ok(BandScheme { name: name.to_string(), widths })
}

fn require_bins(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return invalid_arg(format!("{name} is defined for {want} bins, got {got}"));
    }
    Ok(())
}

/// Register the per-band split parameters: whole-band norm over the 2G_k
/// stacked Re/Im channels, then a kernel-1 projection to `n` channels.
pub fn register_split_params<S: Scalar>(
    store: &mut ParameterStore<S>,
    scheme: &BandScheme,
    n: usize,
) -> Result<()> {
    for (k, &g) in scheme.widths.iter().enumerate() {
        store.init_norm(&format!("bandsplit.band{k}.norm"), 2 * g)?;
        store.init_conv(&format!("bandsplit.band{k}.conv"), n, 2 * g, 1, true)?;
    }
    Ok(())
}

/// Register the per-band restore parameters: PReLU, then a kernel-1
/// expansion to 2 * G_k * speakers channels.
pub fn register_restore_params<S: Scalar>(
    store: &mut ParameterStore<S>,
    scheme: &BandScheme,
    n: usize,
    speakers: usize,
) -> Result<()> {
    for (k, &g) in scheme.widths.iter().enumerate() {
        store.init_prelu(&format!("restore.band{k}.prelu"))?;
        store.init_conv(&format!("restore.band{k}.conv"), 2 * g * speakers, n, 1, true)?;
    }
    Ok(())
}

/// Project a `[2, F, T]` complex spectrogram onto the `[n, K, T]` feature
/// tensor: per band, the G_k real rows and G_k imaginary rows stack into
/// 2G_k channels, get normalized as one group, and mix down to `n` channels.
pub fn band_split<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    spec: TensorId,
    scheme: &BandScheme,
    n: usize,
) -> Result<TensorId> {
    let shape = tape.shape(spec).to_vec();
    if shape.len() != 3 || shape[0] != 2 {
        return invalid_arg(format!("band_split expects [2, F, T], got {shape:?}"));
    }
    if shape[1] != scheme.total_bins() {
        return invalid_arg(format!(
            "spectrogram has {} bins but scheme '{}' covers {}",
            shape[1],
            scheme.name,
            scheme.total_bins()
        ));
    }
    let t = shape[2];
    tape.push_scope("bandsplit");
    let mut bands = Vec::with_capacity(scheme.num_bands());
    let mut start = 0;
    for (k, &g) in scheme.widths.iter().enumerate() {
        let gamma = tape.param(store, &format!("bandsplit.band{k}.norm.gamma"))?;
        let beta = tape.param(store, &format!("bandsplit.band{k}.norm.beta"))?;
        let w = tape.param(store, &format!("bandsplit.band{k}.conv.weight"))?;
        let b = tape.param(store, &format!("bandsplit.band{k}.conv.bias"))?;

        // [2, g, T] laid out as re rows then im rows is already the
        // 2g-channel stack.
        let band = tape.slice_axis(spec, 1, start, g)?;
        let ch = tape.reshape(band, vec![2 * g, t, 1])?;
        let normed = tape.group_norm(ch, gamma, beta, 1)?;
        let mixed = tape.conv1d(normed, w, Some(b), 1, 0, 1)?;
        bands.push(tape.reshape(mixed, vec![n, 1, t])?);
        start += g;
    }
    let out = tape.concat(&bands, 1)?;
    tape.pop_scope();
    Ok(out)
}

/// Expand separator output `[n, K, T]` into per-speaker complex masks
/// `[speakers, 2, F, T]` with non-negative real and imaginary parts.
///
/// Channel layout out of each band's convolution is speaker-major:
/// channel = speaker * 2G_k + plane * G_k + bin, so one reshape yields
/// `[speakers, 2, G_k, T]` per band and bands concatenate on the bin axis.
pub fn band_restore<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    features: TensorId,
    scheme: &BandScheme,
    speakers: usize,
) -> Result<TensorId> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 3 {
        return invalid_arg(format!("band_restore expects [n, K, T], got {shape:?}"));
    }
    if shape[1] != scheme.num_bands() {
        return invalid_arg(format!(
            "features have {} bands but scheme '{}' has {}",
            shape[1],
            scheme.name,
            scheme.num_bands()
        ));
    }
    if speakers == 0 {
        return invalid_arg("at least one speaker");
    }
    let (n, t) = (shape[0], shape[2]);
    tape.push_scope("restore");
    let mut bands = Vec::with_capacity(scheme.num_bands());
    for (k, &g) in scheme.widths.iter().enumerate() {
        let alpha = tape.param(store, &format!("restore.band{k}.prelu.alpha"))?;
        let w = tape.param(store, &format!("restore.band{k}.conv.weight"))?;
        let b = tape.param(store, &format!("restore.band{k}.conv.bias"))?;

        let band = tape.slice_axis(features, 1, k, 1)?;
        let ch = tape.reshape(band, vec![n, t, 1])?;
        let activated = tape.prelu(ch, alpha)?;
        let expanded = tape.conv1d(activated, w, Some(b), 1, 0, 1)?;
        let gated = tape.relu(expanded);
        bands.push(tape.reshape(gated, vec![speakers, 2, g, t])?);
    }
    let out = tape.concat(&bands, 2)?;
    tape.pop_scope();
    Ok(out)
}
