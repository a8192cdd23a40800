//! Spectrogram debug dumps: magnitude CSV and log-magnitude PGM.

use std::io::Write;

use crate::dsp::ComplexSpectrogram;
use crate::error::Result;
use crate::scalar::Scalar;

/// One row per frame, one column per bin, linear magnitudes in scientific
/// notation. Always uses `.` as the decimal separator.
pub fn spectrogram_csv<S: Scalar>(
    spec: &ComplexSpectrogram<S>,
    out: &mut impl Write,
) -> Result<()> {
    for t in 0..spec.frames {
        let mut line = String::with_capacity(spec.bins * 14);
        for f in 0..spec.bins {
            if f > 0 {
                line.push(',');
            }
            line.push_str(&format!("{:.6e}", spec.magnitude(f, t).to_f64c()));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Binary 8-bit PGM, one row per bin with the highest frequency on top,
/// one column per frame. Pixel values map an 80 dB window below the peak
/// log magnitude onto 0..255.
pub fn spectrogram_pgm<S: Scalar>(
    spec: &ComplexSpectrogram<S>,
    out: &mut impl Write,
) -> Result<()> {
    let mut db = vec![0.0f64; spec.bins * spec.frames];
    let mut max_db = f64::NEG_INFINITY;
    for f in 0..spec.bins {
        for t in 0..spec.frames {
            let v = 20.0 * (spec.magnitude(f, t).to_f64c() + 1e-10).log10();
            db[f * spec.frames + t] = v;
            max_db = max_db.max(v);
        }
    }
    let range = 80.0;
    let floor = max_db - range;

    out.write_all(format!("P5\n{} {}\n255\n", spec.frames, spec.bins).as_bytes())?;
    let mut row = vec![0u8; spec.frames];
    for f in (0..spec.bins).rev() {
        for t in 0..spec.frames {
            let v = ((db[f * spec.frames + t] - floor) / range).clamp(0.0, 1.0);
            row[t] = (v * 255.0).round() as u8;
        }
        out.write_all(&row)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, StftConfig, Waveform};

    fn tone_spec() -> ComplexSpectrogram<f64> {
        let sr = 16_000u32;
        let samples: Vec<f64> = (0..3200)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr as f64).sin())
            .collect();
        stft(&Waveform::new(samples, sr), &StftConfig::new(640, 160).unwrap()).unwrap()
    }

    #[test]
    fn csv_dimensions_and_radix() {
        let spec = tone_spec();
        let mut buf = Vec::new();
        spectrogram_csv(&spec, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), spec.frames);
        for line in &lines {
            assert_eq!(line.split(',').count(), spec.bins);
        }
        assert!(!text.contains(';'));
        assert!(text.contains('.'));
    }

    #[test]
    fn pgm_header_and_size() {
        let spec = tone_spec();
        let mut buf = Vec::new();
        spectrogram_pgm(&spec, &mut buf).unwrap();
        let header = format!("P5\n{} {}\n255\n", spec.frames, spec.bins);
        assert!(buf.starts_with(header.as_bytes()));
        assert_eq!(buf.len(), header.len() + spec.bins * spec.frames);

        // Deterministic output byte for byte.
        let mut again = Vec::new();
        spectrogram_pgm(&spec, &mut again).unwrap();
        assert_eq!(buf, again);
    }
}
