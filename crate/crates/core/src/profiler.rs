//! Cost accounting: exact parameter counts, analytic multiply-accumulate
//! counts for a clip of audio, and a repeated wall-clock benchmark.
//!
//! MACs follow the dominant-cost convention: only convolutions and matrix
//! products count (kernel * C_in/groups * C_out * positions, and the
//! QK/attention-V products); norms, activations, softmax, and the complex
//! mask multiply are free. STFT/iSTFT work is reported separately and
//! never included in the model total.

use std::time::Instant;

use crate::error::invalid_arg;
use crate::model::{forward_taped, TigerConfig, TigerModel};
use crate::tensor::Tape;
use crate::{Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Timed runs, after the warmup runs were discarded.
    pub runs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Forward,
    ForwardBackward,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub params_total: u64,
    pub params_by_module: Vec<(String, u64)>,
    /// Model MACs for the whole clip (convs and matmuls only).
    pub macs_total: u64,
    pub macs_by_module: Vec<(String, u64)>,
    /// Leaf-scope rows, e.g. `separator.path1.msa`.
    pub macs_by_layer: Vec<(String, u64)>,
    /// Transform cost (analysis plus per-speaker synthesis), kept out of
    /// `macs_total`.
    pub stft_macs: u64,
    pub seconds: f64,
    pub sample_rate: u32,
    pub forward: Option<BenchStats>,
    pub forward_backward: Option<BenchStats>,
    pub peak_bytes: Option<usize>,
}

/// Exact number of stored scalars; shared blocks exist once in the store
/// so they are counted once.
pub fn count_params<S: Scalar>(model: &TigerModel<S>) -> u64 {
    model.store.num_scalars() as u64
}

/// Scalar counts grouped by the first dotted component of each parameter
/// name. The groups partition the store, so they sum to the total.
pub fn params_by_module<S: Scalar>(model: &TigerModel<S>) -> Vec<(String, u64)> {
    let mut acc: std::collections::BTreeMap<String, u64> = std::collections::BTreeMap::new();
    for (name, p) in model.store.iter() {
        let module = name.split('.').next().unwrap_or(name).to_string();
        *acc.entry(module).or_insert(0) += p.data.len() as u64;
    }
    acc.into_iter().collect()
}

fn clip_len(cfg: &TigerConfig, seconds: f64) -> Result<usize> {
    if !(seconds > 0.0) {
        return invalid_arg("seconds must be positive");
    }
    let len = (seconds * cfg.sample_rate as f64).round() as usize;
    Ok(len.max(cfg.stft.window_size()))
}

/// Analytic MACs for one forward pass over `seconds` of audio, computed
/// by replaying the graph on a dry tape (shapes only, no data). Purely a
/// function of the configuration and the clip length.
pub fn count_macs<S: Scalar>(model: &TigerModel<S>, seconds: f64) -> Result<u64> {
    Ok(macs_by_layer(model, seconds)?.0)
}

/// Total plus leaf-scope breakdown.
pub fn macs_by_layer<S: Scalar>(
    model: &TigerModel<S>,
    seconds: f64,
) -> Result<(u64, Vec<(String, u64)>)> {
    let len = clip_len(&model.config, seconds)?;
    let mut tape = Tape::<S>::dry();
    let x = tape.constant(Vec::new(), vec![len])?;
    forward_taped(&mut tape, &model.store, &model.config, x)?;
    Ok((tape.total_macs(), tape.macs_by_scope()))
}

fn roll_up(layers: &[(String, u64)]) -> Vec<(String, u64)> {
    let mut acc: std::collections::BTreeMap<String, u64> = std::collections::BTreeMap::new();
    for (scope, m) in layers {
        let module = scope.split('.').next().unwrap_or(scope).to_string();
        *acc.entry(module).or_insert(0) += m;
    }
    acc.into_iter().collect()
}

/// Transform cost, reported beside the model total: per frame one
/// windowing pass (W multiplies) plus a W-point real FFT estimated at
/// W log2(W) real MACs, for the analysis pass and one synthesis pass per
/// speaker.
pub fn stft_macs(cfg: &TigerConfig, seconds: f64) -> Result<u64> {
    let len = clip_len(cfg, seconds)?;
    let w = cfg.stft.window_size() as f64;
    let frames = cfg.stft.frames_for_len(len) as f64;
    let per_frame = w + w * w.log2();
    Ok((frames * per_frame * (1.0 + cfg.speakers as f64)).round() as u64)
}

/// Mean/stddev wall-clock per run. The first 10 runs warm caches and the
/// allocator and are excluded. Single-threaded by construction: every
/// kernel in this crate runs on the calling thread.
pub fn benchmark<S: Scalar>(
    model: &TigerModel<S>,
    seconds: f64,
    runs: usize,
    mode: BenchMode,
) -> Result<BenchStats> {
    const WARMUP: usize = 10;
    if runs <= WARMUP {
        return invalid_arg(format!("need more than {WARMUP} runs, got {runs}"));
    }
    let len = clip_len(&model.config, seconds)?;
    // A quiet tone rather than silence: all-zero frames are not
    // representative of the arithmetic on real audio.
    let input: Vec<S> = (0..len)
        .map(|i| S::from_f64c(0.1 * (i as f64 * 0.05).sin()))
        .collect();

    let mut samples = Vec::with_capacity(runs - WARMUP);
    for run in 0..runs {
        let start = Instant::now();
        let grad = mode == BenchMode::ForwardBackward;
        let mut tape = Tape::<S>::new(grad);
        let x = tape.constant(input.clone(), vec![len])?;
        let out = forward_taped(&mut tape, &model.store, &model.config, x)?;
        if grad {
            let root = tape.sum_all(out);
            let grads = tape.backward(root)?;
            std::hint::black_box(&grads);
        }
        std::hint::black_box(tape.value(out)[0]);
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        if run >= WARMUP {
            samples.push(elapsed);
        }
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(BenchStats { mean_ms: mean, std_ms: var.sqrt(), runs: samples.len() })
}

/// Peak live tensor bytes during one forward pass, with the block-level
/// reclamation the real forward uses.
pub fn peak_working_set<S: Scalar>(model: &TigerModel<S>, seconds: f64) -> Result<usize> {
    let len = clip_len(&model.config, seconds)?;
    let mut tape = Tape::<S>::new(false);
    let x = tape.constant(vec![S::zero(); len], vec![len])?;
    forward_taped(&mut tape, &model.store, &model.config, x)?;
    Ok(tape.bytes_peak())
}

/// Assemble the full report. `bench_runs` selects the wall-clock section;
/// counting alone never executes any arithmetic.
pub fn profile<S: Scalar>(
    model: &TigerModel<S>,
    seconds: f64,
    bench_runs: Option<usize>,
) -> Result<CostReport> {
    let (macs_total, macs_by_layer) = macs_by_layer::<S>(model, seconds)?;
    let (forward, forward_backward, peak_bytes) = match bench_runs {
        Some(runs) => (
            Some(benchmark(model, seconds, runs, BenchMode::Forward)?),
            Some(benchmark(model, seconds, runs, BenchMode::ForwardBackward)?),
            Some(peak_working_set(model, seconds)?),
        ),
        None => (None, None, None),
    };
    Ok(CostReport {
        params_total: count_params(model),
        params_by_module: params_by_module(model),
        macs_total,
        macs_by_module: roll_up(&macs_by_layer),
        macs_by_layer,
        stft_macs: stft_macs(&model.config, seconds)?,
        seconds,
        sample_rate: model.config.sample_rate,
        forward,
        forward_backward,
        peak_bytes,
    })
}

fn giga(v: u64) -> String {
    format!("{:.3} G", v as f64 / 1e9)
}

impl CostReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "parameters: {} ({:.2} M)\n",
            self.params_total,
            self.params_total as f64 / 1e6
        ));
        for (m, v) in &self.params_by_module {
            out.push_str(&format!("  {m}: {v}\n"));
        }
        out.push_str(&format!(
            "macs ({} s at {} Hz): {} ({})\n",
            self.seconds,
            self.sample_rate,
            self.macs_total,
            giga(self.macs_total)
        ));
        for (m, v) in &self.macs_by_module {
            out.push_str(&format!("  {m}: {} ({})\n", v, giga(*v)));
        }
        out.push_str(&format!(
            "stft/istft (not in total): {} ({})\n",
            self.stft_macs,
            giga(self.stft_macs)
        ));
        if let Some(f) = &self.forward {
            out.push_str(&format!(
                "forward: {:.3} ms +/- {:.3} over {} runs\n",
                f.mean_ms, f.std_ms, f.runs
            ));
        }
        if let Some(f) = &self.forward_backward {
            out.push_str(&format!(
                "forward+backward: {:.3} ms +/- {:.3} over {} runs\n",
                f.mean_ms, f.std_ms, f.runs
            ));
        }
        if let Some(b) = self.peak_bytes {
            out.push_str(&format!("peak working set: {:.1} MB\n", b as f64 / (1024.0 * 1024.0)));
        }
        out
    }

    /// `kind,name,value` rows; the layer rows are the leaf scopes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,name,value\n");
        out.push_str(&format!("params,total,{}\n", self.params_total));
        for (m, v) in &self.params_by_module {
            out.push_str(&format!("params,{m},{v}\n"));
        }
        out.push_str(&format!("macs,total,{}\n", self.macs_total));
        for (m, v) in &self.macs_by_layer {
            out.push_str(&format!("macs,{m},{v}\n"));
        }
        out.push_str(&format!("macs,stft,{}\n", self.stft_macs));
        if let Some(f) = &self.forward {
            out.push_str(&format!("forward_ms,mean,{}\n", f.mean_ms));
            out.push_str(&format!("forward_ms,std,{}\n", f.std_ms));
        }
        if let Some(f) = &self.forward_backward {
            out.push_str(&format!("forward_backward_ms,mean,{}\n", f.mean_ms));
            out.push_str(&format!("forward_backward_ms,std,{}\n", f.std_ms));
        }
        if let Some(b) = self.peak_bytes {
            out.push_str(&format!("peak_bytes,total,{b}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;
    use crate::separator::{PathOrder, SeparatorConfig};

    fn micro(b: usize, seed: u64) -> TigerModel<f32> {
        let cfg = TigerConfig {
            sample_rate: 8000,
            stft: StftConfig::new(64, 16).unwrap(),
            scheme: "NonSplit".to_string(),
            separator: SeparatorConfig {
                n: 8,
                h: 16,
                d: 2,
                b,
                a: 2,
                e: 2,
                path_order: PathOrder::FreqTime,
            },
            speakers: 2,
        };
        TigerModel::build(cfg, seed).unwrap()
    }

    #[test]
    fn param_breakdown_sums_to_the_total() {
        let m = micro(2, 1);
        let total = count_params(&m);
        let by_module: u64 = params_by_module(&m).iter().map(|(_, v)| v).sum();
        assert_eq!(total, by_module);
        assert!(params_by_module(&m).len() >= 3);
    }

    #[test]
    fn macs_scale_exactly_with_block_count() {
        let m1 = micro(1, 1);
        let m2 = micro(2, 1);
        let sep = |m: &TigerModel<f32>| -> u64 {
            let (_, layers) = macs_by_layer(m, 0.5).unwrap();
            layers
                .iter()
                .filter(|(s, _)| s.starts_with("separator"))
                .map(|(_, v)| v)
                .sum()
        };
        assert_eq!(sep(&m2), 2 * sep(&m1));
        // The split/restore ends don't depend on the block count.
        let other = |m: &TigerModel<f32>| count_macs(m, 0.5).unwrap() - sep(m);
        assert_eq!(other(&m1), other(&m2));
    }

    #[test]
    fn macs_are_independent_of_parameter_values() {
        let a = count_macs(&micro(2, 1), 0.5).unwrap();
        let b = count_macs(&micro(2, 999), 0.5).unwrap();
        assert_eq!(a, b);
        assert!(a > 0);
    }

    #[test]
    fn macs_grow_linearly_in_frames_when_attention_stays_on_frequency() {
        // With both passes on the frequency axis every op costs the same
        // per frame, so the total is exactly proportional to frame count.
        let mut m = micro(2, 1);
        m.config.separator.path_order = PathOrder::FreqFreq;
        let one = count_macs(&m, 1.0).unwrap();
        let two = count_macs(&m, 2.0).unwrap();
        let f1 = m.config.stft.frames_for_len(8000) as u64;
        let f2 = m.config.stft.frames_for_len(16000) as u64;
        assert_eq!(one % f1, 0, "per-frame cost is not integral");
        assert_eq!(two, one / f1 * f2);

        // A time-axis pass adds a term quadratic in frames, so doubling
        // the clip more than doubles the count.
        let m_ft = micro(2, 1);
        let one_ft = count_macs(&m_ft, 1.0).unwrap();
        let two_ft = count_macs(&m_ft, 2.0).unwrap();
        assert!(two_ft > 2 * one_ft);
    }

    #[test]
    fn layer_rows_sum_to_the_module_rollup() {
        let m = micro(2, 3);
        let report = profile(&m, 0.5, None).unwrap();
        let layer_sum: u64 = report.macs_by_layer.iter().map(|(_, v)| v).sum();
        let module_sum: u64 = report.macs_by_module.iter().map(|(_, v)| v).sum();
        assert_eq!(layer_sum, report.macs_total);
        assert_eq!(module_sum, report.macs_total);
        assert!(report.stft_macs > 0);
        assert!(report.forward.is_none());

        let text = report.to_text();
        assert!(text.contains("parameters:"));
        assert!(text.contains("stft/istft"));
        let csv = report.to_csv();
        assert!(csv.starts_with("kind,name,value\n"));
        assert!(csv.contains("params,total,"));
        assert!(csv.contains("macs,total,"));
    }

    #[test]
    fn benchmark_orders_modes_and_rejects_tiny_run_counts() {
        let m = micro(1, 2);
        assert!(benchmark(&m, 0.05, 5, BenchMode::Forward).is_err());
        let f = benchmark(&m, 0.05, 14, BenchMode::Forward).unwrap();
        let fb = benchmark(&m, 0.05, 14, BenchMode::ForwardBackward).unwrap();
        assert_eq!(f.runs, 4);
        assert!(f.mean_ms > 0.0);
        assert!(fb.mean_ms > f.mean_ms, "fb {} vs f {}", fb.mean_ms, f.mean_ms);
    }

    #[test]
    fn working_set_peak_is_positive_and_reported() {
        let m = micro(1, 2);
        let report = profile(&m, 0.05, Some(12)).unwrap();
        assert!(report.peak_bytes.unwrap() > 0);
        assert!(report.to_text().contains("peak working set"));
        assert!(report.to_csv().contains("peak_bytes,total,"));
    }
}
