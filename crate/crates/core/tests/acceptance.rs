//! Acceptance suite: end-to-end checks of the contracts this crate is
//! built around, from exact band-table layouts through training currency.
//! Each test prints one PASS/FAIL line with the numbers it judged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tiger::bandsplit::make_scheme;
use tiger::dsp::{istft, stft, StftConfig, Waveform};
use tiger::metrics::{improvement, si_sdr, MetricKind};
use tiger::mixgen::{generate_example, make_mixture, synth_noise, synth_sources, MixSpec};
use tiger::model::{forward_taped, infer_long_with, permutations, TigerConfig, TigerModel};
use tiger::profiler::{count_macs, count_params, macs_by_layer};
use tiger::separator::{PathOrder, SeparatorConfig};
use tiger::tensor::gradcheck::{grad_check, GradCheckOptions};
use tiger::tensor::Tape;
use tiger::training::{fit, pit_loss, si_sdr_taped, TrainConfig, TrainExample};

fn verdict(idx: usize, name: &str, ok: bool, detail: &str) {
    println!(
        "acceptance {idx:02} {}: {name}: {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "acceptance {idx:02} {name}: {detail}");
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = a.iter().map(|x| x * x).sum();
    (num / den).sqrt()
}

fn widths(blocks: &[(usize, usize)]) -> Vec<usize> {
    let mut out = Vec::new();
    for &(w, count) in blocks {
        out.extend(std::iter::repeat(w).take(count));
    }
    out
}

#[test]
fn named_band_schemes_have_exact_widths() {
    let cases: [(&str, Vec<usize>); 4] = [
        ("LowFreqNarrowSplit", widths(&[(1, 40), (4, 10), (10, 8), (20, 8), (1, 1)])),
        ("NormalSplit", widths(&[(2, 20), (4, 10), (10, 8), (20, 8), (1, 1)])),
        ("EvenSplit", widths(&[(4, 66), (57, 1)])),
        ("NonSplit", vec![1; 321]),
    ];
    let mut ok = true;
    let mut detail = String::new();
    for (name, want) in &cases {
        let s = make_scheme(name, 321, 0.0).unwrap();
        let good = s.widths == *want && s.total_bins() == 321;
        ok &= good;
        detail.push_str(&format!("{name} K={} sum={}; ", s.num_bands(), s.total_bins()));
    }
    let k: Vec<usize> = cases
        .iter()
        .map(|(n, _)| make_scheme(n, 321, 0.0).unwrap().num_bands())
        .collect();
    ok &= k == vec![67, 47, 67, 321];
    verdict(1, "band scheme widths", ok, detail.trim_end());
}

#[test]
fn stft_roundtrip_is_transparent_at_double_precision() {
    let cfg = StftConfig::new(640, 160).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x57F7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x: Vec<f64> = (0..48000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wave = Waveform::new(x.clone(), 16000);
        let spec = stft(&wave, &cfg).unwrap();
        assert_eq!(spec.bins, 321);
        let back = istft(&spec, &cfg, x.len()).unwrap();
        worst = worst.max(rel_l2(&x, &back.samples));
    }
    let ok = cfg.bins() == 321 && worst < 1e-6;
    verdict(
        2,
        "analysis-synthesis round trip",
        ok,
        &format!("bins={} worst rel L2 over 100 signals = {worst:.3e}", cfg.bins()),
    );
}

#[test]
fn parameter_count_is_independent_of_depth_and_path_order() {
    let count = |cfg: TigerConfig| count_params(&TigerModel::<f32>::build(cfg, 0).unwrap());
    let small = count(TigerConfig::preset("small").unwrap());
    let large = count(TigerConfig::preset("large").unwrap());
    let mut by_order = Vec::new();
    for order in [PathOrder::FreqTime, PathOrder::TimeTime, PathOrder::FreqFreq] {
        let mut cfg = TigerConfig::preset("small").unwrap();
        cfg.separator.path_order = order;
        by_order.push(count(cfg));
    }
    let ok = small == large && by_order.iter().all(|&c| c == small);
    verdict(
        3,
        "parameter sharing",
        ok,
        &format!("small={small} large={large} by path order {by_order:?}"),
    );
}

#[test]
fn parameter_counts_sit_inside_the_size_budgets() {
    let count = |name: &str| {
        count_params(&TigerModel::<f32>::build(TigerConfig::preset(name).unwrap(), 0).unwrap())
    };
    let small = count("small");
    let tiny = count("tiny");
    let gap = |got: u64, target: f64| (got as f64 - target) / target * 100.0;
    let small_gap = gap(small, 820_000.0);
    let tiny_gap = gap(tiny, 102_120.0);
    let ok = small_gap.abs() <= 30.0 && tiny_gap.abs() <= 30.0;
    verdict(
        4,
        "parameter budgets",
        ok,
        &format!(
            "small={small} ({small_gap:+.2}% of 820000), tiny={tiny} ({tiny_gap:+.2}% of 102120)"
        ),
    );
}

fn macs_for_module(model: &TigerModel<f32>, module: &str) -> u64 {
    macs_by_layer(model, 1.0)
        .unwrap()
        .1
        .iter()
        .filter(|(scope, _)| scope.split('.').next() == Some(module))
        .map(|(_, v)| v)
        .sum()
}

#[test]
fn mac_counts_scale_with_depth_and_stay_inside_budget() {
    let build = |name: &str, seed: u64| {
        TigerModel::<f32>::build(TigerConfig::preset(name).unwrap(), seed).unwrap()
    };
    let small = build("small", 1);
    let large = build("large", 1);
    let sep_small = macs_for_module(&small, "separator");
    let sep_large = macs_for_module(&large, "separator");
    let total_small = count_macs(&small, 1.0).unwrap();
    let total_large = count_macs(&large, 1.0).unwrap();
    let gap = |got: u64, target: f64| (got as f64 - target) / target * 100.0;
    let small_gap = gap(total_small, 7.65e9);
    let large_gap = gap(total_large, 15.27e9);
    let again = count_macs(&build("small", 99), 1.0).unwrap();
    let ok = sep_large == 2 * sep_small
        && small_gap.abs() <= 30.0
        && large_gap.abs() <= 30.0
        && again == total_small;
    verdict(
        5,
        "mac accounting",
        ok,
        &format!(
            "separator 8-block/4-block = {sep_large}/{sep_small}, \
             small={total_small} ({small_gap:+.2}% of 7.65e9), \
             large={total_large} ({large_gap:+.2}% of 15.27e9), \
             reinit agrees: {}",
            again == total_small
        ),
    );
}

#[test]
fn end_to_end_loss_gradients_match_finite_differences() {
    // 17 analysis bins from a 32-sample window, split 2+2+2+2+2+2+2+3,
    // 12 frames from 120 samples at hop 8.
    let cfg = TigerConfig {
        sample_rate: 16000,
        stft: StftConfig::new(32, 8).unwrap(),
        scheme: "custom:2,2,2,2,2,2,2,3".to_string(),
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
    };
    cfg.validate().unwrap();
    let model = TigerModel::<f64>::build(cfg.clone(), 0xC0FFEE).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0x6D0D);
    let len = 120usize;
    let refs: Vec<Vec<f64>> = (0..2)
        .map(|k| {
            (0..len)
                .map(|i| {
                    let t = i as f64;
                    0.6 * ((0.07 + 0.11 * k as f64) * t + rng.gen_range(0.0..0.3)).sin()
                })
                .collect()
        })
        .collect();
    let mix: Vec<f64> = (0..len).map(|i| refs[0][i] + refs[1][i]).collect();

    let build = |tape: &mut Tape<f64>, store: &tiger::tensor::ParameterStore<f64>| {
        let x = tape.constant(mix.clone(), vec![len])?;
        let out = forward_taped(tape, store, &cfg, x)?;
        let mut ests = Vec::new();
        let mut targets = Vec::new();
        for (k, r) in refs.iter().enumerate() {
            let e = tape.slice_axis(out, 0, k, 1)?;
            ests.push(tape.reshape(e, vec![len])?);
            targets.push(tape.constant(r.clone(), vec![len])?);
        }
        let (loss, _) = pit_loss(tape, &ests, &targets)?;
        Ok(loss)
    };
    let opts = GradCheckOptions {
        eps: 1e-5,
        tolerance: 1e-4,
        max_coords_per_param: 4,
        seed: 0x5EED,
    };
    let report = grad_check(&model.store, build, &opts).unwrap();
    let ok = report.passed && report.checked >= 200;
    verdict(
        6,
        "end-to-end gradients",
        ok,
        &format!(
            "{} coordinates, max rel err {:.3e} (worst {}[{}])",
            report.checked, report.max_rel_err, report.worst_param, report.worst_index
        ),
    );
}

/// Twenty fully overlapped two-source mixtures for the overfit check:
/// half-second clips so every optimizer step sees a whole example.
fn overfit_set() -> Vec<TrainExample<f32>> {
    let spec = MixSpec {
        speaker_sdr_range: (-3.0, 3.0),
        noise_sdr_range: (15.0, 25.0),
        overlap_ratio: Some(1.0),
        duration_seconds: 0.5,
        seed: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0x0F17);
    (0..20)
        .map(|_| {
            let sources = synth_sources::<f32>(&mut rng, 2, 0.5, 16000).unwrap();
            let noise = synth_noise::<f32>(&mut rng, 0.5, 16000).unwrap();
            let ex = make_mixture(&sources, &noise, &spec, &mut rng).unwrap();
            TrainExample::new(ex.mixture, ex.references).unwrap()
        })
        .collect()
}

fn mean_si_sdri(model: &TigerModel<f32>, set: &[TrainExample<f32>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in set {
        let ests = model.forward(&ex.mixture).unwrap();
        let best = permutations(ex.references.len())
            .into_iter()
            .map(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(i, &j)| {
                        si_sdr(&ests[j].samples, &ex.references[i].samples).unwrap()
                    })
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let baseline: f64 = ex
            .references
            .iter()
            .map(|r| si_sdr(&ex.mixture.samples, &r.samples).unwrap())
            .sum();
        total += best - baseline;
        count += ex.references.len();
    }
    total / count as f64
}

#[test]
fn tiny_model_overfits_twenty_tone_mixtures() {
    let set = overfit_set();
    let baseline: f64 = set
        .iter()
        .flat_map(|ex| {
            ex.references
                .iter()
                .map(|r| si_sdr(&ex.mixture.samples, &r.samples).unwrap())
        })
        .sum::<f64>()
        / (set.len() * 2) as f64;

    let mut model =
        TigerModel::<f32>::build(TigerConfig::preset("tiny").unwrap(), 0x7147).unwrap();
    let cfg = TrainConfig {
        segment_seconds: 0.5,
        max_epochs: 100,
        max_steps: Some(2000),
        target_train_loss: Some(-(baseline + 7.0)),
        early_stop_patience: 1000,
        plateau_patience: 1000,
        seed: 0xF17,
        ..TrainConfig::default()
    };
    let result = fit(&mut model, &set, &set[..2], &cfg).unwrap();
    let gain = mean_si_sdri(&model, &set);
    let ok = result.steps <= 2000 && gain >= 5.0;
    verdict(
        7,
        "overfit sanity",
        ok,
        &format!(
            "mean SI-SDR improvement {gain:+.2} dB (baseline {baseline:+.2} dB) \
             after {} steps, stopped by {:?}",
            result.steps, result.stopped
        ),
    );
}

#[test]
fn metric_identities_hold() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3E71);
    let reference: Vec<f64> = (0..16000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let est: Vec<f64> = reference
        .iter()
        .map(|v| v + 0.4 * rng.gen_range(-1.0..1.0))
        .collect();

    let base = si_sdr(&est, &reference).unwrap();
    let mut scale_dev = 0.0f64;
    for s in [0.25, 4.0, 17.3] {
        let scaled: Vec<f64> = est.iter().map(|v| v * s).collect();
        scale_dev = scale_dev.max((si_sdr(&scaled, &reference).unwrap() - base).abs());
    }

    let mixture: Vec<f64> = reference.iter().map(|v| v + 0.8).collect();
    let self_gain =
        improvement(MetricKind::SiSdr, &mixture, &mixture, &reference).unwrap();
    let corner = si_sdr(&[1.0, 1.0], &[1.0, 0.0]).unwrap();

    // Permutation search must agree with explicit enumeration, value and
    // assignment both, for two and three sources.
    let mut pit_ok = true;
    for c in [2usize, 3] {
        let refs: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ests: Vec<Vec<f64>> = (0..c)
            .map(|k| {
                refs[(k + 1) % c]
                    .iter()
                    .map(|v| v + 0.3 * rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let mut tape = Tape::<f64>::new(false);
        let est_ids: Vec<_> =
            ests.iter().map(|e| tape.constant(e.clone(), vec![200]).unwrap()).collect();
        let ref_ids: Vec<_> =
            refs.iter().map(|r| tape.constant(r.clone(), vec![200]).unwrap()).collect();
        let (loss, perm) = pit_loss(&mut tape, &est_ids, &ref_ids).unwrap();
        let got = tape.scalar_value(loss);

        let mut pairs = vec![vec![0.0f64; c]; c];
        for (i, r) in ref_ids.iter().enumerate() {
            for (j, e) in est_ids.iter().enumerate() {
                let v = si_sdr_taped(&mut tape, *e, *r).unwrap();
                pairs[i][j] = tape.scalar_value(v);
            }
        }
        let mut best: Option<(f64, Vec<usize>)> = None;
        for p in permutations(c) {
            let total: f64 = (0..c).map(|i| pairs[i][p[i]]).sum();
            if best.as_ref().map(|(s, _)| total > *s).unwrap_or(true) {
                best = Some((total, p));
            }
        }
        let (_, want_perm) = best.unwrap();
        let mut acc = pairs[0][want_perm[0]];
        for i in 1..c {
            acc += pairs[i][want_perm[i]];
        }
        let want = acc * (-1.0 / c as f64);
        pit_ok &= perm == want_perm && got == want;
    }

    let ok = scale_dev < 1e-9 && self_gain == 0.0 && corner.abs() < 1e-6 && pit_ok;
    verdict(
        8,
        "metric identities",
        ok,
        &format!(
            "scale deviation {scale_dev:.2e} dB, self improvement {self_gain}, \
             unit corner {corner:.2e} dB, permutation search exact: {pit_ok}"
        ),
    );
}

#[test]
fn mixer_hits_requested_levels_and_sums_exactly() {
    let energy = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
    let mut worst_speaker = 0.0f64;
    let mut worst_noise = 0.0f64;
    let mut additive = true;
    for index in 0..1000 {
        let spec = MixSpec { duration_seconds: 1.0, seed: 0x9A17, ..MixSpec::default() };
        let speakers = if index % 2 == 0 { 2 } else { 3 };
        let ex = generate_example::<f64>(&spec, speakers, 16000, index).unwrap();

        for (k, target) in ex.metadata.speaker_sdr.iter().enumerate() {
            let realized = 10.0
                * (energy(&ex.references[0].samples) / energy(&ex.references[k + 1].samples))
                    .log10();
            worst_speaker = worst_speaker.max((realized - target).abs());
        }
        let speech: Vec<f64> = (0..ex.mixture.len())
            .map(|i| ex.references.iter().map(|r| r.samples[i]).sum::<f64>())
            .collect();
        let realized_noise =
            10.0 * (energy(&speech) / energy(&ex.noise.samples)).log10();
        worst_noise = worst_noise.max((realized_noise - ex.metadata.noise_sdr).abs());

        for i in 0..ex.mixture.len() {
            let sum = ex
                .references
                .iter()
                .fold(0.0f64, |acc, r| acc + r.samples[i])
                + ex.noise.samples[i];
            additive &= sum.to_bits() == ex.mixture.samples[i].to_bits();
        }
    }
    let ok = worst_speaker <= 0.01 && worst_noise <= 0.01 && additive;
    verdict(
        9,
        "mixer fidelity",
        ok,
        &format!(
            "worst speaker level error {worst_speaker:.2e} dB, \
             worst noise level error {worst_noise:.2e} dB, \
             bit-exact additivity over 1000 examples: {additive}"
        ),
    );
}

#[test]
fn long_form_stitching_is_transparent_and_length_preserving() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10F6);
    let x: Vec<f64> = (0..960000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut segments = 0usize;
    let out = infer_long_with(&x, 48000, 0.5, 1, |seg| {
        segments += 1;
        Ok(vec![seg.to_vec()])
    })
    .unwrap();
    let err = rel_l2(&x, &out[0]);

    let model = TigerModel::<f32>::build(TigerConfig::preset("tiny").unwrap(), 3).unwrap();
    let spec = MixSpec { duration_seconds: 2.0, seed: 77, ..MixSpec::default() };
    let ex = generate_example::<f32>(&spec, 2, 16000, 0).unwrap();
    let ests = model.infer_long(&ex.mixture, 1.0, 0.5).unwrap();
    let lengths_ok = ests.len() == 2 && ests.iter().all(|e| e.len() == ex.mixture.len());

    let ok = segments == 39 && err < 1e-6 && lengths_ok;
    verdict(
        10,
        "long-form stitching",
        ok,
        &format!(
            "identity process: {segments} segments, rel L2 {err:.3e}; \
             model output lengths preserved: {lengths_ok}"
        ),
    );
}

#[test]
fn builds_are_deterministic_and_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TigerConfig::preset("tiny").unwrap();
    let a = TigerModel::<f32>::build(cfg.clone(), 7).unwrap();
    let b = TigerModel::<f32>::build(cfg, 7).unwrap();
    let pa = dir.path().join("a.ckpt");
    let pb = dir.path().join("b.ckpt");
    a.save(&pa).unwrap();
    b.save(&pb).unwrap();
    let bytes_a = std::fs::read(&pa).unwrap();
    let bytes_b = std::fs::read(&pb).unwrap();
    let identical = bytes_a == bytes_b;

    let mix = Waveform::new(
        (0..4000).map(|i| 0.3 * (i as f32 * 0.05).sin()).collect(),
        16000,
    );
    let before = a.forward(&mix).unwrap();
    let reloaded = TigerModel::<f32>::load(&pa).unwrap();
    let after = reloaded.forward(&mix).unwrap();
    let bit_equal = before.len() == after.len()
        && before.iter().zip(&after).all(|(x, y)| {
            x.samples.len() == y.samples.len()
                && x.samples
                    .iter()
                    .zip(&y.samples)
                    .all(|(u, v)| u.to_bits() == v.to_bits())
        });

    let ok = identical && bit_equal;
    verdict(
        11,
        "determinism and checkpoints",
        ok,
        &format!(
            "same-seed checkpoints identical ({} bytes): {identical}; \
             reload forward bit-equal: {bit_equal}",
            bytes_a.len()
        ),
    );
}
