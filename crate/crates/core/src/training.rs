//! Training: differentiable losses (permutation-invariant negative SI-SDR
//! and the three-stem time+spectral MAE), Adam/AdamW, and an epoch loop
//! with plateau-driven learning-rate halving and early stopping.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config as cfgtext;
use crate::dsp::wav::read_wav;
use crate::dsp::{StftConfig, Waveform};
use crate::error::invalid_arg;
use crate::model::{forward_taped, permutations, TigerModel};
use crate::tensor::store::ParameterStore;
use crate::tensor::{Tape, TensorId};
use crate::{Result, Scalar};

const SI_SDR_EPS: f64 = 1e-8;
/// Smoothing width for the spectral modulus; `sqrt(d^2 + w^2) - w` is exact
/// at d = 0 and within w of |d| everywhere else.
const MODULUS_EPS: f64 = 1e-6;

/// SI-SDR in dB as a tape node, differentiable in the estimate.
pub fn si_sdr_taped<S: Scalar>(
    tape: &mut Tape<S>,
    est: TensorId,
    reference: TensorId,
) -> Result<TensorId> {
    let l = tape.shape(est).to_vec();
    if l != tape.shape(reference) {
        return invalid_arg("estimate and reference shapes differ");
    }
    let n = l.iter().product::<usize>();
    let eps = S::from_f64c(SI_SDR_EPS);
    let dot_er = tape.dot_all(est, reference)?;
    let dot_rr = tape.dot_all(reference, reference)?;
    let den = tape.add_const(dot_rr, eps);
    let alpha = tape.div(dot_er, den)?;
    let r2 = tape.reshape(reference, vec![1, n, 1])?;
    let a2 = tape.reshape(alpha, vec![1, 1, 1])?;
    let t2 = tape.matmul(r2, a2)?;
    let target = tape.reshape(t2, vec![n])?;
    let tt = tape.dot_all(target, target)?;
    let diff = tape.sub(target, est)?;
    let ee = tape.dot_all(diff, diff)?;
    let num = tape.add_const(tt, eps);
    let den2 = tape.add_const(ee, eps);
    let ratio = tape.div(num, den2)?;
    let ln = tape.ln(ratio);
    Ok(tape.scale(ln, S::from_f64c(10.0 / std::f64::consts::LN_10)))
}

/// Permutation-invariant negative SI-SDR: builds every estimate/reference
/// pairing, picks the assignment with the highest total SI-SDR, and returns
/// `-mean` over that assignment plus the chosen permutation. Gradients flow
/// only through the selected pairs.
pub fn pit_loss<S: Scalar>(
    tape: &mut Tape<S>,
    estimates: &[TensorId],
    references: &[TensorId],
) -> Result<(TensorId, Vec<usize>)> {
    let c = references.len();
    if estimates.len() != c || c == 0 {
        return invalid_arg(format!("{} estimates vs {c} references", estimates.len()));
    }
    // pairs[i][j] = SI-SDR of estimate j against reference i.
    let mut pairs = Vec::with_capacity(c);
    for i in 0..c {
        let mut row = Vec::with_capacity(c);
        for j in 0..c {
            row.push(si_sdr_taped(tape, estimates[j], references[i])?);
        }
        pairs.push(row);
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(c) {
        let total: f64 = (0..c).map(|i| tape.scalar_value(pairs[i][perm[i]]).to_f64c()).sum();
        if best.as_ref().map(|(s, _)| total > *s).unwrap_or(true) {
            best = Some((total, perm));
        }
    }
    let (_, perm) = best.unwrap();
    let mut sum = pairs[0][perm[0]];
    for i in 1..c {
        sum = tape.add(sum, pairs[i][perm[i]])?;
    }
    let loss = tape.scale(sum, -S::one() / S::from_usize_c(c));
    Ok((loss, perm))
}

/// Three-stem reconstruction loss: mean absolute error in time plus the
/// mean complex-difference modulus across spectrogram bins, averaged over
/// stems. Track order is fixed; no permutation search.
pub fn dnr_loss<S: Scalar>(
    tape: &mut Tape<S>,
    estimates: &[TensorId],
    references: &[TensorId],
    stft_cfg: &StftConfig,
) -> Result<TensorId> {
    if estimates.len() != 3 || references.len() != 3 {
        return invalid_arg(format!(
            "the stem loss takes exactly 3 labeled tracks, got {} estimates and {} references",
            estimates.len(),
            references.len()
        ));
    }
    let w = S::from_f64c(MODULUS_EPS);
    let w2 = w * w;
    let mut total: Option<TensorId> = None;
    let mut accumulate = |tape: &mut Tape<S>, term: TensorId| -> Result<()> {
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
        Ok(())
    };
    for (&e, &r) in estimates.iter().zip(references) {
        if tape.shape(e) != tape.shape(r) {
            return invalid_arg("estimate and reference lengths differ");
        }
        let d = tape.sub(e, r)?;
        let ad = tape.abs(d);
        let time_term = tape.mean_all(ad);
        accumulate(tape, time_term)?;

        let se = tape.stft(e, stft_cfg)?;
        let sr = tape.stft(r, stft_cfg)?;
        let ds = tape.sub(se, sr)?;
        let dre = tape.slice_axis(ds, 0, 0, 1)?;
        let dim = tape.slice_axis(ds, 0, 1, 1)?;
        let re2 = tape.mul(dre, dre)?;
        let im2 = tape.mul(dim, dim)?;
        let mag2 = tape.add(re2, im2)?;
        let shifted = tape.add_const(mag2, w2);
        let root = tape.sqrt(shifted);
        let modulus = tape.add_const(root, -w);
        let spec_term = tape.mean_all(modulus);
        accumulate(tape, spec_term)?;
    }
    Ok(tape.scale(total.unwrap(), S::from_f64c(1.0 / 3.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Adam,
    AdamW,
}

impl OptimKind {
    pub fn parse(s: &str) -> Result<OptimKind> {
        match s {
            "adam" => Ok(OptimKind::Adam),
            "adamw" => Ok(OptimKind::AdamW),
            other => invalid_arg(format!("unknown optimizer {other:?}")),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimKind::Adam => "adam",
            OptimKind::AdamW => "adamw",
        }
    }
}

/// First/second moment accumulators plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimState<S: Scalar> {
    kind: OptimKind,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(kind: OptimKind) -> Self {
        OptimState {
            kind,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: if kind == OptimKind::AdamW { 0.01 } else { 0.0 },
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. AdamW applies decoupled decay
    /// `lr * wd * w` on top of the Adam step.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<S>,
        grads: &BTreeMap<String, Vec<S>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::from_f64c(self.beta1), S::from_f64c(self.beta2));
        let (nb1, nb2) = (S::one() - b1, S::one() - b2);
        for (name, g) in grads {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(crate::Error::Numerical(format!(
                    "non-finite gradient {bad} for parameter {name}"
                )));
            }
            let param = store
                .get_mut(name)
                .ok_or_else(|| crate::Error::InvalidArgument(format!("no parameter named {name}")))?;
            if param.data.len() != g.len() {
                return invalid_arg(format!("gradient for {name} has the wrong length"));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![S::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![S::zero(); g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + nb1 * g[i];
                v[i] = b2 * v[i] + nb2 * g[i] * g[i];
                let m_hat = m[i].to_f64c() / bc1;
                let v_hat = v[i].to_f64c() / bc2;
                let mut update = lr * m_hat / (v_hat.sqrt() + self.eps);
                if self.kind == OptimKind::AdamW {
                    update += lr * self.weight_decay * param.data[i].to_f64c();
                }
                param.data[i] = param.data[i] - S::from_f64c(update);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    NegSiSdrPit,
    DnrMae,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<LossKind> {
        match s {
            "neg_sisdr_pit" => Ok(LossKind::NegSiSdrPit),
            "dnr_mae" => Ok(LossKind::DnrMae),
            other => invalid_arg(format!("unknown loss {other:?}")),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::NegSiSdrPit => "neg_sisdr_pit",
            LossKind::DnrMae => "dnr_mae",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optimizer: OptimKind,
    pub lr: f64,
    /// Epochs without validation improvement before the lr is halved.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Epochs without improvement before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub segment_seconds: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional hard cap on optimizer steps, checked mid-epoch.
    pub max_steps: Option<u64>,
    /// Optional stop once the epoch's mean train loss reaches this value.
    pub target_train_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::NegSiSdrPit,
            optimizer: OptimKind::Adam,
            lr: 0.001,
            plateau_patience: 10,
            plateau_factor: 0.5,
            early_stop_patience: 20,
            max_epochs: 500,
            segment_seconds: 3.0,
            batch_size: 1,
            seed: 0,
            max_steps: None,
            target_train_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return invalid_arg("lr must be positive");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return invalid_arg("patience values must be positive");
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return invalid_arg("plateau_factor must be in (0, 1)");
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return invalid_arg("max_epochs and batch_size must be positive");
        }
        if self.segment_seconds <= 0.0 {
            return invalid_arg("segment_seconds must be positive");
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut pairs = vec![
            ("loss".to_string(), self.loss.as_str().to_string()),
            ("optimizer".to_string(), self.optimizer.as_str().to_string()),
            ("lr".to_string(), format!("{}", self.lr)),
            ("plateau_patience".to_string(), self.plateau_patience.to_string()),
            ("plateau_factor".to_string(), format!("{}", self.plateau_factor)),
            ("early_stop_patience".to_string(), self.early_stop_patience.to_string()),
            ("max_epochs".to_string(), self.max_epochs.to_string()),
            ("segment_seconds".to_string(), format!("{}", self.segment_seconds)),
            ("batch_size".to_string(), self.batch_size.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        if let Some(s) = self.max_steps {
            pairs.push(("max_steps".to_string(), s.to_string()));
        }
        if let Some(t) = self.target_train_loss {
            pairs.push(("target_train_loss".to_string(), format!("{t}")));
        }
        cfgtext::render_sections(&[("train".to_string(), pairs)])
    }

    /// Parse the `[train]` section, starting from defaults so the section
    /// may name only the keys it changes.
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        let sections = cfgtext::parse_sections(text)?;
        let mut cfg = TrainConfig::default();
        for (name, pairs) in &sections {
            if name != "train" {
                continue;
            }
            for (k, v) in pairs {
                cfg.set(&format!("train.{k}"), v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one dotted `train.key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(field) = key.strip_prefix("train.") else {
            return invalid_arg(format!("unknown config key {key:?}"));
        };
        match field {
            "loss" => self.loss = LossKind::parse(value)?,
            "optimizer" => self.optimizer = OptimKind::parse(value)?,
            "lr" => self.lr = cfgtext::parse_num("train", field, value)?,
            "plateau_patience" => self.plateau_patience = cfgtext::parse_num("train", field, value)?,
            "plateau_factor" => self.plateau_factor = cfgtext::parse_num("train", field, value)?,
            "early_stop_patience" => {
                self.early_stop_patience = cfgtext::parse_num("train", field, value)?
            }
            "max_epochs" => self.max_epochs = cfgtext::parse_num("train", field, value)?,
            "segment_seconds" => self.segment_seconds = cfgtext::parse_num("train", field, value)?,
            "batch_size" => self.batch_size = cfgtext::parse_num("train", field, value)?,
            "seed" => self.seed = cfgtext::parse_num("train", field, value)?,
            "max_steps" => self.max_steps = Some(cfgtext::parse_num("train", field, value)?),
            "target_train_loss" => {
                self.target_train_loss = Some(cfgtext::parse_num("train", field, value)?)
            }
            _ => return invalid_arg(format!("unknown config key {key:?}")),
        }
        Ok(())
    }
}

/// One training utterance: the mixture plus its labeled references.
#[derive(Debug, Clone)]
pub struct TrainExample<S: Scalar> {
    pub mixture: Waveform<S>,
    pub references: Vec<Waveform<S>>,
}

impl<S: Scalar> TrainExample<S> {
    pub fn new(mixture: Waveform<S>, references: Vec<Waveform<S>>) -> Result<Self> {
        if references.is_empty() {
            return invalid_arg("an example needs at least one reference");
        }
        if references.iter().any(|r| r.len() != mixture.len() || r.sample_rate != mixture.sample_rate)
        {
            return invalid_arg("references must match the mixture length and sample rate");
        }
        Ok(TrainExample { mixture, references })
    }
}

/// Parse a manifest: one example per line, tab-separated paths, mixture
/// first and references after it. `#` lines are comments.
pub fn parse_manifest(text: &str) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<String> = if line.contains('\t') {
            line.split('\t').map(|p| p.trim().to_string()).collect()
        } else {
            line.split_whitespace().map(|p| p.to_string()).collect()
        };
        if parts.len() < 2 {
            return invalid_arg(format!(
                "manifest line {}: need a mixture and at least one reference",
                lineno + 1
            ));
        }
        out.push(parts);
    }
    Ok(out)
}

/// Load every example named by a manifest file; relative paths resolve
/// against the manifest's directory.
pub fn load_manifest<S: Scalar>(manifest_path: impl AsRef<Path>) -> Result<Vec<TrainExample<S>>> {
    let manifest_path = manifest_path.as_ref();
    let text = std::fs::read_to_string(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for paths in parse_manifest(&text)? {
        let resolve = |p: &str| {
            let pb = Path::new(p);
            if pb.is_absolute() {
                pb.to_path_buf()
            } else {
                base.join(pb)
            }
        };
        let mixture = read_wav::<S>(resolve(&paths[0]))?;
        let references = paths[1..]
            .iter()
            .map(|p| read_wav::<S>(resolve(p)))
            .collect::<Result<Vec<_>>>()?;
        out.push(TrainExample::new(mixture, references)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    MaxSteps,
    TargetReached,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub history: Vec<EpochStats>,
    pub best_valid: f64,
    pub steps: u64,
    pub stopped: StopReason,
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,valid_loss,lr\n");
    for h in history {
        out.push_str(&format!("{},{:.8},{:.8},{}\n", h.epoch, h.train_loss, h.valid_loss, h.lr));
    }
    out
}

/// Loss of one (mixture, references) pair through a full forward pass.
/// With `grad` set the parameter gradients come back alongside the value.
fn example_loss<S: Scalar>(
    model: &TigerModel<S>,
    loss: LossKind,
    mixture: &[S],
    references: &[Vec<S>],
    grad: bool,
) -> Result<(f64, Option<BTreeMap<String, Vec<S>>>)> {
    let window = model.config.stft.window_size();
    let len = mixture.len().max(window);
    let mut mix = mixture.to_vec();
    mix.resize(len, S::zero());

    let mut tape = Tape::new(grad);
    let x = tape.constant(mix, vec![len])?;
    let out = forward_taped(&mut tape, &model.store, &model.config, x)?;
    let mut ests = Vec::with_capacity(references.len());
    for c in 0..references.len() {
        let row = tape.slice_axis(out, 0, c, 1)?;
        ests.push(tape.reshape(row, vec![len])?);
    }
    let mut refs = Vec::with_capacity(references.len());
    for r in references {
        let mut padded = r.clone();
        padded.resize(len, S::zero());
        refs.push(tape.constant(padded, vec![len])?);
    }
    let loss_id = match loss {
        LossKind::NegSiSdrPit => pit_loss(&mut tape, &ests, &refs)?.0,
        LossKind::DnrMae => dnr_loss(&mut tape, &ests, &refs, &model.config.stft)?,
    };
    let value = tape.scalar_value(loss_id).to_f64c();
    if !value.is_finite() {
        return Err(crate::Error::Numerical(format!(
            "training diverged: loss became {value}"
        )));
    }
    if !grad {
        return Ok((value, None));
    }
    let grads = tape.backward(loss_id)?;
    Ok((value, Some(tape.param_gradients(&grads))))
}

/// Epoch loop: random segment crops, batched gradient averaging, plateau
/// lr halving, early stop, and best-validation parameter retention.
pub fn fit<S: Scalar>(
    model: &mut TigerModel<S>,
    train: &[TrainExample<S>],
    valid: &[TrainExample<S>],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return invalid_arg("train and validation sets must be nonempty");
    }
    let speakers = model.config.speakers;
    for ex in train.iter().chain(valid) {
        if ex.references.len() != speakers {
            return invalid_arg(format!(
                "example has {} references but the model separates {speakers}",
                ex.references.len()
            ));
        }
    }
    if cfg.loss == LossKind::DnrMae && speakers != 3 {
        return invalid_arg("the stem loss requires a three-source model");
    }

    let seg_len = (cfg.segment_seconds * model.config.sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimState::<S>::new(cfg.optimizer);
    let mut lr = cfg.lr;
    let mut best_valid = f64::INFINITY;
    let mut best_params: Option<ParameterStore<S>> = None;
    let mut since_best = 0usize;
    let mut history = Vec::new();
    let mut stopped = StopReason::MaxEpochs;

    'training: for epoch in 1..=cfg.max_epochs {
        // Deterministic shuffle: one pass of seeded Fisher-Yates.
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }

        let mut train_sum = 0.0;
        let mut train_count = 0usize;
        let mut hit_step_cap = false;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: BTreeMap<String, Vec<S>> = BTreeMap::new();
            let scale = S::from_f64c(1.0 / batch.len() as f64);
            for &idx in batch {
                let ex = &train[idx];
                let take = seg_len.min(ex.mixture.len());
                let start = rng.gen_range(0..=ex.mixture.len() - take);
                let mix = &ex.mixture.samples[start..start + take];
                let refs: Vec<Vec<S>> =
                    ex.references.iter().map(|r| r.samples[start..start + take].to_vec()).collect();
                let (value, g) = example_loss(model, cfg.loss, mix, &refs, true)?;
                train_sum += value;
                train_count += 1;
                for (name, gv) in g.unwrap() {
                    let entry = grads.entry(name).or_insert_with(|| vec![S::zero(); gv.len()]);
                    for i in 0..gv.len() {
                        entry[i] += scale * gv[i];
                    }
                }
            }
            opt.step(&mut model.store, &grads, lr)?;
            if cfg.max_steps.is_some_and(|cap| opt.steps_taken() >= cap) {
                hit_step_cap = true;
                break;
            }
        }
        let train_loss = train_sum / train_count as f64;

        let mut valid_sum = 0.0;
        for ex in valid {
            let refs: Vec<Vec<S>> = ex.references.iter().map(|r| r.samples.clone()).collect();
            valid_sum += example_loss(model, cfg.loss, &ex.mixture.samples, &refs, false)?.0;
        }
        let valid_loss = valid_sum / valid.len() as f64;
        history.push(EpochStats { epoch, train_loss, valid_loss, lr });

        if valid_loss < best_valid {
            best_valid = valid_loss;
            best_params = Some(model.store.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stop_patience {
                stopped = StopReason::EarlyStop;
                break 'training;
            }
            if since_best % cfg.plateau_patience == 0 {
                lr *= cfg.plateau_factor;
            }
        }
        if cfg.target_train_loss.is_some_and(|t| train_loss <= t) {
            stopped = StopReason::TargetReached;
            break 'training;
        }
        if hit_step_cap {
            stopped = StopReason::MaxSteps;
            break 'training;
        }
    }

    if let Some(best) = best_params {
        model.store = best;
    }
    Ok(FitResult { history, best_valid, steps: opt.steps_taken(), stopped })
}
