//! The separator stack: B parameter-shared blocks, each running a
//! frequency path and then a frame path (by default). A path applies
//! multi-scale selective attention (a small U-shaped gating network) and
//! full-axis multi-head attention, then channel layer norm, with one
//! residual connection around the whole path.
//!
//! Feature tensors are `[N, K, T]`: channels, sub-bands, frames. The frame
//! path reuses the frequency-path machinery by transposing K and T; the
//! two paths never share parameters, while all B blocks share everything.

use crate::error::{invalid_arg, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParameterStore, Tape, TensorId};

/// Which axis each of the two per-block paths attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathOrder {
    /// Frequency first, then time: the default.
    FreqTime,
    /// Both passes over time.
    TimeTime,
    /// Both passes over frequency.
    FreqFreq,
}

impl PathOrder {
    pub fn parse(s: &str) -> Result<PathOrder> {
        match s {
            "F-T" => Ok(PathOrder::FreqTime),
            "T-T" => Ok(PathOrder::TimeTime),
            "F-F" => Ok(PathOrder::FreqFreq),
            other => invalid_arg(format!("unknown path order '{other}' (expected F-T, T-T, F-F)")),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PathOrder::FreqTime => "F-T",
            PathOrder::TimeTime => "T-T",
            PathOrder::FreqFreq => "F-F",
        }
    }

    /// Per-path flag: true when the path processes the time axis.
    fn time_axis(&self, path: usize) -> bool {
        match self {
            PathOrder::FreqTime => path == 1,
            PathOrder::TimeTime => true,
            PathOrder::FreqFreq => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeparatorConfig {
    /// Feature channels in and out of every sub-module.
    pub n: usize,
    /// Hidden width inside the multi-scale attention module.
    pub h: usize,
    /// Number of stride-2 downsampling stages.
    pub d: usize,
    /// Block repetitions (parameters are shared across all of them).
    pub b: usize,
    /// Attention heads.
    pub a: usize,
    /// Query/key channels per head.
    pub e: usize,
    pub path_order: PathOrder,
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.h == 0 || self.e == 0 {
            return invalid_arg("separator channel counts must be >= 1");
        }
        if self.d == 0 || self.b == 0 {
            return invalid_arg("separator needs d >= 1 and b >= 1");
        }
        if self.a == 0 || self.n % self.a != 0 {
            return invalid_arg(format!("{} channels not divisible into {} heads", self.n, self.a));
        }
        Ok(())
    }
}

/// Selective-attention fusion from the gating equation:
/// `sigmoid(x) * y + z`, all elementwise.
pub fn sa_fuse<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    y: TensorId,
    z: TensorId,
) -> Result<TensorId> {
    let gate = tape.sigmoid(x);
    let scaled = tape.mul(gate, y)?;
    tape.add(scaled, z)
}

/// Register both paths' parameters. Layout per path:
/// multi-scale attention (in_conv, down convs, two-layer bottleneck,
/// fuse/decode gating convs, out_conv), the axis attention projections,
/// and the path's layer norm.
pub fn register_separator_params<S: Scalar>(
    store: &mut ParameterStore<S>,
    cfg: &SeparatorConfig,
) -> Result<()> {
    cfg.validate()?;
    let (n, h, d) = (cfg.n, cfg.h, cfg.d);
    for p in 0..2 {
        let msa = format!("separator.path{p}.msa");
        store.init_conv(&format!("{msa}.in_conv"), h, n, 1, true)?;
        for i in 0..d {
            store.init_conv(&format!("{msa}.down{i}"), h, 1, 5, true)?;
        }
        for layer in 0..2 {
            let pre = format!("{msa}.mlc.layer{layer}");
            store.init_conv(&format!("{pre}.conv"), h, h, 1, true)?;
            store.init_norm(&format!("{pre}.norm"), h)?;
            store.init_prelu(&format!("{pre}.prelu"))?;
        }
        store.init_conv(&format!("{msa}.fuse.gate"), h, 1, 3, true)?;
        store.init_conv(&format!("{msa}.fuse.skip"), h, 1, 3, true)?;
        for lvl in 0..=d {
            store.init_conv(&format!("{msa}.fuse.local{lvl}"), h, 1, 3, true)?;
        }
        for lvl in 0..d {
            let pre = format!("{msa}.dec{lvl}");
            store.init_conv(&format!("{pre}.gate"), h, 1, 3, true)?;
            store.init_conv(&format!("{pre}.skip"), h, 1, 3, true)?;
            store.init_conv(&format!("{pre}.local"), h, 1, 3, true)?;
        }
        store.init_conv(&format!("{msa}.out_conv"), n, h, 1, true)?;

        let attn = format!("separator.path{p}.attn");
        store.init_conv(&format!("{attn}.query"), cfg.a * cfg.e, n, 1, true)?;
        // No key bias: it shifts every logit in a softmax row by the same
        // amount, so it can never affect the output or receive gradient.
        store.init_conv(&format!("{attn}.key"), cfg.a * cfg.e, n, 1, false)?;
        store.init_conv(&format!("{attn}.value"), n, n, 1, true)?;
        store.init_conv(&format!("{attn}.out"), n, n, 1, true)?;

        store.init_norm(&format!("separator.path{p}.norm"), n)?;
    }
    Ok(())
}

fn conv_params<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    name: &str,
) -> Result<(TensorId, TensorId)> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    Ok((w, b))
}

/// Depthwise kernel-3 gating projection, length-preserving.
fn dw3<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    name: &str,
    x: TensorId,
) -> Result<TensorId> {
    let (w, b) = conv_params(tape, store, name)?;
    let groups = tape.shape(x)[0];
    tape.conv1d(x, w, Some(b), 1, 1, groups)
}

/// Multi-scale selective attention over axis 1 of `x = [n, P, Q]`.
///
/// Stages: pad P up to a multiple of 2^d; encode at d+1 resolutions with a
/// pointwise lift and depthwise stride-2 convs; average-pool every level to
/// the coarsest grid and sum; refine with the two-layer bottleneck; gate
/// each level with the shared upsampled gate/skip pair; decode top-down
/// with per-level gates; project back to `n` channels and crop.
pub fn msa_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    x: TensorId,
    cfg: &SeparatorConfig,
) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return invalid_arg(format!("msa expects [n, P, Q], got {shape:?}"));
    }
    let p_in = shape[1];
    let d = cfg.d;
    let chunk = 1usize << d;
    let p_pad = p_in.div_ceil(chunk) * chunk;

    tape.push_scope("msa");
    let x = if p_pad > p_in { tape.pad_end(x, 1, p_pad - p_in)? } else { x };

    // Encoder pyramid: levels[l] has length p_pad >> l.
    let (w, b) = conv_params(tape, store, &format!("{prefix}.in_conv"))?;
    let mut levels = vec![tape.conv1d(x, w, Some(b), 1, 0, 1)?];
    for i in 0..d {
        let (w, b) = conv_params(tape, store, &format!("{prefix}.down{i}"))?;
        let prev = levels[i];
        levels.push(tape.conv1d(prev, w, Some(b), 2, 2, cfg.h)?);
    }

    // Global summary on the coarsest grid.
    let mut global = levels[d];
    for (lvl, &e) in levels.iter().enumerate().take(d) {
        let pooled = tape.avg_pool(e, 1 << (d - lvl))?;
        global = tape.add(global, pooled)?;
    }
    for layer in 0..2 {
        let pre = format!("{prefix}.mlc.layer{layer}");
        let (w, b) = conv_params(tape, store, &format!("{pre}.conv"))?;
        let conv = tape.conv1d(global, w, Some(b), 1, 0, 1)?;
        let gamma = tape.param(store, &format!("{pre}.norm.gamma"))?;
        let beta = tape.param(store, &format!("{pre}.norm.beta"))?;
        let normed = tape.group_norm(conv, gamma, beta, 1)?;
        let alpha = tape.param(store, &format!("{pre}.prelu.alpha"))?;
        global = tape.prelu(normed, alpha)?;
    }

    // Gate every level with the shared (upsampled) gate/skip signals.
    let gate = dw3(tape, store, &format!("{prefix}.fuse.gate"), global)?;
    let skip = dw3(tape, store, &format!("{prefix}.fuse.skip"), global)?;
    let mut fused = Vec::with_capacity(d + 1);
    for (lvl, &e) in levels.iter().enumerate() {
        let local = dw3(tape, store, &format!("{prefix}.fuse.local{lvl}"), e)?;
        let factor = 1 << (d - lvl);
        let (g, s) = if factor == 1 {
            (gate, skip)
        } else {
            (tape.upsample_nearest(gate, factor)?, tape.upsample_nearest(skip, factor)?)
        };
        fused.push(sa_fuse(tape, g, local, s)?);
    }

    // Decode coarse-to-fine.
    let mut dec = fused[d];
    for lvl in (0..d).rev() {
        let pre = format!("{prefix}.dec{lvl}");
        let g = dw3(tape, store, &format!("{pre}.gate"), dec)?;
        let s = dw3(tape, store, &format!("{pre}.skip"), dec)?;
        let g = tape.upsample_nearest(g, 2)?;
        let s = tape.upsample_nearest(s, 2)?;
        let local = dw3(tape, store, &format!("{pre}.local"), fused[lvl])?;
        dec = sa_fuse(tape, g, local, s)?;
    }

    let (w, b) = conv_params(tape, store, &format!("{prefix}.out_conv"))?;
    let out = tape.conv1d(dec, w, Some(b), 1, 0, 1)?;
    let out = if p_pad > p_in { tape.slice_axis(out, 1, 0, p_in)? } else { out };
    tape.pop_scope();
    Ok(out)
}

/// Multi-head attention over axis 1 of `x = [n, P, Q]`, folding the Q axis
/// into head channels: per head, queries and keys are `[P, e*Q]`, the
/// attention map is `[P, P]`, and values carry `n/a` channels per head.
pub fn f3a_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    prefix: &str,
    x: TensorId,
    cfg: &SeparatorConfig,
) -> Result<TensorId> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[0] != cfg.n {
        return invalid_arg(format!("attention expects [{}, P, Q], got {shape:?}", cfg.n));
    }
    let (n, p, q) = (shape[0], shape[1], shape[2]);
    let (a, e) = (cfg.a, cfg.e);
    let hv = n / a;
    tape.push_scope("attn");

    let (wq, bq) = conv_params(tape, store, &format!("{prefix}.query"))?;
    let wk = tape.param(store, &format!("{prefix}.key.weight"))?;
    let (wv, bv) = conv_params(tape, store, &format!("{prefix}.value"))?;
    let qs = tape.conv1d(x, wq, Some(bq), 1, 0, 1)?;
    let ks = tape.conv1d(x, wk, None, 1, 0, 1)?;
    let vs = tape.conv1d(x, wv, Some(bv), 1, 0, 1)?;

    // [a*c, P, Q] -> [a, P, c*Q] with c channels per head.
    let fold = |tape: &mut Tape<S>, t: TensorId, c: usize| -> Result<TensorId> {
        let split = tape.reshape(t, vec![a, c, p, q])?;
        let swapped = tape.permute(split, &[0, 2, 1, 3])?;
        tape.reshape(swapped, vec![a, p, c * q])
    };
    let qh = fold(tape, qs, e)?;
    let kh = fold(tape, ks, e)?;
    let vh = fold(tape, vs, hv)?;

    let logits = tape.matmul_nt(qh, kh)?;
    let scaled = tape.scale(logits, S::one() / S::from_usize_c(e * q).sqrt());
    let weights = tape.softmax_last(scaled);
    let mixed = tape.matmul(weights, vh)?;

    // Undo the folding: [a, P, hv*Q] -> [n, P, Q].
    let split = tape.reshape(mixed, vec![a, p, hv, q])?;
    let swapped = tape.permute(split, &[0, 2, 1, 3])?;
    let merged = tape.reshape(swapped, vec![n, p, q])?;

    let (wo, bo) = conv_params(tape, store, &format!("{prefix}.out"))?;
    let out = tape.conv1d(merged, wo, Some(bo), 1, 0, 1)?;
    tape.pop_scope();
    Ok(out)
}

/// One path: MSA, attention, channel layer norm, plus the residual.
/// `time_axis` transposes K and T around the whole path.
fn path_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    path: usize,
    x: TensorId,
    time_axis: bool,
    cfg: &SeparatorConfig,
) -> Result<TensorId> {
    tape.push_scope(&format!("path{path}"));
    let u = if time_axis { tape.permute(x, &[0, 2, 1])? } else { x };
    let m = msa_forward(tape, store, &format!("separator.path{path}.msa"), u, cfg)?;
    let att = f3a_forward(tape, store, &format!("separator.path{path}.attn"), m, cfg)?;
    let gamma = tape.param(store, &format!("separator.path{path}.norm.gamma"))?;
    let beta = tape.param(store, &format!("separator.path{path}.norm.beta"))?;
    let normed = tape.layer_norm_ch(att, gamma, beta)?;
    let back = if time_axis { tape.permute(normed, &[0, 2, 1])? } else { normed };
    let out = tape.add(back, x)?;
    tape.pop_scope();
    Ok(out)
}

/// One block: both configured paths in order.
pub fn ffi_block<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    x: TensorId,
    cfg: &SeparatorConfig,
) -> Result<TensorId> {
    let first = path_forward(tape, store, 0, x, cfg.path_order.time_axis(0), cfg)?;
    path_forward(tape, store, 1, first, cfg.path_order.time_axis(1), cfg)
}

/// The full stack: `cfg.b` applications of the shared block. In inference
/// mode, intermediates of finished blocks are freed as the stack advances.
pub fn separate<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParameterStore<S>,
    z: TensorId,
    cfg: &SeparatorConfig,
) -> Result<TensorId> {
    cfg.validate()?;
    let shape = tape.shape(z).to_vec();
    if shape.len() != 3 || shape[0] != cfg.n {
        return invalid_arg(format!("separator expects [{}, K, T], got {shape:?}", cfg.n));
    }
    tape.push_scope("separator");
    let mut cur = z;
    for _ in 0..cfg.b {
        let mark = tape.mark();
        cur = ffi_block(tape, store, cur, cfg)?;
        tape.reclaim_since(mark, &[cur]);
    }
    tape.pop_scope();
    Ok(cur)
}
