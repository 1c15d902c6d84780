//! Coarse-grained disentanglement: sampled augmentation pipelines, trainable
//! convex mixing with the original images, and the linear-kernel HSIC
//! dependence penalty between the mixed views.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::ImageDims;
use crate::error::{Error, Result};
use crate::numerics::{gemm, logistic, Tape, Tensor, Var};

pub const CROP_FRACTIONS: [f64; 5] = [0.6, 0.7, 0.8, 0.9, 1.0];
pub const JITTER_SCALES: [f64; 3] = [0.5, 1.0, 1.5];
pub const JITTER_OFFSETS: [f64; 3] = [-0.2, 0.0, 0.2];
pub const NOISE_SIGMAS: [f64; 4] = [0.025, 0.05, 0.075, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Start,
    Center,
    End,
}

impl Anchor {
    const ALL: [Anchor; 3] = [Anchor::Start, Anchor::Center, Anchor::End];

    fn offset(self, full: f64, window: f64) -> f64 {
        match self {
            Anchor::Start => 0.0,
            Anchor::Center => (full - window) / 2.0,
            Anchor::End => full - window,
        }
    }
}

/// One augmentation step. Parameters live on fixed grids so that the space of
/// distinct pipelines is finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationOp {
    Rotate90 {
        quarter_turns: u8,
    },
    HorizontalFlip,
    CropResize {
        fraction: f64,
        row_anchor: Anchor,
        col_anchor: Anchor,
    },
    /// Per-channel `x * scale + offset` for up to three channels.
    ChannelJitter {
        scale: [f64; 3],
        offset: [f64; 3],
    },
    /// Additive Gaussian noise; each image draws from its own sub-seed.
    PixelNoise {
        sigma: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum OpKind {
    CropResize,
    Rotate90,
    HorizontalFlip,
    ChannelJitter,
    PixelNoise,
}

impl OpKind {
    const ALL: [OpKind; 5] = [
        OpKind::CropResize,
        OpKind::Rotate90,
        OpKind::HorizontalFlip,
        OpKind::ChannelJitter,
        OpKind::PixelNoise,
    ];

    fn variants(self) -> u128 {
        match self {
            OpKind::Rotate90 => 3,
            OpKind::HorizontalFlip => 1,
            OpKind::CropResize => (CROP_FRACTIONS.len() * Anchor::ALL.len() * Anchor::ALL.len()) as u128,
            OpKind::ChannelJitter => ((JITTER_SCALES.len() * JITTER_OFFSETS.len()) as u128).pow(3),
            OpKind::PixelNoise => NOISE_SIGMAS.len() as u128,
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> AugmentationOp {
        match self {
            OpKind::Rotate90 => AugmentationOp::Rotate90 {
                quarter_turns: rng.gen_range(1..=3),
            },
            OpKind::HorizontalFlip => AugmentationOp::HorizontalFlip,
            OpKind::CropResize => AugmentationOp::CropResize {
                fraction: *CROP_FRACTIONS.choose(rng).unwrap(),
                row_anchor: *Anchor::ALL.choose(rng).unwrap(),
                col_anchor: *Anchor::ALL.choose(rng).unwrap(),
            },
            OpKind::ChannelJitter => {
                let mut scale = [1.0; 3];
                let mut offset = [0.0; 3];
                for ch in 0..3 {
                    scale[ch] = *JITTER_SCALES.choose(rng).unwrap();
                    offset[ch] = *JITTER_OFFSETS.choose(rng).unwrap();
                }
                AugmentationOp::ChannelJitter { scale, offset }
            }
            OpKind::PixelNoise => AugmentationOp::PixelNoise {
                sigma: *NOISE_SIGMAS.choose(rng).unwrap(),
            },
        }
    }
}

impl AugmentationOp {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AugmentationOp::Rotate90 { quarter_turns } => quarter_turns <= 3,
            AugmentationOp::HorizontalFlip => true,
            AugmentationOp::CropResize { fraction, .. } => (0.6..=1.0).contains(&fraction),
            AugmentationOp::ChannelJitter { scale, offset } => {
                scale.iter().all(|s| (0.5..=1.5).contains(s)) && offset.iter().all(|o| (-0.2..=0.2).contains(o))
            }
            AugmentationOp::PixelNoise { sigma } => (0.0..=0.1).contains(&sigma),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("augmentation parameters out of range: {self:?}")))
        }
    }

    /// Canonical text used for distinctness and hashing.
    fn key(&self) -> String {
        format!("{self:?}")
    }

    fn apply(&self, img: &[f64], dims: ImageDims, noise_seed: u64) -> Vec<f64> {
        match *self {
            AugmentationOp::Rotate90 { quarter_turns } => {
                let mut cur = img.to_vec();
                for _ in 0..quarter_turns {
                    cur = rotate_once(&cur, dims);
                }
                cur
            }
            AugmentationOp::HorizontalFlip => {
                let mut out = vec![0.0; img.len()];
                for r in 0..dims.height {
                    for c in 0..dims.width {
                        for ch in 0..dims.channels {
                            out[dims.index(r, c, ch)] = img[dims.index(r, dims.width - 1 - c, ch)];
                        }
                    }
                }
                out
            }
            AugmentationOp::CropResize {
                fraction,
                row_anchor,
                col_anchor,
            } => crop_resize(img, dims, fraction, row_anchor, col_anchor),
            AugmentationOp::ChannelJitter { scale, offset } => img
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let ch = (i % dims.channels) % 3;
                    (p * scale[ch] + offset[ch]).clamp(0.0, 1.0)
                })
                .collect(),
            AugmentationOp::PixelNoise { sigma } => {
                let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
                img.iter()
                    .map(|&p| {
                        let z: f64 = rng.sample(StandardNormal);
                        (p + sigma * z).clamp(0.0, 1.0)
                    })
                    .collect()
            }
        }
    }
}

impl fmt::Display for AugmentationOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentationOp::Rotate90 { quarter_turns } => write!(f, "rotate90(x{quarter_turns})"),
            AugmentationOp::HorizontalFlip => write!(f, "hflip"),
            AugmentationOp::CropResize {
                fraction,
                row_anchor,
                col_anchor,
            } => write!(f, "crop({fraction}, {row_anchor:?}/{col_anchor:?})"),
            AugmentationOp::ChannelJitter { scale, offset } => {
                write!(f, "jitter(scale={scale:?}, offset={offset:?})")
            }
            AugmentationOp::PixelNoise { sigma } => write!(f, "noise({sigma})"),
        }
    }
}

/// Quarter turn clockwise. Requires a square image.
fn rotate_once(img: &[f64], dims: ImageDims) -> Vec<f64> {
    let n = dims.height;
    let mut out = vec![0.0; img.len()];
    for r in 0..n {
        for c in 0..n {
            for ch in 0..dims.channels {
                out[dims.index(c, n - 1 - r, ch)] = img[dims.index(r, c, ch)];
            }
        }
    }
    out
}

fn crop_resize(img: &[f64], dims: ImageDims, fraction: f64, ra: Anchor, ca: Anchor) -> Vec<f64> {
    let (h, w) = (dims.height as f64, dims.width as f64);
    let (ch_, cw) = (fraction * h, fraction * w);
    let (top, left) = (ra.offset(h, ch_), ca.offset(w, cw));
    let sample = |y: f64, x: f64, k: usize| -> f64 {
        let y = y.clamp(0.0, h - 1.0);
        let x = x.clamp(0.0, w - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(dims.height - 1), (x0 + 1).min(dims.width - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let p = |r, c| img[dims.index(r, c, k)];
        (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1))
    };
    let mut out = vec![0.0; img.len()];
    for r in 0..dims.height {
        let y = top + (r as f64 + 0.5) * ch_ / h - 0.5;
        for c in 0..dims.width {
            let x = left + (c as f64 + 0.5) * cw / w - 0.5;
            for k in 0..dims.channels {
                out[dims.index(r, c, k)] = sample(y, x, k).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// SplitMix64 finalizer, used to derive independent per-image seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPipeline {
    pub ops: Vec<AugmentationOp>,
    pub seed: u64,
}

impl AugmentationPipeline {
    pub fn new(ops: Vec<AugmentationOp>, seed: u64) -> Result<Self> {
        if ops.is_empty() || ops.len() > 3 {
            return Err(Error::config(format!("pipeline length {} outside 1..=3", ops.len())));
        }
        for op in &ops {
            op.validate()?;
        }
        Ok(Self { ops, seed })
    }

    pub fn describe(&self) -> String {
        self.ops
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" -> ")
    }

    fn key(&self) -> String {
        self.ops.iter().map(AugmentationOp::key).collect::<Vec<_>>().join("|")
    }

    /// Applies every op in order to each image (row) of `x`.
    pub fn apply(&self, x: &Tensor, dims: ImageDims) -> Result<Tensor> {
        apply_pipeline(self, x, dims)
    }
}

/// Number of distinct pipelines `sample_pipelines` can produce.
pub fn pipeline_space_size() -> u128 {
    // pipelines are 1..=3 ops of distinct kinds in canonical order: the sum of
    // the elementary symmetric polynomials e1..e3 of the per-kind variant counts
    let v: Vec<u128> = OpKind::ALL.iter().map(|k| k.variants()).collect();
    let mut total = 0;
    for mask in 1u32..(1 << v.len()) {
        if (1..=3).contains(&mask.count_ones()) {
            total += (0..v.len())
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| v[i])
                .product::<u128>();
        }
    }
    total
}

/// Draws `k` pairwise-distinct pipelines; deterministic in `seed`.
pub fn sample_pipelines(k: usize, seed: u64) -> Result<Vec<AugmentationPipeline>> {
    if k == 0 {
        return Err(Error::config("need at least one pipeline"));
    }
    let space = pipeline_space_size();
    if k as u128 > space {
        return Err(Error::config(format!(
            "requested {k} distinct pipelines but only {space} exist at the configured granularity"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(k);
    let mut attempts = 0usize;
    while out.len() < k {
        attempts += 1;
        if attempts > 1000 * k + 1000 {
            return Err(Error::config(format!(
                "could not draw {k} distinct pipelines after {attempts} attempts"
            )));
        }
        let len = rng.gen_range(1..=3);
        let mut kinds: Vec<OpKind> = OpKind::ALL.choose_multiple(&mut rng, len).copied().collect();
        kinds.sort();
        let ops: Vec<AugmentationOp> = kinds.iter().map(|kd| kd.sample(&mut rng)).collect();
        let pipeline = AugmentationPipeline { ops, seed: rng.gen() };
        if seen.insert(pipeline.key()) {
            out.push(pipeline);
        }
    }
    Ok(out)
}

/// Rows used to score candidate pipelines against each other.
pub const SELECTION_ROWS: usize = 128;

/// `H X X^T H / ||H X X^T H||_F`, or `None` for a view with no variation.
fn normalized_centered_gram(v: &Tensor) -> Result<Option<Vec<f64>>> {
    let (n, d) = v.dims2()?;
    let mut g = vec![0.0; n * n];
    gemm(n, d, n, v.data(), false, v.data(), true, &mut g, 0.0);
    // double centering without forming H
    let row_means: Vec<f64> = g.chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] += grand - row_means[i] - row_means[j];
        }
    }
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Ok(None);
    }
    g.iter_mut().for_each(|x| *x /= norm);
    Ok(Some(g))
}

/// Picks `k` pipelines from a pool of `pool` sampled candidates whose views
/// of `x` are least dependent: normalized linear HSIC between centered Grams,
/// minimized first over pairs, then greedily by worst-case dependence on the
/// pipelines already chosen. Pixel noise is ignored while scoring. A pool no larger than `k` reduces to
/// [`sample_pipelines`].
pub fn select_pipelines(
    x: &Tensor,
    dims: ImageDims,
    k: usize,
    pool: usize,
    seed: u64,
) -> Result<Vec<AugmentationPipeline>> {
    let candidates = sample_pipelines(k.max(pool), seed)?;
    if pool <= k {
        return Ok(candidates.into_iter().take(k).collect());
    }
    let (n, _) = x.dims2()?;
    let step = (n / SELECTION_ROWS).max(1);
    let rows: Vec<usize> = (0..n).step_by(step).take(SELECTION_ROWS).collect();
    if rows.len() < 2 {
        return Err(Error::Contract("pipeline selection needs at least two samples".into()));
    }
    let sub = x.select_rows(&rows);
    // pixel noise would make any view look independent of every other, so
    // candidates are scored on their deterministic ops only
    let grams: Vec<Option<Vec<f64>>> = candidates
        .iter()
        .map(|p| {
            let ops = p
                .ops
                .iter()
                .filter(|op| !matches!(op, AugmentationOp::PixelNoise { .. }))
                .cloned()
                .collect();
            let view = apply_pipeline(&AugmentationPipeline { ops, seed: p.seed }, &sub, dims)?;
            normalized_centered_gram(&view)
        })
        .collect::<Result<_>>()?;
    let usable: Vec<usize> = (0..candidates.len()).filter(|&i| grams[i].is_some()).collect();
    if usable.len() < k {
        return Err(Error::config(format!(
            "only {} of {} candidate pipelines vary",
            usable.len(),
            pool
        )));
    }
    let dep = |a: usize, b: usize| -> f64 {
        let (ga, gb) = (grams[a].as_ref().unwrap(), grams[b].as_ref().unwrap());
        ga.iter().zip(gb).map(|(x, y)| x * y).sum::<f64>().abs()
    };
    let mut chosen: Vec<usize> = if k == 1 {
        vec![usable[0]]
    } else {
        let mut best = (f64::INFINITY, 0, 0);
        for (ai, &a) in usable.iter().enumerate() {
            for &b in &usable[ai + 1..] {
                let v = dep(a, b);
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
        vec![best.1, best.2]
    };
    while chosen.len() < k {
        let next = usable
            .iter()
            .copied()
            .filter(|c| !chosen.contains(c))
            .map(|c| (chosen.iter().map(|&s| dep(c, s)).fold(0.0, f64::max), c))
            .fold((f64::INFINITY, usize::MAX), |b, cur| if cur.0 < b.0 { cur } else { b })
            .1;
        chosen.push(next);
    }
    Ok(chosen.into_iter().map(|i| candidates[i].clone()).collect())
}

pub fn apply_pipeline(p: &AugmentationPipeline, x: &Tensor, dims: ImageDims) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if d != dims.len() {
        return Err(Error::dim(
            "apply_pipeline",
            &[n, d],
            &[dims.height, dims.width, dims.channels],
        ));
    }
    let rotates = p
        .ops
        .iter()
        .any(|op| matches!(op, AugmentationOp::Rotate90 { quarter_turns } if *quarter_turns % 2 == 1));
    if rotates && dims.height != dims.width {
        return Err(Error::dim(
            "rotate90",
            &[dims.height, dims.width],
            &[dims.width, dims.height],
        ));
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let mut img = x.row(i).to_vec();
        for (j, op) in p.ops.iter().enumerate() {
            let sub = mix_seed(mix_seed(p.seed, j as u64), i as u64);
            img = op.apply(&img, dims, sub);
        }
        data.extend(img);
    }
    Tensor::new(&[n, d], data)
}

/// Trainable mixing weights `w_k = logistic(raw_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingWeights {
    pub raw: Tensor,
}

impl MixingWeights {
    /// All weights start at 0.5.
    pub fn new(k: usize) -> Self {
        Self {
            raw: Tensor::zeros(&[k]),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.raw.data().iter().map(|&r| logistic(r)).collect()
    }
}

/// `w * x + (1 - w) * x_aug` for a scalar weight node `w`.
pub fn mix(tape: &mut Tape, x: Var, x_aug: Var, w: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_aug) {
        return Err(Error::dim("mix", tape.shape(x), tape.shape(x_aug)));
    }
    let diff = tape.sub(x, x_aug)?;
    let scaled = tape.mul(w, diff)?;
    tape.add(x_aug, scaled)
}

/// [`mix`] with the weight given by its unconstrained parameter.
pub fn mix_raw(tape: &mut Tape, x: Var, x_aug: Var, raw: Var) -> Result<Var> {
    let w = tape.logistic(raw);
    mix(tape, x, x_aug, w)
}

/// Linear-kernel HSIC, `(N-1)^2 tr(G_a H G_b H)` with `G = X X^T` and the
/// `N x N` centering matrix `H`.
pub fn hsic(tape: &mut Tape, xa: Var, xb: Var) -> Result<Var> {
    let (na, _) = dims2(tape, xa)?;
    let (nb, _) = dims2(tape, xb)?;
    if na != nb {
        return Err(Error::dim("hsic", tape.shape(xa), tape.shape(xb)));
    }
    if na < 2 {
        return Err(Error::Contract("hsic needs at least two samples".into()));
    }
    let n = na;
    let h = centering_matrix(n);
    let h = tape.constant(&h);
    let ga = gram(tape, xa)?;
    let gb = gram(tape, xb)?;
    let gah = tape.matmul(ga, h)?;
    let gbh = tape.matmul(gb, h)?;
    let prod = tape.matmul(gah, gbh)?;
    let tr = tape.trace(prod)?;
    let factor = ((n - 1) * (n - 1)) as f64;
    Ok(tape.scale(tr, factor))
}

fn dims2(tape: &Tape, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::dim("hsic", other, &[0, 0])),
    }
}

fn gram(tape: &mut Tape, x: Var) -> Result<Var> {
    let xt = tape.transpose(x)?;
    tape.matmul(x, xt)
}

pub fn centering_matrix(n: usize) -> Tensor {
    let mut h = Tensor::full(&[n, n], -1.0 / n as f64);
    for i in 0..n {
        h.data_mut()[i * n + i] += 1.0;
    }
    h
}

/// HSIC of two plain batches.
pub fn hsic_value(xa: &Tensor, xb: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(xa), tape.constant(xb));
    let v = hsic(&mut tape, a, b)?;
    Ok(tape.item(v))
}

/// Sum of HSIC over ordered pairs `k != k'` of mixed batches; zero for a single batch.
pub fn coarse_loss(tape: &mut Tape, batches: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for a in 0..batches.len() {
        for b in (a + 1)..batches.len() {
            let h = hsic(tape, batches[a], batches[b])?;
            // HSIC is symmetric, so (a, b) and (b, a) contribute equally
            let both = tape.scale(h, 2.0);
            total = Some(match total {
                Some(t) => tape.add(t, both)?,
                None => both,
            });
        }
    }
    Ok(total.unwrap_or_else(|| tape.scalar(0.0)))
}
