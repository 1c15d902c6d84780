//! Fine-grained disentanglement networks: a shared MLP encoder producing
//! factorized Gaussian posteriors, Gumbel-softmax aspect assignments and a
//! decoder conditioned on the aspect vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::augment::MixingWeights;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            weight: Tensor::new(&[inputs, outputs], data).expect("sized above"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Fully connected net with tanh hidden activations and a linear last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            layers: sizes.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs()
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (bind(tape, &l.weight, trainable), bind(tape, &l.bias, trainable)))
                .collect(),
        }
    }
}

fn bind(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.param(t)
    } else {
        tape.constant(t)
    }
}

/// An [`Mlp`] registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Shared `f_nn: R^d -> R^{2 d_z}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub net: Mlp,
    pub latent_dim: usize,
}

/// Shared decoder `R^{d_z + M} -> R^d`, logistic output.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub net: Mlp,
    pub num_aspects: usize,
}

/// Per-slot aspect logits `log s_{k,m}` (stored unconstrained) and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectLogits {
    /// `K x M`
    pub raw: Tensor,
    pub tau: f64,
}

impl AspectLogits {
    pub fn new(k: usize, m: usize, tau: f64) -> Self {
        Self {
            raw: Tensor::zeros(&[k, m]),
            tau,
        }
    }

    /// `s = exp(raw)`
    pub fn strengths(&self) -> Vec<f64> {
        self.raw.data().iter().map(|r| r.exp()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: [usize; 2],
    pub num_representations: usize,
    pub num_aspects: usize,
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub aspect: AspectLogits,
    pub mixing: MixingWeights,
}

impl ModelParams {
    pub fn new(shape: ModelShape, tau: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h1, h2] = shape.hidden;
        let enc = Mlp::new(&[shape.input_dim, h1, h2, 2 * shape.latent_dim], &mut rng);
        let dec = Mlp::new(
            &[shape.latent_dim + shape.num_aspects, h2, h1, shape.input_dim],
            &mut rng,
        );
        Self {
            encoder: EncoderParams {
                net: enc,
                latent_dim: shape.latent_dim,
            },
            decoder: DecoderParams {
                net: dec,
                num_aspects: shape.num_aspects,
            },
            aspect: AspectLogits::new(shape.num_representations, shape.num_aspects, tau),
            mixing: MixingWeights::new(shape.num_representations),
        }
    }

    pub fn shape(&self) -> ModelShape {
        let enc = &self.encoder.net.layers;
        ModelShape {
            input_dim: self.encoder.net.input_dim(),
            latent_dim: self.encoder.latent_dim,
            hidden: [enc[0].outputs(), enc[1].outputs()],
            num_representations: self.aspect.raw.shape()[0],
            num_aspects: self.decoder.num_aspects,
        }
    }

    /// Stable ordering shared by [`ModelParams::tensors_mut`] and [`BoundModel::vars`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.encoder.net.tensors().collect();
        out.extend(self.decoder.net.tensors());
        out.push(&self.aspect.raw);
        out.push(&self.mixing.raw);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.encoder.net.tensors_mut().collect();
        out.extend(self.decoder.net.tensors_mut());
        out.push(&mut self.aspect.raw);
        out.push(&mut self.mixing.raw);
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        BoundModel {
            encoder: self.encoder.net.bind(tape, trainable),
            decoder: self.decoder.net.bind(tape, trainable),
            aspect: bind(tape, &self.aspect.raw, trainable),
            mixing: bind(tape, &self.mixing.raw, trainable),
            latent_dim: self.encoder.latent_dim,
            tau: self.aspect.tau,
        }
    }

    /// Wraps tape variables given in [`ModelParams::tensors`] order, for
    /// differentiating with respect to parameters registered elsewhere.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.tensors().len();
        if vars.len() != expected {
            return Err(Error::dim("bind_vars", &[expected], &[vars.len()]));
        }
        let enc = self.encoder.net.layers.len();
        let dec = self.decoder.net.layers.len();
        let pairs = |s: &[Var]| BoundMlp {
            layers: s.chunks(2).map(|p| (p[0], p[1])).collect(),
        };
        Ok(BoundModel {
            encoder: pairs(&vars[..2 * enc]),
            decoder: pairs(&vars[2 * enc..2 * (enc + dec)]),
            aspect: vars[expected - 2],
            mixing: vars[expected - 1],
            latent_dim: self.encoder.latent_dim,
            tau: self.aspect.tau,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Model parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: BoundMlp,
    pub decoder: BoundMlp,
    pub aspect: Var,
    pub mixing: Var,
    latent_dim: usize,
    tau: f64,
}

impl BoundModel {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.encoder.vars().collect();
        out.extend(self.decoder.vars());
        out.push(self.aspect);
        out.push(self.mixing);
        out
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// `q(z | x) = N(mu, diag(sigma^2))`, with `sigma = sigma0 * exp(-b / 2)`.
#[derive(Debug, Clone, Copy)]
pub struct GaussianPosterior {
    pub mu: Var,
    pub sigma: Var,
    pub sigma0: f64,
}

pub fn encode(
    tape: &mut Tape,
    encoder: &BoundMlp,
    x: Var,
    latent_dim: usize,
    sigma0: f64,
) -> Result<GaussianPosterior> {
    if sigma0 <= 0.0 {
        return Err(Error::config(format!("sigma0 must be positive, got {sigma0}")));
    }
    let out = encoder.forward(tape, x)?;
    if tape.shape(out)[1] != 2 * latent_dim {
        return Err(Error::dim("encode", tape.shape(out), &[2 * latent_dim]));
    }
    let mu = tape.slice_cols(out, 0, latent_dim)?;
    let b = tape.slice_cols(out, latent_dim, 2 * latent_dim)?;
    let half = tape.scale(b, -0.5);
    let e = tape.exp(half);
    let sigma = tape.scale(e, sigma0);
    Ok(GaussianPosterior { mu, sigma, sigma0 })
}

/// Reparameterized draw `mu + sigma * noise`.
pub fn sample_latent(tape: &mut Tape, post: &GaussianPosterior, noise: &Tensor) -> Result<Var> {
    if tape.shape(post.mu) != noise.shape() {
        return Err(Error::dim("sample_latent", tape.shape(post.mu), noise.shape()));
    }
    let eps = tape.constant(noise);
    let spread = tape.mul(post.sigma, eps)?;
    tape.add(post.mu, spread)
}

/// Relaxed one-hot `c^k = softmax_m((raw_{k,m} + g_m) / tau)` as a `1 x M` row.
pub fn sample_aspect(tape: &mut Tape, raw: Var, k: usize, tau: f64, gumbel: &[f64]) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let (reps, m) = match tape.shape(raw) {
        [r, c] => (*r, *c),
        other => return Err(Error::dim("sample_aspect", other, &[0, 0])),
    };
    if k >= reps || gumbel.len() != m {
        return Err(Error::dim("sample_aspect", &[reps, m], &[k, gumbel.len()]));
    }
    let mut select = vec![0.0; reps];
    select[k] = 1.0;
    let select = tape.constant_from(&[1, reps], select)?;
    let row = tape.matmul(select, raw)?;
    let g = tape.constant_from(&[1, m], gumbel.to_vec())?;
    let perturbed = tape.add(row, g)?;
    let logits = tape.scale(perturbed, 1.0 / tau);
    tape.softmax(logits, 1)
}

/// Reconstruction in `(0, 1)` from latents and a broadcast aspect row.
pub fn decode(tape: &mut Tape, decoder: &BoundMlp, z: Var, c: Var) -> Result<Var> {
    let n = match tape.shape(z) {
        [n, _] => *n,
        other => return Err(Error::dim("decode", other, &[0, 0])),
    };
    let cs = tape.broadcast_rows(c, n)?;
    let input = tape.concat_cols(z, cs)?;
    let out = decoder.forward(tape, input)?;
    Ok(tape.logistic(out))
}

/// Standard Gumbel draws `-ln(-ln u)`.
pub fn gumbel_noise(rng: &mut impl Rng, m: usize) -> Vec<f64> {
    (0..m)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

pub fn gaussian_noise(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("sized")
}

/// Pre-drawn randomness for one representation in one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchNoise {
    pub gaussian: Tensor,
    pub gumbel: Vec<f64>,
}

impl BranchNoise {
    pub fn draw(rng: &mut impl Rng, batch: usize, latent_dim: usize, num_aspects: usize) -> Self {
        Self {
            gaussian: gaussian_noise(rng, &[batch, latent_dim]),
            gumbel: gumbel_noise(rng, num_aspects),
        }
    }

    pub fn zeros(batch: usize, latent_dim: usize, num_aspects: usize) -> Self {
        Self {
            gaussian: Tensor::zeros(&[batch, latent_dim]),
            gumbel: vec![0.0; num_aspects],
        }
    }
}
