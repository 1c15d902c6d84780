//! Variational EM: E-steps optimize every disentanglement parameter with the
//! cluster term frozen, M-steps reassign latents to fixed centers.

mod adam;
mod checkpoint;
mod clustering;
mod config;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub use adam::OptimizerState;
pub use checkpoint::Checkpoint;
pub use clustering::{
    assign, cluster_loss, cluster_loss_value, kmeans_init, stopping_criterion, Assignments, ClusterState,
};
pub(crate) use config::hex;
pub use config::{RunConfig, DEFAULT_AUG_SEED, DEFAULT_PIPELINE_POOL};

use crate::augment::{coarse_loss, mix_raw, mix_seed, select_pipelines, AugmentationPipeline};
use crate::datasets::{ImageDims, MultiClusteringDataset};
use crate::error::{Error, Result};
use crate::losses::{
    fine_loss, kl_aspect, kl_gaussian, recon_loglik_with, BranchBreakdown, BranchTerms, FineLossBreakdown,
};
use crate::model::{decode, encode, sample_aspect, sample_latent, BoundModel, BranchNoise, ModelParams, ModelShape};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    E,
    M,
}

/// One training-log record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub coarse: f64,
    pub branches: Vec<BranchBreakdown>,
    pub cluster: f64,
    pub total: f64,
    pub u_z: f64,
    pub u_c: f64,
    pub mixing_weights: Vec<f64>,
    pub stopping: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedArtifacts {
    pub params: ModelParams,
    pub clusters: Option<ClusterState>,
    pub pipelines: Vec<AugmentationPipeline>,
    pub log: Vec<EpochLog>,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

impl TrainedArtifacts {
    /// Predicted label vectors, one per representation.
    pub fn predicted(&self) -> Option<Vec<Vec<usize>>> {
        self.clusters
            .as_ref()
            .map(|c| c.assignments.iter().map(|a| a.labels.clone()).collect())
    }

    pub fn checkpoint(&self, config: &RunConfig, dims: ImageDims) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            dims,
            params: self.params.clone(),
            pipelines: self.pipelines.clone(),
            centers: self.clusters.as_ref().map(|c| c.centers.clone()),
        }
    }
}

/// SHA-256 over the bit patterns of every model parameter.
pub fn parameter_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    for t in params.tensors() {
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn cluster_hash(state: &ClusterState) -> String {
    let mut h = Sha256::new();
    for w in &state.centers {
        for v in w.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    for a in &state.assignments {
        for &l in &a.labels {
            h.update((l as u64).to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn model_shape(config: &RunConfig, input_dim: usize) -> ModelShape {
    ModelShape {
        input_dim,
        latent_dim: config.latent_dim,
        hidden: config.hidden,
        num_representations: config.k,
        num_aspects: config.m,
    }
}

/// Augmented copies of the full dataset, one per pipeline. `epoch > 0` with
/// resampling on re-seeds the per-image randomness.
pub fn augment_views(
    dataset: &MultiClusteringDataset,
    pipelines: &[AugmentationPipeline],
    epoch: usize,
    resample: bool,
) -> Result<Vec<Tensor>> {
    pipelines
        .iter()
        .map(|p| {
            if resample && epoch > 0 {
                let mut q = p.clone();
                q.seed = mix_seed(p.seed, epoch as u64);
                q.apply(dataset.images(), dataset.dims())
            } else {
                p.apply(dataset.images(), dataset.dims())
            }
        })
        .collect()
}

fn pick(tape: &mut Tape, v: Var, index: usize) -> Result<Var> {
    let n = tape.value(v).len();
    let mut sel = vec![0.0; n];
    sel[index] = 1.0;
    let sel = tape.constant_from(tape.shape(v).to_vec().as_slice(), sel)?;
    let prod = tape.mul(v, sel)?;
    Ok(tape.sum(prod))
}

/// Per-representation inputs `X^k`; the raw data itself when the coarse stage is off.
fn mixed_inputs(tape: &mut Tape, config: &RunConfig, x: Var, views: &[Tensor], mixing: Var) -> Result<Vec<Var>> {
    (0..config.k)
        .map(|k| {
            if !config.coarse {
                return Ok(x);
            }
            let a = tape.constant(&views[k]);
            let raw = pick(tape, mixing, k)?;
            mix_raw(tape, x, a, raw)
        })
        .collect()
}

/// Everything one mini-batch loss needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct BatchData<'a> {
    /// Raw rows of the batch.
    pub x: &'a Tensor,
    /// The same rows of each augmented view.
    pub views: &'a [Tensor],
    /// Reparameterization noise, one entry per representation.
    pub noise: &'a [BranchNoise],
    /// Frozen centers and batch assignments; `None` leaves out the cluster term.
    pub clusters: Option<(&'a [Tensor], &'a [Assignments])>,
    pub u_z: f64,
    pub u_c: f64,
}

/// Tape handles of one mini-batch objective.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub coarse: Var,
    pub cluster: Var,
    pub fine: FineLossBreakdown,
}

/// Coarse (HSIC) + fine (capacity-controlled ELBO) + cluster loss of one batch.
pub fn batch_loss(tape: &mut Tape, bound: &BoundModel, batch: &BatchData<'_>, config: &RunConfig) -> Result<BatchLoss> {
    if batch.noise.len() != config.k || (config.coarse && batch.views.len() != config.k) {
        return Err(Error::dim("batch_loss", &[config.k], &[batch.noise.len()]));
    }
    let b = batch.x.shape()[0];
    let x = tape.constant(batch.x);
    let mixed = mixed_inputs(tape, config, x, batch.views, bound.mixing)?;
    let coarse = if config.coarse && b >= 2 {
        coarse_loss(tape, &mixed)?
    } else {
        tape.scalar(0.0)
    };
    let mut terms = Vec::with_capacity(config.k);
    let mut cluster = tape.scalar(0.0);
    for (k, (&xk, noise)) in mixed.iter().zip(batch.noise).enumerate() {
        let post = encode(tape, &bound.encoder, xk, config.latent_dim, config.sigma0)?;
        let z = sample_latent(tape, &post, &noise.gaussian)?;
        let c = sample_aspect(tape, bound.aspect, k, config.tau, &noise.gumbel)?;
        let xhat = decode(tape, &bound.decoder, z, c)?;
        terms.push(BranchTerms {
            recon: recon_loglik_with(tape, xk, xhat, config.likelihood)?,
            kl_z: kl_gaussian(tape, &post)?,
            kl_c: kl_aspect(tape, c)?,
        });
        if let Some((centers, assignments)) = batch.clusters {
            let l = cluster_loss(tape, z, &centers[k], &assignments[k])?;
            cluster = tape.add(cluster, l)?;
        }
    }
    let (fine_total, fine) = fine_loss(tape, &terms, config.beta, batch.u_z, batch.u_c)?;
    let sum = tape.add(coarse, fine_total)?;
    let total = tape.add(sum, cluster)?;
    Ok(BatchLoss {
        total,
        coarse,
        cluster,
        fine,
    })
}

fn finite(value: f64, term: impl Into<String>, epoch: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            epoch,
        })
    }
}

/// Splits a permutation into batches, folding a trailing singleton into its neighbour.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().unwrap().len() < 2 {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Mutable training state threaded through E- and M-steps.
pub struct EStepInputs<'a> {
    pub data: &'a Tensor,
    pub views: &'a [Tensor],
    pub clusters: Option<&'a ClusterState>,
    pub config: &'a RunConfig,
    pub epoch: usize,
}

/// One pass over shuffled mini-batches minimizing coarse + fine + cluster loss.
pub fn e_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    inputs: &EStepInputs<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<EpochLog> {
    let EStepInputs {
        data,
        views,
        clusters,
        config,
        epoch,
    } = *inputs;
    let started = Instant::now();
    let n = data.shape()[0];
    let u_z = config.u_z_schedule()?.current(epoch);
    let u_c = config.u_c_schedule()?.current(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let use_cluster = config.cluster_loss && clusters.is_some();

    let k_count = config.k;
    let mut acc_branches = vec![
        BranchBreakdown {
            recon: 0.0,
            kl_z: 0.0,
            kl_c: 0.0,
            beta_k: 0.0
        };
        k_count
    ];
    let (mut acc_coarse, mut acc_cluster, mut acc_total) = (0.0, 0.0, 0.0);
    let batch_list = batches(&order, config.batch_size.min(n.max(2)));
    for rows in &batch_list {
        let b = rows.len();
        let x = data.select_rows(rows);
        let batch_views: Vec<Tensor> = if config.coarse {
            views.iter().map(|v| v.select_rows(rows)).collect()
        } else {
            Vec::new()
        };
        let noise: Vec<BranchNoise> = (0..k_count)
            .map(|_| BranchNoise::draw(rng, b, config.latent_dim, config.m))
            .collect();
        let batch_assign: Option<Vec<Assignments>> = clusters
            .filter(|_| use_cluster)
            .map(|state| state.assignments.iter().map(|a| a.select(rows)).collect());
        let batch = BatchData {
            x: &x,
            views: &batch_views,
            noise: &noise,
            clusters: clusters
                .zip(batch_assign.as_deref())
                .map(|(state, a)| (state.centers.as_slice(), a)),
            u_z,
            u_c,
        };
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let BatchLoss {
            total,
            coarse,
            cluster: cluster_total,
            fine: breakdown,
        } = batch_loss(&mut tape, &bound, &batch, config)?;

        finite(tape.item(coarse), "coarse (HSIC)", epoch)?;
        for (k, br) in breakdown.branches.iter().enumerate() {
            finite(br.recon, format!("reconstruction[{k}]"), epoch)?;
            finite(br.kl_z, format!("kl_z[{k}]"), epoch)?;
            finite(br.kl_c, format!("kl_c[{k}]"), epoch)?;
        }
        finite(tape.item(cluster_total), "cluster", epoch)?;
        finite(tape.item(total), "total", epoch)?;

        tape.backward(total)?;
        let vars = bound.vars();
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect();
        if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                term: format!("gradient of parameter tensor {i}"),
                epoch,
            });
        }
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        opt.step(&mut params.tensors_mut(), &grad_refs)?;

        let w = b as f64 / n as f64;
        acc_coarse += w * tape.item(coarse);
        acc_cluster += w * tape.item(cluster_total);
        acc_total += w * tape.item(total);
        for (acc, br) in acc_branches.iter_mut().zip(&breakdown.branches) {
            acc.recon += w * br.recon;
            acc.kl_z += w * br.kl_z;
            acc.kl_c += w * br.kl_c;
            acc.beta_k += w * br.beta_k;
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite {
            term: "parameters after update".into(),
            epoch,
        });
    }
    Ok(EpochLog {
        epoch,
        phase: Phase::E,
        coarse: acc_coarse,
        branches: acc_branches,
        cluster: acc_cluster,
        total: acc_total,
        u_z,
        u_c,
        mixing_weights: params.mixing.weights(),
        stopping: None,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Noise-free posterior means `mu^k` for every row of the dataset.
pub fn encode_means(params: &ModelParams, data: &Tensor, views: &[Tensor], config: &RunConfig) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(data);
    let mixed = mixed_inputs(&mut tape, config, x, views, bound.mixing)?;
    mixed
        .iter()
        .map(|&xk| {
            let post = encode(&mut tape, &bound.encoder, xk, config.latent_dim, config.sigma0)?;
            Ok(tape.tensor(post.mu))
        })
        .collect()
}

fn kmeans_seed(config: &RunConfig, k: usize, round: usize) -> u64 {
    mix_seed(mix_seed(config.seed, 0x6b6d_6561_6e73), (k as u64) << 32 | round as u64)
}

/// Result of one M-step.
#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub state: ClusterState,
    pub stopping: f64,
    pub stop: bool,
}

/// Recomputes `mu^k`, initializes centers on the first call (or when a
/// re-initialization is due), and reassigns every row.
pub fn m_step(
    params: &ModelParams,
    data: &Tensor,
    views: &[Tensor],
    previous: Option<&ClusterState>,
    config: &RunConfig,
    round: usize,
) -> Result<MStepOutcome> {
    let means = encode_means(params, data, views, config)?;
    if let Some((k, _)) = means.iter().enumerate().find(|(_, m)| !m.is_finite()) {
        return Err(Error::NonFinite {
            term: format!("posterior mean[{k}]"),
            epoch: round,
        });
    }
    let reinit = config.reinit_every > 0 && round > 0 && round.is_multiple_of(config.reinit_every);
    let centers: Vec<Tensor> = match previous {
        Some(prev) if !reinit => prev.centers.clone(),
        _ => means
            .iter()
            .enumerate()
            .map(|(k, mu)| kmeans_init(mu, config.t, kmeans_seed(config, k, round)))
            .collect::<Result<_>>()?,
    };
    let assignments: Vec<Assignments> = means
        .iter()
        .zip(&centers)
        .map(|(mu, w)| assign(mu, w))
        .collect::<Result<_>>()?;
    let (stopping, stop) = match previous {
        Some(prev) => stopping_criterion(&assignments, &prev.assignments, config.delta)?,
        None => (1.0, false),
    };
    Ok(MStepOutcome {
        state: ClusterState {
            centers,
            assignments,
            prev_assignments: previous.map(|p| p.assignments.clone()),
        },
        stopping,
        stop,
    })
}

/// Assignments for a trained model: existing centers are reused, otherwise
/// k-means runs exactly as the first M-step would.
pub fn infer(
    params: &ModelParams,
    clusters: Option<&ClusterState>,
    dataset: &MultiClusteringDataset,
    pipelines: &[AugmentationPipeline],
    config: &RunConfig,
) -> Result<(ClusterState, Vec<Tensor>)> {
    let views = if config.coarse {
        augment_views(dataset, pipelines, 0, false)?
    } else {
        Vec::new()
    };
    let means = encode_means(params, dataset.images(), &views, config)?;
    let centers: Vec<Tensor> = match clusters {
        Some(c) => c.centers.clone(),
        None => means
            .iter()
            .enumerate()
            .map(|(k, mu)| kmeans_init(mu, config.t, kmeans_seed(config, k, 0)))
            .collect::<Result<_>>()?,
    };
    let assignments = means
        .iter()
        .zip(&centers)
        .map(|(mu, w)| assign(mu, w))
        .collect::<Result<_>>()?;
    Ok((
        ClusterState {
            centers,
            assignments,
            prev_assignments: None,
        },
        means,
    ))
}

/// Runs the EM schedule until the stopping rule fires or epochs run out.
/// A final M-step always follows the last E-step, so returned assignments
/// reflect the returned parameters.
pub fn train(config: &RunConfig, dataset: &MultiClusteringDataset) -> Result<TrainedArtifacts> {
    train_with(config, dataset, |_| {})
}

/// [`train`] with a callback invoked on every log record as it is produced.
pub fn train_with(
    config: &RunConfig,
    dataset: &MultiClusteringDataset,
    mut on_record: impl FnMut(&EpochLog),
) -> Result<TrainedArtifacts> {
    config.validate()?;
    if dataset.num_samples() < config.t.max(2) {
        return Err(Error::config(format!(
            "dataset has {} samples, need at least max(T, 2) = {}",
            dataset.num_samples(),
            config.t.max(2)
        )));
    }
    let pipelines = select_pipelines(
        dataset.images(),
        dataset.dims(),
        config.k,
        config.pipeline_pool,
        config.aug_seed,
    )?;
    let mut params = ModelParams::new(model_shape(config, dataset.dim()), config.tau, config.seed);
    let mut opt = OptimizerState::new(
        &params.tensors(),
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
        config.weight_decay,
    );
    // the mixing logits are the last tensor in parameter order
    opt.set_lr_scale(params.tensors().len() - 1, config.mixing_lr_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x0074_7261_696e));
    let base_views = if config.coarse {
        augment_views(dataset, &pipelines, 0, false)?
    } else {
        Vec::new()
    };
    let mut clusters: Option<ClusterState> = None;
    let mut log = Vec::new();
    let mut rounds = 0usize;
    let mut stopped_early = false;
    let mut last_was_m = true;
    let mut epochs_run = 0;

    for epoch in 0..config.epochs {
        let epoch_views = if config.coarse && config.resample_augmentations && epoch > 0 {
            augment_views(dataset, &pipelines, epoch, true)?
        } else {
            base_views.clone()
        };
        let inputs = EStepInputs {
            data: dataset.images(),
            views: &epoch_views,
            clusters: clusters.as_ref(),
            config,
            epoch,
        };
        let record = e_step(&mut params, &mut opt, &inputs, &mut rng)?;
        on_record(&record);
        log.push(record);
        epochs_run = epoch + 1;
        last_was_m = false;

        let done = epoch + 1;
        if done >= config.warmup_epochs && (done - config.warmup_epochs).is_multiple_of(config.e_steps_per_m_step) {
            let outcome = run_m_step(&params, dataset, &base_views, &mut clusters, config, rounds, epoch)?;
            rounds += 1;
            on_record(&outcome.0);
            log.push(outcome.0);
            last_was_m = true;
            if outcome.1 {
                stopped_early = true;
                break;
            }
        }
    }
    if !last_was_m {
        let (record, _) = run_m_step(
            &params,
            dataset,
            &base_views,
            &mut clusters,
            config,
            rounds,
            epochs_run - 1,
        )?;
        on_record(&record);
        log.push(record);
    }
    Ok(TrainedArtifacts {
        params,
        clusters,
        pipelines,
        log,
        epochs_run,
        stopped_early,
    })
}

fn run_m_step(
    params: &ModelParams,
    dataset: &MultiClusteringDataset,
    views: &[Tensor],
    clusters: &mut Option<ClusterState>,
    config: &RunConfig,
    round: usize,
    epoch: usize,
) -> Result<(EpochLog, bool)> {
    let started = Instant::now();
    let before = parameter_hash(params);
    let outcome = m_step(params, dataset.images(), views, clusters.as_ref(), config, round)?;
    debug_assert_eq!(before, parameter_hash(params));
    if let Some(prev) = clusters.as_ref() {
        let reinit = config.reinit_every > 0 && round.is_multiple_of(config.reinit_every);
        if !reinit && prev.centers != outcome.state.centers {
            return Err(Error::Contract("cluster centers changed outside k-means".into()));
        }
    }
    let means = encode_means(params, dataset.images(), views, config)?;
    let cluster: f64 = means
        .iter()
        .zip(&outcome.state.centers)
        .zip(&outcome.state.assignments)
        .map(|((mu, w), s)| cluster_loss_value(mu, w, s))
        .sum::<Result<f64>>()?;
    let record = EpochLog {
        epoch,
        phase: Phase::M,
        coarse: 0.0,
        branches: Vec::new(),
        cluster,
        total: cluster,
        u_z: config.u_z_schedule()?.current(epoch),
        u_c: config.u_c_schedule()?.current(epoch),
        mixing_weights: params.mixing.weights(),
        stopping: Some(outcome.stopping),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    *clusters = Some(outcome.state);
    Ok((record, outcome.stop))
}
