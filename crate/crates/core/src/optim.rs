//! AdamW and the deterministic training loop.
//!
//! A run is a pure function of (seed, config, dataset bytes). Sample order
//! and reparameterization noise come from fixed-stream generators keyed by
//! epoch and step rather than from one mutating RNG, so a run resumed from
//! any checkpoint replays exactly the draws an uninterrupted run would have
//! made, and two runs with the same inputs produce bitwise-identical
//! checkpoints.

use crate::autodiff::{ParamStore, Tape};
use crate::error::{FormatError, SvxError, SvxResult};
use crate::io::{self, CheckpointEntry, CheckpointFile};
use crate::matrix::{Matrix, Real};
use crate::metrics;
use crate::model::{
    self, bce_targets, decode_plan, encode_plan, param_specs, standard_normal_matrix,
    BceTargets, DecodePlan, EncodePlan, LatentCode, ModelConfig, ParamSource, LATENT_STRIDE,
};
use crate::voxel::VoxelGrid;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64) -> AdamW {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// First/second moment estimates, aligned with the parameter store's
/// insertion order, plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    t: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ParamStore<T>) -> OptimState<T> {
        let zeros: Vec<Matrix<T>> = params
            .ids()
            .map(|id| {
                let p = params.get(id);
                Matrix::zeros(p.rows(), p.cols())
            })
            .collect();
        OptimState { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One decoupled-decay AdamW update. `grads` must hold one matrix per
/// parameter in store order. The step counter increments before use, so the
/// first call runs with t = 1.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Matrix<T>],
    state: &mut OptimState<T>,
    hp: &AdamW,
) -> SvxResult<()> {
    if grads.len() != params.len() {
        return Err(SvxError::LengthMismatch { left: grads.len(), right: params.len() });
    }
    state.t += 1;
    let c1 = T::from_f64(1.0 / (1.0 - hp.beta1.powf(state.t as f64)));
    let c2 = T::from_f64(1.0 / (1.0 - hp.beta2.powf(state.t as f64)));
    let b1 = T::from_f64(hp.beta1);
    let b2 = T::from_f64(hp.beta2);
    let nb1 = T::from_f64(1.0 - hp.beta1);
    let nb2 = T::from_f64(1.0 - hp.beta2);
    let lr = T::from_f64(hp.lr);
    let eps = T::from_f64(hp.eps);
    let decay = T::from_f64(hp.lr * hp.weight_decay);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let g = &grads[i];
        if g.shape() != params.get(id).shape() {
            return Err(SvxError::ShapeMismatch {
                op: "adamw_step",
                expected: format!("{:?}", params.get(id).shape()),
                got: format!("{:?}", g.shape()),
            });
        }
        if !g.is_finite() {
            return Err(SvxError::NonFiniteGradient { param: params.name(id).to_string() });
        }
        let theta = params.get_mut(id);
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for ((w, &gk), (mk, vk)) in
            theta.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mk = b1 * *mk + nb1 * gk;
            *vk = b2 * *vk + nb2 * gk * gk;
            let mhat = *mk * c1;
            let vhat = *vk * c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps) - decay * *w;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints

const OPTIM_M_PREFIX: &str = "optim.m.";
const OPTIM_V_PREFIX: &str = "optim.v.";
const STEP_KEY: &str = "train.step";
const BEST_KEY: &str = "train.best_dice_bits";

/// Pack parameters, optimizer moments, model config, and trainer progress
/// into one checkpoint container. Entry order is the parameter store's
/// insertion order (parameters, then first moments, then second), which
/// makes the byte stream deterministic.
pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore<f32>,
    state: &OptimState<f32>,
    cfg: &ModelConfig,
    best_dice: f64,
) -> SvxResult<()> {
    let mut entries = Vec::new();
    let mat_entry = |name: String, m: &Matrix<f32>| CheckpointEntry {
        name,
        dims: vec![m.rows() as u32, m.cols() as u32],
        data: m.data().to_vec(),
    };
    for id in params.ids() {
        entries.push(mat_entry(params.name(id).to_string(), params.get(id)));
    }
    for (i, id) in params.ids().enumerate() {
        entries.push(mat_entry(format!("{OPTIM_M_PREFIX}{}", params.name(id)), &state.m[i]));
    }
    for (i, id) in params.ids().enumerate() {
        entries.push(mat_entry(format!("{OPTIM_V_PREFIX}{}", params.name(id)), &state.v[i]));
    }
    let mut config_text = cfg.to_text();
    config_text.push_str(&format!("{STEP_KEY}={}\n", state.t));
    // Stored as raw bits so the round trip is exact, not shortest-decimal.
    config_text.push_str(&format!("{BEST_KEY}={}\n", best_dice.to_bits()));
    io::write_checkpoint(path, &CheckpointFile { entries, config_text })
}

pub struct LoadedCheckpoint {
    pub params: ParamStore<f32>,
    pub state: OptimState<f32>,
    pub model_cfg: ModelConfig,
    pub best_dice: f64,
}

pub fn load_checkpoint(path: &Path) -> SvxResult<LoadedCheckpoint> {
    let ck = io::read_checkpoint(path)?;

    let mut model_lines = String::new();
    let mut step: Option<u64> = None;
    let mut best_bits: Option<u64> = None;
    for line in ck.config_text.lines() {
        if let Some(v) = line.strip_prefix(&format!("{STEP_KEY}=")) {
            step = v.parse().ok();
        } else if let Some(v) = line.strip_prefix(&format!("{BEST_KEY}=")) {
            best_bits = v.parse().ok();
        } else {
            model_lines.push_str(line);
            model_lines.push('\n');
        }
    }
    let t = step.ok_or(FormatError::BadConfigLine { line: format!("{STEP_KEY} missing") })?;
    let best_dice = f64::from_bits(
        best_bits.ok_or(FormatError::BadConfigLine { line: format!("{BEST_KEY} missing") })?,
    );
    let model_cfg = ModelConfig::from_text(&model_lines)?;

    let mut by_name: std::collections::HashMap<&str, &CheckpointEntry> =
        ck.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut take = |name: &str, rows: usize, cols: usize| -> SvxResult<Matrix<f32>> {
        let e = by_name
            .remove(name)
            .ok_or_else(|| SvxError::MissingParameter { name: name.to_string() })?;
        if e.dims != [rows as u32, cols as u32] {
            return Err(FormatError::ShapeDisagreement {
                name: name.to_string(),
                expected: format!("{rows}x{cols}"),
                got: format!("{:?}", e.dims),
            }
            .into());
        }
        Matrix::from_vec(rows, cols, e.data.clone())
    };

    let mut params: ParamStore<f32> = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for spec in param_specs(&model_cfg) {
        params.insert(&spec.name, take(&spec.name, spec.rows, spec.cols)?)?;
        m.push(take(&format!("{OPTIM_M_PREFIX}{}", spec.name), spec.rows, spec.cols)?);
        v.push(take(&format!("{OPTIM_V_PREFIX}{}", spec.name), spec.rows, spec.cols)?);
    }
    if let Some(stray) = by_name.keys().next() {
        return Err(FormatError::BadName { detail: format!("unexpected entry {stray}") }.into());
    }
    Ok(LoadedCheckpoint { params, state: OptimState { m, v, t }, model_cfg, best_dice })
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub dataset: Vec<PathBuf>,
    /// Sample scored for the dice_val log column; never trained on.
    pub held_out: PathBuf,
    /// Steps between checkpoints (and validation scoring).
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    /// KL weight for the objective; constant over the run.
    pub beta: f64,
}

impl TrainConfig {
    fn validate(&self) -> SvxResult<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(SvxError::BadConfig {
                detail: "epochs, batch_size, checkpoint_every must be positive".to_string(),
            });
        }
        if self.dataset.is_empty() {
            return Err(SvxError::EmptyInput("dataset"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 || !self.beta.is_finite() || self.beta < 0.0 {
            return Err(SvxError::BadConfig { detail: "lr and beta must be finite and >= 0".to_string() });
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub state: OptimState<f32>,
    pub steps: u64,
    /// Full metric log text; also written to out_dir/metrics.log.
    pub log: String,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub best_dice: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sample order for one epoch; even streams are reserved for shuffles,
/// odd ones for per-step noise.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, 2 * epoch));
    order
}

/// Reconstruction Dice of the mean-code round trip (z = μ, no sampling).
pub fn validation_dice(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    sample: &VoxelGrid,
) -> SvxResult<f64> {
    let post = model::encode(sample, cfg, params)?;
    let code = LatentCode {
        coords: post.coords.clone(),
        z: post.mu.clone(),
        dims: post.dims,
        stride: LATENT_STRIDE,
    };
    let recon = model::decode(&code, cfg, params)?;
    metrics::dice(&recon.binarize(), sample)
}

struct SamplePlan {
    enc: EncodePlan,
    dec: DecodePlan,
    targets: BceTargets,
}

fn plan_sample(x: &VoxelGrid, cfg: &ModelConfig) -> SvxResult<SamplePlan> {
    let enc = encode_plan(x, cfg)?;
    let dec = decode_plan(&enc.latent_coords, x.dims(), cfg)?;
    let targets = bce_targets(x, &dec.support)?;
    Ok(SamplePlan { enc, dec, targets })
}

/// Train from freshly initialized parameters.
pub fn train(
    model_cfg: &ModelConfig,
    init: ParamStore<f32>,
    cfg: &TrainConfig,
) -> SvxResult<TrainOutcome> {
    let state = OptimState::new(&init);
    run(model_cfg.clone(), init, state, f64::NEG_INFINITY, cfg)
}

/// Continue a checkpointed run. `cfg.epochs` is the run's total length, not
/// an increment: resuming at step s trains steps s+1 through
/// epochs * ceil(n / batch_size) and lands bitwise where the uninterrupted
/// run would have.
pub fn resume(checkpoint: &Path, cfg: &TrainConfig) -> SvxResult<TrainOutcome> {
    let loaded = load_checkpoint(checkpoint)?;
    run(loaded.model_cfg, loaded.params, loaded.state, loaded.best_dice, cfg)
}

fn run(
    model_cfg: ModelConfig,
    mut params: ParamStore<f32>,
    mut state: OptimState<f32>,
    mut best_dice: f64,
    cfg: &TrainConfig,
) -> SvxResult<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    // The objective's KL weight comes from the trainer, not the inference
    // config.
    let obj_cfg = ModelConfig { beta: cfg.beta, ..model_cfg.clone() };

    let samples: Vec<VoxelGrid> =
        cfg.dataset.iter().map(|p| io::read_svox(p)).collect::<SvxResult<_>>()?;
    let held_out = io::read_svox(&cfg.held_out)?;
    let plans: Vec<SamplePlan> =
        samples.iter().map(|x| plan_sample(x, &obj_cfg)).collect::<SvxResult<_>>()?;

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| SvxError::Io {
        path: cfg.out_dir.clone(),
        detail: e.to_string(),
    })?;
    let best_path = cfg.out_dir.join("best.svck");
    let final_path = cfg.out_dir.join("final.svck");

    let n = samples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = cfg.epochs as u64 * steps_per_epoch;
    let hp = AdamW::new(cfg.lr);

    let mut log = String::from("step, L_rec, KL, total, dice_val\n");
    let mut last_dice = f64::NAN;
    let param_ids: Vec<_> = params.ids().collect();

    while state.t < total_steps {
        let step = state.t; // 0-based position of the step about to run
        let epoch = step / steps_per_epoch;
        let pos = (step % steps_per_epoch) as usize;
        let order = epoch_order(cfg.seed, epoch, n);
        let batch = &order[pos * cfg.batch_size..(n.min((pos + 1) * cfg.batch_size))];

        let mut grads: Vec<Matrix<f32>> = param_ids
            .iter()
            .map(|&id| Matrix::zeros(params.get(id).rows(), params.get(id).cols()))
            .collect();
        let mut noise_rng = stream_rng(cfg.seed, 2 * step + 1);
        let inv_batch = 1.0f32 / batch.len() as f32;
        let (mut rec_mean, mut kl_mean, mut total_mean) = (0.0f64, 0.0f64, 0.0f64);
        for &si in batch {
            let plan = &plans[si];
            let eps: Matrix<f32> = standard_normal_matrix(
                &mut noise_rng,
                plan.enc.latent_coords.len(),
                obj_cfg.latent_channels,
            );
            let mut tape: Tape<f32> = Tape::new();
            let src = ParamSource::Store(&params);
            let out = model::total_loss_on_tape(
                &mut tape,
                &src,
                &obj_cfg,
                &plan.enc,
                &plan.dec,
                &plan.targets,
                &eps,
            )?;
            let total = tape.value(out.total).get(0, 0);
            if !total.is_finite() {
                return Err(SvxError::NonFiniteLoss { step: state.t + 1 });
            }
            rec_mean += tape.value(out.recon).get(0, 0) as f64 * inv_batch as f64;
            kl_mean += tape.value(out.kl).get(0, 0) as f64 * inv_batch as f64;
            total_mean += total as f64 * inv_batch as f64;
            let g = tape.backward(out.total)?;
            for (i, &id) in param_ids.iter().enumerate() {
                if let Some(node) = tape.param_node(id) {
                    if let Some(gm) = g.get(node) {
                        for (acc, &gv) in grads[i].data_mut().iter_mut().zip(gm.data()) {
                            *acc += gv * inv_batch;
                        }
                    }
                }
            }
        }
        adamw_step(&mut params, &grads, &mut state, &hp)?;

        // Validation points are a pure function of the global step so a
        // resumed run scores exactly the steps an uninterrupted one would;
        // scoring relative to a run's own start or end would let best_dice
        // drift between the two histories.
        let at_cadence = state.t % cfg.checkpoint_every == 0;
        if state.t == 1 || at_cadence {
            last_dice = validation_dice(&model_cfg, &params, &held_out)?;
            if last_dice > best_dice {
                best_dice = last_dice;
                save_checkpoint(&best_path, &params, &state, &model_cfg, best_dice)?;
            }
        }
        if at_cadence && state.t != total_steps {
            let path = cfg.out_dir.join(format!("ckpt-{:06}.svck", state.t));
            save_checkpoint(&path, &params, &state, &model_cfg, best_dice)?;
        }
        log.push_str(&format!(
            "{}, {:.6}, {:.6}, {:.6}, {:.4}\n",
            state.t, rec_mean, kl_mean, total_mean, last_dice
        ));
    }

    save_checkpoint(&final_path, &params, &state, &model_cfg, best_dice)?;
    let log_path = cfg.out_dir.join("metrics.log");
    std::fs::write(&log_path, &log)
        .map_err(|e| SvxError::Io { path: log_path, detail: e.to_string() })?;
    Ok(TrainOutcome {
        params,
        steps: state.t,
        state,
        log,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        best_dice,
    })
}
