//! The adversarial training loop.
//!
//! Each step runs the generator on an LR batch, updates the discriminator on
//! (real HR, generated SR) with its log loss, then updates the generator
//! against fresh discriminator outputs using the weighted pixel/feature/
//! adversarial objective. Both networks use adaptive-moment updates at a
//! fixed learning rate.
//!
//! Determinism contract: with a fixed seed, the whole run is reproducible
//! bit for bit. Per-epoch shuffles and re-noise streams are derived from
//! `(seed, epoch)` rather than from consumed generator state, so resuming
//! from a checkpoint at epoch `k` continues the exact run an uninterrupted
//! training would have produced.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataset::{DatasetManifest, PatchPair, Split};
use crate::error::{Error, Result};
use crate::losses::{
    adv_loss_g, adv_loss_g_grad, d_loss, d_loss_grads, feat_loss, feat_loss_grad, mse_loss,
    mse_loss_grad, total_g_loss, LossBreakdown, LossWeights,
};
use crate::network::checkpoint::TensorMap;
use crate::network::{
    DiscriminatorConfig, FeatureConfig, GeneratorConfig, Grads, NetworkParams, Scalar, Tensor4,
    TrainMeta,
};
use crate::rng::SeededRng;

/// Optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weights: LossWeights,
    /// Epochs between checkpoints (the final epoch always checkpoints).
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub d_steps_per_g_step: usize,
    /// Optional MSE-only warm-up: for this many initial steps the
    /// discriminator is frozen and only the pixel loss trains the generator.
    pub mse_warmup_steps: u64,
    /// When set, fresh Gaussian noise of this variance is added to the LR
    /// patches every epoch (intended for datasets built without noise).
    pub renoise_variance: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-4,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weights: LossWeights::default(),
            checkpoint_interval: 50,
            seed: 0,
            d_steps_per_g_step: 1,
            mse_warmup_steps: 0,
            renoise_variance: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidTraining("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidTraining("learning_rate must be >= 0".into()));
        }
        if self.d_steps_per_g_step < 1 {
            return Err(Error::InvalidTraining("d_steps_per_g_step must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// Everything `train` needs besides the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub features: FeatureConfig,
}

/// Adaptive-moment optimizer over named tensors.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: &TrainConfig) -> Self {
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.adam_epsilon,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update over every trainable tensor the visitor exposes.
    pub fn step<F>(&mut self, grads: &Grads<T>, mut visit_params: F)
    where
        F: FnMut(&mut dyn FnMut(&str, &mut [T], bool)),
    {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let corr1 = 1.0 - self.beta1.powi(self.t as i32);
        let corr2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = T::from_f64(self.learning_rate);
        let inv_c1 = T::from_f64(1.0 / corr1);
        let inv_c2 = T::from_f64(1.0 / corr2);
        let eps = T::from_f64(self.epsilon);
        let moments = &mut self.moments;
        visit_params(&mut |name, data, trainable| {
            if !trainable {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![T::zero(); data.len()], vec![T::zero(); data.len()]));
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] * inv_c1;
                let vhat = v[i] * inv_c2;
                data[i] = data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }

    /// Serializes moments as `opt.<param>.{m,v}` tensors.
    pub fn to_tensor_map(&self) -> TensorMap
    where
        T: Scalar,
    {
        let mut map = TensorMap::new();
        for (name, (m, v)) in &self.moments {
            map.insert(
                format!("opt.{name}.m"),
                (vec![m.len()], m.iter().map(|&x| x.to_f64() as f32).collect()),
            );
            map.insert(
                format!("opt.{name}.v"),
                (vec![v.len()], v.iter().map(|&x| x.to_f64() as f32).collect()),
            );
        }
        map
    }

    /// Restores moments saved by [`Adam::to_tensor_map`], limited to the
    /// parameters under `prefix` (`g.` or `d.`) so the two optimizers never
    /// pick up each other's state.
    pub fn restore(&mut self, t: u64, map: &TensorMap, prefix: &str) {
        self.t = t;
        self.moments.clear();
        for (name, (_, values)) in map {
            let Some(rest) = name.strip_prefix("opt.") else { continue };
            if !rest.starts_with(prefix) {
                continue;
            }
            let (param, kind) = match rest.rsplit_once('.') {
                Some(split) => split,
                None => continue,
            };
            let entry = self
                .moments
                .entry(param.to_string())
                .or_insert_with(|| (Vec::new(), Vec::new()));
            let data: Vec<T> = values.iter().map(|&v| T::from_f64(v as f64)).collect();
            match kind {
                "m" => entry.0 = data,
                "v" => entry.1 = data,
                _ => {}
            }
        }
    }
}

/// Mutable training state: parameters, optimizer moments, progress counters.
pub struct TrainState {
    pub params: NetworkParams,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub epoch: usize,
    pub global_step: u64,
}

impl TrainState {
    pub fn new(setup: &TrainSetup) -> Result<Self> {
        Ok(TrainState {
            params: NetworkParams::init(
                setup.generator,
                setup.discriminator,
                setup.features.clone(),
                setup.train.seed,
            )?,
            opt_g: Adam::new(&setup.train),
            opt_d: Adam::new(&setup.train),
            epoch: 0,
            global_step: 0,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = TrainMeta {
            epoch: self.epoch,
            global_step: self.global_step,
            adam_step_g: self.opt_g.t,
            adam_step_d: self.opt_d.t,
        };
        let mut extra = self.opt_g.to_tensor_map();
        extra.extend(self.opt_d.to_tensor_map());
        self.params.save(path, Some(meta), &extra)
    }

    /// Restores a mid-run checkpoint; optimizer settings come from `config`.
    pub fn resume(path: impl AsRef<Path>, config: &TrainConfig) -> Result<Self> {
        let (params, training, extra) = NetworkParams::load(&path)?;
        let meta = training.ok_or_else(|| {
            Error::Checkpoint(format!(
                "{} has no training state to resume from",
                path.as_ref().display()
            ))
        })?;
        let mut opt_g = Adam::new(config);
        let mut opt_d = Adam::new(config);
        opt_g.restore(meta.adam_step_g, &extra, "g.");
        opt_d.restore(meta.adam_step_d, &extra, "d.");
        Ok(TrainState {
            params,
            opt_g,
            opt_d,
            epoch: meta.epoch,
            global_step: meta.global_step,
        })
    }
}

/// One alternating update on a batch. Returns the loss breakdown; every
/// reported value is checked finite.
pub fn train_step(
    state: &mut TrainState,
    lr_batch: &Tensor4<f32>,
    hr_batch: &Tensor4<f32>,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let weights = &config.weights;
    let warmup = state.global_step < config.mse_warmup_steps;

    // Generator forward (train mode) on the LR batch.
    let (sr, g_cache) = state.params.generator.forward_cached(lr_batch)?;

    // Discriminator update on (real HR, generated SR); the SR batch is
    // detached, so no gradient reaches the generator here.
    let mut d_loss_value = 0.0;
    if !warmup {
        for _ in 0..config.d_steps_per_g_step {
            let (p_real, real_cache) = state.params.discriminator.forward_cached(hr_batch)?;
            let (p_fake, fake_cache) = state.params.discriminator.forward_cached(&sr)?;
            d_loss_value = d_loss(&p_real, &p_fake)?;
            let (g_real, g_fake) = d_loss_grads(&p_real, &p_fake)?;
            let mut d_grads = Grads::new();
            state
                .params
                .discriminator
                .backward(&real_cache, &g_real, &mut d_grads)?;
            state
                .params
                .discriminator
                .backward(&fake_cache, &g_fake, &mut d_grads)?;
            state.params.discriminator.update_running_stats(&real_cache);
            state.params.discriminator.update_running_stats(&fake_cache);
            let disc = &mut state.params.discriminator;
            state.opt_d.step(&d_grads, |f| disc.visit_tensors_mut(f));
        }
    }

    // Generator update with fresh discriminator outputs.
    let mse = mse_loss(&sr, hr_batch)?;
    let mut d_sr = mse_loss_grad(&sr, hr_batch)?.map(|v| v * weights.w_mse as f32);

    let mut feat = 0.0;
    if weights.w_feat > 0.0 && !warmup {
        let (phi_sr, feat_cache) = state.params.features.forward_cached(&sr)?;
        let phi_hr = state.params.features.forward(hr_batch)?;
        feat = feat_loss(&phi_sr, &phi_hr)?;
        let d_phi = feat_loss_grad(&phi_sr, &phi_hr)?;
        let d_sr_feat = state.params.features.backward_input(&feat_cache, &d_phi)?;
        d_sr = d_sr.add(&d_sr_feat.map(|v| v * weights.w_feat as f32))?;
    }

    let mut adv = 0.0;
    if weights.w_adv > 0.0 && !warmup {
        let (p_fresh, fresh_cache) = state.params.discriminator.forward_cached(&sr)?;
        adv = adv_loss_g(&p_fresh)?;
        let d_probs = adv_loss_g_grad(&p_fresh)?;
        let mut discard = Grads::new();
        let d_sr_adv = state
            .params
            .discriminator
            .backward(&fresh_cache, &d_probs, &mut discard)?;
        d_sr = d_sr.add(&d_sr_adv.map(|v| v * weights.w_adv as f32))?;
    }

    let mut g_grads = Grads::new();
    state.params.generator.backward(&g_cache, &d_sr, &mut g_grads)?;
    state.params.generator.update_running_stats(&g_cache);
    let gen = &mut state.params.generator;
    state.opt_g.step(&g_grads, |f| gen.visit_tensors_mut(f));

    let breakdown = LossBreakdown {
        mse,
        feat,
        adv,
        total: total_g_loss(mse, feat, adv, weights),
        d_loss: d_loss_value,
    };
    if !breakdown.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.global_step,
            detail: format!("{breakdown:?}"),
        });
    }
    state.global_step += 1;
    Ok(breakdown)
}

/// Generator-objective value and analytic gradients for every trainable
/// tensor it touches (generator and, through the adversarial term, the
/// discriminator). Pure: batch-norm train statistics are computed fresh and
/// nothing is updated, which is what finite-difference verification needs.
pub fn generator_loss_and_grads<T: Scalar>(
    gen: &crate::network::Generator<T>,
    disc: &crate::network::Discriminator<T>,
    feat_net: &crate::network::FeatureNet<T>,
    lr_batch: &Tensor4<T>,
    hr_batch: &Tensor4<T>,
    weights: &LossWeights,
) -> Result<(f64, Grads<T>)> {
    let (sr, g_cache) = gen.forward_cached(lr_batch)?;
    let mse = mse_loss(&sr, hr_batch)?;
    let mut d_sr = mse_loss_grad(&sr, hr_batch)?.map(|v| v * T::from_f64(weights.w_mse));
    let mut grads = Grads::new();

    let mut feat = 0.0;
    if weights.w_feat > 0.0 {
        let (phi_sr, feat_cache) = feat_net.forward_cached(&sr)?;
        let phi_hr = feat_net.forward(hr_batch)?;
        feat = feat_loss(&phi_sr, &phi_hr)?;
        let d_phi = feat_loss_grad(&phi_sr, &phi_hr)?;
        let d = feat_net.backward_input(&feat_cache, &d_phi)?;
        d_sr = d_sr.add(&d.map(|v| v * T::from_f64(weights.w_feat)))?;
    }

    let mut adv = 0.0;
    if weights.w_adv > 0.0 {
        let (probs, d_cache) = disc.forward_cached(&sr)?;
        adv = adv_loss_g(&probs)?;
        let mut d_probs = adv_loss_g_grad(&probs)?;
        for p in &mut d_probs {
            *p = *p * T::from_f64(weights.w_adv);
        }
        let d = disc.backward(&d_cache, &d_probs, &mut grads)?;
        d_sr = d_sr.add(&d)?;
    }

    gen.backward(&g_cache, &d_sr, &mut grads)?;
    Ok((total_g_loss(mse, feat, adv, weights), grads))
}

/// Discriminator-objective value and analytic gradients for its trainable
/// tensors, with the SR batch treated as a fixed input.
pub fn discriminator_loss_and_grads<T: Scalar>(
    disc: &crate::network::Discriminator<T>,
    hr_batch: &Tensor4<T>,
    sr_batch: &Tensor4<T>,
) -> Result<(f64, Grads<T>)> {
    let (p_real, real_cache) = disc.forward_cached(hr_batch)?;
    let (p_fake, fake_cache) = disc.forward_cached(sr_batch)?;
    let value = d_loss(&p_real, &p_fake)?;
    let (g_real, g_fake) = d_loss_grads(&p_real, &p_fake)?;
    let mut grads = Grads::new();
    disc.backward(&real_cache, &g_real, &mut grads)?;
    disc.backward(&fake_cache, &g_fake, &mut grads)?;
    Ok((value, grads))
}

/// Outcome of a training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub final_checkpoint: PathBuf,
    /// Mean validation PSNR after each epoch (empty split yields NaN-free
    /// empty history).
    pub val_psnr_per_epoch: Vec<f64>,
    pub final_losses: Option<LossBreakdown>,
}

fn batch_tensors(pairs: &[&PatchPair]) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    let lrs: Vec<_> = pairs.iter().map(|p| p.lr.clone()).collect();
    let hrs: Vec<_> = pairs.iter().map(|p| p.hr.clone()).collect();
    Ok((Tensor4::from_images(&lrs)?, Tensor4::from_images(&hrs)?))
}

fn renoise(pair: &PatchPair, variance: f64, seed: u64, epoch: usize, index: usize) -> Result<PatchPair> {
    // Stream keyed by (seed, epoch, pair index); independent of batch order.
    let mut rng = SeededRng::new(seed)
        .split(0x4e6f_6973 ^ epoch as u64)
        .split(index as u64);
    let mut data = pair.lr.data().to_vec();
    for v in &mut data {
        *v = (*v as f64 + rng.gaussian(0.0, variance)?) as f32;
    }
    Ok(PatchPair {
        lr: crate::raster::Image::new(pair.lr.height(), pair.lr.width(), pair.lr.channels(), data)?,
        ..pair.clone()
    })
}

/// Mean eval-mode PSNR of the generator over validation pairs.
pub fn validation_psnr(params: &NetworkParams, pairs: &[PatchPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0;
    for pair in pairs {
        let x = Tensor4::<f32>::from_images(std::slice::from_ref(&pair.lr))?;
        let sr = params
            .generator
            .forward(&x, crate::network::Mode::Eval)?
            .to_images()
            .remove(0);
        sum += crate::metrics::psnr(&sr, &pair.hr)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Runs the epoch loop over a built dataset directory, writing checkpoints,
/// a CSV loss log, and a JSON run summary under `out_dir`.
pub fn train(
    setup: &TrainSetup,
    dataset_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    setup.train.validate()?;
    setup.generator.validate()?;
    let dataset_dir = dataset_dir.as_ref();
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let manifest = DatasetManifest::load(dataset_dir)?;
    let train_pairs = manifest.load_pairs(dataset_dir, Split::Train)?;
    let val_pairs = manifest.load_pairs(dataset_dir, Split::Validation)?;
    if train_pairs.is_empty() {
        return Err(Error::InvalidTraining("training split is empty".into()));
    }
    let factor = manifest.spec.params.factor;
    if setup.generator.upscale != factor {
        return Err(Error::InvalidTraining(format!(
            "generator upscale {} does not match dataset factor {factor}",
            setup.generator.upscale
        )));
    }
    let patch_hr = manifest.spec.patch_lr * factor;
    if setup.discriminator.input_size != patch_hr {
        return Err(Error::InvalidTraining(format!(
            "discriminator input size {} does not match HR patch size {patch_hr}",
            setup.discriminator.input_size
        )));
    }

    let mut state = match resume {
        Some(path) => TrainState::resume(path, &setup.train)?,
        None => TrainState::new(setup)?,
    };

    let log_path = out_dir.join("loss_log.csv");
    let log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(log_file);
    writeln!(log, "step,epoch,mse,feat,adv,total,d_loss").map_err(|e| Error::io(&log_path, e))?;

    let config = &setup.train;
    let mut val_history = Vec::new();
    let mut last_breakdown = None;
    let start_epoch = state.epoch;
    for epoch in start_epoch..config.epochs {
        // Per-epoch order and noise derive from (seed, epoch) only.
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        SeededRng::new(config.seed).split(1 + epoch as u64).shuffle(&mut order);

        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PatchPair> = match config.renoise_variance {
                Some(v) if v > 0.0 => chunk
                    .iter()
                    .map(|&i| renoise(&train_pairs[i], v, config.seed, epoch, i))
                    .collect::<Result<_>>()?,
                _ => chunk.iter().map(|&i| train_pairs[i].clone()).collect(),
            };
            let refs: Vec<&PatchPair> = batch.iter().collect();
            let (lr_batch, hr_batch) = batch_tensors(&refs)?;
            let step = state.global_step;
            let breakdown = train_step(&mut state, &lr_batch, &hr_batch, config)?;
            writeln!(
                log,
                "{},{},{},{},{},{},{}",
                step, epoch, breakdown.mse, breakdown.feat, breakdown.adv, breakdown.total,
                breakdown.d_loss
            )
            .map_err(|e| Error::io(&log_path, e))?;
            last_breakdown = Some(breakdown);
        }
        state.epoch = epoch + 1;

        if !val_pairs.is_empty() {
            val_history.push(validation_psnr(&state.params, &val_pairs)?);
        }
        let last = epoch + 1 == config.epochs;
        if last || (config.checkpoint_interval > 0 && state.epoch % config.checkpoint_interval == 0)
        {
            state.save(ckpt_dir.join(format!("epoch_{:04}.ckpt", state.epoch)))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    // Epoch budget zero (or a fully resumed run): still emit a checkpoint.
    let final_path = ckpt_dir.join(format!("epoch_{:04}.ckpt", state.epoch));
    if !final_path.exists() {
        state.save(&final_path)?;
    }

    let summary = TrainSummary {
        epochs_run: state.epoch - start_epoch,
        final_checkpoint: final_path,
        val_psnr_per_epoch: val_history,
        final_losses: last_breakdown,
    };
    let summary_path = out_dir.join("run_summary.json");
    let doc = serde_json::json!({
        "setup": setup,
        "dataset": dataset_dir.display().to_string(),
        "summary": summary,
    });
    std::fs::write(&summary_path, serde_json::to_string_pretty(&doc)?)
        .map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}
