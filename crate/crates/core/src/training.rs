//! Teacher-forced one-step training with Adam and best-epoch selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{loss_and_gradients, pair_loss, ModelConfig, ModelParameters, NormStats};
use crate::physics::{ParticleState, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 50,
            learning_rate: 1e-3,
            seed: 0,
            clip_norm: 10.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainRecord {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

/// A ground-truth transition `(X_t, X_{t+1})`.
pub type Pair = (ParticleState, ParticleState);

/// Every consecutive pair of every trajectory, in order.
pub fn make_pairs(trajs: &[Trajectory]) -> Result<Vec<Pair>> {
    if trajs.is_empty() {
        return Err(Error::invalid("no trajectories to pair"));
    }
    Ok(trajs
        .iter()
        .flat_map(|t| t.states().windows(2).map(|w| (w[0].clone(), w[1].clone())))
        .collect())
}

/// Mean one-step loss over `pairs`.
pub fn mean_pair_loss(params: &ModelParameters, config: &ModelConfig, pairs: &[Pair], exec: Exec) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let losses = exec.map(pairs, |(x, y)| pair_loss(params, config, x, y));
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Averaged loss and gradient of one batch. Pairs are processed
/// independently and reduced in batch order.
pub fn batch_gradient(
    params: &ModelParameters,
    config: &ModelConfig,
    batch: &[&Pair],
    exec: Exec,
) -> Result<(f64, Vec<Tensor>)> {
    let results = exec.map(batch, |(x, y)| loss_and_gradients(params, config, x, y));
    let mut loss = 0.0;
    let mut total: Option<Vec<Tensor>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match &mut total {
            None => total = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
    }
    let scale = 1.0 / batch.len() as f64;
    let grads = total
        .ok_or_else(|| Error::invalid("empty batch"))?
        .into_iter()
        .map(|g| g.map(|v| v * scale))
        .collect();
    Ok((loss * scale, grads))
}

/// Rescales `grads` so their joint Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Trains from a fresh initialization drawn from `cfg.seed`.
pub fn train(
    train_trajs: &[Trajectory],
    val_trajs: &[Trajectory],
    model: &ModelConfig,
    cfg: &TrainingConfig,
    exec: Exec,
) -> Result<(ModelParameters, TrainRecord)> {
    train_with(train_trajs, val_trajs, model, cfg, exec, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    train_trajs: &[Trajectory],
    val_trajs: &[Trajectory],
    model: &ModelConfig,
    cfg: &TrainingConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParameters, TrainRecord)> {
    cfg.validate()?;
    model.validate()?;
    let train_pairs = make_pairs(train_trajs)?;
    let val_pairs = make_pairs(val_trajs)?;
    let d = model.feature_dim();
    for t in train_trajs.iter().chain(val_trajs) {
        if t.first().dim() != d || t.system().static_mask() != model.static_feature_mask.as_slice() {
            return Err(Error::Incompatible(format!(
                "{} trajectories do not match the model's {d} features",
                t.system()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let norm = NormStats::from_trajectories(train_trajs)?;
    let mut params = ModelParameters::init(d, model.hidden_width, norm, &mut rng);
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let mut adam = AdamState::new(&tensors, adam_cfg);

    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParameters)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let abort = |reason: String| Error::Training {
                epoch,
                batch: b,
                reason,
            };
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let (loss, mut grads) =
                batch_gradient(&params, model, &batch, exec).map_err(|e| abort(e.to_string()))?;
            if !loss.is_finite() {
                return Err(abort(format!("loss is {loss}")));
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(abort("non-finite gradient".into()));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam_step(&mut tensors, &grads, &mut adam)?;
            params.set_tensors(tensors.clone())?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_pairs.len() as f64;
        let val_loss = mean_pair_loss(&params, model, &val_pairs, exec).map_err(|e| Error::Training {
            epoch,
            batch: order.len().div_ceil(cfg.batch_size),
            reason: format!("validation: {e}"),
        })?;
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
        };
        on_epoch(&rec);
        epochs.push(rec);
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, params.clone()));
        }
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok((best_params, TrainRecord { epochs, best_epoch }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{generate_dataset, SplitCounts, SystemKind, SystemSpec};

    fn toy(n: usize, t_len: usize, train: usize, val: usize, seed: u64) -> crate::physics::Dataset {
        generate_dataset(
            n,
            &SystemSpec::new(SystemKind::Gravity),
            t_len,
            SplitCounts { train, val, test: 0 },
            seed,
            Exec::Sequential,
        )
        .unwrap()
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            hidden_width: 8,
            k_neighbors: 3,
            ..ModelConfig::new(SystemKind::Gravity)
        }
    }

    #[test]
    fn pair_counts() {
        let ds = toy(3, 200, 2, 0, 1);
        let pairs = make_pairs(&ds.train).unwrap();
        assert_eq!(pairs.len(), 2 * 199);
        assert_eq!(pairs[199].0, ds.train[1].states()[0]);
        assert!(pairs.iter().all(|(a, b)| a.same_static(b)));
        let short = toy(3, 2, 1, 0, 2);
        assert_eq!(make_pairs(&short.train).unwrap().len(), 1);
        assert!(make_pairs(&[]).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        let ds = toy(3, 4, 1, 1, 1);
        for cfg in [
            TrainingConfig { epochs: 0, ..Default::default() },
            TrainingConfig { batch_size: 0, ..Default::default() },
            TrainingConfig { learning_rate: 0.0, ..Default::default() },
        ] {
            assert!(train(&ds.train, &ds.val, &small_model(), &cfg, Exec::Sequential).is_err());
        }
        let coulomb = ModelConfig::new(SystemKind::Coulomb);
        assert!(train(&ds.train, &ds.val, &coulomb, &TrainingConfig::default(), Exec::Sequential).is_err());
    }

    #[test]
    fn two_epochs_are_recorded_and_best_is_minimal() {
        let ds = toy(4, 6, 2, 1, 3);
        let cfg = TrainingConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let (params, rec) = train(&ds.train, &ds.val, &small_model(), &cfg, Exec::Sequential).unwrap();
        assert_eq!(rec.epochs.len(), 2);
        assert_eq!(rec.epochs[1].epoch, 2);
        let min = rec.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(rec.best().val_loss, min);
        let pairs = make_pairs(&ds.val).unwrap();
        let again = mean_pair_loss(&params, &small_model(), &pairs, Exec::Sequential).unwrap();
        assert_eq!(again, min);
    }

    #[test]
    fn deterministic_across_runs_and_modes() {
        let ds = toy(5, 8, 3, 1, 4);
        let cfg = TrainingConfig {
            epochs: 3,
            batch_size: 5,
            seed: 17,
            ..Default::default()
        };
        let a = train(&ds.train, &ds.val, &small_model(), &cfg, Exec::Sequential).unwrap();
        let b = train(&ds.train, &ds.val, &small_model(), &cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let c = train(&ds.train, &ds.val, &small_model(), &TrainingConfig { seed: 18, ..cfg }, Exec::Sequential)
            .unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn small_step_decreases_pair_loss() {
        let ds = toy(5, 3, 1, 0, 6);
        let pair = &make_pairs(&ds.train).unwrap()[0];
        let model = ModelConfig {
            hidden_width: 16,
            ..small_model()
        };
        for seed in 0..5 {
            let norm = NormStats::from_trajectories(&ds.train).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ModelParameters::init(5, 16, norm, &mut rng);
            let (before, grads) = loss_and_gradients(&params, &model, &pair.0, &pair.1).unwrap();
            let mut tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
            let mut adam = AdamState::new(
                &tensors,
                AdamConfig {
                    learning_rate: 1e-5,
                    ..Default::default()
                },
            );
            adam_step(&mut tensors, &grads, &mut adam).unwrap();
            params.set_tensors(tensors).unwrap();
            let after = pair_loss(&params, &model, &pair.0, &pair.1).unwrap();
            assert!(after < before, "seed {seed}: {after} ≥ {before}");
        }
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::row(&[3.0, 0.0]), Tensor::row(&[4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut h = vec![Tensor::row(&[0.3])];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h[0].data(), &[0.3]);
    }

    #[test]
    fn batch_gradient_is_mean_of_pairs() {
        let ds = toy(4, 4, 1, 0, 8);
        let pairs = make_pairs(&ds.train).unwrap();
        let norm = NormStats::from_trajectories(&ds.train).unwrap();
        let params = ModelParameters::init(5, 8, norm, &mut ChaCha8Rng::seed_from_u64(1));
        let batch: Vec<&Pair> = pairs.iter().collect();
        let (loss, grads) = batch_gradient(&params, &small_model(), &batch, Exec::Parallel).unwrap();
        let singles: Vec<_> = pairs
            .iter()
            .map(|(x, y)| loss_and_gradients(&params, &small_model(), x, y).unwrap())
            .collect();
        let mean_loss = singles.iter().map(|s| s.0).sum::<f64>() / 3.0;
        assert!((loss - mean_loss).abs() < 1e-12);
        let g0: f64 = singles.iter().map(|s| s.1[0].data()[0]).sum::<f64>() / 3.0;
        assert!((grads[0].data()[0] - g0).abs() < 1e-12);
    }
}
