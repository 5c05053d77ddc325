use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::loss::loss_gradient;
use super::sampler::MixedBatchSampler;
use super::TrainError;
use crate::config::TrainConfig;

/// A dual encoder whose parameters live in one flat vector.
pub trait TrainableDualEncoder {
    type Text;
    type Image;

    fn encode_text(&self, x: &Self::Text) -> Vec<f64>;
    fn encode_image(&self, y: &Self::Image) -> Vec<f64>;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    /// Add dLoss/dparams to `grad`, given dLoss/d(embedding) for each item.
    fn accumulate_grad(
        &self,
        texts: &[Self::Text],
        images: &[Self::Image],
        d_texts: &[Vec<f64>],
        d_images: &[Vec<f64>],
        grad: &mut [f64],
    );
}

/// Two linear projections, text features -> d and image features -> d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDualEncoder {
    pub text_in: usize,
    pub image_in: usize,
    pub out_dim: usize,
    /// Text matrix (out_dim x text_in) then image matrix (out_dim x image_in),
    /// both row-major.
    pub params: Vec<f64>,
}

impl LinearDualEncoder {
    pub fn new(text_in: usize, image_in: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |fan_in: usize, count: usize| -> Vec<f64> {
            let normal = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).expect("valid std");
            (0..count).map(|_| normal.sample(&mut rng)).collect()
        };
        let mut params = draw(text_in, out_dim * text_in);
        params.extend(draw(image_in, out_dim * image_in));
        Self {
            text_in,
            image_in,
            out_dim,
            params,
        }
    }

    fn split(&self) -> (&[f64], &[f64]) {
        self.params.split_at(self.out_dim * self.text_in)
    }

    fn project(w: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
        w.chunks(cols).map(|row| crate::model::dot(row, x)).collect()
    }
}

impl TrainableDualEncoder for LinearDualEncoder {
    type Text = Vec<f64>;
    type Image = Vec<f64>;

    fn encode_text(&self, x: &Vec<f64>) -> Vec<f64> {
        Self::project(self.split().0, self.text_in, x)
    }

    fn encode_image(&self, y: &Vec<f64>) -> Vec<f64> {
        Self::project(self.split().1, self.image_in, y)
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn accumulate_grad(
        &self,
        texts: &[Vec<f64>],
        images: &[Vec<f64>],
        d_texts: &[Vec<f64>],
        d_images: &[Vec<f64>],
        grad: &mut [f64],
    ) {
        let (gt, gi) = grad.split_at_mut(self.out_dim * self.text_in);
        for (x, g) in texts.iter().zip(d_texts) {
            for (r, gr) in g.iter().enumerate() {
                for (c, xc) in x.iter().enumerate() {
                    gt[r * self.text_in + c] += gr * xc;
                }
            }
        }
        for (y, g) in images.iter().zip(d_images) {
            for (r, gr) in g.iter().enumerate() {
                for (c, yc) in y.iter().enumerate() {
                    gi[r * self.image_in + c] += gr * yc;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    /// Symmetric loss divided by 2N.
    pub loss: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: usize,
    pub tau: f64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = serde_json::to_vec(self).map_err(|e| TrainError::Serialize(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| TrainError::Serialize(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub loss_curve: Vec<LossRecord>,
    pub tau: f64,
    pub steps: usize,
    pub last_checkpoint: Option<Checkpoint>,
    pub checkpoint_files: Vec<PathBuf>,
}

pub struct FinetuneOptions<'a, Y> {
    /// Per-epoch checkpoints are written here when set.
    pub checkpoint_dir: Option<&'a Path>,
    /// Applied to every image item before encoding; identity when unset.
    pub augment: Option<&'a dyn Fn(&Y, u64) -> Y>,
}

impl<Y> Default for FinetuneOptions<'_, Y> {
    fn default() -> Self {
        Self {
            checkpoint_dir: None,
            augment: None,
        }
    }
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    fn new(len: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    /// Decoupled weight decay applies to the first `decayed` entries only.
    fn step(&mut self, params: &mut [&mut f64], grad: &[f64], lr: f64, wd: f64, decayed: usize) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grad).enumerate() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let update = (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
            let decay = if k < decayed { wd * **p } else { 0.0 };
            **p -= lr * (update + decay);
        }
    }
}

/// Minimize the symmetric contrastive loss with AdamW, learning tau through
/// its logarithm. Runs `epochs * sampler.batches_per_epoch()` steps, capped
/// by `max_steps` when non-zero.
///
/// A non-finite loss or gradient restores the last per-epoch checkpoint (or
/// the initial parameters) and returns [`TrainError::Diverged`].
pub fn finetune<E, X, Y>(
    encoder: &mut E,
    sampler: &mut MixedBatchSampler<X, Y>,
    cfg: &TrainConfig,
    opts: &FinetuneOptions<'_, Y>,
) -> Result<TrainOutcome, TrainError>
where
    E: TrainableDualEncoder<Text = X, Image = Y>,
    X: Clone,
    Y: Clone,
{
    cfg.validate()?;
    if let Some(dir) = opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let n_params = encoder.params().len();
    let mut log_tau = cfg.init_temperature.ln();
    let mut opt = AdamW::new(n_params + 1, cfg);
    let mut last_good = Checkpoint {
        epoch: 0,
        step: 0,
        tau: cfg.init_temperature,
        params: encoder.params().to_vec(),
    };
    let mut outcome = TrainOutcome {
        loss_curve: Vec::new(),
        tau: cfg.init_temperature,
        steps: 0,
        last_checkpoint: None,
        checkpoint_files: Vec::new(),
    };
    let per_epoch = sampler.batches_per_epoch();
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        for _ in 0..per_epoch {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let mut batch = sampler.next_batch();
            if let Some(aug) = opts.augment {
                batch.images = batch
                    .images
                    .iter()
                    .enumerate()
                    .map(|(i, y)| aug(y, (step * batch.texts.len() + i) as u64))
                    .collect();
            }
            let tau = log_tau.exp();
            let et: Vec<Vec<f64>> = batch.texts.iter().map(|x| encoder.encode_text(x)).collect();
            let ei: Vec<Vec<f64>> = batch.images.iter().map(|y| encoder.encode_image(y)).collect();
            let diverged = |step| TrainError::Diverged {
                step,
                last_good: Box::new(last_good.clone()),
            };
            let lg = match loss_gradient(&et, &ei, tau) {
                Ok(lg) if lg.loss.is_finite() => lg,
                Ok(_) | Err(TrainError::ZeroNorm) => {
                    encoder.params_mut().copy_from_slice(&last_good.params);
                    return Err(diverged(step));
                }
                Err(e) => return Err(e),
            };
            outcome.loss_curve.push(LossRecord {
                step,
                epoch,
                loss: lg.loss / (2.0 * batch.len() as f64),
                tau,
            });

            let mut grad = vec![0.0; n_params + 1];
            encoder.accumulate_grad(&batch.texts, &batch.images, &lg.d_texts, &lg.d_images, &mut grad[..n_params]);
            grad[n_params] = lg.d_log_tau(tau);
            if grad.iter().any(|g| !g.is_finite()) {
                encoder.params_mut().copy_from_slice(&last_good.params);
                return Err(diverged(step));
            }
            {
                let mut refs: Vec<&mut f64> = encoder.params_mut().iter_mut().collect();
                refs.push(&mut log_tau);
                opt.step(&mut refs, &grad, cfg.learning_rate, cfg.weight_decay, n_params);
            }
            step += 1;
        }
        last_good = Checkpoint {
            epoch: epoch + 1,
            step,
            tau: log_tau.exp(),
            params: encoder.params().to_vec(),
        };
        if let Some(dir) = opts.checkpoint_dir {
            let path = dir.join(format!("epoch-{:03}.json", epoch + 1));
            last_good.save(&path)?;
            outcome.checkpoint_files.push(path);
        }
        outcome.last_checkpoint = Some(last_good.clone());
    }
    outcome.tau = log_tau.exp();
    outcome.steps = step;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::loss::embedding_loss;

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let enc = LinearDualEncoder::new(3, 2, 4, 1);
        let texts = vec![vec![1.0, 0.2, -0.4], vec![0.1, 0.9, 0.3], vec![-0.6, 0.0, 1.0]];
        let images = vec![vec![0.5, -1.0], vec![1.0, 0.3], vec![0.2, 0.8]];
        let loss_at = |e: &LinearDualEncoder| {
            let et: Vec<_> = texts.iter().map(|x| e.encode_text(x)).collect();
            let ei: Vec<_> = images.iter().map(|y| e.encode_image(y)).collect();
            embedding_loss(&et, &ei, 0.5).unwrap()
        };
        let et: Vec<_> = texts.iter().map(|x| enc.encode_text(x)).collect();
        let ei: Vec<_> = images.iter().map(|y| enc.encode_image(y)).collect();
        let lg = loss_gradient(&et, &ei, 0.5).unwrap();
        let mut grad = vec![0.0; enc.params.len()];
        enc.accumulate_grad(&texts, &images, &lg.d_texts, &lg.d_images, &mut grad);
        let h = 1e-6;
        for k in 0..enc.params.len() {
            let mut plus = enc.clone();
            plus.params[k] += h;
            let mut minus = enc.clone();
            minus.params[k] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-5 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn single_pair_only_decays() {
        let mut enc = LinearDualEncoder::new(2, 2, 2, 3);
        let before = enc.params.clone();
        let mut sampler = MixedBatchSampler::new(Vec::new(), vec![(vec![1.0, 0.0], vec![0.0, 1.0])], 1, 0.0, 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 1,
            mix_ratio: 0.0,
            learning_rate: 0.1,
            weight_decay: 0.5,
            epochs: 3,
            ..TrainConfig::default()
        };
        let out = finetune(&mut enc, &mut sampler, &cfg, &FinetuneOptions::default()).unwrap();
        assert!(out.loss_curve.iter().all(|r| r.loss == 0.0));
        let factor = (1.0f64 - 0.1 * 0.5).powi(3);
        for (a, b) in enc.params.iter().zip(&before) {
            assert!((a - b * factor).abs() < 1e-12);
        }
        assert!((out.tau - cfg.init_temperature).abs() < 1e-15);
    }

    #[test]
    fn checkpoints_written_per_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = LinearDualEncoder::new(2, 2, 2, 3);
        let pool = vec![(vec![1.0, 0.0], vec![1.0, 0.1]), (vec![0.0, 1.0], vec![0.1, 1.0])];
        let mut sampler = MixedBatchSampler::new(Vec::new(), pool, 2, 0.0, 0).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            mix_ratio: 0.0,
            learning_rate: 0.01,
            epochs: 2,
            ..TrainConfig::default()
        };
        let opts = FinetuneOptions {
            checkpoint_dir: Some(dir.path()),
            augment: None,
        };
        let out = finetune(&mut enc, &mut sampler, &cfg, &opts).unwrap();
        assert_eq!(out.checkpoint_files.len(), 2);
        let ck = Checkpoint::load(&out.checkpoint_files[1]).unwrap();
        assert_eq!(ck.params, enc.params);
    }
}
