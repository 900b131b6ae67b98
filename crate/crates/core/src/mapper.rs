//! Feature-to-embedding encoder for cold-start products.
//!
//! The encoder is trained as the first half of an autoencoder whose second
//! half is the trained VASG decoder, held fixed: it minimises
//! `‖f - dec(enc(f + ε))‖² / I` over warm products, with Gaussian input
//! noise scaled per dimension by the empirical feature spread.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::nn::{self, AdamConfig, AdamState, Mlp, MlpGrads, Mode};
use crate::rng::{self, Rng};
use crate::vectors::Vectors;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    /// Input noise std as a fraction of each feature dimension's std.
    pub noise_std_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout_p: f64,
    /// Regress `enc(f)` onto the trained embedding instead of reconstructing
    /// `f` through the decoder (ablation).
    pub direct_regression: bool,
    pub seed: u64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            noise_std_scale: 0.05,
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            dropout_p: 0.5,
            direct_regression: false,
            seed: 0,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std_scale >= 0.0 && self.noise_std_scale.is_finite()) {
            return Err(Error::Config(format!("noise scale {}", self.noise_std_scale)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("mapper epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("mapper learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("mapper dropout {}", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    /// `I → reversed decoder hidden widths → D`.
    pub mlp: Mlp,
    pub config: MapperConfig,
}

impl Encoder {
    /// Randomly initialised encoder mirroring `decoder`.
    pub fn mirror(decoder: &Mlp, config: MapperConfig) -> Result<Self> {
        let mut sizes = decoder.sizes();
        sizes.reverse();
        let mut r = rng::stream(config.seed, &[0]);
        let mlp = Mlp::new(&sizes, config.dropout_p, &mut r)?;
        Ok(Encoder { mlp, config })
    }
}

/// Eval-mode embedding of a feature vector: no dropout, no noise.
pub fn map_features(encoder: &Encoder, f: &[f64]) -> Result<Vec<f64>> {
    encoder.mlp.predict(f)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapperReport {
    /// Mean training loss per epoch (noisy inputs, dropout on).
    pub history: Vec<f64>,
    /// Loss on the clean warm inputs in eval mode after each epoch.
    pub eval_history: Vec<f64>,
}

/// Per-dimension population std over the given rows.
pub fn feature_std(rows: &Array2<f64>) -> Vec<f64> {
    rows.std_axis(Axis(0), 0.0).to_vec()
}

/// Autoencoder loss through the frozen decoder for a batch, and the encoder
/// gradients. `inputs` are the (possibly noisy) encoder inputs, `targets`
/// the clean features (or embeddings in direct-regression mode).
pub fn mapper_batch_loss(
    encoder: &Encoder,
    decoder: &Mlp,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    rng: &mut Rng,
) -> Result<(f64, MlpGrads)> {
    let batch = inputs.nrows() as f64;
    let (code, enc_tape) = encoder.mlp.forward_batch(inputs.view(), Mode::Train(rng))?;
    let (pred, dec_tape) = if encoder.config.direct_regression {
        (code, None)
    } else {
        let (recon, tape) = decoder.forward_batch(code.view(), Mode::Eval)?;
        (recon, Some(tape))
    };
    if pred.raw_dim() != targets.raw_dim() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            targets.shape()
        )));
    }
    let width = pred.ncols() as f64;
    let diff = &pred - targets;
    let loss = diff.mapv(|d| d * d).sum() / (width * batch);
    let grad_pred = diff * (2.0 / (width * batch));
    let grad_code = match dec_tape {
        Some(tape) => decoder.backward_input(&tape, grad_pred.view())?,
        None => grad_pred,
    };
    let (grads, _) = encoder.mlp.backward_batch(&enc_tape, grad_code.view())?;
    Ok((loss, grads))
}

fn eval_loss(encoder: &Encoder, decoder: &Mlp, inputs: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    let (code, _) = encoder.mlp.forward_batch(inputs.view(), Mode::Eval)?;
    let pred = if encoder.config.direct_regression {
        code
    } else {
        decoder.forward_batch(code.view(), Mode::Eval)?.0
    };
    Ok((&pred - targets).mapv(|d| d * d).mean().unwrap_or(0.0))
}

/// Trains an encoder against `decoder`, which is only read.
///
/// `warm` lists the products to train on; `embeddings` is required only in
/// direct-regression mode.
pub fn train_mapper(
    decoder: &Mlp,
    features: &FeatureMatrix,
    warm: &[String],
    embeddings: Option<&Vectors>,
    cfg: &MapperConfig,
) -> Result<(Encoder, MapperReport)> {
    cfg.validate()?;
    if warm.is_empty() {
        return Err(Error::Precondition("no warm products to train the mapper on".into()));
    }
    if decoder.output_dim() != features.dim() {
        return Err(Error::Dimension(format!(
            "decoder outputs {} but features have dim {}",
            decoder.output_dim(),
            features.dim()
        )));
    }
    features.require(warm.iter().map(String::as_str))?;

    let dim = features.dim();
    let mut rows = Array2::zeros((warm.len(), dim));
    for (i, id) in warm.iter().enumerate() {
        for (dst, &v) in rows.row_mut(i).iter_mut().zip(features.row(id).unwrap()) {
            *dst = f64::from(v);
        }
    }
    let targets = if cfg.direct_regression {
        let emb = embeddings
            .ok_or_else(|| Error::Precondition("direct regression needs embeddings".into()))?;
        let mut t = Array2::zeros((warm.len(), emb.dim()));
        for (i, id) in warm.iter().enumerate() {
            let v = emb.get(id).ok_or_else(|| Error::UnknownId {
                kind: "product",
                id: id.clone(),
            })?;
            t.row_mut(i).as_slice_mut().unwrap().copy_from_slice(v);
        }
        t
    } else {
        rows.clone()
    };
    let noise_sd: Vec<f64> = feature_std(&rows)
        .into_iter()
        .map(|s| s * cfg.noise_std_scale)
        .collect();

    let mut encoder = Encoder::mirror(decoder, cfg.clone())?;
    let mut adam = AdamState::for_mlp(AdamConfig::with_lr(cfg.lr), &encoder.mlp);
    let mut report = MapperReport::default();
    let mut order: Vec<usize> = (0..warm.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[1, epoch as u64]));
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut r = rng::stream(cfg.seed, &[2, epoch as u64, b as u64]);
            let clean = rows.select(Axis(0), idx);
            let mut noisy = clean.clone();
            if cfg.noise_std_scale > 0.0 {
                for mut row in noisy.rows_mut() {
                    for (v, &sd) in row.iter_mut().zip(&noise_sd) {
                        let z: f64 = StandardNormal.sample(&mut r);
                        *v += sd * z;
                    }
                }
            }
            let batch_targets = targets.select(Axis(0), idx);
            let (loss, grads) = mapper_batch_loss(&encoder, decoder, &noisy, &batch_targets, &mut r)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "mapper loss at epoch {epoch}, batch {b}"
                )));
            }
            total += loss * idx.len() as f64;
            nn::adam_step(&mut adam, &mut encoder.mlp.param_slices_mut(), &grads.slices())?;
        }
        let mean = total / warm.len() as f64;
        let clean = eval_loss(&encoder, decoder, &rows, &targets)?;
        log::info!("mapper epoch {epoch}: loss={mean:.6} clean={clean:.6}");
        report.history.push(mean);
        report.eval_history.push(clean);
    }
    Ok((encoder, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::mlp_bytes;
    use crate::nn::{grad_check, Dense};
    use ndarray::Array1;
    use rand::Rng as _;

    fn identity_decoder(d: usize) -> Mlp {
        Mlp::from_layers(
            vec![Dense {
                weights: Array2::eye(d),
                bias: Array1::zeros(d),
            }],
            0.0,
        )
        .unwrap()
    }

    fn random_features(n: usize, d: usize, seed: u64) -> (FeatureMatrix, Vec<String>) {
        let mut r = rng::stream(seed, &[]);
        let ids: Vec<String> = (0..n).map(|i| format!("p{i:03}")).collect();
        let rows = (0..n * d).map(|_| r.random_range(-1.0f32..1.0)).collect();
        (FeatureMatrix::new(d, ids.clone(), rows).unwrap(), ids)
    }

    #[test]
    fn identity_decoder_learns_identity() {
        let (features, ids) = random_features(64, 4, 1);
        let decoder = identity_decoder(4);
        let cfg = MapperConfig {
            noise_std_scale: 0.0,
            epochs: 400,
            batch_size: 16,
            lr: 1e-2,
            dropout_p: 0.0,
            ..MapperConfig::default()
        };
        let (enc, report) = train_mapper(&decoder, &features, &ids, None, &cfg).unwrap();
        assert!(*report.history.last().unwrap() < 1e-3, "{:?}", report.history.last());
        let f = features.row_f64("p007").unwrap();
        let mapped = map_features(&enc, &f).unwrap();
        assert!(nn::mse(&mapped, &f).unwrap() < 1e-3);
    }

    #[test]
    fn decoder_bytes_unchanged() {
        let (features, ids) = random_features(20, 6, 2);
        let decoder = Mlp::new(&[3, 5, 6], 0.5, &mut rng::stream(3, &[])).unwrap();
        let before = mlp_bytes(&decoder);
        let cfg = MapperConfig {
            epochs: 3,
            ..MapperConfig::default()
        };
        train_mapper(&decoder, &features, &ids, None, &cfg).unwrap();
        assert_eq!(before, mlp_bytes(&decoder));
    }

    #[test]
    fn empty_warm_set_rejected() {
        let (features, _) = random_features(4, 4, 4);
        assert!(train_mapper(&identity_decoder(4), &features, &[], None, &MapperConfig::default()).is_err());
    }

    #[test]
    fn map_features_is_pure_and_finite() {
        let decoder = Mlp::new(&[3, 8, 5], 0.5, &mut rng::stream(5, &[])).unwrap();
        let enc = Encoder::mirror(&decoder, MapperConfig::default()).unwrap();
        assert_eq!(enc.mlp.sizes(), [5, 8, 3]);
        let f = [0.3, -0.1, 0.8, 0.0, 1.2];
        assert_eq!(map_features(&enc, &f).unwrap(), map_features(&enc, &f).unwrap());
        assert!(map_features(&enc, &[0.0; 5]).unwrap().iter().all(|v| v.is_finite()));
        assert!(map_features(&enc, &[0.0; 4]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut r = rng::stream(6, &[]);
        let decoder = Mlp::new(&[3, 6, 5], 0.0, &mut r).unwrap();
        let enc = Encoder::mirror(
            &decoder,
            MapperConfig {
                dropout_p: 0.0,
                ..MapperConfig::default()
            },
        )
        .unwrap();
        let x = Array2::from_shape_fn((4, 5), |_| r.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((4, 5), |_| r.random_range(-1.0..1.0));
        let (_, grads) = mapper_batch_loss(&enc, &decoder, &x, &t, &mut rng::stream(0, &[])).unwrap();
        let params = enc.mlp.flatten();
        let err = grad_check(
            |p| {
                let mut e = enc.clone();
                e.mlp.set_flat(p).unwrap();
                mapper_batch_loss(&e, &decoder, &x, &t, &mut rng::stream(0, &[])).unwrap().0
            },
            &grads.flatten(),
            &params,
            1e-4,
        );
        // Kinks are possible with random ReLU nets; this draw has none.
        assert!(err < 1e-4, "{err}");
    }
}
