//! Restoration-quality metrics.
//!
//! The data-free terms come straight from the regression basis: the
//! residual error `RE = ||y - X s||_2` and the batch-norm error
//! `BE = |(gamma_j / sigma_j) (s^T p - mu_j + (sigma_j / gamma_j) beta_j)|`.
//! The activation error caused by ReLU is data-dependent; only its upper
//! bound `sum_k |s_k| ||N(Z_k)||_1 + sum max(0, -N(Z_j))` is computable,
//! and it needs probe taps. Layer-wise reconstruction quality on probes
//! is summarised by a relative L1 discrepancy (WARE) between original
//! and restored activations.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::network::{
    batch_norm_apply, forward, BatchNormParams, Feature, NetworkModel, TapRecord,
};
use crate::pruning::PruningPlan;
use crate::restore::{DeliveryMatrix, ScaledBasis};
use crate::tensor::{tensor_norm, Norm, Tensor3, Vector};

/// Stabilizer for relative errors on near-zero activations.
pub const WARE_EPS: f64 = 1e-12;

/// `||y - X s||_2`: how far the pruned filter lies from the span of the
/// scaled preserved filters at coefficients `s`.
pub fn residual_error(basis: &ScaledBasis, s: &Vector) -> Result<f64> {
    if s.len() != basis.width() {
        return Err(Error::ShapeMismatch {
            context: "residual_error",
            detail: format!("{} coefficients for {} columns", s.len(), basis.width()),
        });
    }
    let dim = basis.x().rows();
    let mut acc = 0.0;
    for d in 0..dim {
        let mut e = basis.y().at(d);
        for k in 0..basis.width() {
            e -= basis.x().at(d, k) * s.at(k);
        }
        acc += e * e;
    }
    Ok(math::sqrt(acc))
}

/// `|(gamma_j / sigma_j) (s^T p - mu_j + (sigma_j / gamma_j) beta_j)|`,
/// the constant channel offset left by the batch-norm affine parameters.
pub fn bn_error(basis: &ScaledBasis, s: &Vector) -> Result<f64> {
    if s.len() != basis.width() {
        return Err(Error::ShapeMismatch {
            context: "bn_error",
            detail: format!("{} coefficients for {} columns", s.len(), basis.width()),
        });
    }
    let ratio = basis.gamma_j() / basis.sigma_j();
    let sp: f64 = (0..basis.width())
        .map(|k| s.at(k) * basis.p().at(k))
        .fold(0.0, |a, v| a + v);
    Ok(math::abs(
        ratio * (sp - basis.mu_j() + basis.beta_j() / ratio),
    ))
}

/// The full data-free loss
/// `||E||_2^2 + lambda1 ||B||_2^2 + lambda2 ||s||_2^2` at coefficients
/// `s`; the closed-form solution is its unique minimiser.
pub fn reconstruction_loss(
    basis: &ScaledBasis,
    s: &Vector,
    hp: &crate::restore::Hyperparams,
) -> Result<f64> {
    let re = residual_error(basis, s)?;
    let be = bn_error(basis, s)?;
    let sn = tensor_norm(s.data(), Norm::L2);
    Ok(re * re + hp.lambda1 * be * be + hp.lambda2 * sn * sn)
}

/// Upper bound on the L1 activation error of pruned filter `j` at one
/// layer, averaged over the probe samples in `taps`:
/// `sum_k |s_k| ||N(Z_k)||_1 + sum_elements max(0, -N(Z_j))`.
///
/// `s` runs over the kept set in ascending order; `bn` is the layer's
/// batch-norm (identity when absent).
pub fn ae_bound(
    s: &Vector,
    taps: &TapRecord,
    layer: usize,
    bn: Option<&BatchNormParams>,
    pruned_j: usize,
    kept: &BTreeSet<usize>,
) -> Result<f64> {
    if s.len() != kept.len() {
        return Err(Error::ShapeMismatch {
            context: "ae_bound",
            detail: format!("{} coefficients for {} kept filters", s.len(), kept.len()),
        });
    }
    let samples = taps.layer(layer)?;
    if samples.is_empty() {
        return Err(Error::MissingTap { layer });
    }
    let mut total = 0.0;
    for tap in samples {
        let Feature::Map(z) = &tap.pre else {
            return Err(Error::ShapeMismatch {
                context: "ae_bound",
                detail: "layer tap is not a feature map".into(),
            });
        };
        let nz = match bn {
            Some(bn) => batch_norm_apply(z, bn)?,
            None => z.clone(),
        };
        let mut bound = 0.0;
        for (pos, &k) in kept.iter().enumerate() {
            bound += math::abs(s.at(pos)) * tensor_norm(nz.channel(k), Norm::L1);
        }
        for &v in nz.channel(pruned_j) {
            if v < 0.0 {
                bound -= v;
            }
        }
        total += bound;
    }
    Ok(total / samples.len() as f64)
}

fn feature_pair_ware(original: &Feature, restored: &Feature) -> Result<f64> {
    let (a, b) = (original.data(), restored.data());
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "ware",
            detail: format!("tap sizes {} vs {}", a.len(), b.len()),
        });
    }
    let mut diff = 0.0;
    for (x, y) in a.iter().zip(b) {
        diff += math::abs(x - y);
    }
    Ok(diff / (tensor_norm(a, Norm::L1) + WARE_EPS))
}

/// Relative L1 reconstruction error of a layer's activations, averaged
/// over probe samples: `mean ||A - A_hat||_1 / (||A||_1 + eps)`.
///
/// The two records must already be channel-aligned: at a pruned layer
/// compare against the original's preserved channels, at consumer
/// layers against the full outputs.
pub fn ware(original: &TapRecord, restored: &TapRecord, layer: usize) -> Result<f64> {
    let orig = original.layer(layer)?;
    let rest = restored.layer(layer)?;
    if orig.len() != rest.len() || orig.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "ware",
            detail: format!("{} vs {} samples", orig.len(), rest.len()),
        });
    }
    let mut total = 0.0;
    for (a, b) in orig.iter().zip(rest) {
        total += feature_pair_ware(&a.post, &b.post)?;
    }
    Ok(total / orig.len() as f64)
}

/// Top-1 classification accuracy; ties go to the lowest class index.
pub fn accuracy(model: &NetworkModel, inputs: &[Tensor3], labels: &[i32]) -> Result<f64> {
    if inputs.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "accuracy",
            detail: format!("{} inputs vs {} labels", inputs.len(), labels.len()),
        });
    }
    if inputs.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "accuracy",
            detail: "empty dataset".into(),
        });
    }
    let empty = BTreeSet::new();
    let mut hits = 0usize;
    for (input, &label) in inputs.iter().zip(labels) {
        let (out, _) = forward(model, input, &empty)?;
        let logits = out.as_flat().ok_or_else(|| Error::ShapeMismatch {
            context: "accuracy",
            detail: "model output is not a vector".into(),
        })?;
        let mut best = 0usize;
        for (i, &v) in logits.data().iter().enumerate() {
            if v > logits.at(best) {
                best = i;
            }
        }
        if best as i32 == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / inputs.len() as f64)
}

/// Statistics over the absolute values of all pruned-row coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleStats {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

/// Mean, max and min of `|coefficient|` across every pruned row of
/// every delivery matrix.
pub fn scale_stats(deliveries: &BTreeMap<usize, DeliveryMatrix>) -> Result<ScaleStats> {
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for delivery in deliveries.values() {
        for (_, row) in delivery.pruned_rows() {
            for &v in row {
                let a = math::abs(v);
                sum += a;
                if a > max {
                    max = a;
                }
                if a < min {
                    min = a;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyDelivery);
    }
    Ok(ScaleStats {
        mean: sum / count as f64,
        max,
        min,
    })
}

/// Per-layer error summary: one entry per pruned filter, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerErrorRecord {
    pub layer: usize,
    pub residual_errors: Vec<f64>,
    pub bn_errors: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ae_bounds: Option<Vec<f64>>,
    pub residual_error_sum: f64,
    pub bn_error_sum: f64,
}

impl LayerErrorRecord {
    pub fn new(
        layer: usize,
        residual_errors: Vec<f64>,
        bn_errors: Vec<f64>,
        ae_bounds: Option<Vec<f64>>,
    ) -> Self {
        let residual_error_sum = residual_errors.iter().sum();
        let bn_error_sum = bn_errors.iter().sum();
        Self {
            layer,
            residual_errors,
            bn_errors,
            ae_bounds,
            residual_error_sum,
            bn_error_sum,
        }
    }
}

/// Hyperparameters as they appear in a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportHyperparams {
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nm_lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nm_threshold: Option<f64>,
}

/// Original-vs-restored accuracy on the probe dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPair {
    pub original: f64,
    pub restored: f64,
}

/// Everything one prune-and-restore run produced. Serialized to JSON
/// as-is; the CSV flattening lives in the companion crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationReport {
    pub model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub restored_model: Option<String>,
    pub method: String,
    pub plan: PruningPlan,
    pub hyperparams: ReportHyperparams,
    pub layers: Vec<LayerErrorRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ware: Option<BTreeMap<usize, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_stats: Option<ScaleStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<AccuracyPair>,
    pub deliveries: BTreeMap<usize, Vec<Vec<f64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{generate_synthetic, Tap};
    use crate::restore::{
        build_delivery_matrix, build_scaled_basis, solve_coefficients, FilterBank, Hyperparams,
    };
    use crate::tensor::Tensor4;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_filters(r: &mut ChaCha8Rng, m: usize, n: usize, k: usize) -> Tensor4 {
        let data = (0..m * n * k * k)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        Tensor4::new(m, n, k, k, data).unwrap()
    }

    fn random_bn(r: &mut ChaCha8Rng, m: usize) -> BatchNormParams {
        BatchNormParams::new(
            (0..m).map(|_| r.random_range(0.5..1.5)).collect(),
            (0..m).map(|_| r.random_range(-0.3..0.3)).collect(),
            (0..m).map(|_| r.random_range(-0.3..0.3)).collect(),
            (0..m).map(|_| r.random_range(0.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn residual_error_at_zero_is_target_norm() {
        let mut r = rng(0);
        let weights = random_filters(&mut r, 4, 2, 3);
        let bn = random_bn(&mut r, 4);
        let bank = FilterBank {
            weights: &weights,
            bn: Some(&bn),
        };
        let kept: BTreeSet<usize> = [0, 1, 3].into_iter().collect();
        let basis = build_scaled_basis(&bank, 2, &kept).unwrap();
        let zero = Vector::zeros(basis.width());
        let re = residual_error(&basis, &zero).unwrap();
        let expect = tensor_norm(weights.filter(2), Norm::L2);
        assert!((re - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn residual_error_vanishes_on_exact_span() {
        // y = 2 x0 - x1 with identity bn
        let f0 = vec![1.0, 0.0, 2.0, -1.0];
        let f1 = vec![0.0, 1.0, 1.0, 3.0];
        let y: Vec<f64> = f0.iter().zip(&f1).map(|(a, b)| 2.0 * a - b).collect();
        let mut data = f0;
        data.extend(f1);
        data.extend(y);
        let weights = Tensor4::new(3, 1, 2, 2, data).unwrap();
        let bank = FilterBank {
            weights: &weights,
            bn: None,
        };
        let kept: BTreeSet<usize> = [0, 1].into_iter().collect();
        let basis = build_scaled_basis(&bank, 2, &kept).unwrap();
        let s = solve_coefficients(&basis, &Hyperparams::new(0.0, 0.0).unwrap()).unwrap();
        assert!(residual_error(&basis, &s).unwrap() < 1e-9);
    }

    #[test]
    fn residual_error_matches_tensor_recomputation() {
        let mut r = rng(1);
        let weights = random_filters(&mut r, 5, 2, 3);
        let bn = random_bn(&mut r, 5);
        let bank = FilterBank {
            weights: &weights,
            bn: Some(&bn),
        };
        let j = 1;
        let kept: BTreeSet<usize> = [0, 2, 3, 4].into_iter().collect();
        let basis = build_scaled_basis(&bank, j, &kept).unwrap();
        let s = Vector::from(
            (0..basis.width())
                .map(|_| r.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        );
        let re = residual_error(&basis, &s).unwrap();

        // direct: || W_j - sum_k s_k (sigma_j gamma_k / gamma_j sigma_k) W_k ||
        let mut e: Vec<f64> = weights.filter(j).to_vec();
        for (col, &k) in basis.basis_kept().iter().enumerate() {
            let scale = (bn.sigma()[j] * bn.gamma()[k]) / (bn.gamma()[j] * bn.sigma()[k]);
            for (d, &v) in weights.filter(k).iter().enumerate() {
                e[d] -= s.at(col) * scale * v;
            }
        }
        let expect = tensor_norm(&e, Norm::L2);
        assert!((re - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn bn_error_trivial_cases() {
        let mut r = rng(2);
        let weights = random_filters(&mut r, 3, 1, 3);
        // identity bn: p = 0, mu = beta = 0 -> BE = 0 for any s
        let bank = FilterBank {
            weights: &weights,
            bn: None,
        };
        let kept: BTreeSet<usize> = [0, 2].into_iter().collect();
        let basis = build_scaled_basis(&bank, 1, &kept).unwrap();
        let s = Vector::from(vec![0.4, -0.9]);
        assert_eq!(bn_error(&basis, &s).unwrap(), 0.0);

        // s = 0, gamma_j = sigma_j = 1 -> |beta_j - mu_j|
        let bn = BatchNormParams::new(
            vec![1.0; 3],
            vec![0.7, -0.4, 0.1],
            vec![0.2, 0.9, -0.5],
            vec![1.0; 3],
        )
        .unwrap();
        let bank = FilterBank {
            weights: &weights,
            bn: Some(&bn),
        };
        let basis = build_scaled_basis(&bank, 1, &kept).unwrap();
        let zero = Vector::zeros(basis.width());
        let be = bn_error(&basis, &zero).unwrap();
        assert!((be - (0.9_f64 - (-0.4)).abs()).abs() < 1e-12);
    }

    fn constant_map(c: usize, w: usize, h: usize, v: f64) -> Tensor3 {
        Tensor3::new(c, w, h, vec![v; c * w * h]).unwrap()
    }

    #[test]
    fn ae_bound_trivial_cases() {
        // two channels, bn absent; taps carry Z directly
        let mut taps = TapRecord::default();
        let z = Tensor3::new(2, 1, 2, vec![1.0, 2.0, -3.0, 4.0]).unwrap();
        taps.taps.insert(
            0,
            vec![Tap {
                pre: Feature::Map(z),
                post: Feature::Map(constant_map(2, 1, 2, 0.0)),
            }],
        );
        let kept: BTreeSet<usize> = [0].into_iter().collect();
        // s = 0 and Z_j >= 0 everywhere (channel 0) -> 0
        let b = ae_bound(&Vector::zeros(1), &taps, 0, None, 0, &kept).unwrap();
        assert_eq!(b, 0.0);
        // s = 0, channel 1 has a negative entry -> sum max(0, -z)
        let kept1: BTreeSet<usize> = [0].into_iter().collect();
        let b = ae_bound(&Vector::zeros(1), &taps, 0, None, 1, &kept1).unwrap();
        assert_eq!(b, 3.0);
        // missing layer
        assert!(matches!(
            ae_bound(&Vector::zeros(1), &taps, 9, None, 0, &kept),
            Err(Error::MissingTap { layer: 9 })
        ));
    }

    #[test]
    fn ware_trivial_cases() {
        let mut orig = TapRecord::default();
        let mut rest = TapRecord::default();
        let a = constant_map(1, 2, 2, 1.0);
        orig.taps.insert(
            3,
            vec![Tap {
                pre: Feature::Map(a.clone()),
                post: Feature::Map(a.clone()),
            }],
        );
        rest.taps.insert(
            3,
            vec![Tap {
                pre: Feature::Map(a.clone()),
                post: Feature::Map(a.clone()),
            }],
        );
        assert_eq!(ware(&orig, &rest, 3).unwrap(), 0.0);

        let zero = constant_map(1, 2, 2, 0.0);
        rest.taps.get_mut(&3).unwrap()[0].post = Feature::Map(zero);
        let w = ware(&orig, &rest, 3).unwrap();
        assert!((w - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ware_is_scale_invariant() {
        let mut r = rng(3);
        let scale = 37.5;
        let mut orig = TapRecord::default();
        let mut rest = TapRecord::default();
        let mut orig_scaled = TapRecord::default();
        let mut rest_scaled = TapRecord::default();
        for _ in 0..4 {
            let a: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..12).map(|_| r.random_range(-1.0..1.0)).collect();
            let push = |rec: &mut TapRecord, data: &[f64], s: f64| {
                let t =
                    Tensor3::new(3, 2, 2, data.iter().map(|v| v * s).collect()).unwrap();
                rec.taps.entry(0).or_default().push(Tap {
                    pre: Feature::Map(t.clone()),
                    post: Feature::Map(t),
                });
            };
            push(&mut orig, &a, 1.0);
            push(&mut rest, &b, 1.0);
            push(&mut orig_scaled, &a, scale);
            push(&mut rest_scaled, &b, scale);
        }
        let w1 = ware(&orig, &rest, 0).unwrap();
        let w2 = ware(&orig_scaled, &rest_scaled, 0).unwrap();
        assert!((w1 - w2).abs() <= 1e-12 * w1.max(1.0));
    }

    #[test]
    fn accuracy_trivial_and_oracle() {
        // constant-logit model favouring class 0: fc weights all zero, bias
        // one-hot at 0
        let fc = crate::tensor::Matrix::zeros(3, 4);
        let model = NetworkModel::new(
            vec![
                crate::network::LayerSpec::Flatten,
                crate::network::LayerSpec::Fc {
                    weights: fc,
                    bias: Some(Vector::from(vec![1.0, 0.0, 0.0])),
                    activation: crate::network::Activation::None,
                },
            ],
            (1, 2, 2),
            BTreeMap::new(),
        )
        .unwrap();
        let inputs: Vec<Tensor3> = (0..5).map(|_| constant_map(1, 2, 2, 0.5)).collect();
        assert_eq!(accuracy(&model, &inputs, &[0; 5]).unwrap(), 1.0);
        assert_eq!(accuracy(&model, &inputs, &[1; 5]).unwrap(), 0.0);

        // random model vs per-sample loop
        let model = generate_synthetic("mlp-tiny", 4, 1).unwrap();
        let mut r = rng(4);
        let inputs: Vec<Tensor3> = (0..8)
            .map(|_| {
                Tensor3::new(
                    1,
                    8,
                    8,
                    (0..64).map(|_| r.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let labels: Vec<i32> = (0..8).map(|_| r.random_range(0..10)).collect();
        let acc = accuracy(&model, &inputs, &labels).unwrap();
        let mut hits = 0;
        for (x, &l) in inputs.iter().zip(&labels) {
            let (out, _) = forward(&model, x, &BTreeSet::new()).unwrap();
            let logits = out.as_flat().unwrap();
            let mut best = 0;
            for i in 0..logits.len() {
                if logits.at(i) > logits.at(best) {
                    best = i;
                }
            }
            if best as i32 == l {
                hits += 1;
            }
        }
        assert_eq!(acc, hits as f64 / 8.0);
    }

    #[test]
    fn scale_stats_cases() {
        let kept: BTreeSet<usize> = [0, 1].into_iter().collect();
        let mut coeffs = BTreeMap::new();
        coeffs.insert(2usize, Vector::from(vec![1.0, 0.0]));
        let d = build_delivery_matrix(3, &kept, &coeffs).unwrap();
        let mut map = BTreeMap::new();
        map.insert(0usize, d);
        let stats = scale_stats(&map).unwrap();
        assert_eq!(stats.mean, 0.5);
        assert_eq!(stats.max, 1.0);
        assert_eq!(stats.min, 0.0);

        // all-zero pruned rows
        let mut coeffs = BTreeMap::new();
        coeffs.insert(2usize, Vector::zeros(2));
        let d = build_delivery_matrix(3, &kept, &coeffs).unwrap();
        let mut map = BTreeMap::new();
        map.insert(0usize, d);
        let stats = scale_stats(&map).unwrap();
        assert_eq!(stats, ScaleStats { mean: 0.0, max: 0.0, min: 0.0 });

        // no pruned rows at all
        let d = build_delivery_matrix(2, &kept, &BTreeMap::new()).unwrap();
        let mut map = BTreeMap::new();
        map.insert(0usize, d);
        assert!(matches!(scale_stats(&map), Err(Error::EmptyDelivery)));
    }
}
