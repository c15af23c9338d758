//! Restoration of pruned layers without data: every removed filter is
//! approximated by a linear combination of the preserved filters of the
//! same layer, and the combination is folded into the downstream
//! consumer's weights so the next layer's feature maps stay close to
//! the original.
//!
//! The coefficients minimise a convex data-free loss
//! `||E||^2 + lambda1 * ||B||^2 + lambda2 * ||s||^2`, where `E` is the
//! weight-space residual of the approximation with batch-norm-scaled
//! columns and `B` the constant offset the batch-norm affine parameters
//! introduce. The unique optimum solves a small symmetric positive
//! definite system assembled here and handed to the Cholesky solver.
//!
//! Also provided: the one-to-one merging baseline (each pruned filter
//! mapped to its single most similar preserved filter, skipped below a
//! cosine threshold) and the neuron variant for fully-connected
//! networks, which is the same ridge regression over incoming-weight
//! rows.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::network::{BatchNormParams, LayerSpec, NetworkModel};
use crate::pruning::{fold_fc_columns, rebuild_with_deliveries, PruningPlan};
use crate::tensor::{spd_solve, tensor_norm, Matrix, Norm, Tensor4, Vector};

/// Default loss weights for the closed-form restoration.
pub const DEFAULT_LAMBDA1: f64 = 1e-5;
pub const DEFAULT_LAMBDA2: f64 = 1e-3;
/// Defaults for the one-to-one baseline: similarity mix and the cosine
/// threshold below which a pruned filter is left uncompensated.
pub const NM_DEFAULT_LAMBDA: f64 = 0.85;
pub const NM_DEFAULT_THRESHOLD: f64 = 0.1;

/// Batch-norm scales or deviations below this are treated as degenerate:
/// such preserved filters are excluded from the basis and such pruned
/// filters fall back to the unscaled basis without the BN-error term.
pub const DEGENERATE_BN_EPS: f64 = 1e-6;

/// Loss weights: `lambda1` scales the batch-norm error, `lambda2` the
/// ridge term that also keeps the activation error controllable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparams {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Hyperparams {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1 >= 0.0 && lambda1.is_finite() && lambda2 >= 0.0 && lambda2.is_finite()) {
            return Err(Error::InvalidHyperparams {
                detail: format!("lambda1 = {lambda1}, lambda2 = {lambda2} must be >= 0"),
            });
        }
        Ok(Self { lambda1, lambda2 })
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda1: DEFAULT_LAMBDA1,
            lambda2: DEFAULT_LAMBDA2,
        }
    }
}

/// One convolution layer's weights plus its optional batch-norm
/// parameters, the inputs to basis construction.
#[derive(Debug, Clone, Copy)]
pub struct FilterBank<'a> {
    pub weights: &'a Tensor4,
    pub bn: Option<&'a BatchNormParams>,
}

/// The regression problem for one pruned filter `j`: columns of `x` are
/// the batch-norm-scaled vectorized preserved filters, `y` the
/// vectorized pruned filter, and `p` the per-column affine offsets that
/// feed the batch-norm error term.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledBasis {
    x: Matrix,
    y: Vector,
    p: Vector,
    gamma_j: f64,
    sigma_j: f64,
    mu_j: f64,
    beta_j: f64,
    basis_kept: Vec<usize>,
    excluded: Vec<usize>,
    bn_scaled: bool,
}

impl ScaledBasis {
    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Vector {
        &self.y
    }

    pub fn p(&self) -> &Vector {
        &self.p
    }

    pub fn gamma_j(&self) -> f64 {
        self.gamma_j
    }

    pub fn sigma_j(&self) -> f64 {
        self.sigma_j
    }

    pub fn mu_j(&self) -> f64 {
        self.mu_j
    }

    pub fn beta_j(&self) -> f64 {
        self.beta_j
    }

    /// Preserved-filter indices that back the basis columns, ascending.
    pub fn basis_kept(&self) -> &[usize] {
        &self.basis_kept
    }

    /// Preserved filters excluded for degenerate batch-norm parameters;
    /// their delivery coefficients are fixed to zero.
    pub fn excluded(&self) -> &[usize] {
        &self.excluded
    }

    /// Whether columns carry batch-norm scale factors. False on the
    /// no-BN path and on the degenerate-target fallback.
    pub fn bn_scaled(&self) -> bool {
        self.bn_scaled
    }

    /// Number of basis columns.
    pub fn width(&self) -> usize {
        self.x.cols()
    }

    /// Expands basis-column coefficients to a vector over all `kept`
    /// indices, zeros at excluded positions.
    pub fn expand_to_kept(&self, s: &Vector, kept: &[usize]) -> Vector {
        let mut out = alloc::vec![0.0; kept.len()];
        for (col, &idx) in self.basis_kept.iter().enumerate() {
            let pos = kept
                .iter()
                .position(|&k| k == idx)
                .expect("basis indices come from the kept set");
            out[pos] = s.at(col);
        }
        Vector::from(out)
    }
}

fn basis_from_slices(
    items: &[&[f64]],
    j: usize,
    kept: &BTreeSet<usize>,
    bn: Option<&BatchNormParams>,
    force_unit: bool,
) -> Result<ScaledBasis> {
    debug_assert!(!kept.contains(&j), "pruned filter cannot be kept");
    debug_assert!(!kept.is_empty(), "kept set must be non-empty");
    let dim = items[j].len();
    let y = Vector::new(items[j].to_vec())?;

    let bn = if force_unit { None } else { bn };
    let (gamma_j, sigma_j, mu_j, beta_j) = match bn {
        Some(bn) => {
            let (g, s) = (bn.gamma()[j], bn.sigma()[j]);
            if s < DEGENERATE_BN_EPS || math::abs(g) < DEGENERATE_BN_EPS {
                return Err(Error::DegenerateTarget { filter: j });
            }
            (g, s, bn.mu()[j], bn.beta()[j])
        }
        None => (1.0, 1.0, 0.0, 0.0),
    };

    let mut basis_kept = Vec::new();
    let mut excluded = Vec::new();
    let mut columns: Vec<(f64, usize)> = Vec::new();
    for &i in kept {
        let scale = match bn {
            Some(bn) => {
                let (g, s) = (bn.gamma()[i], bn.sigma()[i]);
                if s < DEGENERATE_BN_EPS || math::abs(g) < DEGENERATE_BN_EPS {
                    excluded.push(i);
                    continue;
                }
                (sigma_j * g) / (gamma_j * s)
            }
            None => 1.0,
        };
        basis_kept.push(i);
        columns.push((scale, i));
    }

    let t = columns.len();
    let mut x = Matrix::zeros(dim, t);
    let mut p = alloc::vec![0.0; t];
    for (col, &(scale, i)) in columns.iter().enumerate() {
        for (d, &v) in items[i].iter().enumerate() {
            x.set(d, col, scale * v);
        }
        p[col] = match bn {
            Some(bn) => scale * (bn.mu()[i] - (bn.sigma()[i] / bn.gamma()[i]) * bn.beta()[i]),
            None => 0.0,
        };
    }

    Ok(ScaledBasis {
        x,
        y,
        p: Vector::new(p)?,
        gamma_j,
        sigma_j,
        mu_j,
        beta_j,
        basis_kept,
        excluded,
        bn_scaled: bn.is_some(),
    })
}

fn conv_slices(weights: &Tensor4) -> Vec<&[f64]> {
    (0..weights.filters()).map(|i| weights.filter(i)).collect()
}

fn fc_slices(weights: &Matrix) -> Vec<&[f64]> {
    (0..weights.rows()).map(|i| weights.row(i)).collect()
}

/// Builds the regression basis for pruned filter `j` against the
/// preserved filters. With batch-norm present, column `i` is
/// `(sigma_j * gamma_i) / (gamma_j * sigma_i) * vec(W_i)` and `p_i`
/// the matching affine offset; without it columns are the raw
/// vectorized filters and `p` is zero.
///
/// Preserved filters with near-zero `sigma` or `gamma` are excluded
/// from the basis and recorded. If the *pruned* filter's own
/// parameters are degenerate this returns [`Error::DegenerateTarget`];
/// callers fall back to [`build_unit_basis`], which drops the BN error
/// term entirely.
pub fn build_scaled_basis(
    layer: &FilterBank<'_>,
    pruned_j: usize,
    kept: &BTreeSet<usize>,
) -> Result<ScaledBasis> {
    basis_from_slices(&conv_slices(layer.weights), pruned_j, kept, layer.bn, false)
}

/// The unscaled basis: raw vectorized filters, `p = 0`, unit scale
/// factors. Used for layers without batch-norm and as the documented
/// fallback when the pruned filter's BN parameters are degenerate.
pub fn build_unit_basis(
    layer: &FilterBank<'_>,
    pruned_j: usize,
    kept: &BTreeSet<usize>,
) -> Result<ScaledBasis> {
    basis_from_slices(&conv_slices(layer.weights), pruned_j, kept, None, true)
}

/// Solves the convex data-free loss for the compensation coefficients:
/// `s = [X^T X + lambda1 (gamma_j/sigma_j)^2 p p^T + lambda2 I]^{-1}
///      [X^T y + lambda1 (gamma_j/sigma_j)((mu_j gamma_j / sigma_j) - beta_j) p]`.
pub fn solve_coefficients(basis: &ScaledBasis, hp: &Hyperparams) -> Result<Vector> {
    let t = basis.width();
    if t == 0 {
        return Err(Error::ShapeMismatch {
            context: "solve_coefficients",
            detail: "basis has no columns".into(),
        });
    }
    let dim = basis.x.rows();
    let ratio = basis.gamma_j / basis.sigma_j;

    // Gram matrix, built symmetric by construction.
    let mut a = Matrix::zeros(t, t);
    for i in 0..t {
        for k in i..t {
            let mut acc = 0.0;
            for d in 0..dim {
                acc += basis.x.at(d, i) * basis.x.at(d, k);
            }
            if hp.lambda1 > 0.0 && basis.bn_scaled {
                acc += hp.lambda1 * ratio * ratio * basis.p.at(i) * basis.p.at(k);
            }
            if i == k {
                acc += hp.lambda2;
            }
            a.set(i, k, acc);
            a.set(k, i, acc);
        }
    }

    let mut b = alloc::vec![0.0; t];
    for i in 0..t {
        let mut acc = 0.0;
        for d in 0..dim {
            acc += basis.x.at(d, i) * basis.y.at(d);
        }
        if hp.lambda1 > 0.0 && basis.bn_scaled {
            acc += hp.lambda1 * ratio * (basis.mu_j * ratio - basis.beta_j) * basis.p.at(i);
        }
        b[i] = acc;
    }

    spd_solve(&a, &Vector::from(b))
}

/// The `m x t` matrix that both selects surviving filters (one-hot kept
/// rows) and carries each pruned filter's compensation coefficients on
/// its row.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryMatrix {
    matrix: Matrix,
    kept: Vec<usize>,
    pruned: Vec<usize>,
}

impl DeliveryMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn pruned(&self) -> &[usize] {
        &self.pruned
    }

    /// Pruned rows as `(filter index, coefficients over kept columns)`.
    pub fn pruned_rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.pruned.iter().map(|&j| (j, self.matrix.row(j)))
    }

    /// Dense rows for report export.
    pub fn dense_rows(&self) -> Vec<Vec<f64>> {
        (0..self.matrix.rows())
            .map(|r| self.matrix.row(r).to_vec())
            .collect()
    }
}

/// Assembles a delivery matrix: kept rows one-hot in ascending order,
/// each pruned row carrying its coefficient vector over the kept
/// columns (zeros where the basis excluded a filter).
pub fn build_delivery_matrix(
    m: usize,
    kept: &BTreeSet<usize>,
    coeffs: &BTreeMap<usize, Vector>,
) -> Result<DeliveryMatrix> {
    let kept_vec: Vec<usize> = kept.iter().copied().collect();
    if kept_vec.iter().any(|&i| i >= m) {
        return Err(Error::ShapeMismatch {
            context: "build_delivery_matrix",
            detail: "kept index out of range".into(),
        });
    }
    let pruned_vec: Vec<usize> = (0..m).filter(|i| !kept.contains(i)).collect();
    let expect: BTreeSet<usize> = pruned_vec.iter().copied().collect();
    let got: BTreeSet<usize> = coeffs.keys().copied().collect();
    if expect != got {
        return Err(Error::ShapeMismatch {
            context: "build_delivery_matrix",
            detail: "coefficient keys must equal the pruned set".into(),
        });
    }

    let t = kept_vec.len();
    let mut matrix = Matrix::zeros(m, t);
    for (col, &row) in kept_vec.iter().enumerate() {
        matrix.set(row, col, 1.0);
    }
    for (&j, s) in coeffs {
        if s.len() != t {
            return Err(Error::ShapeMismatch {
                context: "build_delivery_matrix",
                detail: format!("row {j} has {} coefficients, expected {t}", s.len()),
            });
        }
        for (col, &v) in s.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "build_delivery_matrix",
                });
            }
            matrix.set(j, col, v);
        }
    }
    Ok(DeliveryMatrix {
        matrix,
        kept: kept_vec,
        pruned: pruned_vec,
    })
}

/// Redistributes FC input columns according to a delivery matrix.
/// Under channel-major flattening every original channel owns `w * h`
/// consecutive columns; the block for kept channel `k` becomes
/// `sum_i delivery[i, k] * block_i`. With `w = h = 1` this is exactly
/// the matrix product `fc * delivery`.
pub fn fold_into_fc(
    delivery: &DeliveryMatrix,
    spatial: (usize, usize),
    fc_weights: &Matrix,
) -> Result<Matrix> {
    fold_fc_columns(&delivery.matrix, spatial, fc_weights)
}

fn basis_for_layer(
    layer: &LayerSpec,
    layer_idx: usize,
    j: usize,
    kept: &BTreeSet<usize>,
) -> Result<ScaledBasis> {
    match layer {
        LayerSpec::Conv { weights, bn, .. } => {
            let bank = FilterBank {
                weights,
                bn: bn.as_ref(),
            };
            match build_scaled_basis(&bank, j, kept) {
                Ok(b) => Ok(b),
                // documented fallback: drop the BN error term for this filter
                Err(Error::DegenerateTarget { .. }) => build_unit_basis(&bank, j, kept),
                Err(e) => Err(e),
            }
        }
        LayerSpec::Fc { weights, .. } => basis_from_slices(&fc_slices(weights), j, kept, None, true),
        other => Err(Error::PlanShapeMismatch {
            layer: layer_idx,
            detail: format!("cannot restore a {} layer", other.kind_name()),
        }),
    }
}

type DeliveryMap = BTreeMap<usize, DeliveryMatrix>;

fn restore_with<F>(
    model: &NetworkModel,
    plan: &PruningPlan,
    mut coeff_fn: F,
) -> Result<(NetworkModel, DeliveryMap)>
where
    F: FnMut(usize, &LayerSpec, usize, &BTreeSet<usize>) -> Result<Vector>,
{
    let mut map: DeliveryMap = BTreeMap::new();
    let (restored, _) = rebuild_with_deliveries(model, plan, |layer_idx, original, pruned, kept| {
        let m = match original {
            LayerSpec::Conv { weights, .. } => weights.filters(),
            LayerSpec::Fc { weights, .. } => weights.rows(),
            _ => unreachable!("plan entries are weight-bearing layers"),
        };
        let kept_set: BTreeSet<usize> = kept.iter().copied().collect();
        let mut coeffs = BTreeMap::new();
        for &j in pruned {
            coeffs.insert(j, coeff_fn(layer_idx, original, j, &kept_set)?);
        }
        let delivery = build_delivery_matrix(m, &kept_set, &coeffs)?;
        map.insert(layer_idx, delivery.clone());
        Ok(delivery.matrix().clone())
    })?;
    Ok((restored, map))
}

/// Data-free restoration with the closed-form coefficients: for each
/// planned layer (in order) every pruned filter is regressed onto the
/// preserved filters, the delivery matrix is assembled, the layer is
/// reduced, and the consumer's weights absorb the delivery. Coefficients
/// are always computed from the original model's weights.
pub fn restore_lbyl(
    model: &NetworkModel,
    plan: &PruningPlan,
    hp: &Hyperparams,
) -> Result<(NetworkModel, DeliveryMap)> {
    restore_with(model, plan, |layer_idx, original, j, kept| {
        if !matches!(original, LayerSpec::Conv { .. }) {
            return Err(Error::PlanShapeMismatch {
                layer: layer_idx,
                detail: "plan targets an fc layer; use restore_fc_neuron".into(),
            });
        }
        let basis = basis_for_layer(original, layer_idx, j, kept)?;
        if basis.width() == 0 {
            return Ok(Vector::zeros(kept.len()));
        }
        let s = solve_coefficients(&basis, hp)?;
        let kept_vec: Vec<usize> = kept.iter().copied().collect();
        Ok(basis.expand_to_kept(&s, &kept_vec))
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// One-to-one baseline: each pruned filter is mapped to the single most
/// similar preserved filter by a mix of cosine distance and bias
/// distance, with the 1-D least-squares coefficient; below the cosine
/// threshold the filter is dropped without compensation.
pub fn restore_nm(
    model: &NetworkModel,
    plan: &PruningPlan,
    lambda_mix: f64,
    threshold_t: f64,
) -> Result<(NetworkModel, DeliveryMap)> {
    for (name, v) in [("lambda", lambda_mix), ("threshold", threshold_t)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidHyperparams {
                detail: format!("nm {name} must lie in [0, 1], got {v}"),
            });
        }
    }
    restore_with(model, plan, |layer_idx, original, j, kept| {
        let basis = basis_for_layer(original, layer_idx, j, kept)?;
        let kept_vec: Vec<usize> = kept.iter().copied().collect();
        if basis.width() == 0 {
            return Ok(Vector::zeros(kept_vec.len()));
        }
        let p_star = if basis.bn_scaled() {
            basis.mu_j() - (basis.sigma_j() / basis.gamma_j()) * basis.beta_j()
        } else {
            0.0
        };
        let y = basis.y().data();
        let y_norm = tensor_norm(y, Norm::L2);
        let dim = basis.x().rows();
        let mut best: Option<(usize, f64, f64)> = None; // (col, score, cosine)
        for col in 0..basis.width() {
            let xk: Vec<f64> = (0..dim).map(|d| basis.x().at(d, col)).collect();
            let xnorm = tensor_norm(&xk, Norm::L2);
            let cos = if xnorm > 0.0 && y_norm > 0.0 {
                dot(&xk, y) / (xnorm * y_norm)
            } else {
                0.0
            };
            let score =
                lambda_mix * (1.0 - cos) + (1.0 - lambda_mix) * math::abs(basis.p().at(col) - p_star);
            if best.map_or(true, |(_, s, _)| score < s) {
                best = Some((col, score, cos));
            }
        }
        let (col, _, cos) = best.expect("basis has at least one column");
        let mut s = Vector::zeros(basis.width());
        if cos >= threshold_t {
            let xk: Vec<f64> = (0..dim).map(|d| basis.x().at(d, col)).collect();
            let denom = dot(&xk, &xk);
            if denom > 0.0 {
                s.data_mut()[col] = dot(&xk, y) / denom;
            }
        }
        Ok(basis.expand_to_kept(&s, &kept_vec))
    })
}

/// Neuron variant for fully-connected networks: a pruned neuron's
/// incoming-weight row is ridge-regressed onto the kept rows
/// (`(X^T X + lambda I) s = X^T y`), and each kept neuron's outgoing
/// weights gain `s_k` times the pruned neuron's outgoing weights.
/// Biases of kept neurons are unchanged; the pruned neuron's bias is
/// dropped without compensation.
pub fn restore_fc_neuron(
    model: &NetworkModel,
    plan: &PruningPlan,
    lambda: f64,
) -> Result<(NetworkModel, DeliveryMap)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidHyperparams {
            detail: format!("lambda must be >= 0, got {lambda}"),
        });
    }
    let hp = Hyperparams {
        lambda1: 0.0,
        lambda2: lambda,
    };
    restore_with(model, plan, |layer_idx, original, j, kept| {
        if !matches!(original, LayerSpec::Fc { .. }) {
            return Err(Error::PlanShapeMismatch {
                layer: layer_idx,
                detail: "plan targets a conv layer; use restore_lbyl".into(),
            });
        }
        let basis = basis_for_layer(original, layer_idx, j, kept)?;
        let s = solve_coefficients(&basis, &hp)?;
        let kept_vec: Vec<usize> = kept.iter().copied().collect();
        Ok(basis.expand_to_kept(&s, &kept_vec))
    })
}

/// Zero-compensation deliveries: the delivery matrix degenerates to the
/// pruning matrix, so the result must equal
/// [`crate::pruning::apply_pruning`] exactly. Exposed for the
/// prune-only pipeline so reports can still carry delivery matrices.
pub fn prune_with_deliveries(
    model: &NetworkModel,
    plan: &PruningPlan,
) -> Result<(NetworkModel, DeliveryMap)> {
    restore_with(model, plan, |_, _, _, kept| Ok(Vector::zeros(kept.len())))
}
