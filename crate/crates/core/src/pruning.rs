//! Data-independent filter scoring, pruned-set selection, pruning
//! matrices, and structural application of a plan to a model.
//!
//! Scoring never looks at data: filters are ranked by their own norms
//! (or by total distance to the other filters for the geometric-median
//! criterion), or by a seeded random permutation. Applying a plan
//! reduces each planned layer with a one-hot selector and shrinks the
//! downstream consumer to match; the same rewrite drives restoration,
//! which only swaps the one-hot selector for a delivery matrix with
//! compensation coefficients.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::math;
use crate::network::{LayerSpec, NetworkModel, ShapeInfo};
use crate::tensor::{mode1_product, mode2_product, Matrix, Tensor4, Vector};

/// Filter-importance criterion. Lower scores are pruned first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    L1Norm,
    L2Norm,
    /// Sum of L2 distances to every other filter, the usual surrogate
    /// for distance to the geometric median.
    L2Gm,
    /// Seeded pseudo-random ranking; the seed makes runs reproducible.
    Random(u64),
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::L1Norm => write!(f, "l1"),
            Self::L2Norm => write!(f, "l2"),
            Self::L2Gm => write!(f, "l2gm"),
            Self::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(Self::L1Norm),
            "l2" => Ok(Self::L2Norm),
            "l2gm" => Ok(Self::L2Gm),
            other => {
                if let Some(seed) = other.strip_prefix("random:") {
                    seed.parse::<u64>()
                        .map(Self::Random)
                        .map_err(|_| Error::InvalidHyperparams {
                            detail: format!("bad random seed in criterion '{other}'"),
                        })
                } else {
                    Err(Error::InvalidHyperparams {
                        detail: format!(
                            "unknown criterion '{other}' (expected l1, l2, l2gm or random:<seed>)"
                        ),
                    })
                }
            }
        }
    }
}

impl Serialize for Criterion {
    fn serialize<S: Serializer>(&self, serializer: S) -> core::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Criterion {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> core::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-layer pruned filter sets plus the criterion and nominal ratio
/// that produced them. The `layers` map is authoritative; `ratio` is
/// the requested fraction (per-layer actual fractions follow from the
/// set sizes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub criterion: Criterion,
    pub ratio: f64,
    pub layers: BTreeMap<usize, BTreeSet<usize>>,
}

impl PruningPlan {
    pub fn empty(criterion: Criterion, ratio: f64) -> Self {
        Self {
            criterion,
            ratio,
            layers: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.layers.values().all(BTreeSet::is_empty)
    }
}

/// The coefficient-free `m x t` selector: column `k` is one-hot at the
/// `k`-th surviving filter index.
#[derive(Debug, Clone, PartialEq)]
pub struct PruningMatrix {
    matrix: Matrix,
    kept: Vec<usize>,
}

impl PruningMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Surviving filter indices, ascending; one per column.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    /// The transpose `t x m` selector used by the mode products.
    pub fn selector(&self) -> Matrix {
        self.matrix.transpose()
    }
}

fn filter_slices(filters: &Tensor4) -> Vec<&[f64]> {
    (0..filters.filters()).map(|i| filters.filter(i)).collect()
}

fn row_slices(weights: &Matrix) -> Vec<&[f64]> {
    (0..weights.rows()).map(|i| weights.row(i)).collect()
}

fn score_slices(items: &[&[f64]], criterion: &Criterion) -> Result<Vector> {
    let m = items.len();
    if m < 2 {
        return Err(Error::DegenerateLayer { filters: m });
    }
    let scores = match criterion {
        Criterion::L1Norm => items
            .iter()
            .map(|f| f.iter().fold(0.0, |acc, &v| acc + math::abs(v)))
            .collect(),
        Criterion::L2Norm => items
            .iter()
            .map(|f| math::sqrt(f.iter().fold(0.0, |acc, &v| acc + v * v)))
            .collect(),
        Criterion::L2Gm => {
            let mut scores = Vec::with_capacity(m);
            for i in 0..m {
                let mut total = 0.0;
                for k in 0..m {
                    let mut sq = 0.0;
                    for (a, b) in items[i].iter().zip(items[k]) {
                        let d = a - b;
                        sq += d * d;
                    }
                    total += math::sqrt(sq);
                }
                scores.push(total);
            }
            scores
        }
        Criterion::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut perm: Vec<usize> = (0..m).collect();
            for i in (1..m).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let mut scores = alloc::vec![0.0; m];
            for (rank, &idx) in perm.iter().enumerate() {
                scores[idx] = rank as f64;
            }
            scores
        }
    };
    Vector::new(scores)
}

/// Scores each filter of a bank; lower means prune first.
pub fn score_filters(filters: &Tensor4, criterion: &Criterion) -> Result<Vector> {
    score_slices(&filter_slices(filters), criterion)
}

/// Scores each output neuron of an FC layer by its incoming-weight row.
pub(crate) fn score_neuron_rows(weights: &Matrix, criterion: &Criterion) -> Result<Vector> {
    score_slices(&row_slices(weights), criterion)
}

/// Picks the `floor(ratio * m)` lowest-scoring indices; ties broken by
/// lower index first. `ratio` must lie in `[0, 1)`.
pub fn select_pruned(scores: &Vector, ratio: f64) -> BTreeSet<usize> {
    assert!(
        (0.0..1.0).contains(&ratio),
        "ratio must lie in [0, 1), got {ratio}"
    );
    let m = scores.len();
    // small slack so decimal ratios like 0.3 * 10 still floor to 3
    let count = (ratio * m as f64 + 1e-9) as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_unstable_by(|&a, &b| {
        scores
            .at(a)
            .partial_cmp(&scores.at(b))
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    order.into_iter().take(count).collect()
}

/// Builds the one-hot `m x t` pruning matrix for a pruned index set.
pub fn build_pruning_matrix(m: usize, pruned: &BTreeSet<usize>) -> Result<PruningMatrix> {
    if let Some(&bad) = pruned.iter().find(|&&i| i >= m) {
        return Err(Error::ShapeMismatch {
            context: "build_pruning_matrix",
            detail: format!("pruned index {bad} out of {m}"),
        });
    }
    if pruned.len() >= m {
        return Err(Error::AllPruned);
    }
    let kept: Vec<usize> = (0..m).filter(|i| !pruned.contains(i)).collect();
    let mut matrix = Matrix::zeros(m, kept.len());
    for (col, &row) in kept.iter().enumerate() {
        matrix.set(row, col, 1.0);
    }
    Ok(PruningMatrix { matrix, kept })
}

/// Where a pruned layer's delivery lands.
pub(crate) enum Consumer {
    Conv(usize),
    Fc { index: usize, spatial: (usize, usize) },
}

/// Walks forward from `layer` to the next weight-bearing layer, skipping
/// pooling and flatten. Crossing a residual marker is refused: plans must
/// keep block interfaces intact.
pub(crate) fn find_consumer(
    model: &NetworkModel,
    shapes: &[ShapeInfo],
    layer: usize,
) -> Result<Consumer> {
    let mut spatial: Option<(usize, usize)> = None;
    for idx in (layer + 1)..model.layers.len() {
        match &model.layers[idx] {
            LayerSpec::Conv { .. } => return Ok(Consumer::Conv(idx)),
            LayerSpec::Fc { .. } => {
                return Ok(Consumer::Fc {
                    index: idx,
                    spatial: spatial.unwrap_or((1, 1)),
                })
            }
            LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. } => {}
            LayerSpec::Flatten => {
                let ShapeInfo::Map { w, h, .. } = shapes[idx - 1] else {
                    return Err(Error::ShapeMismatch {
                        context: "find_consumer",
                        detail: format!("flatten at {idx} has no map input"),
                    });
                };
                spatial = Some((w, h));
            }
            LayerSpec::ResidualBegin | LayerSpec::ResidualEnd { .. } => {
                return Err(Error::IllegalResidualPrune { layer })
            }
        }
    }
    Err(Error::PlanShapeMismatch {
        layer,
        detail: "no downstream consumer to absorb the pruned channels".into(),
    })
}

/// Redistributes FC input columns per a delivery matrix. Under the
/// channel-major flatten order every original channel owns a block of
/// `w * h` consecutive columns; the new block for kept channel `k` is
/// `sum_i delivery[i, k] * block_i`, applied position by position.
pub(crate) fn fold_fc_columns(
    delivery: &Matrix,
    spatial: (usize, usize),
    fc_weights: &Matrix,
) -> Result<Matrix> {
    let (m, t) = (delivery.rows(), delivery.cols());
    let plane = spatial.0 * spatial.1;
    if fc_weights.cols() != m * plane {
        return Err(Error::ShapeMismatch {
            context: "fold_into_fc",
            detail: format!(
                "fc has {} inputs, expected {} channels x {} positions",
                fc_weights.cols(),
                m,
                plane
            ),
        });
    }
    let out = fc_weights.rows();
    let mut data = alloc::vec![0.0; out * t * plane];
    for o in 0..out {
        let src = fc_weights.row(o);
        let dst = &mut data[o * t * plane..(o + 1) * t * plane];
        for k in 0..t {
            for pos in 0..plane {
                let mut acc = 0.0;
                for i in 0..m {
                    acc += delivery.at(i, k) * src[i * plane + pos];
                }
                dst[k * plane + pos] = acc;
            }
        }
    }
    Matrix::new(out, t * plane, data)
}

fn plan_entry_checked<'a>(
    model: &'a NetworkModel,
    layer: usize,
    pruned: &BTreeSet<usize>,
) -> Result<(&'a LayerSpec, usize)> {
    let spec = model
        .layers
        .get(layer)
        .ok_or_else(|| Error::PlanShapeMismatch {
            layer,
            detail: format!("model has only {} layers", model.layers.len()),
        })?;
    let m = match spec {
        LayerSpec::Conv { weights, .. } => weights.filters(),
        LayerSpec::Fc { weights, .. } => weights.rows(),
        other => {
            return Err(Error::PlanShapeMismatch {
                layer,
                detail: format!("cannot prune a {} layer", other.kind_name()),
            })
        }
    };
    if let Some(&bad) = pruned.iter().find(|&&i| i >= m) {
        return Err(Error::PlanShapeMismatch {
            layer,
            detail: format!("pruned index {bad} out of {m}"),
        });
    }
    if pruned.len() >= m {
        return Err(Error::PlanShapeMismatch {
            layer,
            detail: "plan prunes every filter".into(),
        });
    }
    Ok((spec, m))
}

/// Applies a plan structurally, shrinking each planned layer with the
/// one-hot selector and folding `delivery_fn`'s matrix into the
/// consumer. Pruning uses the one-hot matrix itself; restoration
/// supplies delivery matrices with compensation rows. `delivery_fn`
/// receives the layer index, the *original* layer, the pruned set and
/// the kept indices, and must return an `m x t` matrix whose kept rows
/// are one-hot.
pub(crate) fn rebuild_with_deliveries(
    model: &NetworkModel,
    plan: &PruningPlan,
    mut delivery_fn: impl FnMut(usize, &LayerSpec, &BTreeSet<usize>, &[usize]) -> Result<Matrix>,
) -> Result<(NetworkModel, BTreeMap<usize, Matrix>)> {
    let shapes = model.validate()?;
    let mut work = model.clone();
    let mut deliveries = BTreeMap::new();

    for (&layer, pruned) in &plan.layers {
        if pruned.is_empty() {
            continue;
        }
        let (original, m) = plan_entry_checked(model, layer, pruned)?;
        let selector = build_pruning_matrix(m, pruned).map_err(|e| match e {
            Error::AllPruned => Error::PlanShapeMismatch {
                layer,
                detail: "plan prunes every filter".into(),
            },
            other => other,
        })?;
        let kept = selector.kept().to_vec();
        let delivery = delivery_fn(layer, original, pruned, &kept)?;
        if delivery.rows() != m || delivery.cols() != kept.len() {
            return Err(Error::ShapeMismatch {
                context: "rebuild_with_deliveries",
                detail: format!(
                    "delivery is {}x{}, expected {}x{}",
                    delivery.rows(),
                    delivery.cols(),
                    m,
                    kept.len()
                ),
            });
        }

        // shrink the planned layer itself
        match &mut work.layers[layer] {
            LayerSpec::Conv { weights, bn, .. } => {
                *weights = mode1_product(weights, &selector.selector())?;
                if let Some(params) = bn.take() {
                    *bn = Some(params.select(&kept)?);
                }
            }
            LayerSpec::Fc { weights, bias, .. } => {
                let mut data = Vec::with_capacity(kept.len() * weights.cols());
                for &r in &kept {
                    data.extend_from_slice(weights.row(r));
                }
                *weights = Matrix::new(kept.len(), weights.cols(), data)?;
                if let Some(b) = bias.take() {
                    *bias = Some(Vector::new(
                        kept.iter().map(|&i| b.at(i)).collect(),
                    )?);
                }
            }
            _ => unreachable!("plan_entry_checked filters layer kinds"),
        }

        // fold the delivery into the consumer
        match find_consumer(model, &shapes, layer)? {
            Consumer::Conv(idx) => {
                let LayerSpec::Conv { weights, .. } = &mut work.layers[idx] else {
                    unreachable!("consumer index points at a conv");
                };
                *weights = mode2_product(weights, &delivery.transpose())?;
            }
            Consumer::Fc { index, spatial } => {
                let LayerSpec::Fc { weights, .. } = &mut work.layers[index] else {
                    unreachable!("consumer index points at an fc");
                };
                *weights = fold_fc_columns(&delivery, spatial, weights)?;
            }
        }
        deliveries.insert(layer, delivery);
    }

    work.validate()?;
    Ok((work, deliveries))
}

/// Removes the planned filters from the model: planned layers lose the
/// listed filters (and matching batch-norm entries), their consumers
/// lose the matching input channels. Layers outside the plan and its
/// consumers are untouched.
pub fn apply_pruning(model: &NetworkModel, plan: &PruningPlan) -> Result<NetworkModel> {
    let (model, _) = rebuild_with_deliveries(model, plan, |_, original, pruned_set, _| {
        let m = match original {
            LayerSpec::Conv { weights, .. } => weights.filters(),
            LayerSpec::Fc { weights, .. } => weights.rows(),
            _ => unreachable!("plan_entry_checked filters layer kinds"),
        };
        Ok(build_pruning_matrix(m, pruned_set)?.matrix().clone())
    })?;
    Ok(model)
}

fn conv_layer_indices(model: &NetworkModel) -> Vec<usize> {
    model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
        .map(|(i, _)| i)
        .collect()
}

fn plan_for_layers(
    model: &NetworkModel,
    layers: &[usize],
    criterion: &Criterion,
    ratio: f64,
) -> Result<PruningPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidHyperparams {
            detail: format!("ratio must lie in [0, 1), got {ratio}"),
        });
    }
    let mut plan = PruningPlan::empty(*criterion, ratio);
    for &idx in layers {
        let scores = match &model.layers[idx] {
            LayerSpec::Conv { weights, .. } => score_filters(weights, criterion)?,
            LayerSpec::Fc { weights, .. } => score_neuron_rows(weights, criterion)?,
            other => {
                return Err(Error::PlanShapeMismatch {
                    layer: idx,
                    detail: format!("cannot plan a {} layer", other.kind_name()),
                })
            }
        };
        let pruned = select_pruned(&scores, ratio);
        if !pruned.is_empty() {
            plan.layers.insert(idx, pruned);
        }
    }
    Ok(plan)
}

/// Uniform layer-by-layer plan. Covers every convolution layer; on a
/// model without convolutions it covers every FC layer except the
/// final output layer instead.
pub fn plan_layerwise(
    model: &NetworkModel,
    criterion: &Criterion,
    ratio: f64,
) -> Result<PruningPlan> {
    let convs = conv_layer_indices(model);
    if !convs.is_empty() {
        return plan_for_layers(model, &convs, criterion, ratio);
    }
    let fcs: Vec<usize> = model
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerSpec::Fc { .. }))
        .map(|(i, _)| i)
        .collect();
    let body = if fcs.len() > 1 {
        &fcs[..fcs.len() - 1]
    } else {
        &[][..]
    };
    plan_for_layers(model, body, criterion, ratio)
}

/// Residual-aware plan: covers convolution layers strictly inside a
/// residual block except each block's final one, so block output widths
/// never change. Stem and downsample convolutions are left alone.
pub fn plan_resnet(
    model: &NetworkModel,
    criterion: &Criterion,
    ratio: f64,
) -> Result<PruningPlan> {
    let mut stack: Vec<Vec<usize>> = Vec::new();
    let mut prunable = Vec::new();
    for (idx, layer) in model.layers.iter().enumerate() {
        match layer {
            LayerSpec::ResidualBegin => stack.push(Vec::new()),
            LayerSpec::ResidualEnd { .. } => {
                let mut convs = stack.pop().unwrap_or_default();
                convs.pop(); // block-final conv keeps the block's width
                prunable.extend(convs);
            }
            LayerSpec::Conv { .. } => {
                if let Some(open) = stack.last_mut() {
                    open.push(idx);
                }
            }
            _ => {}
        }
    }
    prunable.sort_unstable();
    plan_for_layers(model, &prunable, criterion, ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward, generate_synthetic, Activation, Feature};
    use crate::tensor::{conv2d, Tensor3};
    use alloc::vec;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_filters(r: &mut ChaCha8Rng, m: usize, n: usize, k: usize) -> Tensor4 {
        let data = (0..m * n * k * k)
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        Tensor4::new(m, n, k, k, data).unwrap()
    }

    #[test]
    fn l1_scores_are_absolute_sums() {
        let filters = Tensor4::new(3, 1, 1, 1, vec![0.5, 1.0, -2.0]).unwrap();
        let scores = score_filters(&filters, &Criterion::L1Norm).unwrap();
        assert_eq!(scores.data(), &[0.5, 1.0, 2.0]);
    }

    #[test]
    fn identical_filters_tie_under_l2gm() {
        let filters = Tensor4::new(3, 1, 2, 2, vec![0.3; 12]).unwrap();
        let scores = score_filters(&filters, &Criterion::L2Gm).unwrap();
        assert!(scores.data().iter().all(|&s| s == scores.at(0)));
    }

    #[test]
    fn l2gm_matches_pairwise_oracle() {
        let mut r = rng(0);
        let filters = random_filters(&mut r, 5, 2, 3);
        let scores = score_filters(&filters, &Criterion::L2Gm).unwrap();
        for i in 0..5 {
            let mut expect = 0.0;
            for k in 0..5 {
                let mut sq = 0.0;
                for (a, b) in filters.filter(i).iter().zip(filters.filter(k)) {
                    sq += (a - b) * (a - b);
                }
                expect += sq.sqrt();
            }
            assert!((scores.at(i) - expect).abs() <= 1e-12 * expect.max(1.0));
        }
    }

    #[test]
    fn scores_are_permutation_equivariant() {
        let mut r = rng(1);
        let filters = random_filters(&mut r, 6, 2, 3);
        // swap filters 1 and 4
        let perm = [0usize, 4, 2, 3, 1, 5];
        let mut data = Vec::new();
        for &i in &perm {
            data.extend_from_slice(filters.filter(i));
        }
        let permuted = Tensor4::new(6, 2, 3, 3, data).unwrap();
        for criterion in [Criterion::L1Norm, Criterion::L2Norm, Criterion::L2Gm] {
            let base = score_filters(&filters, &criterion).unwrap();
            let moved = score_filters(&permuted, &criterion).unwrap();
            for (new_pos, &old_pos) in perm.iter().enumerate() {
                // L2GM sums pairwise distances in a different order after the
                // permutation, so allow rounding noise
                let (a, b) = (moved.at(new_pos), base.at(old_pos));
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn random_criterion_is_reproducible() {
        let mut r = rng(2);
        let filters = random_filters(&mut r, 8, 1, 3);
        let a = score_filters(&filters, &Criterion::Random(9)).unwrap();
        let b = score_filters(&filters, &Criterion::Random(9)).unwrap();
        assert_eq!(a, b);
        let c = score_filters(&filters, &Criterion::Random(10)).unwrap();
        assert_ne!(a, c);
        // ranks are a permutation of 0..m
        let mut sorted: Vec<f64> = a.data().to_vec();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert_eq!(sorted, (0..8).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn single_filter_layer_is_degenerate() {
        let filters = Tensor4::new(1, 1, 1, 1, vec![1.0]).unwrap();
        assert!(matches!(
            score_filters(&filters, &Criterion::L1Norm),
            Err(Error::DegenerateLayer { filters: 1 })
        ));
    }

    #[test]
    fn selection_takes_floor_and_breaks_ties_low() {
        let scores = Vector::from(vec![0.5, 1.0, 2.0]);
        let picked = select_pruned(&scores, 1.0 / 3.0);
        assert_eq!(picked, [0].into_iter().collect());
        assert!(select_pruned(&scores, 0.0).is_empty());

        let tied = Vector::from(vec![1.0, 1.0, 2.0, 3.0]);
        assert_eq!(select_pruned(&tied, 0.5), [0, 1].into_iter().collect());
    }

    #[test]
    fn selection_size_is_exactly_floor() {
        let mut r = rng(3);
        for _ in 0..50 {
            let m = r.random_range(2..40);
            let ratio: f64 = r.random_range(0.0..1.0);
            let scores = Vector::from((0..m).map(|_| r.random_range(-5.0..5.0)).collect::<Vec<_>>());
            let picked = select_pruned(&scores, ratio);
            assert_eq!(picked.len(), (ratio * m as f64 + 1e-9) as usize);
        }
    }

    #[test]
    fn pruning_matrix_matches_fixed_layout() {
        // filters 4 and 6 of 6 pruned (0-based {3, 5})
        let pruned: BTreeSet<usize> = [3, 5].into_iter().collect();
        let pm = build_pruning_matrix(6, &pruned).unwrap();
        let m = pm.matrix();
        assert_eq!((m.rows(), m.cols()), (6, 4));
        for (col, &row) in [0usize, 1, 2, 4].iter().enumerate() {
            for r in 0..6 {
                let expect = if r == row { 1.0 } else { 0.0 };
                assert_eq!(m.at(r, col), expect);
            }
        }
    }

    #[test]
    fn empty_pruned_set_yields_identity() {
        let pm = build_pruning_matrix(4, &BTreeSet::new()).unwrap();
        assert_eq!(pm.matrix(), &Matrix::identity(4));
    }

    #[test]
    fn pruning_matrix_is_orthonormal() {
        let mut r = rng(4);
        for _ in 0..30 {
            let m = r.random_range(2..12);
            let count = r.random_range(0..m);
            let mut pruned = BTreeSet::new();
            while pruned.len() < count {
                pruned.insert(r.random_range(0..m));
            }
            let pm = build_pruning_matrix(m, &pruned).unwrap();
            let t = m - pruned.len();
            let ones = pm.matrix().data().iter().filter(|&&v| v == 1.0).count();
            assert_eq!(ones, t);
            // S^T S = I_t
            for a in 0..t {
                for b in 0..t {
                    let mut acc = 0.0;
                    for row in 0..m {
                        acc += pm.matrix().at(row, a) * pm.matrix().at(row, b);
                    }
                    assert_eq!(acc, if a == b { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn all_pruned_is_rejected() {
        let pruned: BTreeSet<usize> = [0, 1].into_iter().collect();
        assert!(matches!(
            build_pruning_matrix(2, &pruned),
            Err(Error::AllPruned)
        ));
    }

    #[test]
    fn empty_plan_leaves_model_identical() {
        let model = generate_synthetic("vgg-tiny", 0, 1).unwrap();
        let plan = PruningPlan::empty(Criterion::L2Norm, 0.0);
        let out = apply_pruning(&model, &plan).unwrap();
        assert_eq!(out, model);
    }

    #[test]
    fn pruning_shrinks_layer_and_consumer() {
        let model = generate_synthetic("vgg-tiny", 0, 1).unwrap();
        let mut plan = PruningPlan::empty(Criterion::L2Norm, 0.25);
        plan.layers.insert(0, [2].into_iter().collect());
        let out = apply_pruning(&model, &plan).unwrap();
        let LayerSpec::Conv { weights, bn, .. } = &out.layers[0] else {
            panic!()
        };
        assert_eq!(weights.filters(), 7);
        assert_eq!(bn.as_ref().unwrap().channels(), 7);
        let LayerSpec::Conv { weights, .. } = &out.layers[1] else {
            panic!()
        };
        assert_eq!(weights.in_channels(), 7);
        // untouched layers compare equal
        assert_eq!(out.layers[2], model.layers[2]);
        assert_eq!(out.layers[3], model.layers[3]);
        assert_eq!(out.layers[5], model.layers[5]);
        // still runs
        let input = Tensor3::zeros(3, 8, 8);
        forward(&out, &input, &BTreeSet::new()).unwrap();
    }

    #[test]
    fn pruned_output_matches_zero_masked_oracle() {
        // two linear conv layers, no bn, no activation
        let mut r = rng(5);
        let w0 = random_filters(&mut r, 4, 2, 3);
        let w1 = random_filters(&mut r, 3, 4, 3);
        let model = NetworkModel::new(
            vec![
                LayerSpec::Conv {
                    weights: w0,
                    stride: 1,
                    padding: 1,
                    bn: None,
                    activation: Activation::None,
                },
                LayerSpec::Conv {
                    weights: w1.clone(),
                    stride: 1,
                    padding: 1,
                    bn: None,
                    activation: Activation::None,
                },
            ],
            (2, 6, 6),
            BTreeMap::new(),
        )
        .unwrap();
        let mut plan = PruningPlan::empty(Criterion::L2Norm, 0.25);
        plan.layers.insert(0, [1, 3].into_iter().collect());
        let pruned = apply_pruning(&model, &plan).unwrap();

        let input = Tensor3::new(
            2,
            6,
            6,
            (0..72).map(|_| r.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let capture: BTreeSet<usize> = [0].into_iter().collect();
        let (_, taps) = forward(&model, &input, &capture).unwrap();
        let Feature::Map(a0) = &taps[&0].post else {
            panic!()
        };
        let mut masked = a0.clone();
        for ch in [1usize, 3] {
            let (_, w, h) = masked.shape();
            for x in 0..w {
                for y in 0..h {
                    masked.set(ch, x, y, 0.0);
                }
            }
        }
        let expect = conv2d(&masked, &w1, 1, 1).unwrap();
        let (got, _) = forward(&pruned, &input, &BTreeSet::new()).unwrap();
        let Feature::Map(got) = got else { panic!() };
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn layerwise_plan_covers_every_conv() {
        let model = generate_synthetic("vgg-tiny", 0, 1).unwrap();
        let plan = plan_layerwise(&model, &Criterion::L2Norm, 0.25).unwrap();
        assert_eq!(
            plan.layers.keys().copied().collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        for (&idx, pruned) in &plan.layers {
            let LayerSpec::Conv { weights, .. } = &model.layers[idx] else {
                panic!()
            };
            assert_eq!(pruned.len(), weights.filters() / 4);
        }
        // deterministic
        let again = plan_layerwise(&model, &Criterion::L2Norm, 0.25).unwrap();
        assert_eq!(plan, again);
    }

    #[test]
    fn resnet_plan_skips_block_final_and_stem() {
        let model = generate_synthetic("resnet-tiny", 0, 1).unwrap();
        let plan = plan_resnet(&model, &Criterion::L2Norm, 0.25).unwrap();
        // layers: 0 stem, 1 begin, 2 conv, 3 conv, 4 end, 5 begin, 6 conv,
        // 7 conv, 8 end, 9 avgpool, 10 flatten, 11 fc
        assert_eq!(plan.layers.keys().copied().collect::<Vec<_>>(), vec![2, 6]);
        apply_pruning(&model, &plan).unwrap();
    }

    #[test]
    fn pruning_block_final_conv_is_illegal() {
        let model = generate_synthetic("resnet-tiny", 0, 1).unwrap();
        let mut plan = PruningPlan::empty(Criterion::L2Norm, 0.25);
        plan.layers.insert(3, [0].into_iter().collect());
        assert!(matches!(
            apply_pruning(&model, &plan),
            Err(Error::IllegalResidualPrune { layer: 3 })
        ));
    }

    #[test]
    fn mlp_plan_covers_hidden_fc_layers() {
        let model = generate_synthetic("mlp-tiny", 0, 1).unwrap();
        let plan = plan_layerwise(&model, &Criterion::L2Norm, 0.5).unwrap();
        assert_eq!(plan.layers.keys().copied().collect::<Vec<_>>(), vec![1, 2]);
        let out = apply_pruning(&model, &plan).unwrap();
        let input = Tensor3::zeros(1, 8, 8);
        forward(&out, &input, &BTreeSet::new()).unwrap();
    }

    #[test]
    fn plan_json_round_trips_with_expected_shape() {
        let mut plan = PruningPlan::empty(Criterion::Random(7), 0.3);
        plan.layers.insert(0, [1, 4].into_iter().collect());
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"criterion\":\"random:7\""));
        assert!(json.contains("\"layers\":{\"0\":[1,4]}"));
        let back: PruningPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(plan, back);
    }
}
