//! Cross-modality discriminator: every embedding is concatenated with every
//! other one into a `b x b x 2d` pair tensor, and a small dense stack with a
//! sigmoid output scores each slot as genuine (same class) or imposter.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Graph, Var};
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::nn::{dense, glorot_uniform, Bound, ParamStore};
use crate::tensor::{Real, Tensor};

/// Largest batch whose full pair tensor is built in one piece.
pub const MAX_MATERIALIZED_BATCH: usize = 512;

/// Which `(i, j)` slots contribute to the discriminator loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    /// Every slot except self-pairs.
    #[default]
    OffDiagonal,
    /// Every slot including self-pairs.
    All,
    /// Only pairs whose two samples come from different modalities.
    CrossModal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmdConfig {
    pub hidden: [usize; 2],
    pub mask: MaskPolicy,
}

impl Default for CmdConfig {
    fn default() -> Self {
        Self {
            hidden: [128, 64],
            mask: MaskPolicy::OffDiagonal,
        }
    }
}

pub(crate) fn init_params<T: Real, R: Rng>(
    p: &mut ParamStore<T>,
    cfg: &CmdConfig,
    embedding_dim: usize,
    rng: &mut R,
) -> Result<()> {
    if cfg.hidden.contains(&0) {
        return Err(Error::Config("CMD hidden widths must be positive".into()));
    }
    let widths = [2 * embedding_dim, cfg.hidden[0], cfg.hidden[1], 1];
    for (i, name) in ["cmd.dense0", "cmd.dense1", "cmd.out"].iter().enumerate() {
        let (fi, fo) = (widths[i], widths[i + 1]);
        p.insert(format!("{name}.w"), glorot_uniform(&[fi, fo], fi, fo, rng));
        p.insert(format!("{name}.b"), Tensor::zeros(&[fo]));
    }
    Ok(())
}

/// Materialized `b x b x 2d` pair tensor; slot `(i, j)` is `e_i || e_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTensor<T: Real> {
    pub values: Tensor<T>,
}

impl<T: Real> PairTensor<T> {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn slot(&self, i: usize, j: usize) -> &[T] {
        let (b, w) = (self.values.shape()[1], self.values.shape()[2]);
        let start = (i * b + j) * w;
        &self.values.data()[start..start + w]
    }
}

fn pair_rows<T: Real>(e: &Tensor<T>, rows: Range<usize>) -> Tensor<T> {
    let (b, d) = e.dims2();
    let mut data = Vec::with_capacity(rows.len() * b * 2 * d);
    for i in rows.clone() {
        for j in 0..b {
            data.extend_from_slice(e.row(i));
            data.extend_from_slice(e.row(j));
        }
    }
    Tensor::new(vec![rows.len(), b, 2 * d], data).expect("consistent sizes")
}

fn check_embeddings(shape: &[usize]) -> Result<()> {
    match shape {
        [b, _] if *b >= 2 => Ok(()),
        [_, _] => Err(Error::InvalidArgument("pairing needs a batch of at least 2".into())),
        other => Err(Error::Shape(format!("embeddings must be [b, d], got {other:?}"))),
    }
}

/// Builds the full pair tensor (no gradient tracking).
pub fn pair_concat<T: Real>(e: &Tensor<T>) -> Result<PairTensor<T>> {
    check_embeddings(e.shape())?;
    Ok(PairTensor {
        values: pair_rows(e, 0..e.shape()[0]),
    })
}

struct PairConcatOp {
    rows: Range<usize>,
}

impl<T: Real> CustomOp<T> for PairConcatOp {
    fn name(&self) -> &'static str {
        "pair_concat"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let e = inputs[0];
        let (b, d) = e.dims2();
        let mut de = Tensor::zeros(e.shape());
        let dd = de.data_mut();
        for (local, i) in self.rows.clone().enumerate() {
            for j in 0..b {
                let slot = &g.data()[(local * b + j) * 2 * d..(local * b + j + 1) * 2 * d];
                for c in 0..d {
                    dd[i * d + c] = dd[i * d + c] + slot[c];
                    dd[j * d + c] = dd[j * d + c] + slot[d + c];
                }
            }
        }
        vec![Some(de)]
    }
}

/// Differentiable pairing for rows `rows` of `e[b, d]`: output `[rows, b, 2d]`.
pub fn pair_concat_graph<T: Real>(g: &mut Graph<T>, e: Var, rows: Range<usize>) -> Result<Var> {
    check_embeddings(g.shape(e))?;
    if rows.is_empty() || rows.end > g.shape(e)[0] {
        return Err(Error::InvalidArgument(format!("bad pairing row range {rows:?}")));
    }
    let out = pair_rows(g.value(e), rows.clone());
    Ok(g.custom(&[e], out, PairConcatOp { rows }))
}

/// `[n, 2d] -> [n, 1]` probabilities.
fn mlp<T: Real>(g: &mut Graph<T>, p: &Bound, pairs: Var) -> Result<Var> {
    let w0 = p.var("cmd.dense0.w")?;
    if g.shape(w0)[0] != g.shape(pairs)[1] {
        return Err(Error::Shape(format!(
            "discriminator expects pair width {}, got {}",
            g.shape(w0)[0],
            g.shape(pairs)[1]
        )));
    }
    let h = dense(g, pairs, w0, p.var("cmd.dense0.b")?)?;
    let h = g.relu(h);
    let h = dense(g, h, p.var("cmd.dense1.w")?, p.var("cmd.dense1.b")?)?;
    let h = g.relu(h);
    let z = dense(g, h, p.var("cmd.out.w")?, p.var("cmd.out.b")?)?;
    Ok(g.sigmoid(z))
}

/// Probability matrix `[b, b]` for every ordered pair of rows of `e`,
/// evaluated `tile_rows` anchor rows at a time.
pub fn cmd_forward_tiled<T: Real>(g: &mut Graph<T>, p: &Bound, e: Var, tile_rows: usize) -> Result<Var> {
    check_embeddings(g.shape(e))?;
    let (b, d) = (g.shape(e)[0], g.shape(e)[1]);
    let tile_rows = tile_rows.clamp(1, b);
    let mut tiles = Vec::with_capacity(b.div_ceil(tile_rows));
    let mut start = 0;
    while start < b {
        let end = (start + tile_rows).min(b);
        let cube = pair_concat_graph(g, e, start..end)?;
        let flat = g.reshape(cube, &[(end - start) * b, 2 * d])?;
        tiles.push(mlp(g, p, flat)?);
        start = end;
    }
    let probs = if tiles.len() == 1 { tiles[0] } else { g.concat_rows(&tiles)? };
    g.reshape(probs, &[b, b])
}

/// Probability matrix `[b, b]`; batches above [`MAX_MATERIALIZED_BATCH`] are tiled.
pub fn cmd_forward_graph<T: Real>(g: &mut Graph<T>, p: &Bound, e: Var) -> Result<Var> {
    let b = g.shape(e)[0];
    let tile = if b <= MAX_MATERIALIZED_BATCH {
        b
    } else {
        (MAX_MATERIALIZED_BATCH * MAX_MATERIALIZED_BATCH / b).max(1)
    };
    cmd_forward_tiled(g, p, e, tile)
}

/// Scores a materialized pair tensor.
pub fn cmd_forward<T: Real>(pairs: &PairTensor<T>, params: &ParamStore<T>) -> Result<Tensor<T>> {
    let (b, w) = (pairs.batch(), pairs.values.shape()[2]);
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(pairs.values.clone().reshape(&[b * b, w])?);
    let probs = mlp(&mut g, &p, x)?;
    g.value(probs).clone().reshape(&[b, b])
}

/// Probability for the ordered pair `(e1, e2)`.
pub fn cmd_score<T: Real>(e1: &[T], e2: &[T], params: &ParamStore<T>) -> Result<T> {
    Ok(cmd_score_many(&[(e1, e2)], params)?[0])
}

/// Ordered-pair probabilities for a list of pairs, in one forward pass.
pub fn cmd_score_many<T: Real>(pairs: &[(&[T], &[T])], params: &ParamStore<T>) -> Result<Vec<T>> {
    let Some(&(first, _)) = pairs.first() else {
        return Ok(Vec::new());
    };
    let d = first.len();
    let mut data = Vec::with_capacity(pairs.len() * 2 * d);
    for &(a, b) in pairs {
        if a.len() != d || b.len() != d {
            return Err(Error::Shape(format!(
                "pair dimension mismatch: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        data.extend_from_slice(a);
        data.extend_from_slice(b);
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(Tensor::new(vec![pairs.len(), 2 * d], data)?);
    let probs = mlp(&mut g, &p, x)?;
    Ok(g.value(probs).data().to_vec())
}

/// Order-independent pair score `(s(a, b) + s(b, a)) / 2` used for evaluation.
pub fn symmetric_score<T: Real>(e1: &[T], e2: &[T], params: &ParamStore<T>) -> Result<f64> {
    let s = cmd_score_many(&[(e1, e2), (e2, e1)], params)?;
    Ok((s[0].as_f64() + s[1].as_f64()) / 2.0)
}

/// Same-class indicator over all ordered pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenuineMatrix {
    pub size: usize,
    pub labels: Vec<u8>,
}

impl GenuineMatrix {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.size + j]
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..self.size).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

pub fn genuine_labels(class_ids: &[u32]) -> GenuineMatrix {
    let b = class_ids.len();
    let labels = (0..b * b)
        .map(|k| u8::from(class_ids[k / b] == class_ids[k % b]))
        .collect();
    GenuineMatrix { size: b, labels }
}

/// Slot mask for the discriminator loss. `modalities` is only consulted
/// by [`MaskPolicy::CrossModal`].
pub fn loss_mask(b: usize, policy: MaskPolicy, modalities: &[Modality]) -> Result<Vec<bool>> {
    if policy == MaskPolicy::CrossModal && modalities.len() != b {
        return Err(Error::InvalidArgument("cross-modal mask needs one modality per sample".into()));
    }
    Ok((0..b * b)
        .map(|k| {
            let (i, j) = (k / b, k % b);
            match policy {
                MaskPolicy::All => true,
                MaskPolicy::OffDiagonal => i != j,
                MaskPolicy::CrossModal => modalities[i] != modalities[j],
            }
        })
        .collect())
}

/// Binary cross-entropy of the probability matrix against genuine labels.
pub fn cmd_loss_graph<T: Real>(
    g: &mut Graph<T>,
    probs: Var,
    labels: &GenuineMatrix,
    policy: MaskPolicy,
    modalities: &[Modality],
) -> Result<Var> {
    let b = labels.size;
    if g.shape(probs) != [b, b] {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs {b}x{b} labels",
            g.shape(probs)
        )));
    }
    let targets: Vec<T> = labels.labels.iter().map(|&l| T::from_u8(l).unwrap()).collect();
    let mask = loss_mask(b, policy, modalities)?;
    g.binary_cross_entropy(probs, &targets, Some(&mask))
}

/// Value-only form of [`cmd_loss_graph`].
pub fn cmd_loss<T: Real>(
    probs: &Tensor<T>,
    labels: &GenuineMatrix,
    policy: MaskPolicy,
    modalities: &[Modality],
) -> Result<T> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let l = cmd_loss_graph(&mut g, p, labels, policy, modalities)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::init_rng;

    fn params(d: usize, seed: u64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let cfg = CmdConfig {
            hidden: [6, 4],
            ..Default::default()
        };
        init_params(&mut p, &cfg, d, &mut init_rng(seed, 0)).unwrap();
        p
    }

    #[test]
    fn pair_definition() {
        let e = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let pt = pair_concat(&e).unwrap();
        assert_eq!(pt.slot(0, 1), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(pt.slot(1, 0), &[0.0, 1.0, 1.0, 0.0]);
        let one = Tensor::<f64>::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert!(pair_concat(&one).is_err());
    }

    #[test]
    fn pairing_adjoint_counts_two_b() {
        let b = 5;
        let mut g = Graph::<f64>::new();
        let e = g.param(Tensor::from_fn(&[b, 3], |i| i as f64));
        let pc = pair_concat_graph(&mut g, e, 0..b).unwrap();
        let s = g.sum(pc);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(e).unwrap().data().iter().all(|&v| v == 2.0 * b as f64));
    }

    #[test]
    fn genuine_label_cases() {
        assert_eq!(genuine_labels(&[7, 7, 3]).labels, vec![1, 1, 0, 1, 1, 0, 0, 0, 1]);
        assert_eq!(genuine_labels(&[1, 2, 3]).labels, vec![1, 0, 0, 0, 1, 0, 0, 0, 1]);
        assert!(genuine_labels(&[4, 4, 4]).labels.iter().all(|&l| l == 1));
    }

    #[test]
    fn zero_params_give_half() {
        let mut p = params(2, 1);
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let e = Tensor::<f64>::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        let probs = cmd_forward(&pair_concat(&e).unwrap(), &p).unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_embeddings_constant_matrix() {
        let p = params(3, 2);
        let e = Tensor::<f64>::from_fn(&[4, 3], |i| [0.48, 0.6, 0.64][i % 3]);
        let probs = cmd_forward(&pair_concat(&e).unwrap(), &p).unwrap();
        assert!(probs.data().iter().all(|&v| v == probs.data()[0]));
    }

    #[test]
    fn width_mismatch_rejected() {
        let p = params(3, 2);
        let e = Tensor::<f64>::from_fn(&[2, 4], |i| i as f64);
        assert!(cmd_forward(&pair_concat(&e).unwrap(), &p).is_err());
        assert!(cmd_score(&[1.0, 0.0], &[0.0], &p).is_err());
    }

    #[test]
    fn score_matches_batch_slot_exactly() {
        let p = params(3, 5);
        let e = Tensor::<f64>::from_fn(&[4, 3], |i| ((i * 13) as f64).sin());
        let probs = cmd_forward(&pair_concat(&e).unwrap(), &p).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let s = cmd_score(e.row(i), e.row(j), &p).unwrap();
                assert_eq!(s.to_bits(), probs.data()[i * 4 + j].to_bits());
            }
        }
    }

    #[test]
    fn tiling_is_invisible() {
        let p = params(3, 6);
        let e = Tensor::<f64>::from_fn(&[7, 3], |i| ((i * 5) as f64).cos());
        let full = {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let ev = g.constant(e.clone());
            let out = cmd_forward_tiled(&mut g, &b, ev, 7).unwrap();
            g.value(out).clone()
        };
        for tile in [1, 2, 3, 6] {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let ev = g.constant(e.clone());
            let out = cmd_forward_tiled(&mut g, &b, ev, tile).unwrap();
            assert_eq!(g.value(out), &full);
        }
    }

    #[test]
    fn loss_cases() {
        let labels = genuine_labels(&[1, 1, 2]);
        let half = Tensor::<f64>::full(&[3, 3], 0.5);
        let l = cmd_loss(&half, &labels, MaskPolicy::OffDiagonal, &[]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let exact = Tensor::<f64>::from_fn(&[3, 3], |k| labels.labels[k] as f64);
        assert!(cmd_loss(&exact, &labels, MaskPolicy::All, &[]).unwrap() < 1e-6);

        // brute force over the 6 off-diagonal slots
        let probs = Tensor::<f64>::new(vec![3, 3], vec![0.9, 0.7, 0.2, 0.6, 0.8, 0.3, 0.1, 0.4, 0.95]).unwrap();
        let mut total = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    continue;
                }
                let (p, y) = (probs.data()[i * 3 + j], labels.get(i, j) as f64);
                total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            }
        }
        let l = cmd_loss(&probs, &labels, MaskPolicy::OffDiagonal, &[]).unwrap();
        assert!((l - total / 6.0).abs() < 1e-12);

        let single = genuine_labels(&[1]);
        assert!(cmd_loss(&Tensor::full(&[1, 1], 0.5), &single, MaskPolicy::OffDiagonal, &[]).is_err());
    }

    #[test]
    fn cross_modal_mask() {
        let m = loss_mask(3, MaskPolicy::CrossModal, &[Modality::A, Modality::B, Modality::A]).unwrap();
        assert_eq!(m, vec![false, true, false, true, false, true, false, true, false]);
    }
}
