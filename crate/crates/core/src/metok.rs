//! Distribution-centric tokenization: order patch tokens by the rainfall they
//! saw, group runs of similar rainfall, and undo the order afterwards.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv1d;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Patch layout of an `h × w` grid cut into `p × p` tiles, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub n_rows: usize,
    pub n_cols: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, patch: usize) -> Result<Self> {
        if patch == 0 || h == 0 || w == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "grid {h}x{w} is not divisible into {patch}x{patch} patches"
            )));
        }
        Ok(Self {
            n_rows: h / patch,
            n_cols: w / patch,
            patch,
        })
    }

    pub fn n(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn height(&self) -> usize {
        self.n_rows * self.patch
    }

    pub fn width(&self) -> usize {
        self.n_cols * self.patch
    }
}

/// A bijection on `0..n` with its inverse: `inverse[order[i]] == i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut inverse = vec![usize::MAX; n];
        for (i, &o) in order.iter().enumerate() {
            if o >= n || inverse[o] != usize::MAX {
                return Err(Error::Input(format!(
                    "order is not a permutation of 0..{n}"
                )));
            }
            inverse[o] = i;
        }
        Ok(Self { order, inverse })
    }

    /// Uniformly random permutation.
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self::from_order(order).expect("shuffle is a bijection")
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Position `i` of the rearranged sequence holds original token `order[i]`.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    fn check(&self, rows: usize) -> Result<()> {
        if rows != self.len() {
            return Err(Error::shape("permutation", &[rows], &[self.len()]));
        }
        Ok(())
    }
}

/// `g` consecutive rearranged tokens per group, `m = n / g` groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group_size: usize,
    pub groups: usize,
}

impl GroupSpec {
    pub fn new(n: usize, group_size: usize) -> Result<Self> {
        if group_size == 0 || n == 0 || !n.is_multiple_of(group_size) {
            return Err(Error::Config(format!(
                "{n} tokens cannot be split into groups of {group_size}"
            )));
        }
        Ok(Self {
            group_size,
            groups: n / group_size,
        })
    }

    pub fn tokens(&self) -> usize {
        self.group_size * self.groups
    }
}

/// Total precipitation inside each patch of an `(h, w)` field.
pub fn patch_scores(precip: &Tensor, grid: &PatchGrid) -> Result<Vec<f64>> {
    let s = precip.shape();
    if s.len() != 2 || s[0] != grid.height() || s[1] != grid.width() {
        return Err(Error::shape(
            "patch_scores",
            s,
            &[grid.height(), grid.width()],
        ));
    }
    Ok(patch_scores_raw(precip.data(), grid))
}

pub(crate) fn patch_scores_raw(field: &[f64], grid: &PatchGrid) -> Vec<f64> {
    let (p, w) = (grid.patch, grid.width());
    let mut scores = vec![0.0; grid.n()];
    for (r, row) in field.chunks_exact(w).enumerate() {
        let base = (r / p) * grid.n_cols;
        for (c, v) in row.iter().enumerate() {
            scores[base + c / p] += v;
        }
    }
    scores
}

/// Indices sorted by descending score; equal scores keep ascending index.
pub fn rank_desc(scores: &[f64]) -> Result<Permutation> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Input(format!("score {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    Permutation::from_order(order)
}

/// Rows of `z` in permutation order.
pub fn rearrange(g: &mut Graph, z: Var, perm: &Permutation) -> Result<Var> {
    perm.check(g.shape(z)[0])?;
    g.gather_rows(z, perm.order())
}

/// Inverse of [`rearrange`].
pub fn unshuffle(g: &mut Graph, z: Var, perm: &Permutation) -> Result<Var> {
    perm.check(g.shape(z)[0])?;
    g.gather_rows(z, perm.inverse())
}

fn gather(t: &Tensor, index: &[usize]) -> Result<Tensor> {
    let rows = t.shape()[0];
    let w = t.numel() / rows;
    let mut data = Vec::with_capacity(t.numel());
    for &i in index {
        data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
    }
    Tensor::new(t.shape().to_vec(), data)
}

/// Off-tape [`rearrange`].
pub fn rearrange_tensor(z: &Tensor, perm: &Permutation) -> Result<Tensor> {
    perm.check(z.shape()[0])?;
    gather(z, perm.order())
}

/// Off-tape [`unshuffle`].
pub fn unshuffle_tensor(z: &Tensor, perm: &Permutation) -> Result<Tensor> {
    perm.check(z.shape()[0])?;
    gather(z, perm.inverse())
}

/// Learnable group embedding: a `d → d` convolution with kernel and stride
/// equal to the group size.
#[derive(Clone, Debug)]
pub struct GroupEmbed {
    pub conv: Conv1d,
    pub spec: GroupSpec,
    pub dim: usize,
}

impl GroupEmbed {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        spec: GroupSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let k = spec.group_size;
        Self {
            conv: Conv1d::new(store, name, dim, dim, k, k, rng),
            spec,
            dim,
        }
    }

    /// `(n, d) -> (m, d)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z_hat: Var) -> Result<Var> {
        group_embed(g, store, z_hat, &self.conv, &self.spec)
    }

    /// Weights that make each output channel the mean of the same input
    /// channel over the group; bias zero.
    pub fn set_uniform_average(&self, store: &mut ParamStore) {
        let (k, d) = (self.spec.group_size, self.dim);
        let w = &mut store.get_mut(self.conv.weight).value;
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            let (cin, cout) = ((i / d) % d, i % d);
            *v = if cin == cout { 1.0 / k as f64 } else { 0.0 };
        }
        store.get_mut(self.conv.bias).value.data_mut().fill(0.0);
    }
}

pub fn group_embed(
    g: &mut Graph,
    store: &ParamStore,
    z_hat: Var,
    conv: &Conv1d,
    spec: &GroupSpec,
) -> Result<Var> {
    let n = g.shape(z_hat)[0];
    if n != spec.tokens() || conv.kernel != spec.group_size || conv.stride != spec.group_size {
        return Err(Error::Config(format!(
            "group embedding for {} tokens applied to {n}",
            spec.tokens()
        )));
    }
    conv.forward(g, store, z_hat)
}

/// Reorder every column of a `(n, t·d)` stack with the permutation ranked
/// from one score per row.
pub fn shared_rearrange(g: &mut Graph, z_stack: Var, scores: &[f64]) -> Result<(Var, Permutation)> {
    let n = g.shape(z_stack)[0];
    if scores.len() != n {
        return Err(Error::shape(
            "shared_rearrange",
            g.shape(z_stack),
            &[scores.len()],
        ));
    }
    let perm = rank_desc(scores)?;
    Ok((rearrange(g, z_stack, &perm)?, perm))
}

/// How patch tokens are ordered before grouping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderingStrategy {
    /// Descending historical precipitation.
    Precip,
    /// Raster order, no reordering.
    Original,
    /// A fixed random permutation drawn once from the model seed.
    Random,
}

impl std::str::FromStr for OrderingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "precip" | "precip-ranked" => Ok(Self::Precip),
            "original" | "raster" => Ok(Self::Original),
            "random" => Ok(Self::Random),
            _ => Err(Error::Config(format!("unknown ordering '{s}'"))),
        }
    }
}

impl std::fmt::Display for OrderingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Precip => "precip",
            Self::Original => "original",
            Self::Random => "random",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scores_sum_patches() {
        let grid = PatchGrid::new(4, 4, 2).unwrap();
        let s = patch_scores(&Tensor::full(&[4, 4], 1.5), &grid).unwrap();
        assert_eq!(s, vec![6.0; 4]);
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let one = PatchGrid::new(2, 2, 1).unwrap();
        assert_eq!(patch_scores(&t, &one).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let mut spike = Tensor::zeros(&[4, 4]);
        spike.data_mut()[2 * 4 + 3] = 2.0;
        let s = patch_scores(&spike, &grid).unwrap();
        assert_eq!(s, vec![0.0, 0.0, 0.0, 2.0]);
        assert!(patch_scores(&Tensor::zeros(&[4, 5]), &grid).is_err());
        assert!(PatchGrid::new(5, 4, 2).is_err());
    }

    #[test]
    fn rank_examples() {
        assert_eq!(
            rank_desc(&[0.2, 5.0, 0.0, 1.1]).unwrap().order(),
            &[1, 3, 0, 2]
        );
        assert_eq!(rank_desc(&[1.0; 5]).unwrap(), Permutation::identity(5));
        assert_eq!(
            rank_desc(&[4.0, 3.0, 2.0]).unwrap(),
            Permutation::identity(3)
        );
        assert_eq!(rank_desc(&[3.0, 1.0, 2.0]).unwrap().order(), &[0, 2, 1]);
        assert!(rank_desc(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn rearrange_rows() {
        let z = Tensor::from_fn(&[4, 2], |i| (i / 2) as f64);
        let perm = Permutation::from_order(vec![1, 3, 0, 2]).unwrap();
        let r = rearrange_tensor(&z, &perm).unwrap();
        assert_eq!(r.data(), &[1.0, 1.0, 3.0, 3.0, 0.0, 0.0, 2.0, 2.0]);
        assert_eq!(unshuffle_tensor(&r, &perm).unwrap(), z);
        assert!(rearrange_tensor(&Tensor::zeros(&[3, 2]), &perm).is_err());
        assert!(Permutation::from_order(vec![0, 0, 1]).is_err());
    }

    #[test]
    fn rearrange_routes_gradients() {
        let mut g = Graph::new();
        let z = g.input(Tensor::from_fn(&[3, 2], |i| i as f64));
        let perm = Permutation::from_order(vec![2, 0, 1]).unwrap();
        let r = rearrange(&mut g, z, &perm).unwrap();
        let w = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64 + 1.0));
        let m = g.mul(r, w).unwrap();
        let loss = g.sum(m);
        let back = g.backward(loss).unwrap();
        // row k of z lands at position inverse[k], picking up w's row there
        let expected = unshuffle_tensor(g.value(w), &perm).unwrap();
        assert_eq!(back.wrt(z).unwrap(), &expected);
    }

    #[test]
    fn uniform_group_embedding_is_group_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let spec = GroupSpec::new(8, 4).unwrap();
        let ge = GroupEmbed::new(&mut store, "ge", 3, spec, &mut rng);
        ge.set_uniform_average(&mut store);
        let z = Tensor::from_fn(&[8, 3], |i| (i * 7 % 5) as f64 - 1.5);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let e = ge.forward(&mut g, &store, zv).unwrap();
        assert_eq!(g.shape(e), &[2, 3]);
        for k in 0..2 {
            for c in 0..3 {
                let mean = (0..4).map(|r| z.data()[(k * 4 + r) * 3 + c]).sum::<f64>() / 4.0;
                assert!((g.value(e).data()[k * 3 + c] - mean).abs() < 1e-12);
            }
        }
        assert!(GroupSpec::new(8, 3).is_err());
        let single = GroupSpec::new(8, 8).unwrap();
        assert_eq!(single.groups, 1);
    }

    #[test]
    fn shared_rearrange_keeps_columns_together() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_fn(&[3, 4], |i| (i / 4) as f64));
        let (r, perm) = shared_rearrange(&mut g, z, &[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(perm.order(), &[0, 2, 1]);
        assert_eq!(
            g.value(r).data(),
            &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 1.0]
        );
        assert!(shared_rearrange(&mut g, z, &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn rank_is_sorted_bijection(scores in prop::collection::vec(0.0f64..10.0, 1..40)) {
            let perm = rank_desc(&scores).unwrap();
            let mut sorted = perm.order().to_vec();
            sorted.sort();
            prop_assert_eq!(sorted, (0..scores.len()).collect::<Vec<_>>());
            for w in perm.order().windows(2) {
                prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
            }
            for (i, &o) in perm.order().iter().enumerate() {
                prop_assert_eq!(perm.inverse()[o], i);
            }
        }

        #[test]
        fn round_trip_exact(n in 1usize..30, d in 1usize..6, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::from_fn(&[n, d], |_| rng.random::<f64>() * 1e3 - 5e2);
            let perm = Permutation::random(n, &mut rng);
            let back = unshuffle_tensor(&rearrange_tensor(&z, &perm).unwrap(), &perm).unwrap();
            prop_assert_eq!(back, z);
        }

        #[test]
        fn scores_follow_patch_permutation(seed: u64) {
            // swapping two patches of the field swaps their scores
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = PatchGrid::new(6, 6, 2).unwrap();
            let field = Tensor::from_fn(&[6, 6], |_| rng.random::<f64>());
            let (a, b) = (rng.random_range(0..9), rng.random_range(0..9));
            let mut swapped = field.clone();
            for dy in 0..2 {
                for dx in 0..2 {
                    let ia = ((a / 3) * 2 + dy) * 6 + (a % 3) * 2 + dx;
                    let ib = ((b / 3) * 2 + dy) * 6 + (b % 3) * 2 + dx;
                    swapped.data_mut().swap(ia, ib);
                }
            }
            let mut s = patch_scores(&field, &grid).unwrap();
            s.swap(a, b);
            prop_assert_eq!(s, patch_scores(&swapped, &grid).unwrap());
        }
    }
}
