//! Grouping attention, the neighbourhood feed-forward network and the block
//! that wires them together with residuals and layer norms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metok::{self, GroupSpec, Permutation};
use crate::nn::{Conv1d, DepthwiseConv1d, LayerNorm, Linear};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Multiply-accumulates in the `Q·Kᵀ` product for `n` queries against `m`
/// keys of total width `d`, summed over heads.
pub fn score_macs(n: usize, m: usize, d: usize) -> u64 {
    (n * m * d) as u64
}

/// Multi-head attention with queries from the tokens and keys/values from a
/// second (usually much shorter) sequence.
#[derive(Clone, Debug)]
pub struct GroupingAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `(n, m)` row-stochastic matrix per head.
    pub weights: Vec<Var>,
    /// Multiply-accumulates counted in the score products `Q·Kᵀ`.
    pub score_macs: u64,
}

impl AttentionOutput {
    /// Stack the per-head weights into a `(heads, n, m)` tensor.
    pub fn weights_tensor(&self, g: &Graph) -> Result<Tensor> {
        let first = g.shape(self.weights[0]).to_vec();
        let data = self
            .weights
            .iter()
            .flat_map(|w| g.value(*w).data().iter().copied())
            .collect();
        Tensor::new(vec![self.weights.len(), first[0], first[1]], data)
    }
}

impl GroupingAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide width {dim}"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `z: (n, d)` attends over `kv: (m, d)`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        kv: Var,
    ) -> Result<AttentionOutput> {
        let (zs, ks) = (g.shape(z).to_vec(), g.shape(kv).to_vec());
        if zs.len() != 2 || ks.len() != 2 || zs[1] != self.dim || ks[1] != self.dim {
            return Err(Error::shape("grouping_attention", &zs, &ks));
        }
        let (n, m) = (zs[0], ks[0]);
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, store, z)?;
        let k = self.k.forward(g, store, kv)?;
        let v = self.v.forward(g, store, kv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        let mut counted = 0;
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_last(q, h * dh, dh)?,
                    g.slice_last(k, h * dh, dh)?,
                    g.slice_last(v, h * dh, dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let before = g.matmul_macs();
            let s = g.matmul(qh, kt)?;
            counted += g.matmul_macs() - before;
            let s = g.scale(s, scale);
            let a = g.softmax(s);
            heads.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        debug_assert_eq!(counted, score_macs(n, m, self.dim));
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_last(&heads)?
        };
        Ok(AttentionOutput {
            out: self.out.forward(g, store, cat)?,
            weights,
            score_macs: counted,
        })
    }
}

/// Full self-attention baseline: the tokens are their own keys and values.
pub fn full_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    attn: &GroupingAttention,
    z: Var,
) -> Result<AttentionOutput> {
    attn.forward(g, store, z, z)
}

/// `Linear(d → d_ff) → depthwise conv over tokens → GELU → Linear(d_ff → d)`.
#[derive(Clone, Debug)]
pub struct NeighborhoodFfn {
    pub expand: Linear,
    pub conv: DepthwiseConv1d,
    pub contract: Linear,
}

impl NeighborhoodFfn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        d_ff: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel == 0 || d_ff == 0 {
            return Err(Error::Config(
                "feed-forward kernel and width must be positive".into(),
            ));
        }
        Ok(Self {
            expand: Linear::new(store, &format!("{name}.expand"), dim, d_ff, rng),
            conv: DepthwiseConv1d::new(store, &format!("{name}.conv"), d_ff, kernel, rng),
            contract: Linear::new(store, &format!("{name}.contract"), d_ff, dim, rng),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 2 || s[1] != self.expand.d_in {
            return Err(Error::shape("nffn", s, &[self.expand.d_in]));
        }
        let h = self.expand.forward(g, store, z)?;
        let h = self.conv.forward(g, store, h)?;
        let h = g.gelu(h);
        self.contract.forward(g, store, h)
    }
}

/// Where attention keys and values come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Group embeddings of the rearranged tokens.
    #[default]
    Grouping,
    /// Strided reduction of the tokens in their original spatial order.
    Sra,
    /// Every token (quadratic).
    Full,
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grouping" | "ga" => Ok(Self::Grouping),
            "sra" => Ok(Self::Sra),
            "full" => Ok(Self::Full),
            _ => Err(Error::Config(format!("unknown attention kind '{s}'"))),
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Grouping => "grouping",
            Self::Sra => "sra",
            Self::Full => "full",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub dim: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Group size; also the neighbourhood kernel.
    pub group: usize,
    pub pre_norm: bool,
    pub attention: AttentionKind,
}

/// Attention plus feed-forward with residual connections. By default the
/// norm is applied to each sublayer output before it is added back.
#[derive(Clone, Debug)]
pub struct HyagBlock {
    pub ga: GroupingAttention,
    pub nffn: NeighborhoodFfn,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub pre_norm: bool,
}

impl HyagBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ga: GroupingAttention::new(store, &format!("{name}.ga"), cfg.dim, cfg.heads, rng)?,
            nffn: NeighborhoodFfn::new(
                store,
                &format!("{name}.nffn"),
                cfg.dim,
                cfg.d_ff,
                cfg.group,
                rng,
            )?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim),
            pre_norm: cfg.pre_norm,
        })
    }

    /// `z: (n, d)`, `e: (m, d)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, z: Var, e: Var) -> Result<Var> {
        if self.pre_norm {
            let zn = self.norm1.forward(g, store, z)?;
            let a = self.ga.forward(g, store, zn, e)?.out;
            let z = g.add(z, a)?;
            let zn = self.norm2.forward(g, store, z)?;
            let f = self.nffn.forward(g, store, zn)?;
            g.add(z, f)
        } else {
            let a = self.ga.forward(g, store, z, e)?.out;
            let a = self.norm1.forward(g, store, a)?;
            let z = g.add(z, a)?;
            let f = self.nffn.forward(g, store, z)?;
            let f = self.norm2.forward(g, store, f)?;
            g.add(z, f)
        }
    }

    /// Zero the attention output projection and the feed-forward contraction
    /// so that, with zero norm bias, the block is the identity.
    pub fn zero_sublayers(&self, store: &mut ParamStore) {
        self.ga.out.zero(store);
        self.nffn.contract.zero(store);
    }
}

/// A block together with the layer that produces its keys and values.
#[derive(Clone, Debug)]
pub struct HyagLayer {
    pub embed: Conv1d,
    pub spec: GroupSpec,
    pub block: HyagBlock,
    pub attention: AttentionKind,
}

impl HyagLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n: usize,
        cfg: &BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spec = GroupSpec::new(n, cfg.group)?;
        Ok(Self {
            embed: Conv1d::new(
                store,
                &format!("{name}.group"),
                cfg.dim,
                cfg.dim,
                cfg.group,
                cfg.group,
                rng,
            ),
            spec,
            block: HyagBlock::new(store, name, cfg, rng)?,
            attention: cfg.attention,
        })
    }

    /// `z_hat` is in rearranged order; `perm` is the permutation that
    /// produced it (needed for the spatial-reduction variant).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_hat: Var,
        perm: &Permutation,
    ) -> Result<Var> {
        let kv = match self.attention {
            AttentionKind::Grouping => {
                metok::group_embed(g, store, z_hat, &self.embed, &self.spec)?
            }
            AttentionKind::Sra => {
                let spatial = metok::unshuffle(g, z_hat, perm)?;
                metok::group_embed(g, store, spatial, &self.embed, &self.spec)?
            }
            AttentionKind::Full => z_hat,
        };
        self.block.forward(g, store, z_hat, kv)
    }
}
