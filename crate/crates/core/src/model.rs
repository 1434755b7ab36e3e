//! Encoder, translator and decoder around the grouping transformer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TensorEntry};
use crate::error::{Error, Result};
use crate::grid::{classify_levels, GridSequence, LevelField, NUM_LEVELS};
use crate::hyag::{AttentionKind, BlockConfig, HyagLayer};
use crate::metok::{self, OrderingStrategy, PatchGrid, Permutation};
use crate::nn::{Conv2d, ConvTranspose2d, LayerNorm};
use crate::posembed::{ElevationForm, PosEmbed, PosKind};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Five intensity-level logits per cell and lead time.
    #[default]
    Levels,
    /// One precipitation amount per cell and lead time.
    Regression,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Number of input variables `l`.
    pub variables: usize,
    /// History length `s`.
    pub history: usize,
    /// Forecast horizon `j`.
    pub horizon: usize,
    /// Patch stride `p`; must be a power of two.
    pub patch: usize,
    pub dim: usize,
    pub group: usize,
    pub encoder_depth: usize,
    pub translator_depth: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of the block width.
    pub ffn_ratio: usize,
    pub translator_ffn_ratio: usize,
    pub decoder_dim: usize,
    pub head: HeadKind,
    pub pos: PosKind,
    pub elevation: ElevationForm,
    pub ordering: OrderingStrategy,
    pub attention: AttentionKind,
    pub pre_norm: bool,
    /// Feed `log1p(precip)` as an extra input channel.
    pub precip_channel: bool,
    /// Rank patches by precipitation summed over this many recent steps.
    pub score_window: usize,
    /// Concatenate the last-step patch features before the output convolutions.
    pub skip: bool,
    pub decoder_activation: Activation,
    /// Channel layer norm after each decoder convolution.
    pub decoder_norm: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            variables: 4,
            history: 6,
            horizon: 6,
            patch: 4,
            dim: 32,
            group: 8,
            encoder_depth: 4,
            translator_depth: 2,
            heads: 2,
            ffn_ratio: 4,
            translator_ffn_ratio: 2,
            decoder_dim: 32,
            head: HeadKind::Levels,
            pos: PosKind::Solar,
            elevation: ElevationForm::Arccos,
            ordering: OrderingStrategy::Precip,
            attention: AttentionKind::Grouping,
            pre_norm: false,
            precip_channel: true,
            score_window: 1,
            skip: true,
            decoder_activation: Activation::Gelu,
            decoder_norm: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let grid = PatchGrid::new(self.height, self.width, self.patch)?;
        if !self.patch.is_power_of_two() {
            return bad(format!("patch stride {} is not a power of two", self.patch));
        }
        if grid.n() % self.group != 0 || self.group == 0 {
            return bad(format!(
                "{} patches are not divisible into groups of {}",
                grid.n(),
                self.group
            ));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads do not divide width {}",
                self.heads, self.dim
            ));
        }
        if self.history == 0 || self.horizon == 0 || self.variables == 0 {
            return bad("history, horizon and variables must be positive".into());
        }
        if self.ffn_ratio == 0 || self.translator_ffn_ratio == 0 || self.decoder_dim == 0 {
            return bad("feed-forward ratios and decoder width must be positive".into());
        }
        if self.score_window == 0 {
            return bad("score window must be at least 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.height, self.width, self.patch).expect("validated")
    }

    pub fn in_channels(&self) -> usize {
        self.variables + usize::from(self.precip_channel)
    }

    pub fn out_channels(&self) -> usize {
        match self.head {
            HeadKind::Levels => NUM_LEVELS,
            HeadKind::Regression => 1,
        }
    }

    fn block(&self, dim: usize, ratio: usize) -> BlockConfig {
        BlockConfig {
            dim,
            heads: self.heads,
            d_ff: ratio * dim,
            group: self.group,
            pre_norm: self.pre_norm,
            attention: self.attention,
        }
    }
}

/// Intermediate results of one forward pass.
pub struct FeatureBundle {
    /// Encoder output per step, each `(n, d)`.
    pub tokens: Vec<Var>,
    /// Patch features of the last input step, `(h/p, w/p, d)`.
    pub local: Var,
    /// Translator output `(n, s·d)`.
    pub translated: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    patchify: Conv2d,
    pos: PosEmbed,
    encoder: Vec<HyagLayer>,
    encoder_norm: Option<LayerNorm>,
    translator: Vec<HyagLayer>,
    translator_norm: Option<LayerNorm>,
    upsample: Vec<ConvTranspose2d>,
    /// One per upsampling stage plus one after `fuse`.
    decoder_norms: Vec<LayerNorm>,
    fuse: Conv2d,
    head: Conv2d,
    random_order: Permutation,
}

#[derive(Serialize, Deserialize)]
struct Manifest<S> {
    format: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    state: S,
}

const CHECKPOINT_FORMAT: &str = "metok-checkpoint/1";

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let grid = cfg.grid();
        let (n, d, p) = (grid.n(), cfg.dim, cfg.patch);
        let patchify = Conv2d::new(
            &mut store,
            "patchify",
            cfg.in_channels(),
            d,
            2 * p - 1,
            p,
            p - 1,
            &mut rng,
        );
        let pos = PosEmbed::new(&mut store, "pos", cfg.pos, cfg.elevation, n, d, &mut rng);
        let encoder = (0..cfg.encoder_depth)
            .map(|i| {
                HyagLayer::new(
                    &mut store,
                    &format!("encoder.{i}"),
                    n,
                    &cfg.block(d, cfg.ffn_ratio),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let td = cfg.history * d;
        let translator = (0..cfg.translator_depth)
            .map(|i| {
                HyagLayer::new(
                    &mut store,
                    &format!("translator.{i}"),
                    n,
                    &cfg.block(td, cfg.translator_ffn_ratio),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm =
            (cfg.encoder_depth > 0).then(|| LayerNorm::new(&mut store, "encoder.norm", d));
        let translator_norm =
            (cfg.translator_depth > 0).then(|| LayerNorm::new(&mut store, "translator.norm", td));
        let stages = p.trailing_zeros() as usize;
        let mut upsample = Vec::with_capacity(stages);
        let mut c = td;
        for i in 0..stages {
            upsample.push(ConvTranspose2d::new(
                &mut store,
                &format!("decoder.up.{i}"),
                c,
                cfg.decoder_dim,
                4,
                2,
                1,
                &mut rng,
            ));
            c = cfg.decoder_dim;
        }
        let decoder_norms = if cfg.decoder_norm {
            (0..=stages)
                .map(|i| LayerNorm::new(&mut store, &format!("decoder.norm.{i}"), cfg.decoder_dim))
                .collect()
        } else {
            Vec::new()
        };
        let fuse_in = c + if cfg.skip { d } else { 0 };
        let fuse = Conv2d::new(
            &mut store,
            "decoder.fuse",
            fuse_in,
            cfg.decoder_dim,
            3,
            1,
            1,
            &mut rng,
        );
        let head = Conv2d::new(
            &mut store,
            "decoder.head",
            cfg.decoder_dim,
            cfg.horizon * cfg.out_channels(),
            1,
            1,
            0,
            &mut rng,
        );
        let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        order_rng.set_stream(1);
        let random_order = Permutation::random(n, &mut order_rng);
        Ok(Self {
            cfg,
            store,
            patchify,
            pos,
            encoder,
            encoder_norm,
            translator,
            translator_norm,
            upsample,
            decoder_norms,
            fuse,
            head,
            random_order,
        })
    }

    fn check_inputs(&self, inputs: &GridSequence) -> Result<()> {
        let c = &self.cfg;
        if inputs.steps() != c.history
            || inputs.height() != c.height
            || inputs.width() != c.width
            || inputs.num_vars() != c.variables
        {
            return Err(Error::shape(
                "model_input",
                inputs.vars.shape(),
                &[c.history, c.height, c.width, c.variables],
            ));
        }
        Ok(())
    }

    /// Channel-last `(h, w, c)` input map for step `k`.
    pub fn input_map(&self, inputs: &GridSequence, k: usize) -> Result<Tensor> {
        let (h, w, l) = (inputs.height(), inputs.width(), inputs.num_vars());
        let vars = inputs.vars_at(k);
        if !self.cfg.precip_channel {
            return Tensor::new(vec![h, w, l], vars.to_vec());
        }
        let precip = inputs.precip_at(k);
        let mut data = Vec::with_capacity(h * w * (l + 1));
        for (cell, chunk) in vars.chunks_exact(l).enumerate() {
            data.extend_from_slice(chunk);
            data.push(precip[cell].ln_1p());
        }
        Tensor::new(vec![h, w, l + 1], data)
    }

    /// Ordering used at step `k` of the history.
    pub fn ordering(&self, inputs: &GridSequence, k: usize) -> Result<Permutation> {
        let grid = self.cfg.grid();
        match self.cfg.ordering {
            OrderingStrategy::Original => Ok(Permutation::identity(grid.n())),
            OrderingStrategy::Random => Ok(self.random_order.clone()),
            OrderingStrategy::Precip => {
                let start = (k + 1).saturating_sub(self.cfg.score_window);
                let mut scores = vec![0.0; grid.n()];
                for step in start..=k {
                    for (s, v) in scores
                        .iter_mut()
                        .zip(metok::patch_scores_raw(inputs.precip_at(step), &grid))
                    {
                        *s += v;
                    }
                }
                metok::rank_desc(&scores)
            }
        }
    }

    /// Per-step patch tokens `(n, d)` with positional embedding, and the
    /// last step's feature map.
    pub fn patchify(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        maps: &[Var],
        inputs: &GridSequence,
    ) -> Result<(Vec<Var>, Var)> {
        let grid = self.cfg.grid();
        let (n, d) = (grid.n(), self.cfg.dim);
        let times: Vec<f64> = (0..maps.len()).map(|k| inputs.time_at(k)).collect();
        let pe = self.pos.forward(g, store, &grid, &times, &inputs.geo)?;
        let pe = match pe {
            Some(p) => Some(g.reshape(p, &[maps.len() * n, d])?),
            None => None,
        };
        let mut tokens = Vec::with_capacity(maps.len());
        let mut local = None;
        for (k, &x) in maps.iter().enumerate() {
            let f = self.patchify.forward(g, store, x)?;
            if k + 1 == maps.len() {
                local = Some(f);
            }
            let mut z = g.reshape(f, &[n, d])?;
            if let Some(pe) = pe {
                let rows: Vec<usize> = (k * n..(k + 1) * n).collect();
                let pk = g.gather_rows(pe, &rows)?;
                z = g.add(z, pk)?;
            }
            tokens.push(z);
        }
        Ok((tokens, local.expect("at least one step")))
    }

    fn run_stack(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layers: &[HyagLayer],
        norm: Option<&LayerNorm>,
        z: Var,
        perm: &Permutation,
    ) -> Result<Var> {
        if layers.is_empty() {
            return Ok(z);
        }
        let mut zh = metok::rearrange(g, z, perm)?;
        for layer in layers {
            zh = layer.forward(g, store, zh, perm)?;
        }
        let z = metok::unshuffle(g, zh, perm)?;
        match norm {
            Some(n) => n.forward(g, store, z),
            None => Ok(z),
        }
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[Var],
        inputs: &GridSequence,
    ) -> Result<Vec<Var>> {
        tokens
            .iter()
            .enumerate()
            .map(|(k, &z)| {
                let perm = self.ordering(inputs, k)?;
                self.run_stack(
                    g,
                    store,
                    &self.encoder,
                    self.encoder_norm.as_ref(),
                    z,
                    &perm,
                )
            })
            .collect()
    }

    /// `(n, s·d)` features reordered once by the latest step.
    pub fn translate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoded: &[Var],
        inputs: &GridSequence,
    ) -> Result<Var> {
        let stacked = if encoded.len() == 1 {
            encoded[0]
        } else {
            g.concat_last(encoded)?
        };
        let perm = self.ordering(inputs, encoded.len() - 1)?;
        self.run_stack(
            g,
            store,
            &self.translator,
            self.translator_norm.as_ref(),
            stacked,
            &perm,
        )
    }

    fn act(&self, g: &mut Graph, store: &ParamStore, x: Var, stage: usize) -> Result<Var> {
        let x = match self.decoder_norms.get(stage) {
            Some(n) => n.forward(g, store, x)?,
            None => x,
        };
        Ok(match self.cfg.decoder_activation {
            Activation::Gelu => g.gelu(x),
            Activation::Identity => x,
        })
    }

    /// Levels head: `(j, h, w, 5)` logits. Regression head: `(j, h, w)`.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        translated: Var,
        local: Var,
    ) -> Result<Var> {
        let c = &self.cfg;
        let grid = c.grid();
        let mut x = g.reshape(translated, &[grid.n_rows, grid.n_cols, c.history * c.dim])?;
        for (i, up) in self.upsample.iter().enumerate() {
            x = up.forward(g, store, x)?;
            x = self.act(g, store, x, i)?;
        }
        if c.skip {
            let l = g.upsample_nearest(local, c.patch)?;
            x = g.concat_last(&[x, l])?;
        }
        let x = self.fuse.forward(g, store, x)?;
        let x = self.act(g, store, x, self.upsample.len())?;
        let y = self.head.forward(g, store, x)?;
        let (h, w, j) = (c.height, c.width, c.horizon);
        match c.head {
            HeadKind::Levels => {
                let y = g.reshape(y, &[h, w, j, NUM_LEVELS])?;
                g.permute(y, &[2, 0, 1, 3])
            }
            HeadKind::Regression => {
                let y = g.reshape(y, &[h, w, j])?;
                g.permute(y, &[2, 0, 1])
            }
        }
    }

    /// Full pass from given per-step input maps.
    pub fn forward_maps(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        maps: &[Var],
        inputs: &GridSequence,
    ) -> Result<(Var, FeatureBundle)> {
        let (tokens, local) = self.patchify(g, store, maps, inputs)?;
        let encoded = self.encode(g, store, &tokens, inputs)?;
        let translated = self.translate(g, store, &encoded, inputs)?;
        let out = self.decode(g, store, translated, local)?;
        Ok((
            out,
            FeatureBundle {
                tokens: encoded,
                local,
                translated,
            },
        ))
    }

    /// Forward pass with parameters taken from `store`.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &GridSequence,
    ) -> Result<Var> {
        self.check_inputs(inputs)?;
        let maps = (0..inputs.steps())
            .map(|k| Ok(g.constant(self.input_map(inputs, k)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.forward_maps(g, store, &maps, inputs)?.0)
    }

    pub fn forward(&self, g: &mut Graph, inputs: &GridSequence) -> Result<Var> {
        self.forward_with(g, &self.store, inputs)
    }

    /// Raw head output without recording gradients for later use.
    pub fn predict(&self, inputs: &GridSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, inputs)?;
        Ok(g.value(out).clone())
    }

    /// Predicted precipitation `(j, h, w)`: regression values clamped at
    /// zero, or the lower bound of the most likely level.
    pub fn predict_precip(&self, inputs: &GridSequence) -> Result<Tensor> {
        let out = self.predict(inputs)?;
        match self.cfg.head {
            HeadKind::Regression => Ok(Tensor::from_fn(out.shape(), |i| out.data()[i].max(0.0))),
            HeadKind::Levels => Ok(argmax_levels(&out)?.representative_precip()),
        }
    }

    /// Predicted levels `(j, h, w)`.
    pub fn predict_levels(&self, inputs: &GridSequence) -> Result<LevelField> {
        let out = self.predict(inputs)?;
        match self.cfg.head {
            HeadKind::Levels => argmax_levels(&out),
            HeadKind::Regression => {
                classify_levels(&Tensor::from_fn(out.shape(), |i| out.data()[i].max(0.0)))
            }
        }
    }

    pub fn parameter_tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Replace parameter values by name; every parameter must be present.
    pub fn load_parameters(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.get(id).name.clone();
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Input(format!("checkpoint lacks parameter {name}")))?;
            self.store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    /// Save parameters plus `extra` tensors and a serializable training state.
    pub fn save<S: Serialize>(
        &self,
        stem: &Path,
        extra: &[(String, Tensor)],
        state: &S,
    ) -> Result<()> {
        let mut tensors = self.parameter_tensors();
        tensors.extend(extra.iter().cloned());
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            config: self.cfg.clone(),
            tensors: checkpoint::entries(&tensors),
            state,
        };
        checkpoint::save(stem, &tensors, &manifest)
    }

    /// Load a model; returns the tensors that are not parameters and the state.
    pub fn load<S: serde::de::DeserializeOwned>(
        stem: &Path,
    ) -> Result<(Self, Vec<(String, Tensor)>, S)> {
        let (tensors, manifest): (_, Manifest<S>) = checkpoint::load(stem)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Input(format!(
                "unsupported checkpoint format {}",
                manifest.format
            )));
        }
        let mut model = Self::new(manifest.config)?;
        model.load_parameters(&tensors)?;
        let names: std::collections::HashSet<String> =
            model.store.iter().map(|(_, p)| p.name.clone()).collect();
        let extra = tensors
            .into_iter()
            .filter(|(n, _)| !names.contains(n))
            .collect();
        Ok((model, extra, manifest.state))
    }
}

/// Most likely level per cell of `(…, 5)` logits; ties go to the lower level.
pub fn argmax_levels(logits: &Tensor) -> Result<LevelField> {
    let s = logits.shape();
    if s.last() != Some(&NUM_LEVELS) {
        return Err(Error::shape("argmax_levels", s, &[NUM_LEVELS]));
    }
    let levels = logits
        .rows()
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    LevelField::new(s[..s.len() - 1].to_vec(), levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{synth_sample, SynthConfig};
    use crate::tensor::{grad_check, GradCheckOptions};
    use proptest::prelude::*;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            height: 16,
            width: 16,
            variables: 2,
            history: 2,
            horizon: 1,
            patch: 4,
            dim: 8,
            group: 4,
            encoder_depth: 1,
            translator_depth: 1,
            heads: 2,
            ffn_ratio: 2,
            translator_ffn_ratio: 2,
            decoder_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn toy_inputs(cfg: &ModelConfig, seed: u64) -> GridSequence {
        let s = SynthConfig {
            samples: 1,
            height: cfg.height,
            width: cfg.width,
            history: cfg.history,
            horizon: cfg.horizon,
            variables: cfg.variables,
            storms_min: 2,
            storms_max: 3,
            ..SynthConfig::default()
        };
        synth_sample(&s, seed, 0).unwrap().inputs
    }

    #[test]
    fn output_shapes() {
        let cfg = toy_config();
        let m = Model::new(cfg.clone()).unwrap();
        assert_eq!(
            m.predict(&toy_inputs(&cfg, 1)).unwrap().shape(),
            &[1, 16, 16, 5]
        );
        let cfg = ModelConfig {
            head: HeadKind::Regression,
            horizon: 3,
            ..toy_config()
        };
        let m = Model::new(cfg.clone()).unwrap();
        assert_eq!(
            m.predict(&toy_inputs(&cfg, 1)).unwrap().shape(),
            &[3, 16, 16]
        );
    }

    #[test]
    fn deterministic() {
        let cfg = toy_config();
        let x = toy_inputs(&cfg, 2);
        let a = Model::new(cfg.clone()).unwrap().predict(&x).unwrap();
        let b = Model::new(cfg).unwrap().predict(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            ModelConfig {
                height: 18,
                ..toy_config()
            },
            ModelConfig {
                group: 3,
                ..toy_config()
            },
            ModelConfig {
                heads: 3,
                ..toy_config()
            },
            ModelConfig {
                patch: 3,
                height: 18,
                width: 18,
                ..toy_config()
            },
        ] {
            assert!(Model::new(cfg).is_err());
        }
    }

    #[test]
    fn zero_depth_encoder_is_identity() {
        let cfg = ModelConfig {
            encoder_depth: 0,
            translator_depth: 0,
            ..toy_config()
        };
        let m = Model::new(cfg.clone()).unwrap();
        let x = toy_inputs(&cfg, 3);
        let mut g = Graph::new();
        let maps: Vec<Var> = (0..2)
            .map(|k| g.constant(m.input_map(&x, k).unwrap()))
            .collect();
        let (tokens, _) = m.patchify(&mut g, &m.store, &maps, &x).unwrap();
        let enc = m.encode(&mut g, &m.store, &tokens, &x).unwrap();
        assert_eq!(enc, tokens);
        let tr = m.translate(&mut g, &m.store, &enc, &x).unwrap();
        assert_eq!(g.shape(tr), &[16, 16]);
        for k in 0..2 {
            for r in 0..16 {
                assert_eq!(
                    &g.value(tr).data()[r * 16 + k * 8..r * 16 + k * 8 + 8],
                    &g.value(enc[k]).data()[r * 8..r * 8 + 8]
                );
            }
        }
    }

    #[test]
    fn constant_input_gives_constant_interior_tokens() {
        let cfg = ModelConfig {
            pos: PosKind::None,
            height: 32,
            width: 32,
            ..toy_config()
        };
        let m = Model::new(cfg.clone()).unwrap();
        let mut x = toy_inputs(&cfg, 4);
        x.vars.data_mut().fill(0.7);
        x.precip.data_mut().fill(1.0);
        let mut g = Graph::new();
        let maps: Vec<Var> = (0..2)
            .map(|k| g.constant(m.input_map(&x, k).unwrap()))
            .collect();
        let (tokens, _) = m.patchify(&mut g, &m.store, &maps, &x).unwrap();
        // away from the zero padding every patch sees the same window
        let t = g.value(tokens[0]);
        let at = |r: usize, c: usize| &t.data()[(r * 8 + c) * 8..(r * 8 + c) * 8 + 8];
        for r in 1..7 {
            for c in 1..7 {
                assert_eq!(at(r, c), at(1, 1));
            }
        }
    }

    #[test]
    fn linear_anchor() {
        // no positions, no blocks, identity activations: the model is affine
        // in its inputs, so input gradients do not depend on the input
        let cfg = ModelConfig {
            pos: PosKind::None,
            encoder_depth: 0,
            translator_depth: 0,
            decoder_activation: Activation::Identity,
            decoder_norm: false,
            ..toy_config()
        };
        let m = Model::new(cfg.clone()).unwrap();
        let grads = |seed: u64| {
            let x = toy_inputs(&cfg, seed);
            let mut g = Graph::new();
            let maps: Vec<Var> = (0..2)
                .map(|k| g.input(m.input_map(&x, k).unwrap()))
                .collect();
            let (out, _) = m.forward_maps(&mut g, &m.store, &maps, &x).unwrap();
            let loss = g.mean(out);
            let b = g.backward(loss).unwrap();
            maps.iter()
                .map(|v| b.wrt(*v).unwrap().clone())
                .collect::<Vec<_>>()
        };
        let (a, b) = (grads(5), grads(6));
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y).unwrap() < 1e-14);
        }
    }

    #[test]
    fn full_model_gradients() {
        let cfg = toy_config();
        let m = Model::new(cfg.clone()).unwrap();
        let x = toy_inputs(&cfg, 7);
        let rep = grad_check(
            |g, s| {
                let out = m.forward_with(g, s, &x)?;
                Ok(g.mean(out))
            },
            &m.store,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed, "{:?}", rep.failing().collect::<Vec<_>>());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = toy_config();
        let m = Model::new(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("model");
        let extra = vec![("adam.step".to_string(), Tensor::scalar(3.0))];
        m.save(&stem, &extra, &serde_json::json!({"epoch": 2}))
            .unwrap();
        let (back, ex, state): (Model, _, serde_json::Value) = Model::load(&stem).unwrap();
        assert_eq!(back.parameter_tensors(), m.parameter_tensors());
        assert_eq!(ex, extra);
        assert_eq!(state["epoch"], 2);
        let x = toy_inputs(&cfg, 8);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn orderings() {
        let cfg = toy_config();
        let x = toy_inputs(&cfg, 9);
        let m = Model::new(cfg.clone()).unwrap();
        let p = m.ordering(&x, 1).unwrap();
        let scores = metok::patch_scores_raw(x.precip_at(1), &cfg.grid());
        assert_eq!(p, metok::rank_desc(&scores).unwrap());
        let orig = Model::new(ModelConfig {
            ordering: OrderingStrategy::Original,
            ..cfg.clone()
        })
        .unwrap();
        assert_eq!(orig.ordering(&x, 0).unwrap(), Permutation::identity(16));
        let rnd = Model::new(ModelConfig {
            ordering: OrderingStrategy::Random,
            ..cfg
        })
        .unwrap();
        assert_eq!(rnd.ordering(&x, 0).unwrap(), rnd.ordering(&x, 1).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn shape_contract(
            rows in 1usize..4, cols in 1usize..4, p_log in 0u32..3,
            dh in 1usize..4, t in 1usize..3, j in 1usize..3, regression: bool,
        ) {
            let p = 1usize << p_log;
            let cfg = ModelConfig {
                height: rows * p * 2,
                width: cols * p * 2,
                patch: p,
                dim: 2 * dh,
                group: 2,
                history: t,
                horizon: j,
                variables: 2,
                encoder_depth: 1,
                translator_depth: 1,
                decoder_dim: 4,
                head: if regression { HeadKind::Regression } else { HeadKind::Levels },
                ..ModelConfig::default()
            };
            let m = Model::new(cfg.clone()).unwrap();
            let out = m.predict(&toy_inputs(&cfg, 0)).unwrap();
            let mut want = vec![j, cfg.height, cfg.width];
            if !regression {
                want.push(5);
            }
            prop_assert_eq!(out.shape(), &want[..]);
        }
    }
}
