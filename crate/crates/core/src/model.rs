//! Single ViT encoder with two parallel ViT decoders, and the frozen-encoder
//! probe classifier.
//!
//! The encoder maps a (possibly corrupted) image `S` to a latent token grid.
//! The synthetic decoder reconstructs `S` itself; the anatomy decoder is
//! trained to reconstruct the clean image `I` from the same latent.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    blocks, patchify, positional_embedding, unpatchify_var, Binding, Block, LayerNorm, Linear, ParamStore, PatchGrid,
};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

pub const ENCODER: &str = "encoder";
pub const SYNTHETIC_DECODER: &str = "synthetic_decoder";
pub const ANATOMY_DECODER: &str = "anatomy_decoder";
pub const PROBE: &str = "probe";

/// Architecture hyperparameters. Encoder and both decoders share
/// `embed_dim`, `depth` and `heads`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Transformer blocks in the probe classifier head.
    pub probe_depth: usize,
}

impl ModelConfig {
    /// 28×28 grayscale, 4×4 patches, latent 128 per patch.
    pub fn preset_small() -> Self {
        ModelConfig {
            image_h: 28,
            image_w: 28,
            channels: 1,
            patch_size: 4,
            embed_dim: 128,
            depth: 12,
            heads: 16,
            probe_depth: 2,
        }
    }

    /// 224×224 RGB, 16×16 patches, latent 768 per patch.
    pub fn preset_large() -> Self {
        ModelConfig {
            image_h: 224,
            image_w: 224,
            channels: 3,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 16,
            probe_depth: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::preset_small()),
            "large" => Ok(Self::preset_large()),
            other => Err(Error::config(format!("unknown preset {other:?} (expected small or large)"))),
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_h, self.image_w, self.channels, self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.depth == 0 || self.heads == 0 || self.embed_dim == 0 {
            return Err(Error::config("depth, heads and embed_dim must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(Error::config("embed_dim must be even for the positional table"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_h", self.image_h.to_string()),
            ("image_w", self.image_w.to_string()),
            ("channels", self.channels.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("probe_depth", self.probe_depth.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::config(format!("missing model key {k}")))?
                .parse()
                .map_err(|_| Error::config(format!("model key {k} is not an integer")))
        };
        let cfg = ModelConfig {
            image_h: get("image_h")?,
            image_w: get("image_w")?,
            channels: get("channels")?,
            patch_size: get("patch_size")?,
            embed_dim: get("embed_dim")?,
            depth: get("depth")?,
            heads: get("heads")?,
            probe_depth: get("probe_depth")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Encoder {
    fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let grid = cfg.grid()?;
        Ok(Encoder {
            patch_embed: Linear::new(store, &format!("{ENCODER}.patch_embed"), grid.patch_dim(), cfg.embed_dim, rng)?,
            blocks: blocks(store, ENCODER, cfg.depth, cfg.embed_dim, cfg.heads, rng)?,
            norm: LayerNorm::new(store, &format!("{ENCODER}.norm"), cfg.embed_dim)?,
        })
    }

    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &Binding,
        grid: &PatchGrid,
        pos: &Tensor<T>,
        images: &Tensor<T>,
    ) -> Result<Var> {
        let tokens = tape.constant(patchify(images, grid)?);
        let x = self.patch_embed.forward(tape, b, tokens)?;
        let pos = tape.constant(pos.clone());
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, b, x)?;
        }
        self.norm.forward(tape, b, x)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub input_proj: Linear,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Decoder {
    fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let grid = cfg.grid()?;
        Ok(Decoder {
            input_proj: Linear::new(store, &format!("{prefix}.input_proj"), cfg.embed_dim, cfg.embed_dim, rng)?,
            blocks: blocks(store, prefix, cfg.depth, cfg.embed_dim, cfg.heads, rng)?,
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), cfg.embed_dim)?,
            head: Linear::new(store, &format!("{prefix}.head"), cfg.embed_dim, grid.patch_dim(), rng)?,
        })
    }

    /// Latent tokens to an `[N, C, H, W]` image (unclamped).
    fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, grid: &PatchGrid, pos: &Tensor<T>, z: Var) -> Result<Var> {
        let x = self.input_proj.forward(tape, b, z)?;
        let pos = tape.constant(pos.clone());
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(tape, b, x)?;
        }
        let x = self.norm.forward(tape, b, x)?;
        let patches = self.head.forward(tape, b, x)?;
        unpatchify_var(tape, patches, grid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Reconstructs the encoder input, corruptions included.
    Synthetic,
    /// Reconstructs the clean anatomy.
    Anatomy,
}

/// Handles to the three loss scalars on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub synthetic: Var,
    pub anatomy: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub synthetic: f64,
    pub anatomy: f64,
}

/// Inference outputs for one batch.
#[derive(Clone, Debug)]
pub struct Reconstruction<T> {
    pub latent: Tensor<T>,
    pub synthetic: Tensor<T>,
    pub anatomy: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Autoencoder<T> {
    config: ModelConfig,
    grid: PatchGrid,
    pos: Tensor<T>,
    store: ParamStore<T>,
    encoder: Encoder,
    synthetic: Decoder,
    anatomy: Decoder,
}

impl<T: Real> Autoencoder<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let pos = positional_embedding(grid.grid_h(), grid.grid_w(), config.embed_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let synthetic = Decoder::new(&mut store, SYNTHETIC_DECODER, &config, &mut rng)?;
        let anatomy = Decoder::new(&mut store, ANATOMY_DECODER, &config, &mut rng)?;
        Ok(Autoencoder {
            config,
            grid,
            pos,
            store,
            encoder,
            synthetic,
            anatomy,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let want = [self.config.channels, self.config.image_h, self.config.image_w];
        if images.rank() != 4 || images.shape()[1..] != want {
            return Err(Error::dim("encode", images.shape(), &want));
        }
        Ok(())
    }

    /// Records `E(images)`; result is `[N, T, embed_dim]`.
    pub fn encode_var(&self, tape: &mut Tape<T>, b: &Binding, images: &Tensor<T>) -> Result<Var> {
        self.check_images(images)?;
        self.encoder.forward(tape, b, &self.grid, &self.pos, images)
    }

    pub fn decode_var(&self, branch: Branch, tape: &mut Tape<T>, b: &Binding, z: Var) -> Result<Var> {
        let dec = match branch {
            Branch::Synthetic => &self.synthetic,
            Branch::Anatomy => &self.anatomy,
        };
        dec.forward(tape, b, &self.grid, &self.pos, z)
    }

    /// `L_RS = MSE(Ŝ, S)`, `L_RI = MSE(Î_A, I)`, total is their plain sum.
    pub fn loss_var(&self, tape: &mut Tape<T>, b: &Binding, clean: &Tensor<T>, synthetic: &Tensor<T>) -> Result<LossVars> {
        if clean.shape() != synthetic.shape() {
            return Err(Error::dim("loss", clean.shape(), synthetic.shape()));
        }
        let z = self.encode_var(tape, b, synthetic)?;
        let s_hat = self.decode_var(Branch::Synthetic, tape, b, z)?;
        let i_hat = self.decode_var(Branch::Anatomy, tape, b, z)?;
        let s = tape.constant(synthetic.clone());
        let i = tape.constant(clean.clone());
        let l_rs = tape.mse(s_hat, s)?;
        let l_ri = tape.mse(i_hat, i)?;
        let total = tape.add(l_rs, l_ri)?;
        Ok(LossVars {
            total,
            synthetic: l_rs,
            anatomy: l_ri,
        })
    }

    /// One forward/backward pass over every parameter.
    pub fn loss_and_grads(&self, clean: &Tensor<T>, synthetic: &Tensor<T>) -> Result<(LossValues, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, |_| true);
        let l = self.loss_var(&mut tape, &b, clean, synthetic)?;
        let values = LossValues {
            total: tape.value(l.total).item().f64(),
            synthetic: tape.value(l.synthetic).item().f64(),
            anatomy: tape.value(l.anatomy).item().f64(),
        };
        let mut grads = tape.backward(l.total)?;
        Ok((values, collect_grads(&self.store, &b, &mut grads)))
    }

    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, |_| false);
        let z = self.encode_var(&mut tape, &b, images)?;
        Ok(tape.value(z).clone())
    }

    fn decode(&self, branch: Branch, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let want = [self.grid.tokens(), self.config.embed_dim];
        if latent.rank() != 3 || latent.shape()[1..] != want {
            return Err(Error::dim("decode", latent.shape(), &want));
        }
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, |_| false);
        let z = tape.constant(latent.clone());
        let out = self.decode_var(branch, &mut tape, &b, z)?;
        Ok(tape.value(out).clone())
    }

    /// `Ŝ = D(z)`.
    pub fn decode_synthetic(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(Branch::Synthetic, latent)
    }

    /// `Î_A = D_A(z)`.
    pub fn decode_anatomy(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(Branch::Anatomy, latent)
    }

    pub fn reconstruct(&self, images: &Tensor<T>) -> Result<Reconstruction<T>> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, |_| false);
        let z = self.encode_var(&mut tape, &b, images)?;
        let s = self.decode_var(Branch::Synthetic, &mut tape, &b, z)?;
        let a = self.decode_var(Branch::Anatomy, &mut tape, &b, z)?;
        Ok(Reconstruction {
            latent: tape.value(z).clone(),
            synthetic: tape.value(s).clone(),
            anatomy: tape.value(a).clone(),
        })
    }
}

/// Gradients for every stored parameter in registration order.
pub(crate) fn collect_grads<T: Real>(store: &ParamStore<T>, b: &Binding, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
    store
        .ids()
        .map(|id| {
            grads
                .take(b.var(id))
                .unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec()))
        })
        .collect()
}

/// Frozen encoder plus a small transformer head producing class logits.
#[derive(Clone, Debug)]
pub struct ProbeClassifier<T> {
    config: ModelConfig,
    grid: PatchGrid,
    pos: Tensor<T>,
    classes: usize,
    store: ParamStore<T>,
    encoder: Encoder,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
    encoder_loaded: bool,
}

impl<T: Real> ProbeClassifier<T> {
    /// A probe whose encoder still needs weights, either from
    /// [`ProbeClassifier::from_autoencoder`] or a checkpoint.
    pub fn new(config: ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 {
            return Err(Error::config(format!("probe needs at least 2 classes, got {classes}")));
        }
        let grid = config.grid()?;
        let pos = positional_embedding(grid.grid_h(), grid.grid_w(), config.embed_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let blocks = blocks(
            &mut store,
            PROBE,
            config.probe_depth,
            config.embed_dim,
            config.heads,
            &mut rng,
        )?;
        let norm = LayerNorm::new(&mut store, &format!("{PROBE}.norm"), config.embed_dim)?;
        let head = Linear::new(&mut store, &format!("{PROBE}.head"), config.embed_dim, classes, &mut rng)?;
        Ok(ProbeClassifier {
            config,
            grid,
            pos,
            classes,
            store,
            encoder,
            blocks,
            norm,
            head,
            encoder_loaded: false,
        })
    }

    pub fn from_autoencoder(ae: &Autoencoder<T>, classes: usize, seed: u64) -> Result<Self> {
        let mut probe = Self::new(ae.config().clone(), classes, seed)?;
        for (name, t) in ae.params().iter().filter(|(n, _)| is_encoder_param(n)) {
            let id = probe.store.id(name).expect("probe mirrors the encoder layout");
            *probe.store.get_mut(id) = t.clone();
        }
        probe.encoder_loaded = true;
        Ok(probe)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Marks encoder weights as loaded (after restoring them from a checkpoint).
    pub fn set_encoder_loaded(&mut self) {
        self.encoder_loaded = true;
    }

    fn require_encoder(&self) -> Result<()> {
        if !self.encoder_loaded {
            return Err(Error::State("probe has no trained encoder loaded".into()));
        }
        Ok(())
    }

    /// Frozen latents for `images`.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.require_encoder()?;
        let want = [self.config.channels, self.config.image_h, self.config.image_w];
        if images.rank() != 4 || images.shape()[1..] != want {
            return Err(Error::dim("probe encode", images.shape(), &want));
        }
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, |_| false);
        let z = self.encoder.forward(&mut tape, &b, &self.grid, &self.pos, images)?;
        Ok(tape.value(z).clone())
    }

    /// Head forward from a latent var: blocks, norm, token mean, linear.
    pub fn head_var(&self, tape: &mut Tape<T>, b: &Binding, z: Var) -> Result<Var> {
        let mut x = z;
        for block in &self.blocks {
            x = block.forward(tape, b, x)?;
        }
        let x = self.norm.forward(tape, b, x)?;
        let pooled = tape.mean_axis(x, 1)?;
        self.head.forward(tape, b, pooled)
    }

    /// Full forward with the encoder recorded on the tape (as constants
    /// unless `trainable` says otherwise).
    pub fn forward_var(&self, tape: &mut Tape<T>, b: &Binding, images: &Tensor<T>) -> Result<Var> {
        self.require_encoder()?;
        let z = self.encoder.forward(tape, b, &self.grid, &self.pos, images)?;
        self.head_var(tape, b, z)
    }

    /// `[N, classes]` logits.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, |_| false);
        let out = self.forward_var(&mut tape, &b, images)?;
        Ok(tape.value(out).clone())
    }

    pub fn logits_from_latent(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, |_| false);
        let z = tape.constant(latent.clone());
        let out = self.head_var(&mut tape, &b, z)?;
        Ok(tape.value(out).clone())
    }

    /// Cross-entropy gradients for a batch of frozen latents. Encoder
    /// parameters are bound as constants and come back with zero gradient.
    pub fn loss_and_grads(&self, latent: &Tensor<T>, labels: &[usize]) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let b = self.store.bind(&mut tape, is_probe_param);
        let z = tape.constant(latent.clone());
        let logits = self.head_var(&mut tape, &b, z)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let value = tape.value(loss).item().f64();
        let mut grads = tape.backward(loss)?;
        Ok((value, collect_grads(&self.store, &b, &mut grads)))
    }
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("encoder.")
}

pub fn is_probe_param(name: &str) -> bool {
    name.starts_with("probe.")
}
