//! Vision-transformer building blocks on top of the tape.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;
pub const MLP_RATIO: usize = 4;

/// Partition of an image into square, non-overlapping patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(image_h: usize, image_w: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || channels == 0 || image_h == 0 || image_w == 0 {
            return Err(Error::config("patch grid extents must be positive"));
        }
        if !image_h.is_multiple_of(patch) || !image_w.is_multiple_of(patch) {
            return Err(Error::config(format!(
                "image {image_h}x{image_w} is not divisible by patch size {patch}"
            )));
        }
        Ok(PatchGrid {
            image_h,
            image_w,
            channels,
            patch,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    // [N, C, gh, p, gw, p] <-> [N, gh, gw, p, p, C]
    fn split_shape(&self, n: usize) -> [usize; 6] {
        [n, self.channels, self.grid_h(), self.patch, self.grid_w(), self.patch]
    }

    fn token_shape(&self, n: usize) -> [usize; 6] {
        [n, self.grid_h(), self.grid_w(), self.patch, self.patch, self.channels]
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 4 || shape[1..] != [self.channels, self.image_h, self.image_w] {
            return Err(Error::dim("patchify", shape, &[0, self.channels, self.image_h, self.image_w]));
        }
        Ok(shape[0])
    }

    fn check_tokens(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 3 || shape[1..] != [self.tokens(), self.patch_dim()] {
            return Err(Error::dim("unpatchify", shape, &[0, self.tokens(), self.patch_dim()]));
        }
        Ok(shape[0])
    }
}

const TO_TOKENS: [usize; 6] = [0, 2, 4, 3, 5, 1];
const TO_IMAGE: [usize; 6] = [0, 5, 1, 3, 2, 4];

/// `[N, C, H, W]` images to `[N, T, p·p·C]` tokens. Tokens are in row-major
/// grid order and each holds its patch in (row, col, channel) order.
pub fn patchify<T: Real>(images: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    let n = grid.check_images(images.shape())?;
    images
        .reshape(grid.split_shape(n))?
        .permute(&TO_TOKENS)?
        .reshape([n, grid.tokens(), grid.patch_dim()])
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(tokens: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    let n = grid.check_tokens(tokens.shape())?;
    tokens
        .reshape(grid.token_shape(n))?
        .permute(&TO_IMAGE)?
        .reshape([n, grid.channels, grid.image_h, grid.image_w])
}

/// Differentiable [`unpatchify`].
pub fn unpatchify_var<T: Real>(tape: &mut Tape<T>, tokens: Var, grid: &PatchGrid) -> Result<Var> {
    let n = grid.check_tokens(tape.shape(tokens))?;
    let x = tape.reshape(tokens, &grid.token_shape(n))?;
    let x = tape.permute(x, &TO_IMAGE)?;
    tape.reshape(x, &[n, grid.channels, grid.image_h, grid.image_w])
}

/// Fixed 2-D sin-cos table `[grid_h·grid_w, dim]`.
///
/// The first half of the channels encodes the row index, the second half the
/// column index. Within a half, channel `2i` is `sin(pos·ωᵢ)` and `2i+1` is
/// `cos(pos·ωᵢ)` with `ωᵢ = 10000^(-2i/half)`.
pub fn positional_embedding<T: Real>(grid_h: usize, grid_w: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!("positional embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let encode = |pos: usize, c: usize| -> f64 {
        let i = c / 2;
        let omega = 10000f64.powf(-(2.0 * i as f64) / half as f64);
        let angle = pos as f64 * omega;
        if c.is_multiple_of(2) {
            angle.sin()
        } else {
            angle.cos()
        }
    };
    Ok(Tensor::from_fn([grid_h * grid_w, dim], |idx| {
        let (t, c) = (idx / dim, idx % dim);
        let (row, col) = (t / grid_w, t % grid_w);
        T::of(if c < half { encode(row, c) } else { encode(col, c - half) })
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a tape leaf. Parameters for which
    /// `trainable(name)` is false are recorded as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| tape.leaf(t.clone(), trainable(name)))
            .collect();
        Binding { vars }
    }
}

/// Tape handles for a [`ParamStore`], parallel to its registration order.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Normal(0, std) truncated to ±2 std by resampling.
pub fn trunc_normal<T: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::of(z * std);
        }
    })
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{prefix}.weight"), trunc_normal(&[fan_in, fan_out], INIT_STD, rng))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros([fan_out]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, b.var(self.weight))?;
        tape.add(y, b.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::ones([dim]))?;
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros([dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, b.var(self.gamma), b.var(self.beta), T::of(LN_EPS))
    }
}

/// Multi-head self-attention with a fused qkv projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!("{heads} heads do not divide embedding dim {dim}")));
        }
        Ok(Attention {
            qkv: Linear::new(store, &format!("{prefix}.qkv"), dim, 3 * dim, rng)?,
            proj: Linear::new(store, &format!("{prefix}.proj"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        self.forward_with_weights(tape, b, x).map(|(out, _)| out)
    }

    /// Also returns the `[N, heads, T, T]` attention weights.
    pub fn forward_with_weights<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::dim("attention", &shape, &[0, 0, self.dim]));
        }
        let (n, t, d, h) = (shape[0], shape[1], self.dim, self.heads);
        let dh = d / h;

        let qkv = self.qkv.forward(tape, b, x)?;
        let qkv = tape.reshape(qkv, &[n, t, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let head = |tape: &mut Tape<T>, i: usize| -> Result<Var> {
            let s = tape.narrow(qkv, 0, i, 1)?;
            tape.reshape(s, &[n, h, t, dh])
        };
        let q = head(tape, 0)?;
        let k = head(tape, 1)?;
        let v = head(tape, 2)?;

        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::of(1.0 / (dh as f64).sqrt()))?;
        let weights = tape.softmax(scores)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n, t, d])?;
        Ok((self.proj.forward(tape, b, ctx)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), dim, MLP_RATIO * dim, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), MLP_RATIO * dim, dim, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, b, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, b, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `+ mlp(ln2(·))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, prefix: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Block {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), dim)?,
            attn: Attention::new(store, &format!("{prefix}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), dim, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, b, x)?;
        let h = self.attn.forward(tape, b, h)?;
        let x = tape.add(x, h)?;
        let h = self.norm2.forward(tape, b, x)?;
        let h = self.mlp.forward(tape, b, h)?;
        tape.add(x, h)
    }
}

/// Builds `depth` blocks named `{prefix}.block{i}`.
pub fn blocks<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    depth: usize,
    dim: usize,
    heads: usize,
    rng: &mut R,
) -> Result<Vec<Block>> {
    (0..depth)
        .map(|i| Block::new(store, &format!("{prefix}.block{i}"), dim, heads, rng))
        .collect()
}
