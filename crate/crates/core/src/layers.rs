//! Parameter-name based building blocks shared by the encoder, policy and IDM.

use rand::Rng;

use crate::env::{FrameTensor, FRAME_CHANNELS, FRAME_SIDE};
use crate::error::Result;
use crate::numerics::{AttnSpec, Graph, ParamStore, Real, Tensor, Var};

pub(crate) fn init_linear<R: Real>(
    store: &mut ParamStore<R>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert_normal(format!("{name}.w"), &[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng)?;
    store.insert_const(format!("{name}.b"), &[fan_out], 0.0)?;
    Ok(())
}

pub(crate) fn linear<R: Real>(g: &mut Graph<'_, R>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub(crate) fn init_ln<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize) -> Result<()> {
    store.insert_const(format!("{name}.g"), &[d], 1.0)?;
    store.insert_const(format!("{name}.b"), &[d], 0.0)?;
    Ok(())
}

pub(crate) fn ln<R: Real>(g: &mut Graph<'_, R>, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(&format!("{name}.g"))?;
    let beta = g.param(&format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta)
}

pub(crate) fn init_proj<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize, gain: f64, rng: &mut impl Rng) -> Result<()> {
    store.insert_normal(name.to_string(), &[d, d], gain / (d as f64).sqrt(), rng)?;
    Ok(())
}

pub(crate) fn proj<R: Real>(g: &mut Graph<'_, R>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(name)?;
    g.matmul(x, w)
}

/// Pre-norm transformer block: attention then a tanh feed-forward, both residual.
pub(crate) fn init_block<R: Real>(
    store: &mut ParamStore<R>,
    prefix: &str,
    d: usize,
    ff_mult: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_ln(store, &format!("{prefix}.ln1"), d)?;
    for w in ["wq", "wk", "wv"] {
        init_proj(store, &format!("{prefix}.{w}"), d, 1.0, rng)?;
    }
    init_proj(store, &format!("{prefix}.wo"), d, 0.5, rng)?;
    init_ln(store, &format!("{prefix}.ln2"), d)?;
    init_linear(store, &format!("{prefix}.ff1"), d, d * ff_mult, 1.0, rng)?;
    init_linear(store, &format!("{prefix}.ff2"), d * ff_mult, d, 0.5, rng)?;
    Ok(())
}

pub(crate) fn feed_forward<R: Real>(g: &mut Graph<'_, R>, prefix: &str, x: Var) -> Result<Var> {
    let h = ln(g, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, &format!("{prefix}.ff1"), h)?;
    let h = g.tanh(h);
    let h = linear(g, &format!("{prefix}.ff2"), h)?;
    g.add(x, h)
}

pub(crate) fn block<R: Real>(g: &mut Graph<'_, R>, prefix: &str, x: Var, spec: AttnSpec) -> Result<Var> {
    let h = ln(g, &format!("{prefix}.ln1"), x)?;
    let q = proj(g, &format!("{prefix}.wq"), h)?;
    let k = proj(g, &format!("{prefix}.wk"), h)?;
    let v = proj(g, &format!("{prefix}.wv"), h)?;
    let a = g.attention(q, k, v, spec)?;
    let a = proj(g, &format!("{prefix}.wo"), a)?;
    let x = g.add(x, a)?;
    feed_forward(g, prefix, x)
}

const CELLS: usize = FRAME_SIDE * FRAME_SIDE;
const PATCH: usize = 9 * FRAME_CHANNELS;

/// 3x3 zero-padded patches over channel-stacked frame groups:
/// `[groups * 49, 9 * C * stack]`.
pub(crate) fn im2col<R: Real>(groups: &[&[&FrameTensor]]) -> Tensor<R> {
    let stack = groups.first().map_or(1, |g| g.len());
    let width = PATCH * stack;
    let s = FRAME_SIDE as isize;
    let mut data = vec![R::zero(); groups.len() * CELLS * width];
    for (f, group) in groups.iter().enumerate() {
        for i in 0..s {
            for j in 0..s {
                let row = &mut data[((f * CELLS) + (i * s + j) as usize) * width..][..width];
                let mut p = 0;
                for di in -1..=1isize {
                    for dj in -1..=1isize {
                        let (r, c) = (i + di, j + dj);
                        for frame in group.iter() {
                            if r >= 0 && c >= 0 && r < s && c < s {
                                let src = &frame.values[((r * s + c) as usize) * FRAME_CHANNELS..][..FRAME_CHANNELS];
                                for (dst, &v) in row[p..p + FRAME_CHANNELS].iter_mut().zip(src) {
                                    *dst = R::lit(v as f64);
                                }
                            }
                            p += FRAME_CHANNELS;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[groups.len() * CELLS, width], data).expect("im2col shape")
}

/// Two convolution-style layers, then attention pooling of the 49 spatial
/// tokens into a learnable `[sp]` token. Frames are embedded independently.
///
/// With `stack > 1` each input is a group of frames stacked along channels.
#[derive(Clone, Debug)]
pub struct FrameEmbedder {
    pub prefix: String,
    pub hidden: usize,
    pub heads: usize,
    pub stack: usize,
    /// Full self-attention blocks over the spatial tokens before pooling.
    pub mix_layers: usize,
}

impl FrameEmbedder {
    pub fn new(prefix: impl Into<String>, hidden: usize, heads: usize) -> Self {
        Self {
            prefix: prefix.into(),
            hidden,
            heads,
            stack: 1,
            mix_layers: 0,
        }
    }

    pub fn with_mixing(mut self, layers: usize) -> Self {
        self.mix_layers = layers;
        self
    }

    pub fn stacked(mut self, stack: usize) -> Self {
        self.stack = stack;
        self
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) -> Result<()> {
        let d = self.hidden;
        init_linear(store, &self.name("conv"), PATCH * self.stack, d, 1.0, rng)?;
        init_linear(store, &self.name("cell"), d, d, 1.0, rng)?;
        store.insert_normal(self.name("spatial_pos"), &[CELLS, d], 0.3, rng)?;
        store.insert_normal(self.name("sp"), &[1, d], 1.0, rng)?;
        for w in ["wq", "wk", "wv"] {
            init_proj(store, &self.name(&format!("pool.{w}")), d, 1.0, rng)?;
        }
        init_proj(store, &self.name("pool.wo"), d, 1.0, rng)?;
        init_ln(store, &self.name("pool.ln"), d)?;
        for l in 0..self.mix_layers {
            init_block(store, &self.name(&format!("mix{l}")), d, 2, rng)?;
        }
        Ok(())
    }

    /// `[n, d]` embeddings for `n` frames.
    pub fn embed<R: Real>(&self, g: &mut Graph<'_, R>, frames: &[&FrameTensor]) -> Result<Var> {
        let groups: Vec<[&FrameTensor; 1]> = frames.iter().map(|f| [*f]).collect();
        let groups: Vec<&[&FrameTensor]> = groups.iter().map(|g| &g[..]).collect();
        self.embed_groups(g, &groups)
    }

    /// `[n, d]` embeddings for `n` groups of `stack` frames each.
    pub fn embed_groups<R: Real>(&self, g: &mut Graph<'_, R>, groups: &[&[&FrameTensor]]) -> Result<Var> {
        if let Some(bad) = groups.iter().find(|gr| gr.len() != self.stack) {
            return crate::error::shape_err("frame group", &[bad.len()], &[self.stack]);
        }
        let n = groups.len();
        let patches = g.constant(im2col(groups));
        let h = linear(g, &self.name("conv"), patches)?;
        let h = g.tanh(h);
        let h = linear(g, &self.name("cell"), h)?;
        let h = g.tanh(h);
        let pos = g.param(&self.name("spatial_pos"))?;
        let tile: Vec<usize> = (0..n).flat_map(|_| 0..CELLS).collect();
        let pos = g.gather_rows(pos, &tile)?;
        let mut cells = g.add(h, pos)?;
        for l in 0..self.mix_layers {
            let spec = AttnSpec::full(n, CELLS, CELLS, self.heads);
            cells = block(g, &self.name(&format!("mix{l}")), cells, spec)?;
        }
        let sp = g.param(&self.name("sp"))?;
        let all = g.concat_rows(&[cells, sp])?;
        let order: Vec<usize> = (0..n)
            .flat_map(|f| (0..CELLS).map(move |j| f * CELLS + j).chain(std::iter::once(n * CELLS)))
            .collect();
        let tokens = g.gather_rows(all, &order)?;
        let k = proj(g, &self.name("pool.wk"), tokens)?;
        let v = proj(g, &self.name("pool.wv"), tokens)?;
        let q1 = proj(g, &self.name("pool.wq"), sp)?;
        let q = g.gather_rows(q1, &vec![0; n])?;
        // Only the [sp] query is needed: its output is the pooled feature.
        let a = g.attention(q, k, v, AttnSpec::full(n, 1, CELLS + 1, self.heads))?;
        let a = proj(g, &self.name("pool.wo"), a)?;
        let sp_rows = g.gather_rows(sp, &vec![0; n])?;
        let pooled = g.add(sp_rows, a)?;
        ln(g, &self.name("pool.ln"), pooled)
    }
}
