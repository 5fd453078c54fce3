//! The network: patch sequence construction, learned patch + positional
//! embedding, a stack of pre-norm transformer encoder blocks, a learned
//! projection to a reconstruction vector, and a fractionally-strided
//! convolutional decoder back to image space. Encoded patch features are
//! also handed to the mixture-density head.

use crate::error::{Error, Result};
use crate::mdn::MdnHead;
use crate::tape::{BnStats, Tape, Var};
use crate::tensor::{Element, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Architecture and training-relevant hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mixture_components: usize,
    pub recon_dim: usize,
    pub decoder_stages: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub noise_std: f64,
    pub ssim_window: usize,
    pub mdn_reduced_dim: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // full-scale defaults; unstated architecture constants use
        // D=512, L=6, 8 heads
        ModelConfig {
            image_height: 512,
            image_width: 512,
            channels: 3,
            patch_size: 64,
            embed_dim: 512,
            depth: 6,
            num_heads: 8,
            mixture_components: 150,
            recon_dim: 512,
            decoder_stages: 5,
            lambda1: 5.0,
            lambda2: 0.5,
            noise_std: 0.2,
            ssim_window: 11,
            mdn_reduced_dim: None,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: small transformer, everything else configurable.
    pub fn desk(height: usize, width: usize, channels: usize, patch: usize) -> Self {
        ModelConfig {
            image_height: height,
            image_width: width,
            channels,
            patch_size: patch,
            embed_dim: 64,
            depth: 2,
            num_heads: 4,
            mixture_components: 10,
            recon_dim: 512,
            decoder_stages: 5,
            ssim_window: 11,
            ..Default::default()
        }
    }

    /// Smallest config that still exercises every component. Used by the
    /// gradient verification suite.
    pub fn tiny() -> Self {
        ModelConfig {
            image_height: 8,
            image_width: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            num_heads: 2,
            mixture_components: 2,
            recon_dim: 32,
            decoder_stages: 3,
            ssim_window: 5,
            ..Default::default()
        }
    }

    pub fn grid_rows(&self) -> usize {
        self.image_height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.image_width / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Feature dimension the mixture head models.
    pub fn mdn_dim(&self) -> usize {
        self.mdn_reduced_dim.unwrap_or(self.embed_dim)
    }

    pub fn seed_height(&self) -> usize {
        self.image_height >> self.decoder_stages
    }

    pub fn seed_width(&self) -> usize {
        self.image_width >> self.decoder_stages
    }

    pub fn seed_channels(&self) -> usize {
        self.recon_dim / (self.seed_height() * self.seed_width())
    }

    /// Channel counts through the decoder, seed first, image channels last.
    pub fn decoder_channels(&self) -> Vec<usize> {
        const PLAN: [usize; 4] = [128, 64, 32, 16];
        let inner = self.decoder_stages - 1;
        let mut chans = vec![self.seed_channels()];
        chans.extend_from_slice(&PLAN[PLAN.len() - inner..]);
        chans.push(self.channels);
        chans
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.image_height == 0 || self.image_width == 0 || self.channels == 0 {
            return fail("image dimensions must be positive".into());
        }
        if self.patch_size == 0 || self.image_height % self.patch_size != 0
            || self.image_width % self.patch_size != 0
        {
            return fail(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.mixture_components < 1 {
            return fail("mixture_components must be at least 1".into());
        }
        if self.depth < 1 {
            return fail("depth must be at least 1".into());
        }
        if self.noise_std < 0.0 {
            return fail("noise_std must be nonnegative".into());
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return fail("loss weights must be nonnegative".into());
        }
        if self.decoder_stages < 1 || self.decoder_stages > 5 {
            return fail(format!(
                "decoder_stages {} outside supported range 1..=5",
                self.decoder_stages
            ));
        }
        let div = 1usize << self.decoder_stages;
        if self.image_height % div != 0 || self.image_width % div != 0 {
            return fail(format!(
                "image {}x{} not reachable by {} stride-2 stages (must be divisible by {})",
                self.image_height, self.image_width, self.decoder_stages, div
            ));
        }
        let seed_area = self.seed_height() * self.seed_width();
        if self.recon_dim % seed_area != 0 {
            return fail(format!(
                "recon_dim {} not divisible by seed map area {}",
                self.recon_dim, seed_area
            ));
        }
        if self.ssim_window % 2 == 0
            || self.ssim_window > self.image_height.min(self.image_width)
        {
            return fail(format!(
                "ssim_window {} must be odd and fit the {}x{} image",
                self.ssim_window, self.image_height, self.image_width
            ));
        }
        if let Some(d) = self.mdn_reduced_dim {
            if d == 0 {
                return fail("mdn_reduced_dim must be positive when set".into());
            }
        }
        Ok(())
    }
}

/// Flattened fixed-size patches of one image, raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<E> {
    pub patches: Tensor<E>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub channels: usize,
}

/// Splits an [h, w, c] image into n = (h/p)*(w/p) flattened patches.
/// Lossless; `unpatchify` is its exact inverse.
pub fn patchify<E: Element>(image: &Tensor<E>, patch: usize) -> Result<PatchGrid<E>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            expected: "[h, w, c]".into(),
            got: format!("{:?}", s),
        });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by patch size {}",
            h, w, patch
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let src = image.data();
    let mut data = Vec::with_capacity(rows * cols * dim);
    for pr in 0..rows {
        for pc in 0..cols {
            for y in 0..patch {
                let row_base = ((pr * patch + y) * w + pc * patch) * c;
                data.extend_from_slice(&src[row_base..row_base + patch * c]);
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(vec![rows * cols, dim], data)?,
        grid_rows: rows,
        grid_cols: cols,
        patch_size: patch,
        channels: c,
    })
}

pub fn unpatchify<E: Element>(grid: &PatchGrid<E>) -> Result<Tensor<E>> {
    let p = grid.patch_size;
    let c = grid.channels;
    let (h, w) = (grid.grid_rows * p, grid.grid_cols * p);
    let src = grid.patches.data();
    let dim = p * p * c;
    let mut data = vec![E::zero(); h * w * c];
    for pr in 0..grid.grid_rows {
        for pc in 0..grid.grid_cols {
            let patch = &src[(pr * grid.grid_cols + pc) * dim..(pr * grid.grid_cols + pc + 1) * dim];
            for y in 0..p {
                let dst_base = ((pr * p + y) * w + pc * p) * c;
                data[dst_base..dst_base + p * c].copy_from_slice(&patch[y * p * c..(y + 1) * p * c]);
            }
        }
    }
    Tensor::new(vec![h, w, c], data)
}

/// [h, w, c] -> [c, h, w]
pub fn hwc_to_chw<E: Element>(image: &Tensor<E>) -> Tensor<E> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut data = vec![E::zero(); h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
            }
        }
    }
    Tensor::new(vec![c, h, w], data).unwrap()
}

/// [c, h, w] -> [h, w, c]
pub fn chw_to_hwc<E: Element>(image: &Tensor<E>) -> Tensor<E> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut data = vec![E::zero(); h * w * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[(y * w + x) * c + ch] = src[(ch * h + y) * w + x];
            }
        }
    }
    Tensor::new(vec![h, w, c], data).unwrap()
}

/// Encoder output for one image, row i holding the feature of patch
/// (i / grid_cols, i % grid_cols).
#[derive(Clone, Debug)]
pub struct EncodedPatches<E> {
    pub features: Tensor<E>,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

#[derive(Clone, Debug)]
pub struct BlockParams<E> {
    pub ln1_gamma: Tensor<E>,
    pub ln1_beta: Tensor<E>,
    pub wq: Tensor<E>,
    pub bq: Tensor<E>,
    pub wk: Tensor<E>,
    pub bk: Tensor<E>,
    pub wv: Tensor<E>,
    pub bv: Tensor<E>,
    pub wo: Tensor<E>,
    pub bo: Tensor<E>,
    pub ln2_gamma: Tensor<E>,
    pub ln2_beta: Tensor<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage<E> {
    pub kernel: Tensor<E>,
    pub bias: Tensor<E>,
    /// Affine batch-norm parameters; absent on the final stage.
    pub bn_gamma: Option<Tensor<E>>,
    pub bn_beta: Option<Tensor<E>>,
}

/// Tape handles for one block's parameters.
#[derive(Clone, Copy)]
pub struct BoundBlock {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Token embedding: patches [tiles*n x patch_dim] times the embedding
/// matrix, plus the positional table tiled per image.
pub fn embed_patches<E: Element>(
    tape: &mut Tape<E>,
    patches: Var,
    embed: Var,
    pos: Var,
    tiles: usize,
) -> Result<Var> {
    let projected = tape.matmul(patches, embed)?;
    tape.add_tile_rows(projected, pos, tiles)
}

/// Multi-headed scaled dot-product self-attention over [batch*n x d]
/// tokens. Returns the block output and each head's attention rows.
pub fn msa<E: Element>(
    tape: &mut Tape<E>,
    tokens: Var,
    block: &BoundBlock,
    heads: usize,
    batch: usize,
    n: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = *tape.shape(tokens).last().unwrap();
    if d % heads != 0 {
        return Err(Error::Config(format!(
            "token dim {} not divisible by {} heads",
            d, heads
        )));
    }
    let hd = d / heads;
    let q = tape.matmul(tokens, block.wq)?;
    let q = tape.add_row(q, block.bq)?;
    let k = tape.matmul(tokens, block.wk)?;
    let k = tape.add_row(k, block.bk)?;
    let v = tape.matmul(tokens, block.wv)?;
    let v = tape.add_row(v, block.bv)?;
    let scale = E::from_f64(1.0 / (hd as f64).sqrt());
    let mut contexts = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * hd, hd)?;
        let kh = tape.slice_cols(k, head * hd, hd)?;
        let vh = tape.slice_cols(v, head * hd, hd)?;
        let scores = tape.bmm_bt(qh, kh, batch, n, hd, n)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores)?;
        attns.push(attn);
        contexts.push(tape.bmm(attn, vh, batch, n, n, hd)?);
    }
    let merged = tape.concat_cols(&contexts)?;
    let out = tape.matmul(merged, block.wo)?;
    let out = tape.add_row(out, block.bo)?;
    Ok((out, attns))
}

/// Pre-norm residual encoder block: attention then a GELU MLP, each over a
/// layer-normalized input with the residual added back.
pub fn encoder_block<E: Element>(
    tape: &mut Tape<E>,
    tokens: Var,
    block: &BoundBlock,
    heads: usize,
    batch: usize,
    n: usize,
) -> Result<(Var, Vec<Var>)> {
    let eps = E::from_f64(LN_EPS);
    let normed = tape.layer_norm(tokens, block.ln1_gamma, block.ln1_beta, eps)?;
    let (attn_out, attns) = msa(tape, normed, block, heads, batch, n)?;
    let tokens = tape.add(tokens, attn_out)?;
    let normed = tape.layer_norm(tokens, block.ln2_gamma, block.ln2_beta, eps)?;
    let hidden = tape.matmul(normed, block.w1)?;
    let hidden = tape.add_row(hidden, block.b1)?;
    let hidden = tape.gelu(hidden);
    let mlp_out = tape.matmul(hidden, block.w2)?;
    let mlp_out = tape.add_row(mlp_out, block.b2)?;
    let tokens = tape.add(tokens, mlp_out)?;
    Ok((tokens, attns))
}

/// Batched outputs of one forward pass, still attached to the tape.
pub struct ForwardVars {
    pub recon_bchw: Var,
    pub features: Var,
    pub attention: Vec<Var>,
    pub batch: usize,
}

/// Everything a training step needs from one forward call: the outputs,
/// the gradient leaves in `named_params` order, and the bound mixture head.
pub struct ForwardPass {
    pub vars: ForwardVars,
    pub leaves: Vec<Var>,
    pub mdn: crate::mdn::BoundMdn,
}

/// Output of the single-image convenience path.
pub struct ForwardOutput<E> {
    pub reconstruction: Tensor<E>,
    pub encoded: EncodedPatches<E>,
}

pub struct Model<E> {
    config: ModelConfig,
    pub embed: Tensor<E>,
    pub pos: Tensor<E>,
    pub blocks: Vec<BlockParams<E>>,
    pub proj: Tensor<E>,
    pub decoder: Vec<DecoderStage<E>>,
    pub bn_stats: Vec<BnStats<E>>,
    pub mdn: MdnHead<E>,
}

impl<E: Element> Model<E> {
    /// Fresh model with seeded initialization. Linear and attention weights
    /// draw from a uniform range scaled by 1/sqrt(fan_in), biases start at
    /// zero, the positional table draws from N(0, 0.02).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let n = config.num_patches();
        let pdim = config.patch_dim();

        let embed = uniform_fan_in(&mut rng, vec![pdim, d], pdim);
        let pos = normal_init(&mut rng, vec![n, d], 0.02);
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            blocks.push(BlockParams {
                ln1_gamma: Tensor::filled(vec![d], E::one()),
                ln1_beta: Tensor::zeros(vec![d]),
                wq: uniform_fan_in(&mut rng, vec![d, d], d),
                bq: Tensor::zeros(vec![d]),
                wk: uniform_fan_in(&mut rng, vec![d, d], d),
                bk: Tensor::zeros(vec![d]),
                wv: uniform_fan_in(&mut rng, vec![d, d], d),
                bv: Tensor::zeros(vec![d]),
                wo: uniform_fan_in(&mut rng, vec![d, d], d),
                bo: Tensor::zeros(vec![d]),
                ln2_gamma: Tensor::filled(vec![d], E::one()),
                ln2_beta: Tensor::zeros(vec![d]),
                w1: uniform_fan_in(&mut rng, vec![d, 4 * d], d),
                b1: Tensor::zeros(vec![4 * d]),
                w2: uniform_fan_in(&mut rng, vec![4 * d, d], 4 * d),
                b2: Tensor::zeros(vec![d]),
            });
        }
        let proj = uniform_fan_in(&mut rng, vec![n * d, config.recon_dim], n * d);
        let chans = config.decoder_channels();
        let mut decoder = Vec::with_capacity(config.decoder_stages);
        let mut bn_stats = Vec::new();
        for stage in 0..config.decoder_stages {
            let (c_in, c_out) = (chans[stage], chans[stage + 1]);
            let last = stage + 1 == config.decoder_stages;
            decoder.push(DecoderStage {
                kernel: uniform_fan_in(&mut rng, vec![c_in, c_out, 4, 4], c_in * 16),
                bias: Tensor::zeros(vec![c_out]),
                bn_gamma: (!last).then(|| Tensor::filled(vec![c_out], E::one())),
                bn_beta: (!last).then(|| Tensor::zeros(vec![c_out])),
            });
            if !last {
                bn_stats.push(BnStats::new(c_out));
            }
        }
        let mdn = MdnHead::new(&config, &mut rng);
        Ok(Model {
            config,
            embed,
            pos,
            blocks,
            proj,
            decoder,
            bn_stats,
            mdn,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every learned tensor, in a fixed canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = vec![
            ("embed".into(), &self.embed),
            ("pos".into(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let pre = format!("block.{i}");
            out.push((format!("{pre}.ln1_gamma"), &b.ln1_gamma));
            out.push((format!("{pre}.ln1_beta"), &b.ln1_beta));
            out.push((format!("{pre}.wq"), &b.wq));
            out.push((format!("{pre}.bq"), &b.bq));
            out.push((format!("{pre}.wk"), &b.wk));
            out.push((format!("{pre}.bk"), &b.bk));
            out.push((format!("{pre}.wv"), &b.wv));
            out.push((format!("{pre}.bv"), &b.bv));
            out.push((format!("{pre}.wo"), &b.wo));
            out.push((format!("{pre}.bo"), &b.bo));
            out.push((format!("{pre}.ln2_gamma"), &b.ln2_gamma));
            out.push((format!("{pre}.ln2_beta"), &b.ln2_beta));
            out.push((format!("{pre}.w1"), &b.w1));
            out.push((format!("{pre}.b1"), &b.b1));
            out.push((format!("{pre}.w2"), &b.w2));
            out.push((format!("{pre}.b2"), &b.b2));
        }
        out.push(("proj".into(), &self.proj));
        for (i, s) in self.decoder.iter().enumerate() {
            let pre = format!("decoder.{i}");
            out.push((format!("{pre}.kernel"), &s.kernel));
            out.push((format!("{pre}.bias"), &s.bias));
            if let Some(g) = &s.bn_gamma {
                out.push((format!("{pre}.bn_gamma"), g));
            }
            if let Some(b) = &s.bn_beta {
                out.push((format!("{pre}.bn_beta"), b));
            }
        }
        for (name, t) in self.mdn.named_params() {
            out.push((format!("mdn.{name}"), t));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out: Vec<(String, &mut Tensor<E>)> = vec![
            ("embed".into(), &mut self.embed),
            ("pos".into(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let pre = format!("block.{i}");
            out.push((format!("{pre}.ln1_gamma"), &mut b.ln1_gamma));
            out.push((format!("{pre}.ln1_beta"), &mut b.ln1_beta));
            out.push((format!("{pre}.wq"), &mut b.wq));
            out.push((format!("{pre}.bq"), &mut b.bq));
            out.push((format!("{pre}.wk"), &mut b.wk));
            out.push((format!("{pre}.bk"), &mut b.bk));
            out.push((format!("{pre}.wv"), &mut b.wv));
            out.push((format!("{pre}.bv"), &mut b.bv));
            out.push((format!("{pre}.wo"), &mut b.wo));
            out.push((format!("{pre}.bo"), &mut b.bo));
            out.push((format!("{pre}.ln2_gamma"), &mut b.ln2_gamma));
            out.push((format!("{pre}.ln2_beta"), &mut b.ln2_beta));
            out.push((format!("{pre}.w1"), &mut b.w1));
            out.push((format!("{pre}.b1"), &mut b.b1));
            out.push((format!("{pre}.w2"), &mut b.w2));
            out.push((format!("{pre}.b2"), &mut b.b2));
        }
        out.push(("proj".into(), &mut self.proj));
        for (i, s) in self.decoder.iter_mut().enumerate() {
            let pre = format!("decoder.{i}");
            out.push((format!("{pre}.kernel"), &mut s.kernel));
            out.push((format!("{pre}.bias"), &mut s.bias));
            if let Some(g) = &mut s.bn_gamma {
                out.push((format!("{pre}.bn_gamma"), g));
            }
            if let Some(b) = &mut s.bn_beta {
                out.push((format!("{pre}.bn_beta"), b));
            }
        }
        for (name, t) in self.mdn.named_params_mut() {
            out.push((format!("mdn.{name}"), t));
        }
        out
    }

    /// Batch-norm running statistics as named tensors (for persistence).
    pub fn bn_state_tensors(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        for (i, s) in self.bn_stats.iter().enumerate() {
            out.push((
                format!("decoder.{i}.running_mean"),
                Tensor::new(vec![s.mean.len()], s.mean.clone()).unwrap(),
            ));
            out.push((
                format!("decoder.{i}.running_var"),
                Tensor::new(vec![s.var.len()], s.var.clone()).unwrap(),
            ));
        }
        out
    }

    pub fn set_bn_state(&mut self, index: usize, mean: Vec<E>, var: Vec<E>) {
        self.bn_stats[index] = BnStats { mean, var };
    }

    /// Stacks per-image patch matrices into one [batch*n x patch_dim]
    /// constant on the tape.
    fn patch_constant(&self, tape: &mut Tape<E>, images: &[&Tensor<E>]) -> Result<Var> {
        let n = self.config.num_patches();
        let pdim = self.config.patch_dim();
        let mut data = Vec::with_capacity(images.len() * n * pdim);
        for image in images {
            let expect = [
                self.config.image_height,
                self.config.image_width,
                self.config.channels,
            ];
            if image.shape() != expect {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    expected: format!("{:?}", expect),
                    got: format!("{:?}", image.shape()),
                });
            }
            let grid = patchify(image, self.config.patch_size)?;
            data.extend_from_slice(grid.patches.data());
        }
        Ok(tape.constant(Tensor::new(vec![images.len() * n, pdim], data)?))
    }

    fn bind_block(tape: &mut Tape<E>, b: &BlockParams<E>, grad: bool) -> BoundBlock {
        BoundBlock {
            ln1_gamma: tape.leaf(b.ln1_gamma.clone(), grad),
            ln1_beta: tape.leaf(b.ln1_beta.clone(), grad),
            wq: tape.leaf(b.wq.clone(), grad),
            bq: tape.leaf(b.bq.clone(), grad),
            wk: tape.leaf(b.wk.clone(), grad),
            bk: tape.leaf(b.bk.clone(), grad),
            wv: tape.leaf(b.wv.clone(), grad),
            bv: tape.leaf(b.bv.clone(), grad),
            wo: tape.leaf(b.wo.clone(), grad),
            bo: tape.leaf(b.bo.clone(), grad),
            ln2_gamma: tape.leaf(b.ln2_gamma.clone(), grad),
            ln2_beta: tape.leaf(b.ln2_beta.clone(), grad),
            w1: tape.leaf(b.w1.clone(), grad),
            b1: tape.leaf(b.b1.clone(), grad),
            w2: tape.leaf(b.w2.clone(), grad),
            b2: tape.leaf(b.b2.clone(), grad),
        }
    }

    /// Forward pass over a mini-batch, recording on `tape`. When `train` is
    /// true, parameters are registered as gradient leaves (in
    /// `named_params` order) and batch norm uses batch statistics.
    pub fn forward_batch(
        &mut self,
        tape: &mut Tape<E>,
        images: &[&Tensor<E>],
        train: bool,
    ) -> Result<ForwardPass> {
        let cfg = self.config.clone();
        let batch = images.len();
        if batch == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let n = cfg.num_patches();
        let patches = self.patch_constant(tape, images)?;

        let mut leaves = Vec::new();
        let embed = tape.leaf(self.embed.clone(), train);
        let pos = tape.leaf(self.pos.clone(), train);
        leaves.push(embed);
        leaves.push(pos);
        let bound_blocks: Vec<BoundBlock> = self
            .blocks
            .iter()
            .map(|b| Self::bind_block(tape, b, train))
            .collect();
        for bb in &bound_blocks {
            leaves.extend_from_slice(&[
                bb.ln1_gamma, bb.ln1_beta, bb.wq, bb.bq, bb.wk, bb.bk, bb.wv, bb.bv, bb.wo,
                bb.bo, bb.ln2_gamma, bb.ln2_beta, bb.w1, bb.b1, bb.w2, bb.b2,
            ]);
        }
        let proj = tape.leaf(self.proj.clone(), train);
        leaves.push(proj);
        let mut dec_vars = Vec::new();
        for stage in &self.decoder {
            let kv = tape.leaf(stage.kernel.clone(), train);
            let bv = tape.leaf(stage.bias.clone(), train);
            leaves.push(kv);
            leaves.push(bv);
            let gv = stage.bn_gamma.as_ref().map(|g| tape.leaf(g.clone(), train));
            let bbv = stage.bn_beta.as_ref().map(|b| tape.leaf(b.clone(), train));
            if let Some(g) = gv {
                leaves.push(g);
            }
            if let Some(b) = bbv {
                leaves.push(b);
            }
            dec_vars.push((kv, bv, gv, bbv));
        }
        let mdn_vars = self.mdn.bind(tape, train);
        leaves.extend(mdn_vars.leaves());

        // encoder
        let mut tokens = embed_patches(tape, patches, embed, pos, batch)?;
        let mut attention = Vec::new();
        for bb in &bound_blocks {
            let (next, attns) = encoder_block(tape, tokens, bb, cfg.num_heads, batch, n)?;
            tokens = next;
            attention.extend(attns);
        }
        let features = tokens;

        // reconstruction vector and decoder
        let flat = tape.reshape(features, vec![batch, n * cfg.embed_dim])?;
        let recon_vec = tape.matmul(flat, proj)?;
        let mut x = tape.reshape(
            recon_vec,
            vec![batch, cfg.seed_channels(), cfg.seed_height(), cfg.seed_width()],
        )?;
        let momentum = E::from_f64(BN_MOMENTUM);
        let bn_eps = E::from_f64(BN_EPS);
        for (i, (kv, bv, gv, bbv)) in dec_vars.iter().enumerate() {
            x = tape.conv_transpose2d(x, *kv, 2, 1)?;
            x = tape.channel_bias(x, *bv)?;
            if let (Some(g), Some(b)) = (gv, bbv) {
                x = tape.batch_norm2d(x, *g, *b, &mut self.bn_stats[i], momentum, bn_eps, train)?;
                x = tape.relu(x);
            } else {
                x = tape.tanh(x);
            }
        }

        Ok(ForwardPass {
            vars: ForwardVars {
                recon_bchw: x,
                features,
                attention,
                batch,
            },
            leaves,
            mdn: mdn_vars,
        })
    }

    /// Evaluation-mode forward for one image.
    pub fn forward(&self, image: &Tensor<E>) -> Result<ForwardOutput<E>> {
        let mut clone = self.clone_for_eval();
        let mut tape = Tape::new();
        let pass = clone.forward_batch(&mut tape, &[image], false)?;
        let vars = pass.vars;
        let recon_chw = tape
            .value(vars.recon_bchw)
            .reshaped(vec![
                self.config.channels,
                self.config.image_height,
                self.config.image_width,
            ])?;
        Ok(ForwardOutput {
            reconstruction: chw_to_hwc(&recon_chw),
            encoded: EncodedPatches {
                features: tape.value(vars.features).reshaped(vec![
                    self.config.num_patches(),
                    self.config.embed_dim,
                ])?,
                grid_rows: self.config.grid_rows(),
                grid_cols: self.config.grid_cols(),
            },
        })
    }

    /// Cheap structural clone used by read-only evaluation paths.
    fn clone_for_eval(&self) -> Model<E> {
        Model {
            config: self.config.clone(),
            embed: self.embed.clone(),
            pos: self.pos.clone(),
            blocks: self.blocks.clone(),
            proj: self.proj.clone(),
            decoder: self.decoder.clone(),
            bn_stats: self.bn_stats.clone(),
            mdn: self.mdn.clone(),
        }
    }
}

impl<E: Element> Clone for Model<E> {
    fn clone(&self) -> Self {
        self.clone_for_eval()
    }
}

fn uniform_fan_in<E: Element>(
    rng: &mut ChaCha8Rng,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        E::from_f64(rng.gen_range(-bound..bound))
    })
}

fn normal_init<E: Element>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<E> {
    let dist = Normal::new(0.0, std).unwrap();
    Tensor::from_fn(shape, |_| E::from_f64(dist.sample(rng)))
}
