//! Toy-scale X-ViT: convolutional stem, encoder blocks (XNorm attention, local
//! patch interaction, MLP, each preceded by a per-channel affine and wrapped in
//! a residual), class-attention blocks and a linear classifier.

pub mod checkpoint;
pub mod count;
pub mod forward;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{check_heads, AttentionParams, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::params::{join, ParamTree};
use crate::tensor::{Element, Tensor};

pub use checkpoint::{
    checkpoint_info, load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use count::{count_flops, count_params, FlopBreakdown};
pub use forward::{block_forward, class_block_forward, class_stage_forward, model_forward, stem_forward};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Pixels per side of the square input image.
    pub image_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub class_depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Total downsampling of the stem; a power of two, one stride-2 conv per factor of two.
    pub patch_stride: usize,
    pub pos_embed: bool,
    pub eps: f64,
}

pub const CONFIG_NAMES: &[&str] = &["nano", "micro"];

impl ModelConfig {
    /// `C=64, heads=4, depth=4` on 1×32×32 inputs, 16 tokens, 4 classes.
    pub fn nano() -> Self {
        ModelConfig {
            image_size: 32,
            in_channels: 1,
            embed_dim: 64,
            heads: 4,
            depth: 4,
            class_depth: 2,
            mlp_ratio: 2,
            num_classes: 4,
            patch_stride: 8,
            pos_embed: true,
            eps: DEFAULT_EPS,
        }
    }

    /// `C=128, heads=4, depth=6`.
    pub fn micro() -> Self {
        ModelConfig {
            embed_dim: 128,
            depth: 6,
            mlp_ratio: 4,
            ..Self::nano()
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "nano" => Ok(Self::nano()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!(
                "unknown config {other:?}; expected one of {CONFIG_NAMES:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_heads(self.embed_dim, self.heads)?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_stride < 2 || !self.patch_stride.is_power_of_two() {
            return bad(format!("patch_stride {} must be a power of two ≥ 2", self.patch_stride));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_stride) {
            return bad(format!(
                "image_size {} is not divisible by patch_stride {}",
                self.image_size, self.patch_stride
            ));
        }
        let first = self.embed_dim >> (self.stem_layers() - 1);
        if first == 0 || first << (self.stem_layers() - 1) != self.embed_dim {
            return bad(format!(
                "embed_dim {} cannot be halved {} times for the stem",
                self.embed_dim,
                self.stem_layers() - 1
            ));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("in_channels, num_classes and mlp_ratio must be positive".into());
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    pub fn stem_layers(&self) -> usize {
        self.patch_stride.trailing_zeros() as usize
    }

    /// `(in, out)` channels of each stem conv; channels double up to `embed_dim`.
    pub fn stem_channels(&self) -> Vec<(usize, usize)> {
        let layers = self.stem_layers();
        (0..layers)
            .map(|i| {
                let cin = if i == 0 { self.in_channels } else { self.embed_dim >> (layers - i) };
                (cin, self.embed_dim >> (layers - 1 - i))
            })
            .collect()
    }

    /// Token grid `(rows, cols)` for a square image of `image_size` pixels.
    pub fn grid(&self, image_size: usize) -> Result<(usize, usize)> {
        if image_size == 0 || !image_size.is_multiple_of(self.patch_stride) {
            return Err(Error::Shape(format!(
                "image size {image_size} is not divisible by patch_stride {}",
                self.patch_stride
            )));
        }
        let side = image_size / self.patch_stride;
        Ok((side, side))
    }

    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_stride;
        side * side
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine<P> {
    pub scale: P,
    pub shift: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}

/// Local patch interaction: depthwise 3×3, GELU, depthwise 3×3.
#[derive(Debug, Clone, PartialEq)]
pub struct Lpi<P> {
    pub conv1: Conv<P>,
    pub conv2: Conv<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<P> {
    pub w1: P,
    pub b1: P,
    pub w2: P,
    pub b2: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<P = Tensor<f64>> {
    pub aff_attn: Affine<P>,
    pub attn: AttentionParams<P>,
    pub aff_lpi: Affine<P>,
    pub lpi: Lpi<P>,
    pub aff_mlp: Affine<P>,
    pub mlp: Mlp<P>,
}

/// Class-attention block: only the class token is updated, so there is no
/// token-grid interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassBlockParams<P = Tensor<f64>> {
    pub aff_attn: Affine<P>,
    pub attn: AttentionParams<P>,
    pub aff_mlp: Affine<P>,
    pub mlp: Mlp<P>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P = Tensor<f64>> {
    pub stem: Vec<Conv<P>>,
    pub pos_embed: Option<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub cls_token: P,
    pub class_blocks: Vec<ClassBlockParams<P>>,
    pub final_affine: Affine<P>,
    pub head_w: P,
    pub head_b: P,
}

macro_rules! leaf_tree {
    ($ty:ident { $($field:ident),+ }) => {
        impl<P> ParamTree<P> for $ty<P> {
            type With<Q> = $ty<Q>;

            fn map_leaves<'s, Q>(&'s self, path: &str, f: &mut dyn FnMut(&str, &'s P) -> Q) -> $ty<Q> {
                $ty { $($field: f(&join(path, stringify!($field)), &self.$field)),+ }
            }

            fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P)) {
                $(f(&join(path, stringify!($field)), &mut self.$field);)+
            }
        }
    };
}

macro_rules! node_tree {
    ($ty:ident { $($field:ident),+ }) => {
        impl<P> ParamTree<P> for $ty<P> {
            type With<Q> = $ty<Q>;

            fn map_leaves<'s, Q>(&'s self, path: &str, f: &mut dyn FnMut(&str, &'s P) -> Q) -> $ty<Q> {
                $ty { $($field: self.$field.map_leaves(&join(path, stringify!($field)), f)),+ }
            }

            fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P)) {
                $(self.$field.visit_mut(&join(path, stringify!($field)), f);)+
            }
        }
    };
}

leaf_tree!(Affine { scale, shift });
leaf_tree!(Conv { weight, bias });
leaf_tree!(Mlp { w1, b1, w2, b2 });
node_tree!(Lpi { conv1, conv2 });
node_tree!(BlockParams { aff_attn, attn, aff_lpi, lpi, aff_mlp, mlp });
node_tree!(ClassBlockParams { aff_attn, attn, aff_mlp, mlp });

impl<P> ParamTree<P> for ModelParams<P> {
    type With<Q> = ModelParams<Q>;

    fn map_leaves<'s, Q>(&'s self, path: &str, f: &mut dyn FnMut(&str, &'s P) -> Q) -> ModelParams<Q> {
        let sub = |name: &str, i: usize| join(&join(path, name), &i.to_string());
        ModelParams {
            stem: self
                .stem
                .iter()
                .enumerate()
                .map(|(i, c)| c.map_leaves(&sub("stem", i), f))
                .collect(),
            pos_embed: self.pos_embed.as_ref().map(|p| f(&join(path, "pos_embed"), p)),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_leaves(&sub("blocks", i), f))
                .collect(),
            cls_token: f(&join(path, "cls_token"), &self.cls_token),
            class_blocks: self
                .class_blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map_leaves(&sub("class_blocks", i), f))
                .collect(),
            final_affine: self.final_affine.map_leaves(&join(path, "final_affine"), f),
            head_w: f(&join(path, "head_w"), &self.head_w),
            head_b: f(&join(path, "head_b"), &self.head_b),
        }
    }

    fn visit_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P)) {
        let sub = |name: &str, i: usize| join(&join(path, name), &i.to_string());
        for (i, c) in self.stem.iter_mut().enumerate() {
            c.visit_mut(&sub("stem", i), f);
        }
        if let Some(p) = self.pos_embed.as_mut() {
            f(&join(path, "pos_embed"), p);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&sub("blocks", i), f);
        }
        f(&join(path, "cls_token"), &mut self.cls_token);
        for (i, b) in self.class_blocks.iter_mut().enumerate() {
            b.visit_mut(&sub("class_blocks", i), f);
        }
        self.final_affine.visit_mut(&join(path, "final_affine"), f);
        f(&join(path, "head_w"), &mut self.head_w);
        f(&join(path, "head_b"), &mut self.head_b);
    }
}

impl<T: Element> Affine<Tensor<T>> {
    pub fn identity(dim: usize) -> Self {
        Affine {
            scale: Tensor::full([dim], T::one()),
            shift: Tensor::zeros([dim]),
        }
    }
}

impl<T: Element> Mlp<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let b1 = 1.0 / (dim as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Mlp {
            w1: Tensor::uniform([dim, hidden], -b1, b1, rng),
            b1: Tensor::zeros([hidden]),
            w2: Tensor::uniform([hidden, dim], -b2, b2, rng),
            b2: Tensor::zeros([dim]),
        }
    }
}

impl<T: Element> Lpi<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / 3.0;
        let mut conv = || Conv {
            weight: Tensor::uniform([dim, 3, 3], -bound, bound, rng),
            bias: Tensor::zeros([dim]),
        };
        Lpi {
            conv1: conv(),
            conv2: conv(),
        }
    }
}

impl<T: Element> BlockParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.embed_dim;
        Ok(BlockParams {
            aff_attn: Affine::identity(c),
            attn: AttentionParams::init(c, cfg.heads, cfg.eps, rng)?,
            aff_lpi: Affine::identity(c),
            lpi: Lpi::init(c, rng),
            aff_mlp: Affine::identity(c),
            mlp: Mlp::init(c, cfg.hidden_dim(), rng),
        })
    }
}

impl<T: Element> ClassBlockParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.embed_dim;
        Ok(ClassBlockParams {
            aff_attn: Affine::identity(c),
            attn: AttentionParams::init(c, cfg.heads, cfg.eps, rng)?,
            aff_mlp: Affine::identity(c),
            mlp: Mlp::init(c, cfg.hidden_dim(), rng),
        })
    }
}

impl<T: Element> ModelParams<Tensor<T>> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let stem = cfg
            .stem_channels()
            .into_iter()
            .map(|(cin, cout)| {
                // He-uniform: keeps token magnitudes near 1 through the GELU stack.
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                Conv {
                    weight: Tensor::uniform([cout, cin, 3, 3], -bound, bound, rng),
                    bias: Tensor::zeros([cout]),
                }
            })
            .collect();
        let pos_embed = cfg
            .pos_embed
            .then(|| Tensor::uniform([cfg.tokens(), c], -0.02, 0.02, rng));
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams::init(cfg, rng))
            .collect::<Result<_>>()?;
        let cls_token = Tensor::uniform([1, c], -0.02, 0.02, rng);
        let class_blocks = (0..cfg.class_depth)
            .map(|_| ClassBlockParams::init(cfg, rng))
            .collect::<Result<_>>()?;
        let bound = 1.0 / (c as f64).sqrt();
        Ok(ModelParams {
            stem,
            pos_embed,
            blocks,
            cls_token,
            class_blocks,
            final_affine: Affine::identity(c),
            head_w: Tensor::uniform([c, cfg.num_classes], -bound, bound, rng),
            head_b: Tensor::zeros([cfg.num_classes]),
        })
    }

    /// Zero tensors with the same structure, e.g. for gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        self.map_leaves("", &mut |_, t| Tensor::zeros(t.shape().to_vec()))
    }

    /// Checks every tensor shape against `cfg`, naming the first offender.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference: ModelParams<Vec<usize>> = shapes_for(cfg)?;
        let expected = reference.named();
        let actual = self.named();
        if expected.len() != actual.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, shape), (_, t)) in expected.iter().zip(&actual) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Parameter shapes implied by a config, in canonical order.
pub fn shapes_for(cfg: &ModelConfig) -> Result<ModelParams<Vec<usize>>> {
    cfg.validate()?;
    let c = cfg.embed_dim;
    let hd = cfg.hidden_dim();
    let affine = || Affine { scale: vec![c], shift: vec![c] };
    let attn = || AttentionParams {
        w_q: vec![c, c],
        w_k: vec![c, c],
        w_v: vec![c, c],
        w_o: vec![c, c],
        gamma_q: vec![cfg.heads],
        gamma_c: vec![cfg.heads],
        heads: cfg.heads,
        eps: cfg.eps,
    };
    let mlp = || Mlp {
        w1: vec![c, hd],
        b1: vec![hd],
        w2: vec![hd, c],
        b2: vec![c],
    };
    let dw = || Conv { weight: vec![c, 3, 3], bias: vec![c] };
    Ok(ModelParams {
        stem: cfg
            .stem_channels()
            .into_iter()
            .map(|(cin, cout)| Conv {
                weight: vec![cout, cin, 3, 3],
                bias: vec![cout],
            })
            .collect(),
        pos_embed: cfg.pos_embed.then(|| vec![cfg.tokens(), c]),
        blocks: (0..cfg.depth)
            .map(|_| BlockParams {
                aff_attn: affine(),
                attn: attn(),
                aff_lpi: affine(),
                lpi: Lpi { conv1: dw(), conv2: dw() },
                aff_mlp: affine(),
                mlp: mlp(),
            })
            .collect(),
        cls_token: vec![1, c],
        class_blocks: (0..cfg.class_depth)
            .map(|_| ClassBlockParams {
                aff_attn: affine(),
                attn: attn(),
                aff_mlp: affine(),
                mlp: mlp(),
            })
            .collect(),
        final_affine: affine(),
        head_w: vec![c, cfg.num_classes],
        head_b: vec![cfg.num_classes],
    })
}
