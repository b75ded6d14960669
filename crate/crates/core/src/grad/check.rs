//! Model gradients and their finite-difference check.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::backward::cross_entropy;
use super::tape::Tape;
use super::train::{quadrant_dataset, QuadrantSpec};
use crate::error::{Error, Result};
use crate::model::forward::{bind, block_forward, class_block_forward, model_on_tape, stem_forward};
use crate::model::{ModelConfig, ModelParams};
use crate::params::ParamTree;
use crate::tensor::ops::{add_row_bias, affine};
use crate::tensor::{matmul, Element, Tensor};

fn check_batch<T: Element>(images: &[Tensor<T>], labels: &[usize]) -> Result<()> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Data(format!(
            "batch needs matching non-empty images and labels, got {} and {}",
            images.len(),
            labels.len()
        )));
    }
    Ok(())
}

fn sample_loss<T: Element>(mp: &ModelParams<Tensor<T>>, cfg: &ModelConfig, img: &Tensor<T>, label: usize) -> Result<T> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, mp);
    let x = tape.leaf(img.clone());
    let logits = model_on_tape(&mut tape, x, &vars, cfg)?;
    let loss = tape.cross_entropy(logits, label)?;
    Ok(tape.value(loss).data()[0])
}

/// Mean cross-entropy over a batch, forward only.
pub fn batch_loss<T: Element>(
    mp: &ModelParams<Tensor<T>>,
    cfg: &ModelConfig,
    images: &[Tensor<T>],
    labels: &[usize],
) -> Result<T> {
    check_batch(images, labels)?;
    let mut total = T::zero();
    for (img, &label) in images.iter().zip(labels) {
        total += sample_loss(mp, cfg, img, label)?;
    }
    Ok(total / T::lit(images.len() as f64))
}

fn sample_grad<T: Element>(
    mp: &ModelParams<Tensor<T>>,
    cfg: &ModelConfig,
    img: &Tensor<T>,
    label: usize,
) -> Result<(T, ModelParams<Tensor<T>>)> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, mp);
    let x = tape.leaf(img.clone());
    let logits = model_on_tape(&mut tape, x, &vars, cfg)?;
    let loss = tape.cross_entropy(logits, label)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let order = vars.leaves();
    let mut i = 0;
    let g = mp.map_leaves("", &mut |_, t| {
        let g = grads.take_or_zeros(*order[i], t);
        i += 1;
        g
    });
    Ok((value, g))
}

/// Mean cross-entropy over a batch and its gradient for every parameter.
///
/// Each sample runs on its own tape; per-sample gradients are summed in batch
/// order, so the result does not depend on thread scheduling.
pub fn grad_model<T: Element>(
    mp: &ModelParams<Tensor<T>>,
    cfg: &ModelConfig,
    images: &[Tensor<T>],
    labels: &[usize],
) -> Result<(T, ModelParams<Tensor<T>>)> {
    check_batch(images, labels)?;
    let per_sample: Vec<_> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(img, &label)| sample_grad(mp, cfg, img, label))
        .collect::<Result<_>>()?;
    let inv = T::one() / T::lit(images.len() as f64);
    let mut iter = per_sample.into_iter();
    let (mut loss, mut acc) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        let src = g.leaves();
        let mut i = 0;
        let mut status = Ok(());
        acc.visit_mut("", &mut |_, t| {
            if status.is_ok() {
                status = t.add_assign(src[i]);
            }
            i += 1;
        });
        status?;
    }
    acc.visit_mut("", &mut |_, t| {
        for x in t.data_mut() {
            *x *= inv;
        }
    });
    Ok((loss * inv, acc))
}

/// Replaces analytic gradients before comparison; used to confirm the checker
/// catches a broken backward pass.
pub type Tamper = fn(&str, &mut Tensor<f64>);

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Central-difference steps; each scalar reports its best step.
    pub steps: Vec<f64>,
    /// Scalars checked per tensor; smaller tensors are checked exhaustively.
    pub max_samples: usize,
    pub batch: usize,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding are compared absolutely.
    pub floor: f64,
    pub tamper: Option<Tamper>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-5,
            steps: vec![1e-4, 1e-5, 1e-6],
            max_samples: 200,
            batch: 1,
            floor: 1e-6,
            tamper: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Step at which the worst scalar reached its error.
    pub step: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub steps: Vec<f64>,
    pub floor: f64,
    pub loss: f64,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub pass: bool,
    pub params: Vec<ParamCheck>,
}

pub fn gradcheck(cfg: &ModelConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    gradcheck_with(cfg, seed, &GradCheckOptions { tolerance, ..Default::default() })
}

/// Compares tape gradients of the mean batch loss against central
/// differences for a seeded model and batch of quadrant images.
pub fn gradcheck_with(cfg: &ModelConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if opts.steps.is_empty() || opts.steps.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::Config(format!("steps must be positive, got {:?}", opts.steps)));
    }
    if opts.max_samples == 0 || opts.batch == 0 {
        return Err(Error::Config("max_samples and batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mp: ModelParams<Tensor<f64>> = ModelParams::init(cfg, &mut rng)?;
    let data = quadrant_dataset::<f64>(cfg, &QuadrantSpec { samples: opts.batch, seed })?;
    let (loss, mut grads) = grad_model(&mp, cfg, &data.images, &data.labels)?;
    if let Some(tamper) = opts.tamper {
        grads.visit_mut("", &mut |name, t| tamper(name, t));
    }

    // (tensor, flat index) of every scalar to perturb.
    let named = mp.named();
    let mut targets = Vec::new();
    for (ti, (_, t)) in named.iter().enumerate() {
        let n = t.numel();
        let mut idx: Vec<usize> = if n <= opts.max_samples {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_samples).into_vec()
        };
        idx.sort_unstable();
        targets.extend(idx.into_iter().map(|i| (ti, i)));
    }

    let stages: Vec<Stage> = named.iter().map(|(name, _)| Stage::of(name)).collect();
    let cache: Vec<Activations> = data
        .images
        .iter()
        .map(|img| Activations::record(img, &mp, cfg))
        .collect::<Result<_>>()?;
    let eval = |p: &ModelParams<Tensor<f64>>, stage: Stage| -> Result<f64> {
        let mut total = 0.0;
        for ((img, &label), act) in data.images.iter().zip(&data.labels).zip(&cache) {
            total += act.loss_from(stage, img, label, p, cfg)?;
        }
        Ok(total / data.len() as f64)
    };
    let grad_leaves = grads.leaves();
    // Per scalar: (relative error, step, analytic, numeric).
    let results: Vec<(f64, f64, f64, f64)> = targets
        .par_iter()
        .map_init(
            || mp.clone(),
            |p, &(ti, i)| {
                let analytic = grad_leaves[ti].data()[i];
                let original = named[ti].1.data()[i];
                let mut shifted = |delta: f64| -> Result<f64> {
                    set_scalar(p, ti, i, original + delta);
                    let loss = eval(p, stages[ti]);
                    set_scalar(p, ti, i, original);
                    loss
                };
                let mut best = (f64::INFINITY, opts.steps[0], analytic, 0.0);
                for &h in &opts.steps {
                    let numeric = (shifted(h)? - shifted(-h)?) / (2.0 * h);
                    let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
                    let err = (analytic - numeric).abs() / denom;
                    if err < best.0 {
                        best = (err, h, analytic, numeric);
                    }
                }
                Ok(best)
            },
        )
        .collect::<Result<_>>()?;

    let mut params: Vec<ParamCheck> = named
        .iter()
        .map(|(name, t)| ParamCheck {
            name: name.clone(),
            numel: t.numel(),
            checked: 0,
            max_rel_err: 0.0,
            step: opts.steps[0],
            analytic_norm: 0.0,
            numeric_norm: 0.0,
        })
        .collect();
    for (&(ti, _), &(err, h, a, n)) in targets.iter().zip(&results) {
        let p = &mut params[ti];
        p.checked += 1;
        p.analytic_norm += a * a;
        p.numeric_norm += n * n;
        if p.checked == 1 || err > p.max_rel_err {
            p.max_rel_err = err;
            p.step = h;
        }
    }
    for p in &mut params {
        p.analytic_norm = p.analytic_norm.sqrt();
        p.numeric_norm = p.numeric_norm.sqrt();
    }
    let worst = params
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("model has parameters");
    let max_rel_err = worst.max_rel_err;
    Ok(GradCheckReport {
        seed,
        tolerance: opts.tolerance,
        steps: opts.steps.clone(),
        floor: opts.floor,
        loss,
        max_rel_err,
        worst_param: worst.name.clone(),
        pass: max_rel_err <= opts.tolerance,
        params,
    })
}

fn set_scalar(p: &mut ModelParams<Tensor<f64>>, tensor: usize, index: usize, value: f64) {
    let mut k = 0;
    p.visit_mut("", &mut |_, t| {
        if k == tensor {
            t.data_mut()[index] = value;
        }
        k += 1;
    });
}

/// The first part of the forward pass a parameter influences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Stem,
    Block(usize),
    ClassBlock(usize),
    Head,
}

impl Stage {
    fn of(name: &str) -> Stage {
        let index = |prefix: &str| -> Option<usize> { name.strip_prefix(prefix)?.split('.').next()?.parse().ok() };
        if let Some(b) = index("blocks.") {
            Stage::Block(b)
        } else if let Some(j) = index("class_blocks.") {
            Stage::ClassBlock(j)
        } else if name == "cls_token" {
            Stage::ClassBlock(0)
        } else if name.starts_with("final_affine") || name.starts_with("head_") {
            Stage::Head
        } else {
            Stage::Stem
        }
    }
}

/// Unperturbed activations at each stage boundary for one image, so a
/// perturbed parameter only reruns the forward pass from its own stage on.
struct Activations {
    /// Input of each encoder block; the last entry is the encoder output.
    tokens: Vec<Tensor<f64>>,
    /// Class token entering each class block; the last entry leaves the final one.
    cls: Vec<Tensor<f64>>,
}

impl Activations {
    fn record(img: &Tensor<f64>, mp: &ModelParams<Tensor<f64>>, cfg: &ModelConfig) -> Result<Self> {
        let grid = cfg.grid(img.shape()[1])?;
        let mut tokens = vec![stem_forward(img, mp, cfg)?];
        for bp in &mp.blocks {
            let next = block_forward(tokens.last().expect("non-empty"), bp, grid)?;
            tokens.push(next);
        }
        let patches = tokens.last().expect("non-empty");
        let mut cls = vec![mp.cls_token.clone()];
        for bp in &mp.class_blocks {
            let next = class_block_forward(cls.last().expect("non-empty"), patches, bp)?;
            cls.push(next);
        }
        Ok(Activations { tokens, cls })
    }

    fn loss_from(
        &self,
        stage: Stage,
        img: &Tensor<f64>,
        label: usize,
        p: &ModelParams<Tensor<f64>>,
        cfg: &ModelConfig,
    ) -> Result<f64> {
        let grid = cfg.grid(img.shape()[1])?;
        let first_block = match stage {
            Stage::Stem => Some((0, stem_forward(img, p, cfg)?)),
            Stage::Block(b) => Some((b, self.tokens[b].clone())),
            _ => None,
        };
        let encoded;
        let patches = match first_block {
            Some((b, mut x)) => {
                for bp in &p.blocks[b..] {
                    x = block_forward(&x, bp, grid)?;
                }
                encoded = x;
                &encoded
            }
            None => self.tokens.last().expect("non-empty"),
        };
        let cls = match stage {
            Stage::Head => self.cls.last().expect("non-empty").clone(),
            Stage::ClassBlock(j) => {
                let mut cls = if j == 0 { p.cls_token.clone() } else { self.cls[j].clone() };
                for bp in &p.class_blocks[j..] {
                    cls = class_block_forward(&cls, patches, bp)?;
                }
                cls
            }
            _ => {
                let mut cls = p.cls_token.clone();
                for bp in &p.class_blocks {
                    cls = class_block_forward(&cls, patches, bp)?;
                }
                cls
            }
        };
        let cls = affine(&cls, &p.final_affine.scale, &p.final_affine.shift)?;
        let logits = add_row_bias(&matmul(&cls, &p.head_w)?, &p.head_b)?;
        Ok(cross_entropy(logits.data(), label)?.0)
    }
}
