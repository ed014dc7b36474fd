//! Catalogue of every differentiable operation with a random-input generator, for
//! gradient verification against central differences.

use super::{concat_cols, concat_rows, finite_diff_check, Graph, ParamStore, Rng, Tensor, Var, MASKED};
use crate::error::Result;
use crate::selector::{assign_parts, shaping_losses, stage1_classify, LossWeights};
use crate::vit::{AttentionMask, ModelConfig, Vit};

/// Step of the central differences.
pub const STEP: f64 = 1e-5;

type Check = fn(&mut Rng) -> Result<f64>;

/// One differentiable operation and a randomized check of its gradient.
#[derive(Clone, Copy)]
pub struct OpCheck {
    pub name: &'static str,
    check: Check,
}

impl OpCheck {
    /// Draws a random input and returns the finite-difference error of the op's gradient.
    pub fn run(&self, rng: &mut Rng) -> Result<f64> {
        (self.check)(rng)
    }
}

impl std::fmt::Debug for OpCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

/// Contracts `y` with fixed pseudo-random weights so every output coordinate matters.
fn probe<'g>(y: Var<'g>) -> Result<Var<'g>> {
    let w = Tensor::from_fn(&y.shape(), |i| (i as f64 * 0.731 + 0.2).sin() + 0.1);
    Ok(y.mul_const(&w)?.sum())
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normal_tensor(shape, 1.0)
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| 0.2 + rng.uniform() * 2.0)
}

/// `{0, MASKED}` mask with at least one live entry per row.
fn random_mask(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let mut m = Tensor::from_fn(&[rows, cols], |_| if rng.bernoulli(0.4) { MASKED } else { 0.0 });
    for r in 0..rows {
        let keep = rng.below(cols);
        m.data_mut()[r * cols + keep] = 0.0;
    }
    m
}

macro_rules! unary {
    ($rng:ident, $x:expr, |$g:ident, $v:ident| $body:expr) => {{
        let x = $x;
        finite_diff_check(|$g: &Graph, $v: Var<'_>| probe($body), &x, STEP)
    }};
}

fn tiny_vit(rng: &mut Rng) -> Result<(Vit, ParamStore)> {
    let cfg = ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        n_heads: 2,
        n_layers: 1,
        mlp_ratio: 2,
        n_registers: 1,
        n_classes: 2,
        n_parts: 2,
    };
    let mut store = ParamStore::new();
    let vit = Vit::new("v", &cfg, &mut store, rng)?;
    Ok((vit, store))
}

/// Every differentiable operation of the tape, plus the composite blocks built from them.
pub fn op_catalogue() -> Vec<OpCheck> {
    macro_rules! op {
        ($name:literal, $f:expr) => {
            OpCheck { name: $name, check: $f }
        };
    }
    vec![
        op!("add", |r| {
            let c = randn(r, &[3, 4]);
            unary!(r, randn(r, &[3, 4]), |g, x| x.add(g.constant(c.clone()))?)
        }),
        op!("sub", |r| {
            let c = randn(r, &[3, 4]);
            unary!(r, randn(r, &[3, 4]), |g, x| g.constant(c.clone()).sub(x)?)
        }),
        op!("mul", |r| {
            let c = randn(r, &[3, 4]);
            unary!(r, randn(r, &[3, 4]), |g, x| x.mul(g.constant(c.clone()))?.mul(x)?)
        }),
        op!("add_row", |r| {
            let m = randn(r, &[3, 4]);
            unary!(r, randn(r, &[4]), |g, x| g.constant(m.clone()).add_row(x)?.square())
        }),
        op!("mul_row", |r| {
            let m = randn(r, &[3, 4]);
            unary!(r, randn(r, &[3, 4]), |g, x| x.mul_row(x.sum_rows())?.add(g.constant(m.clone()))?)
        }),
        op!("mul_col", |r| {
            let m = randn(r, &[3, 4]);
            unary!(r, randn(r, &[3]), |g, x| g.constant(m.clone()).mul_col(x)?.mul_col(x)?)
        }),
        op!("div_col", |r| {
            let d = positive(r, &[3]);
            unary!(r, randn(r, &[3, 4]), |g, x| x.div_col(g.constant(d.clone()).add(x.sum_cols().square())?)?)
        }),
        op!("div_scalar", |r| unary!(r, positive(r, &[3, 2]), |_g, x| x.div_scalar(x.sum())?)),
        op!("affine", |r| unary!(r, randn(r, &[5]), |_g, x| x.affine(-1.7, 0.3).square())),
        op!("scale", |r| unary!(r, randn(r, &[5]), |_g, x| x.scale(2.5).mul(x)?)),
        op!("matmul", |r| {
            let b = randn(r, &[4, 2]);
            unary!(r, randn(r, &[3, 4]), |g, x| x.matmul(g.constant(b.clone()))?.matmul(x.t()?.slice_rows(0, 2)?)?)
        }),
        op!("transpose", |r| unary!(r, randn(r, &[2, 5]), |_g, x| x.t()?.matmul(x)?)),
        op!("masked_softmax", |r| {
            let m = random_mask(r, 4, 5);
            unary!(r, randn(r, &[4, 5]), |_g, x| x.masked_softmax(&m)?)
        }),
        op!("masked_softmax_dead_row", |r| {
            let mut m = random_mask(r, 3, 4);
            m.data_mut()[4..8].iter_mut().for_each(|v| *v = MASKED);
            unary!(r, randn(r, &[3, 4]), |_g, x| x.masked_softmax(&m)?)
        }),
        op!("softmax_live", |r| {
            let mut live: Vec<bool> = (0..15).map(|_| r.bernoulli(0.6)).collect();
            for row in 0..3 {
                live[row * 5 + r.below(5)] = true;
            }
            unary!(r, randn(r, &[3, 5]), |_g, x| x.softmax_live(&live)?)
        }),
        op!("softmax", |r| unary!(r, randn(r, &[3, 4]), |_g, x| x.softmax())),
        op!("cross_entropy", |r| {
            let target = r.below(5);
            finite_diff_check(|_g: &Graph, x: Var<'_>| x.cross_entropy(target), &randn(r, &[5]), STEP)
        }),
        op!("layer_norm_input", |r| {
            let gamma = randn(r, &[8]);
            let beta = randn(r, &[8]);
            unary!(r, randn(r, &[2, 8]), |g, x| x.layer_norm(g.constant(gamma.clone()), g.constant(beta.clone()), 1e-6)?)
        }),
        op!("layer_norm_affine", |r| {
            let input = randn(r, &[3, 4]);
            let beta = randn(r, &[4]);
            unary!(r, randn(r, &[4]), |g, x| g.constant(input.clone()).layer_norm(x, g.constant(beta.clone()), 1e-6)?)
        }),
        op!("l2_normalize_rows", |r| unary!(r, randn(r, &[3, 4]), |_g, x| x.l2_normalize_rows()?)),
        op!("gelu", |r| unary!(r, randn(r, &[6]), |_g, x| x.gelu())),
        op!("relu", |r| unary!(r, randn(r, &[6]), |_g, x| x.relu())),
        op!("abs", |r| unary!(r, randn(r, &[6]), |_g, x| x.abs())),
        op!("exp", |r| unary!(r, randn(r, &[6]), |_g, x| x.exp())),
        op!("ln", |r| unary!(r, positive(r, &[6]), |_g, x| x.ln())),
        op!("xlogx", |r| unary!(r, positive(r, &[6]), |_g, x| x.xlogx())),
        op!("square", |r| unary!(r, randn(r, &[6]), |_g, x| x.square())),
        op!("sum", |r| unary!(r, randn(r, &[2, 3]), |_g, x| x.sum().mul(x.sum())?)),
        op!("mean", |r| unary!(r, randn(r, &[2, 3]), |_g, x| x.mean().mul(x.sum())?)),
        op!("sum_cols", |r| unary!(r, randn(r, &[3, 4]), |_g, x| x.sum_cols().square())),
        op!("sum_rows", |r| unary!(r, randn(r, &[3, 4]), |_g, x| x.sum_rows().square())),
        op!("max_cols", |r| unary!(r, randn(r, &[3, 4]), |_g, x| x.max_cols().square())),
        op!("slice_cols", |r| unary!(r, randn(r, &[3, 5]), |_g, x| x.slice_cols(1, 3)?.square())),
        op!("slice_rows", |r| unary!(r, randn(r, &[5, 2]), |_g, x| x.slice_rows(2, 2)?.square())),
        op!("select_rows", |r| {
            let idx: Vec<usize> = (0..5).map(|_| r.below(4)).collect();
            unary!(r, randn(r, &[4, 3]), |_g, x| x.select_rows(&idx)?.square())
        }),
        op!("reshape", |r| unary!(r, randn(r, &[2, 6]), |_g, x| x.reshape(&[3, 4])?.square())),
        op!("mul_const", |r| {
            let c = randn(r, &[3, 3]);
            unary!(r, randn(r, &[3, 3]), |_g, x| x.mul_const(&c)?.square())
        }),
        op!("add_const", |r| {
            let c = randn(r, &[3, 3]);
            unary!(r, randn(r, &[3, 3]), |_g, x| x.add_const(&c)?.square())
        }),
        op!("straight_through", |r| {
            let hard = Tensor::from_fn(&[3, 4], |_| f64::from(u8::from(r.bernoulli(0.5))));
            unary!(r, randn(r, &[3, 4]), |_g, x| x.softmax().straight_through(&hard)?.square())
        }),
        op!("concat_cols", |r| {
            let c = randn(r, &[3, 2]);
            unary!(r, randn(r, &[3, 4]), |g, x| concat_cols(&[x, g.constant(c.clone()), x.square()])?)
        }),
        op!("concat_rows", |r| {
            let c = randn(r, &[2, 4]);
            unary!(r, randn(r, &[3, 4]), |g, x| concat_rows(&[g.constant(c.clone()), x, x.exp()])?)
        }),
        op!("masked_attention_block", |r| {
            let (vit, store) = tiny_vit(r)?;
            let t = 6;
            let live: Vec<bool> = (0..t).map(|i| i == t - 2 || r.bernoulli(0.6)).collect();
            let mask = AttentionMask::from_fn(t, |q, k| live[q] && live[k] || q == k && live[q]);
            unary!(r, randn(r, &[t, 8]), |g, x| {
                let p = store.bind_frozen(g);
                vit.encode(g, &p, x, Some(&mask))?
            })
        }),
        op!("part_assignment", |r| {
            let protos = randn(r, &[3, 4]);
            unary!(r, randn(r, &[6, 4]), |g, x| {
                let tau = g.constant(Tensor::scalar(0.5));
                assign_parts(x, g.constant(protos.clone()), tau, None)?.soft
            })
        }),
        op!("shaping_losses", |r| {
            let feats = randn(r, &[9, 4]);
            unary!(r, randn(r, &[3, 4]), |g, x| {
                let tau = g.constant(Tensor::scalar(0.7));
                let a = assign_parts(g.constant(feats.clone()), x, tau, None)?;
                shaping_losses(g, &a, x, &LossWeights::default(), (3, 3))?.weighted
            })
        }),
        op!("stage1_classify", |r| {
            let protos = randn(r, &[3, 4]);
            let modulation = randn(r, &[2, 4]);
            let w = randn(r, &[4, 3]);
            unary!(r, randn(r, &[6, 4]), |g, x| {
                let tau = g.constant(Tensor::scalar(0.5));
                let a = assign_parts(x, g.constant(protos.clone()), tau, None)?;
                stage1_classify(
                    g,
                    &a,
                    x,
                    g.constant(modulation.clone()),
                    g.constant(w.clone()),
                    g.constant(Tensor::zeros(&[3])),
                    &[1, 2],
                )?
            })
        }),
    ]
}
