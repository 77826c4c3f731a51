use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BranchMerge, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Weight and bias of a linear map or a convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<P> {
    pub weight: P,
    pub bias: P,
}

/// Learnable weights of one periodic block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    /// One `[d_embed, d_embed, ker]` convolution per kernel size.
    pub conv: Vec<Affine<P>>,
    /// `[d_embed, branches * d_embed, 1]` projection, present only when
    /// branches are concatenated instead of averaged.
    pub merge: Option<Affine<P>>,
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
}

/// All learnable weights, generic over what a slot holds: tensors for the
/// parameters themselves, their gradients and optimizer moments, or tape
/// handles during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<P> {
    /// `[d, d_embed]` and `[d_embed]`.
    pub embed: Affine<P>,
    pub blocks: Vec<BlockParams<P>>,
    /// `[d_embed, C]` and `[C]`.
    pub head: Affine<P>,
}

pub type ModelParams<T> = ParamTree<Tensor<T>>;

impl<P> ParamTree<P> {
    /// Visits every slot with its stable name, in manifest order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a P)) {
        f("embed.weight".into(), &self.embed.weight);
        f("embed.bias".into(), &self.embed.bias);
        for (b, blk) in self.blocks.iter().enumerate() {
            for (i, c) in blk.conv.iter().enumerate() {
                f(format!("blocks.{b}.conv.{i}.weight"), &c.weight);
                f(format!("blocks.{b}.conv.{i}.bias"), &c.bias);
            }
            if let Some(m) = &blk.merge {
                f(format!("blocks.{b}.merge.weight"), &m.weight);
                f(format!("blocks.{b}.merge.bias"), &m.bias);
            }
            f(format!("blocks.{b}.attn.w_q"), &blk.w_q);
            f(format!("blocks.{b}.attn.w_k"), &blk.w_k);
            f(format!("blocks.{b}.attn.w_v"), &blk.w_v);
            f(format!("blocks.{b}.attn.w_o"), &blk.w_o);
        }
        f("head.weight".into(), &self.head.weight);
        f("head.bias".into(), &self.head.bias);
    }

    pub fn entries(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit(&mut |name, p| out.push((name, p)));
        out
    }

    /// Mutable slots in the same order as [`ParamTree::visit`].
    pub fn slots_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.embed.weight, &mut self.embed.bias];
        for blk in &mut self.blocks {
            for c in &mut blk.conv {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
            if let Some(m) = &mut blk.merge {
                out.push(&mut m.weight);
                out.push(&mut m.bias);
            }
            out.extend([&mut blk.w_q, &mut blk.w_k, &mut blk.w_v, &mut blk.w_o]);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Same structure with every slot transformed, visiting slots in
    /// manifest order.
    pub fn map<Q>(&self, f: &mut impl FnMut(&P) -> Q) -> ParamTree<Q> {
        fn affine<P, Q>(a: &Affine<P>, f: &mut impl FnMut(&P) -> Q) -> Affine<Q> {
            Affine {
                weight: f(&a.weight),
                bias: f(&a.bias),
            }
        }
        let embed = affine(&self.embed, f);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockParams {
                conv: b.conv.iter().map(|c| affine(c, f)).collect(),
                merge: b.merge.as_ref().map(|m| affine(m, f)),
                w_q: f(&b.w_q),
                w_k: f(&b.w_k),
                w_v: f(&b.w_v),
                w_o: f(&b.w_o),
            })
            .collect();
        let head = affine(&self.head, f);
        ParamTree {
            embed,
            blocks,
            head,
        }
    }

    /// Rebuilds a tree of this structure from values in manifest order.
    pub fn from_ordered<Q>(&self, values: Vec<Q>) -> Result<ParamTree<Q>> {
        let n = self.entries().len();
        if values.len() != n {
            return Err(Error::shape(format!(
                "expected {n} parameter tensors, got {}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        Ok(self.map(&mut |_| it.next().expect("length checked")))
    }
}

impl<T: Real> ModelParams<T> {
    /// Uniform `+-1/sqrt(fan_in)` weights, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |shape: Vec<usize>, fan_in: usize| -> Tensor<T> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect();
            Tensor::new(shape, data).expect("shape and length agree")
        };
        let de = cfg.d_embed;
        let embed = Affine {
            weight: uniform(vec![cfg.input_dims, de], cfg.input_dims),
            bias: Tensor::zeros(vec![de]),
        };
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for _ in 0..cfg.num_blocks {
            let conv = cfg
                .kernel_sizes
                .iter()
                .map(|&k| Affine {
                    weight: uniform(vec![de, de, k], de * k),
                    bias: Tensor::zeros(vec![de]),
                })
                .collect();
            let merge = match cfg.branch_merge {
                BranchMerge::Mean => None,
                BranchMerge::ConcatProject => {
                    let cin = de * cfg.kernel_sizes.len();
                    Some(Affine {
                        weight: uniform(vec![de, cin, 1], cin),
                        bias: Tensor::zeros(vec![de]),
                    })
                }
            };
            blocks.push(BlockParams {
                conv,
                merge,
                w_q: uniform(vec![de, de], de),
                w_k: uniform(vec![de, de], de),
                w_v: uniform(vec![de, de], de),
                w_o: uniform(vec![de, de], de),
            });
        }
        let head = Affine {
            weight: uniform(vec![de, cfg.num_classes], de),
            bias: Tensor::zeros(vec![cfg.num_classes]),
        };
        Ok(ParamTree {
            embed,
            blocks,
            head,
        })
    }

    /// Zeros shaped like `self`.
    pub fn zeros_like(&self) -> Self {
        self.map(&mut Tensor::zeros_like)
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        self.map(&mut |t| t.cast())
    }

    /// Registers every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamTree<Var> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }

    /// Gradients of bound leaves after `tape.backward`; missing gradients are
    /// zero.
    pub fn collect_grads(&self, tape: &Tape<T>, bound: &ParamTree<Var>) -> Self {
        let vars: Vec<Var> = bound.entries().into_iter().map(|(_, v)| *v).collect();
        let grads = vars
            .into_iter()
            .zip(self.entries())
            .map(|(v, (_, t))| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros_like(t))
            })
            .collect();
        self.from_ordered(grads).expect("same structure")
    }

    /// Checks every tensor shape against what `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelParams::<T>::init(cfg, 0)?;
        let want = expected.entries();
        let have = self.entries();
        if want.len() != have.len() {
            return Err(Error::shape(format!(
                "config implies {} parameter tensors, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((name, w), (_, h)) in want.iter().zip(&have) {
            if w.shape() != h.shape() {
                return Err(Error::shape(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    w.shape(),
                    h.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries().iter().all(|(_, t)| t.all_finite())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }
}
