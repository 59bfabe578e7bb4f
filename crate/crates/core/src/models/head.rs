//! Lightweight discriminator heads attached to one level of the frozen
//! feature pyramid.
//!
//! Image levels use two 4x4 stride-2 convolutions, each followed by group
//! normalization and SiLU, then a spatial mean and a linear score. Vector
//! levels (point data) use a single hidden linear layer. Class-conditional
//! heads add a projection term `<embed(label), pooled>` to the score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{lecun, ParamSet};
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Var};
use crate::optim::AdamState;
use crate::tensor::Tensor;

/// 4x4 stride-2 convolution; output size is `ceil(input / 2)` so even 1x1
/// maps survive both layers.
const HEAD_CONV: ConvGeom = ConvGeom { kernel: 4, stride: 2, pad_lo: 1, pad_hi: 2 };

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum HeadArch {
    Vector { in_dim: usize, width: usize },
    Conv { in_channels: usize, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub level: usize,
    pub arch: HeadArch,
    /// 0 for unconditional heads.
    pub cond_classes: usize,
}

impl HeadSpec {
    pub fn param_count(&self) -> usize {
        let proj = |w: usize| self.cond_classes * w;
        match self.arch {
            HeadArch::Vector { in_dim, width } => in_dim * width + width + width + 1 + proj(width),
            HeadArch::Conv { in_channels, width } => {
                let conv1 = in_channels * width * 16 + width;
                let conv2 = width * width * 16 + width;
                conv1 + conv2 + 4 * width + width + 1 + proj(width)
            }
        }
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_classes > 0
    }
}

fn head_groups(width: usize) -> usize {
    if width.is_multiple_of(2) {
        2
    } else {
        1
    }
}

/// One trainable head plus its optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorHead {
    spec: HeadSpec,
    params: ParamSet,
    pub(crate) adam: AdamState,
}

pub fn init_head(spec: HeadSpec, seed: u64) -> DiscriminatorHead {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let width = match spec.arch {
        HeadArch::Vector { in_dim, width } => {
            p.push("fc.w", lecun(&[in_dim, width], in_dim, &mut rng));
            p.push("fc.b", Tensor::zeros(&[width]));
            width
        }
        HeadArch::Conv { in_channels, width } => {
            p.push("conv1.w", lecun(&[width, in_channels, 4, 4], in_channels * 16, &mut rng));
            p.push("conv1.b", Tensor::zeros(&[width]));
            p.push("gn1.g", Tensor::full(&[width], 1.0));
            p.push("gn1.b", Tensor::zeros(&[width]));
            p.push("conv2.w", lecun(&[width, width, 4, 4], width * 16, &mut rng));
            p.push("conv2.b", Tensor::zeros(&[width]));
            p.push("gn2.g", Tensor::full(&[width], 1.0));
            p.push("gn2.b", Tensor::zeros(&[width]));
            width
        }
    };
    p.push("score.w", lecun(&[width, 1], width, &mut rng));
    p.push("score.b", Tensor::zeros(&[1]));
    if spec.cond_classes > 0 {
        p.push("proj.emb", lecun(&[spec.cond_classes, width], width, &mut rng));
    }
    debug_assert_eq!(p.numel(), spec.param_count());
    DiscriminatorHead { spec, params: p, adam: AdamState::default() }
}

impl DiscriminatorHead {
    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn level(&self) -> usize {
        self.spec.level
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub(crate) fn from_parts(spec: HeadSpec, params: ParamSet) -> Result<Self> {
        let fresh = init_head(spec, 0);
        if let Some(why) = fresh.params.layout_mismatch(&params) {
            return Err(Error::ArchMismatch(why));
        }
        Ok(Self { spec, params, adam: AdamState::default() })
    }

    /// Re-draws the parameters with a new seed and clears optimizer moments.
    pub fn reinitialize(&mut self, seed: u64) {
        *self = init_head(self.spec, seed);
    }

    /// Per-sample scores `[B]` for `feature` taken from pyramid level `level`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &[Var],
        level: usize,
        feature: Var,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        if level != self.spec.level {
            return Err(Error::InvalidArgument(format!(
                "head for level {} applied to level {level}",
                self.spec.level
            )));
        }
        let shape = g.shape(feature).to_vec();
        let batch = shape[0];
        let by_name = |n: &str| params[self.params.names().iter().position(|x| x == n).expect("head param")];
        let pooled = match self.spec.arch {
            HeadArch::Vector { in_dim, .. } => {
                if shape.len() != 2 || shape[1] != in_dim {
                    return Err(Error::Shape(format!("vector head expects [B, {in_dim}], got {shape:?}")));
                }
                let h = g.matmul(feature, by_name("fc.w"));
                let h = g.add_row_vec(h, by_name("fc.b"));
                g.silu(h)
            }
            HeadArch::Conv { in_channels, width } => {
                if shape.len() != 4 || shape[1] != in_channels {
                    return Err(Error::Shape(format!("conv head expects [B, {in_channels}, H, W], got {shape:?}")));
                }
                let groups = head_groups(width);
                let h = g.conv2d(feature, by_name("conv1.w"), HEAD_CONV);
                let h = g.add_channel_bias(h, by_name("conv1.b"));
                let h = g.group_norm(h, by_name("gn1.g"), by_name("gn1.b"), groups);
                let h = g.silu(h);
                let h = g.conv2d(h, by_name("conv2.w"), HEAD_CONV);
                let h = g.add_channel_bias(h, by_name("conv2.b"));
                let h = g.group_norm(h, by_name("gn2.g"), by_name("gn2.b"), groups);
                let h = g.silu(h);
                g.mean_spatial(h)
            }
        };
        let s = g.matmul(pooled, by_name("score.w"));
        let s = g.add_row_vec(s, by_name("score.b"));
        let mut score = g.reshape(s, &[batch]);
        if self.spec.cond_classes > 0 {
            let labels = labels.ok_or(Error::MissingCondition { classes: self.spec.cond_classes })?;
            if labels.len() != batch || labels.iter().any(|&l| l >= self.spec.cond_classes) {
                return Err(Error::InvalidArgument(format!("bad labels for a batch of {batch}")));
            }
            let emb = g.embedding(by_name("proj.emb"), labels.to_vec());
            let prod = g.mul(emb, pooled);
            let proj = g.row_sum(prod);
            score = g.add(score, proj);
        }
        Ok(score)
    }
}

/// Gradient-free per-sample scores of `head` on one feature map.
pub fn head_forward(head: &DiscriminatorHead, level: usize, feature: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = head.params().bind(&mut g, false);
    let f = g.constant(feature.clone());
    let s = head.forward_graph(&mut g, &p, level, f, labels)?;
    Ok(g.value(s).clone())
}

/// How pool heads are built for each feature level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecipe {
    pub levels: Vec<HeadArch>,
    /// Label count given to conditional heads.
    pub cond_classes: usize,
    /// Upper bound on parameters per head.
    pub budget: usize,
}

/// Default desk-scale per-head parameter budget.
pub const DEFAULT_HEAD_BUDGET: usize = 5_000;

impl HeadRecipe {
    /// Heads sized for the pyramid described by `level_shapes` (`[C, H, W]`).
    pub fn for_levels(level_shapes: &[[usize; 3]], width: usize, cond_classes: usize, budget: usize) -> Self {
        let levels = level_shapes
            .iter()
            .map(|&[c, h, w]| {
                if h == 1 && w == 1 {
                    HeadArch::Vector { in_dim: c, width }
                } else {
                    HeadArch::Conv { in_channels: c, width }
                }
            })
            .collect();
        Self { levels, cond_classes, budget }
    }

    pub fn spec(&self, level: usize, conditional: bool) -> HeadSpec {
        HeadSpec {
            level,
            arch: self.levels[level],
            cond_classes: if conditional { self.cond_classes } else { 0 },
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn check_budget(&self) -> Result<()> {
        for level in 0..self.levels.len() {
            let n = self.spec(level, true).param_count().max(self.spec(level, false).param_count());
            if n > self.budget {
                return Err(Error::InvalidArgument(format!(
                    "level {level} head has {n} parameters, budget is {}",
                    self.budget
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_head_param_count_matches_built() {
        for cond in [0, 4] {
            let spec = HeadSpec { level: 2, arch: HeadArch::Conv { in_channels: 64, width: 4 }, cond_classes: cond };
            assert_eq!(init_head(spec, 1).params().numel(), spec.param_count());
            assert!(spec.param_count() <= DEFAULT_HEAD_BUDGET);
        }
    }

    #[test]
    fn finite_scores_on_all_map_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for hw in [1, 2, 4, 16] {
            let spec = HeadSpec { level: 0, arch: HeadArch::Conv { in_channels: 3, width: 4 }, cond_classes: 0 };
            let head = init_head(spec, 7);
            let f = Tensor::randn(&[2, 3, hw, hw], &mut rng);
            let s = head_forward(&head, 0, &f, None).unwrap();
            assert_eq!(s.shape(), &[2]);
            assert!(s.is_finite());
        }
    }

    #[test]
    fn identical_heads_identical_scores_and_level_check() {
        let spec = HeadSpec { level: 1, arch: HeadArch::Vector { in_dim: 5, width: 3 }, cond_classes: 2 };
        let (a, b) = (init_head(spec, 3), init_head(spec, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::randn(&[4, 5], &mut rng);
        let labels = [0, 1, 1, 0];
        assert_eq!(head_forward(&a, 1, &f, Some(&labels)).unwrap(), head_forward(&b, 1, &f, Some(&labels)).unwrap());
        assert!(head_forward(&a, 0, &f, Some(&labels)).is_err());
        assert!(matches!(head_forward(&a, 1, &f, None), Err(Error::MissingCondition { .. })));
    }

    #[test]
    fn budget_is_enforced() {
        let recipe = HeadRecipe::for_levels(&[[64, 8, 8]], 16, 0, DEFAULT_HEAD_BUDGET);
        assert!(recipe.check_budget().is_err());
        let recipe = HeadRecipe::for_levels(&[[64, 8, 8]], 4, 0, DEFAULT_HEAD_BUDGET);
        assert!(recipe.check_budget().is_ok());
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        use crate::gradcheck::{all_coords, check_graph};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases = [
            (HeadArch::Conv { in_channels: 3, width: 4 }, vec![2, 3, 6, 6]),
            (HeadArch::Vector { in_dim: 5, width: 6 }, vec![3, 5]),
        ];
        for (arch, fshape) in cases {
            let spec = HeadSpec { level: 0, arch, cond_classes: 3 };
            let head = init_head(spec, 2);
            let feature = Tensor::randn(&fshape, &mut rng);
            let labels: Vec<usize> = (0..fshape[0]).map(|i| i % 3).collect();
            let mut inputs = head.params().tensors().to_vec();
            inputs.push(feature);
            let n = inputs.len();
            let res = check_graph(&inputs, &all_coords(&inputs), 1e-5, |g, v| {
                let s = head.forward_graph(g, &v[..n - 1], 0, v[n - 1], Some(&labels)).unwrap();
                let w = g.constant(Tensor::new(vec![labels.len()], (0..labels.len()).map(|i| 1.0 - 0.6 * i as f64).collect()).unwrap());
                let p = g.mul(s, w);
                g.sum_all(p)
            });
            assert!(res.max_rel_error < 1e-4, "{arch:?}: {res:?}");
        }
    }
}
