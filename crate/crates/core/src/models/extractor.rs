use super::generator::GeneratorNet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Frozen copy of a trained teacher used as the shared discriminator backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    source: GeneratorNet,
}

impl FeatureExtractor {
    pub fn new(teacher: &GeneratorNet) -> Result<Self> {
        if !teacher.is_trained() {
            return Err(Error::Untrained("feature extractor source".into()));
        }
        Ok(Self { source: teacher.clone() })
    }

    pub fn source(&self) -> &GeneratorNet {
        &self.source
    }

    pub fn levels(&self) -> usize {
        self.source.spec().levels()
    }

    /// `[C, H, W]` of every level for the configured data shape.
    pub fn level_shapes(&self) -> Vec<[usize; 3]> {
        let ds = &self.source.spec().data_shape;
        let hw = if ds.len() == 3 { (ds[1], ds[2]) } else { (1, 1) };
        self.source.spec().level_shapes(hw)
    }

    /// Features of `x` (already noised to `t_star`) on graph `g`. The
    /// backbone enters the graph as constants, so gradients reach `x` only.
    pub fn extract_graph(&self, g: &mut Graph, x: Var, t_star: usize, cond: Option<&[usize]>) -> Result<Vec<Var>> {
        let p = self.source.bind(g, false);
        let ts = vec![t_star; g.shape(x)[0]];
        self.source.encode_graph(g, &p, x, &ts, cond)
    }
}

/// Gradient-free feature pyramid, finest level first.
pub fn extract_features(e: &FeatureExtractor, x: &Tensor, t_star: usize, cond: Option<&[usize]>) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let feats = e.extract_graph(&mut g, xv, t_star, cond)?;
    Ok(feats.into_iter().map(|f| g.value(f).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_generator, Arch, GeneratorSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn untrained_source_is_rejected() {
        let net = build_generator(GeneratorSpec::default_for(Arch::Mlp2d, &[2], 0), 0).unwrap();
        assert!(matches!(FeatureExtractor::new(&net), Err(Error::Untrained(_))));
    }

    #[test]
    fn unet_pyramid_halves_and_is_frozen() {
        let mut net = build_generator(GeneratorSpec::default_for(Arch::Tinyunet, &[1, 32, 32], 4), 3).unwrap();
        net.mark_trained();
        let e = FeatureExtractor::new(&net).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[2, 1, 32, 32], &mut rng);
        let f = extract_features(&e, &x, 63, Some(&[0, 3])).unwrap();
        let sizes: Vec<usize> = f.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sizes, [32, 16, 8, 4]);
        for (t, s) in f.iter().zip(e.level_shapes()) {
            assert_eq!(&t.shape()[1..], &s);
        }
        assert_eq!(f, extract_features(&e, &x, 63, Some(&[0, 3])).unwrap());

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let feats = e.extract_graph(&mut g, xv, 63, None).unwrap();
        let l = g.sum_all(feats[3]);
        let grads = g.backward(l);
        assert!(grads.get(xv).is_some());
    }
}
