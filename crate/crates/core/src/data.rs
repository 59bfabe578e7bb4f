//! Procedural training data.
//!
//! * `gauss8`: eight isotropic Gaussians (std 0.1) on a radius-2 circle, the
//!   component index being the label.
//! * `checker`: uniform density on the dark cells of a 4x4 checkerboard
//!   over `[-2, 2]^2`, unlabelled.
//! * `shapes`: 32x32 renders of a circle, square, triangle or cross with
//!   random position and size, background -1 and foreground +1.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GAUSS8_RADIUS: f64 = 2.0;
pub const GAUSS8_STD: f64 = 0.1;
pub const CHECKER_HALF_WIDTH: f64 = 2.0;
pub const CHECKER_CELLS: usize = 4;
pub const SHAPES_SIZE: usize = 32;

/// Distance from a mode centre within which a sample counts towards it.
pub const MODE_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Gauss8,
    Checker,
    Shapes,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss8" => Ok(Self::Gauss8),
            "checker" => Ok(Self::Checker),
            "shapes" => Ok(Self::Shapes),
            other => Err(Error::InvalidArgument(format!("unknown dataset `{other}`"))),
        }
    }
}

impl DatasetKind {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Self::Gauss8 | Self::Checker => vec![2],
            Self::Shapes => vec![1, SHAPES_SIZE, SHAPES_SIZE],
        }
    }

    pub fn cond_classes(&self) -> usize {
        match self {
            Self::Gauss8 => 8,
            Self::Checker => 0,
            Self::Shapes => 4,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Self::Shapes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSpec {
    pub name: DatasetKind,
    pub n_train: usize,
    pub seed: u64,
}

impl DataSpec {
    pub fn dims(&self) -> Vec<usize> {
        self.name.dims()
    }

    pub fn cond_classes(&self) -> usize {
        self.name.cond_classes()
    }
}

/// Samples `[N, ...dims]` with optional per-sample labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset { x: self.x.select_rows(idx), labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()) }
    }
}

pub fn gauss8_centers() -> [[f64; 2]; 8] {
    std::array::from_fn(|k| {
        let a = 2.0 * PI * k as f64 / 8.0;
        [GAUSS8_RADIUS * a.cos(), GAUSS8_RADIUS * a.sin()]
    })
}

/// Centres of the occupied checkerboard cells.
pub fn checker_centers() -> Vec<[f64; 2]> {
    let cell = 2.0 * CHECKER_HALF_WIDTH / CHECKER_CELLS as f64;
    let mut out = Vec::new();
    for i in 0..CHECKER_CELLS {
        for j in 0..CHECKER_CELLS {
            if (i + j) % 2 == 0 {
                out.push([-CHECKER_HALF_WIDTH + (i as f64 + 0.5) * cell, -CHECKER_HALF_WIDTH + (j as f64 + 0.5) * cell]);
            }
        }
    }
    out
}

pub fn generate_dataset(spec: &DataSpec) -> Result<Dataset> {
    if spec.n_train == 0 {
        return Err(Error::InvalidArgument("n_train must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_train;
    Ok(match spec.name {
        DatasetKind::Gauss8 => {
            let centers = gauss8_centers();
            let mut data = Vec::with_capacity(2 * n);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let k = rng.random_range(0..8);
                for c in centers[k] {
                    data.push(c + GAUSS8_STD * rng.sample::<f64, _>(StandardNormal));
                }
                labels.push(k);
            }
            Dataset { x: Tensor::from_parts(vec![n, 2], data), labels: Some(labels) }
        }
        DatasetKind::Checker => {
            let centers = checker_centers();
            let half = CHECKER_HALF_WIDTH / CHECKER_CELLS as f64;
            let mut data = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let c = centers[rng.random_range(0..centers.len())];
                data.push(c[0] + rng.random_range(-half..half));
                data.push(c[1] + rng.random_range(-half..half));
            }
            Dataset { x: Tensor::from_parts(vec![n, 2], data), labels: None }
        }
        DatasetKind::Shapes => {
            let px = SHAPES_SIZE * SHAPES_SIZE;
            let mut data = Vec::with_capacity(n * px);
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let k = rng.random_range(0..4);
                data.extend(render_shape(k, &mut rng));
                labels.push(k);
            }
            Dataset { x: Tensor::from_parts(vec![n, 1, SHAPES_SIZE, SHAPES_SIZE], data), labels: Some(labels) }
        }
    })
}

/// One 32x32 render of shape `kind` (0 circle, 1 square, 2 triangle, 3 cross).
fn render_shape<R: Rng>(kind: usize, rng: &mut R) -> Vec<f64> {
    let s = SHAPES_SIZE as f64;
    let r = rng.random_range(5.0..10.0);
    let cx = rng.random_range(r + 1.0..s - r - 1.0);
    let cy = rng.random_range(r + 1.0..s - r - 1.0);
    let arm = (r / 3.0).max(1.5);
    let mut img = Vec::with_capacity(SHAPES_SIZE * SHAPES_SIZE);
    for y in 0..SHAPES_SIZE {
        for x in 0..SHAPES_SIZE {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let inside = match kind {
                0 => dx * dx + dy * dy <= r * r,
                1 => dx.abs() <= r * 0.8 && dy.abs() <= r * 0.8,
                // Apex up, base at dy = r.
                2 => dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5,
                _ => (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r),
            };
            img.push(if inside { 1.0 } else { -1.0 });
        }
    }
    img
}

/// Fraction of modes that receive at least a quarter of their fair share of
/// samples within [`MODE_RADIUS`]. `None` for image data.
pub fn mode_coverage(kind: DatasetKind, samples: &Tensor) -> Option<f64> {
    let centers: Vec<[f64; 2]> = match kind {
        DatasetKind::Gauss8 => gauss8_centers().to_vec(),
        DatasetKind::Checker => checker_centers(),
        DatasetKind::Shapes => return None,
    };
    let n = samples.rows();
    if n == 0 {
        return Some(0.0);
    }
    let mut hits = vec![0usize; centers.len()];
    for i in 0..n {
        let p = samples.row(i);
        let (best, d2) = centers
            .iter()
            .enumerate()
            .map(|(k, c)| (k, (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty centres");
        if d2 <= MODE_RADIUS * MODE_RADIUS {
            hits[best] += 1;
        }
    }
    let need = (n as f64 / centers.len() as f64 / 4.0).max(1.0);
    let covered = hits.iter().filter(|&&h| h as f64 >= need).count();
    Some(covered as f64 / centers.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss8_component_means_recover_centers() {
        let d = generate_dataset(&DataSpec { name: DatasetKind::Gauss8, n_train: 100_000, seed: 1 }).unwrap();
        let labels = d.labels.as_ref().unwrap();
        let mut sums = [[0.0; 2]; 8];
        let mut counts = [0.0; 8];
        for (i, &k) in labels.iter().enumerate() {
            sums[k][0] += d.x.row(i)[0];
            sums[k][1] += d.x.row(i)[1];
            counts[k] += 1.0;
        }
        for (k, c) in gauss8_centers().iter().enumerate() {
            assert!((sums[k][0] / counts[k] - c[0]).abs() < 0.02);
            assert!((sums[k][1] / counts[k] - c[1]).abs() < 0.02);
        }
        assert_eq!(mode_coverage(DatasetKind::Gauss8, &d.x), Some(1.0));
    }

    #[test]
    fn deterministic_given_seed() {
        for name in [DatasetKind::Gauss8, DatasetKind::Checker, DatasetKind::Shapes] {
            let spec = DataSpec { name, n_train: 50, seed: 3 };
            assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
        }
    }

    #[test]
    fn shapes_range_and_labels() {
        let d = generate_dataset(&DataSpec { name: DatasetKind::Shapes, n_train: 200, seed: 0 }).unwrap();
        assert_eq!(d.x.shape(), &[200, 1, 32, 32]);
        assert!(d.labels.unwrap().iter().all(|&l| l < 4));
        assert!(d.x.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        for i in 0..200 {
            let on = d.x.row(i).iter().filter(|&&v| v > 0.0).count();
            assert!(on > 20 && on < 1024, "sample {i} has {on} foreground pixels");
        }
    }

    #[test]
    fn checker_lies_on_dark_cells() {
        let d = generate_dataset(&DataSpec { name: DatasetKind::Checker, n_train: 2000, seed: 2 }).unwrap();
        assert!(d.labels.is_none());
        for i in 0..d.len() {
            let p = d.x.row(i);
            let ci = ((p[0] + 2.0) / 1.0).floor() as usize;
            let cj = ((p[1] + 2.0) / 1.0).floor() as usize;
            assert_eq!((ci + cj) % 2, 0);
        }
        assert_eq!(mode_coverage(DatasetKind::Checker, &d.x), Some(1.0));
    }

    #[test]
    fn collapsed_samples_cover_one_mode() {
        let x = Tensor::new(vec![100, 2], [2.0, 0.0].repeat(100)).unwrap();
        assert_eq!(mode_coverage(DatasetKind::Gauss8, &x), Some(1.0 / 8.0));
    }
}
