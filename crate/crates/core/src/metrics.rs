//! Sample-set distances: sliced Wasserstein, unbiased RBF MMD and the
//! patch divergence between center crops.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn flat_dims(t: &Tensor) -> usize {
    t.row_len()
}

/// 1-D 2-Wasserstein distance between two empirical distributions given as
/// sorted values. Unequal sizes are handled through their quantile functions.
fn w2_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / a.len() as f64).sqrt();
    }
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    acc.sqrt()
}

/// Mean over `n_projections` random unit directions of the 1-D W2 distance
/// between the projected sets.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_projections: usize, seed: u64) -> Result<f64> {
    let d = flat_dims(a);
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::InvalidArgument("sliced Wasserstein needs non-empty sets".into()));
    }
    if flat_dims(b) != d {
        return Err(Error::Shape(format!("dimension {d} vs {}", flat_dims(b))));
    }
    if n_projections == 0 {
        return Err(Error::InvalidArgument("need at least one projection".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut dir = vec![0.0; d];
    for _ in 0..n_projections {
        let mut norm = 0.0;
        while norm < 1e-12 {
            dir.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        let project = |t: &Tensor| {
            let mut p: Vec<f64> = (0..t.rows()).map(|i| t.row(i).iter().zip(&dir).map(|(x, w)| x * w).sum::<f64>() / norm).collect();
            p.sort_by(f64::total_cmp);
            p
        };
        total += w2_sorted(&project(a), &project(b));
    }
    Ok(total / n_projections as f64)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median pairwise Euclidean distance over the pooled sets (at most the
/// first 1000 rows of each), used as the RBF bandwidth.
pub fn median_bandwidth(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = (0..a.rows().min(1000)).map(|i| a.row(i)).chain((0..b.rows().min(1000)).map(|i| b.row(i))).collect();
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let med = m.sqrt();
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdEstimate {
    /// Unbiased squared MMD; may be slightly negative.
    pub value: f64,
    /// Standard error of the estimator under the null of equal distributions.
    pub std_error: f64,
    pub bandwidth: f64,
}

/// Unbiased squared MMD with kernel `exp(-|x - y|^2 / (2 bandwidth^2))`.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<f64> {
    Ok(mmd_rbf_with_se(a, b, bandwidth)?.value)
}

pub fn mmd_rbf_with_se(a: &Tensor, b: &Tensor, bandwidth: f64) -> Result<MmdEstimate> {
    let (m, n) = (a.rows(), b.rows());
    if m < 2 || n < 2 {
        return Err(Error::InvalidArgument("unbiased MMD needs at least two samples per set".into()));
    }
    if flat_dims(a) != flat_dims(b) {
        return Err(Error::Shape(format!("dimension {} vs {}", flat_dims(a), flat_dims(b))));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let rows: Vec<&[f64]> = (0..m).map(|i| a.row(i)).chain((0..n).map(|i| b.row(i))).collect();
    let total = m + n;
    let mut k = vec![0.0; total * total];
    for i in 0..total {
        k[i * total + i] = 1.0;
        for j in i + 1..total {
            let v = (-gamma * sq_dist(rows[i], rows[j])).exp();
            k[i * total + j] = v;
            k[j * total + i] = v;
        }
    }
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..total {
        for j in 0..total {
            if i == j {
                continue;
            }
            let v = k[i * total + j];
            match (i < m, j < m) {
                (true, true) => kxx += v,
                (false, false) => kyy += v,
                (true, false) => kxy += v,
                _ => {}
            }
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    let value = kxx / (mf * (mf - 1.0)) + kyy / (nf * (nf - 1.0)) - 2.0 * kxy / (mf * nf);

    // Double-centred pooled Gram matrix gives the centred kernel k~.
    let row_mean: Vec<f64> = (0..total).map(|i| k[i * total..(i + 1) * total].iter().sum::<f64>() / total as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / total as f64;
    let mut sq = 0.0;
    for i in 0..total {
        for j in 0..total {
            if i != j {
                let c = k[i * total + j] - row_mean[i] - row_mean[j] + grand;
                sq += c * c;
            }
        }
    }
    let e_k2 = sq / (total * (total - 1)) as f64;
    let var = 2.0 * e_k2 * (1.0 / (mf * (mf - 1.0)) + 1.0 / (nf * (nf - 1.0)) + 2.0 / (mf * nf));
    Ok(MmdEstimate { value, std_error: var.sqrt(), bandwidth })
}

/// MMD with the median-heuristic bandwidth.
pub fn mmd_median(a: &Tensor, b: &Tensor) -> Result<MmdEstimate> {
    mmd_rbf_with_se(a, b, median_bandwidth(a, b))
}

/// Centre `crop x crop` window of every image in `[N, C, H, W]`.
pub fn center_crop(x: &Tensor, crop: usize) -> Result<Tensor> {
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("center crop needs [N, C, H, W], got {:?}", x.shape())));
    };
    if crop == 0 || crop > h || crop > w {
        return Err(Error::InvalidArgument(format!("crop {crop} does not fit {h}x{w}")));
    }
    let (y0, x0) = ((h - crop) / 2, (w - crop) / 2);
    let mut out = Vec::with_capacity(n * c * crop * crop);
    for plane in x.data().chunks(h * w) {
        for y in y0..y0 + crop {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + crop]);
        }
    }
    Tensor::new(vec![n, c, crop, crop], out)
}

/// MMD between centre crops of student and teacher images.
pub fn patch_divergence(student: &Tensor, teacher: &Tensor, crop: usize) -> Result<MmdEstimate> {
    let a = center_crop(student, crop)?;
    let b = center_crop(teacher, crop)?;
    mmd_median(&a, &b)
}

/// Desk default crop on 32x32 images.
pub const DEFAULT_PATCH_CROP: usize = 16;

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussians(n: usize, d: usize, offset: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::randn(&[n, d], &mut rng);
        for i in 0..n {
            t.data_mut()[i * d] += offset;
        }
        t
    }

    #[test]
    fn swd_identity_and_point_masses() {
        let a = gaussians(100, 3, 0.0, 1);
        assert_eq!(sliced_wasserstein(&a, &a, 32, 0).unwrap(), 0.0);
        let p = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let q = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!((sliced_wasserstein(&p, &q, 8, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn swd_unit_offset_is_two_over_pi() {
        let a = gaussians(20_000, 2, 0.0, 1);
        let b = gaussians(20_000, 2, 1.0, 2);
        let v = sliced_wasserstein(&a, &b, 400, 3).unwrap();
        assert!((v - 2.0 / std::f64::consts::PI).abs() < 0.02, "{v}");
    }

    #[test]
    fn swd_unequal_sizes_match_replicated_sets() {
        let a = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![4, 1], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(sliced_wasserstein(&a, &b, 5, 0).unwrap() < 1e-12);
        let c = Tensor::new(vec![3, 1], vec![0.0, 0.5, 2.0]).unwrap();
        let c2 = Tensor::new(vec![6, 1], vec![0.0, 0.0, 0.5, 0.5, 2.0, 2.0]).unwrap();
        let x = sliced_wasserstein(&a, &c, 4, 9).unwrap();
        let y = sliced_wasserstein(&b, &c2, 4, 9).unwrap();
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn swd_dimension_mismatch() {
        assert!(sliced_wasserstein(&gaussians(3, 2, 0.0, 0), &gaussians(3, 3, 0.0, 0), 4, 0).is_err());
    }

    #[test]
    fn mmd_same_distribution_within_three_se() {
        let a = gaussians(300, 2, 0.0, 1);
        let b = gaussians(300, 2, 0.0, 2);
        let e = mmd_median(&a, &b).unwrap();
        assert!(e.value.abs() < 3.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn mmd_far_tight_clusters_approach_two() {
        let a = gaussians(50, 2, 0.0, 1).map(|x| 0.01 * x);
        let b = gaussians(50, 2, 1e3, 2).map(|x| 0.01 * x);
        let v = mmd_rbf(&a, &b, 1.0).unwrap();
        assert!((v - 2.0).abs() < 1e-3, "{v}");
        assert!(mmd_rbf(&a, &b, 0.0).is_err());
        assert!(mmd_rbf(&a.select_rows(&[0]), &b, 1.0).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let a = gaussians(80, 3, 0.0, 1);
        let b = gaussians(60, 3, 0.5, 2);
        let perm: Vec<usize> = (0..80).rev().collect();
        let pa = a.select_rows(&perm);
        let s0 = sliced_wasserstein(&a, &b, 16, 4).unwrap();
        let s1 = sliced_wasserstein(&pa, &b, 16, 4).unwrap();
        assert!((s0 - s1).abs() <= 1e-9 * s0.abs());
        let m0 = mmd_rbf(&a, &b, 1.3).unwrap();
        let m1 = mmd_rbf(&pa, &b, 1.3).unwrap();
        assert!((m0 - m1).abs() <= 1e-9 * m0.abs());
    }

    #[test]
    fn center_crop_full_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[3, 1, 8, 8], &mut rng);
        assert_eq!(center_crop(&x, 8).unwrap(), x);
        let c = center_crop(&x, 4).unwrap();
        assert_eq!(c.data()[0], x.data()[2 * 8 + 2]);
        assert!(center_crop(&x, 9).is_err());
    }

    #[test]
    fn swd_variance_shrinks_with_projection_count() {
        let a = gaussians(200, 4, 0.0, 1);
        let b = gaussians(200, 4, 0.3, 2);
        let var = |p: usize| {
            let v: Vec<f64> = (0..20).map(|s| sliced_wasserstein(&a, &b, p, s).unwrap()).collect();
            let m = v.iter().sum::<f64>() / 20.0;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 19.0
        };
        assert!(var(512) < var(16));
    }

    #[test]
    fn patch_divergence_of_identical_sets_is_within_three_se() {
        use crate::data::{generate_dataset, DataSpec, DatasetKind};
        let d = generate_dataset(&DataSpec { name: DatasetKind::Shapes, n_train: 64, seed: 5 }).unwrap();
        let e = patch_divergence(&d.x, &d.x, DEFAULT_PATCH_CROP).unwrap();
        assert!(e.value.abs() < 3.0 * e.std_error, "{e:?}");
        let full = patch_divergence(&d.x, &d.x, 32).unwrap();
        assert_eq!(full, mmd_median(&d.x, &d.x).unwrap());
    }

    #[test]
    fn identical_sets_give_the_diagonal_closed_form() {
        let g = gaussians(64, 256, 0.0, 3);
        let e = mmd_median(&g, &g).unwrap();
        let gamma = 1.0 / (2.0 * e.bandwidth * e.bandwidth);
        let mut off = 0.0;
        for i in 0..64 {
            for j in 0..64 {
                if i != j {
                    off += (-gamma * sq_dist(g.row(i), g.row(j))).exp();
                }
            }
        }
        let kbar = off / (64.0 * 63.0);
        assert!((e.value + 2.0 * (1.0 - kbar) / 64.0).abs() < 1e-12, "{e:?}");
    }
}
