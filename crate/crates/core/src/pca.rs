//! Statistical makeup model: PCA over premultiplied makeup textures.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::container::{self, Chunk};
use crate::error::{invalid, mismatch, Error, Result};
use crate::face_model::{manifest_path, Basis};
use crate::texture::TextureMap;

pub const PCA_MAGIC: &[u8; 4] = b"MKP1";

/// Tolerance on `basisᵀ basis = I`.
pub const ORTHONORMAL_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct MakeupPcaModel {
    width: usize,
    height: usize,
    mean: Vec<f64>,
    basis: Basis,
    /// Population variance along each column, descending.
    eigenvalues: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl MakeupPcaModel {
    pub fn new(width: usize, height: usize, mean: Vec<f64>, basis: Basis, eigenvalues: Vec<f64>) -> Result<Self> {
        let m = MakeupPcaModel {
            width,
            height,
            mean,
            basis,
            eigenvalues,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.width * self.height * 3;
        if dim == 0 {
            return Err(invalid("makeup model has zero size"));
        }
        if self.mean.len() != dim || self.basis.rows() != dim {
            return Err(mismatch(format!("makeup model expects {dim} values per texture")));
        }
        if self.eigenvalues.len() != self.basis.cols() {
            return Err(mismatch("one eigenvalue per basis column"));
        }
        if self.mean.iter().chain(&self.eigenvalues).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite makeup model value"));
        }
        if self.eigenvalues.iter().any(|&l| l < 0.0) {
            return Err(invalid("negative eigenvalue"));
        }
        if self.eigenvalues.windows(2).any(|w| w[0] < w[1]) {
            return Err(invalid("eigenvalues must be sorted descending"));
        }
        let k = self.basis.cols();
        for i in 0..k {
            for j in 0..=i {
                let want = if i == j { 1.0 } else { 0.0 };
                let got = dot(self.basis.column(i), self.basis.column(j));
                if (got - want).abs() > ORTHONORMAL_TOL {
                    return Err(invalid(format!("basis columns {i},{j} not orthonormal: {got}")));
                }
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn components(&self) -> usize {
        self.basis.cols()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn mean(&self) -> TextureMap {
        TextureMap::new(self.width, self.height, 3, self.mean.clone()).expect("validated shape")
    }

    fn check(&self, tex: &TextureMap) -> Result<()> {
        if tex.width() != self.width || tex.height() != self.height || tex.channels() != 3 {
            return Err(mismatch(format!(
                "makeup model is {}x{}x3, texture is {}x{}x{}",
                self.width,
                self.height,
                tex.width(),
                tex.height(),
                tex.channels()
            )));
        }
        Ok(())
    }

    /// `mean + basis · coeffs`, unclamped.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Result<TextureMap> {
        let mut out = self.mean.clone();
        self.basis.apply_add(coeffs, &mut out)?;
        TextureMap::new(self.width, self.height, 3, out)
    }

    /// Keeps only the first `k` components.
    pub fn truncated(&self, k: usize) -> Result<MakeupPcaModel> {
        if k > self.components() {
            return Err(invalid(format!("cannot keep {k} of {} components", self.components())));
        }
        let dim = self.mean.len();
        MakeupPcaModel::new(
            self.width,
            self.height,
            self.mean.clone(),
            Basis::new(dim, k, self.basis.data()[..dim * k].to_vec())?,
            self.eigenvalues[..k].to_vec(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dim = self.mean.len();
        let k = self.components();
        let chunks = [
            Chunk::u32(b"DIMS", 1, 3, vec![self.width as u32, self.height as u32, k as u32]),
            Chunk::f64(b"MEAN", dim, 1, self.mean.clone()),
            Chunk::f64(b"BASE", dim, k, self.basis.data().to_vec()),
            Chunk::f64(b"EIGV", k, 1, self.eigenvalues.clone()),
        ];
        container::write(path, PCA_MAGIC, &chunks)?;
        let manifest = serde_json::json!({
            "format": "MKP1",
            "version": container::VERSION,
            "width": self.width,
            "height": self.height,
            "components": k,
            "eigenvalues": self.eigenvalues,
        });
        let mp = manifest_path(path);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<MakeupPcaModel> {
        let path = path.as_ref();
        let chunks = container::read(path, PCA_MAGIC)?;
        let (_, _, dims) = container::take_u32(path, &chunks, b"DIMS", Some(1), Some(3))?;
        let [w, h, k] = [0, 1, 2].map(|i| dims[i] as usize);
        let dim = w * h * 3;
        let (_, _, mean) = container::take_f64(path, &chunks, b"MEAN", Some(dim), Some(1))?;
        let (_, _, base) = container::take_f64(path, &chunks, b"BASE", Some(dim), Some(k))?;
        let (_, _, eig) = container::take_f64(path, &chunks, b"EIGV", Some(k), Some(1))?;
        let bad = |e: Error| Error::format(path, e.to_string());
        MakeupPcaModel::new(w, h, mean, Basis::new(dim, k, base).map_err(bad)?, eig).map_err(bad)
    }
}

fn orthonormalize_against(v: &mut [f64], done: &[Vec<f64>]) -> f64 {
    for _ in 0..2 {
        for q in done {
            let d = dot(v, q);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
    }
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|a| *a /= n);
    }
    n
}

/// PCA of premultiplied makeup textures, computed in sample space: the
/// `N × N` Gram matrix of the centered samples is eigendecomposed and its
/// eigenvectors lifted back to texture space. Eigenvalues are population
/// variances (divided by `N`). Components with no variance get arbitrary
/// orthonormal directions and eigenvalue 0.
pub fn build_pca(samples: &[TextureMap], k: usize) -> Result<MakeupPcaModel> {
    if samples.len() < 2 {
        return Err(invalid("PCA needs at least two samples"));
    }
    let first = &samples[0];
    first.ensure_channels(3, "makeup sample")?;
    for s in samples {
        first.ensure_same_shape(s, "makeup samples")?;
        if s.data().iter().any(|v| !v.is_finite()) {
            return Err(invalid("makeup sample contains non-finite values"));
        }
    }
    let n = samples.len();
    let dim = first.data().len();
    let max_k = (n - 1).min(dim);
    if k > max_k {
        return Err(invalid(format!("{k} components requested, at most {max_k} available")));
    }

    let mut mean = vec![0.0; dim];
    for s in samples {
        mean.iter_mut().zip(s.data()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.data().iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let values: Vec<f64> = pairs.par_iter().map(|&(i, j)| dot(&centered[i], &centered[j])).collect();
    let mut gram = DMatrix::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(values) {
        gram[(i, j)] = v;
        gram[(j, i)] = v;
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    // Variance below rounding level of the data (e.g. identical samples whose
    // mean differs from them by an ulp) counts as none.
    let energy: f64 = samples.iter().map(|s| dot(s.data(), s.data())).sum();
    let largest = eig.eigenvalues[order[0]].max(0.0);
    let floor = (largest * 1e-12).max(energy * 1e-24);
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mu = eig.eigenvalues[idx];
        if mu <= floor || mu <= 0.0 {
            break;
        }
        let v = eig.eigenvectors.column(idx);
        let mut col = vec![0.0; dim];
        for (i, c) in centered.iter().enumerate() {
            col.iter_mut().zip(c).for_each(|(o, x)| *o += v[i] * x);
        }
        if orthonormalize_against(&mut col, &columns) == 0.0 {
            break;
        }
        columns.push(col);
        eigenvalues.push(mu / n as f64);
    }
    // Fill variance-free components with unit vectors made orthogonal to the
    // ones already found.
    let mut e = 0;
    while columns.len() < k {
        let mut col = vec![0.0; dim];
        col[e] = 1.0;
        e += 1;
        if orthonormalize_against(&mut col, &columns) > 1e-6 {
            columns.push(col);
            eigenvalues.push(0.0);
        }
    }
    // Deterministic sign: the entry of largest magnitude is positive.
    for col in &mut columns {
        let pivot = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if pivot < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
    }
    MakeupPcaModel::new(first.width(), first.height(), mean, Basis::from_columns(dim, columns)?, eigenvalues)
}

/// Least-squares coefficients `basisᵀ (texture - mean)`.
pub fn fit_coeffs(model: &MakeupPcaModel, texture: &TextureMap) -> Result<Vec<f64>> {
    model.check(texture)?;
    let centered: Vec<f64> = texture.data().iter().zip(&model.mean).map(|(v, m)| v - m).collect();
    model.basis.apply_transpose(&centered)
}

/// Draws `mean + basis · (z ⊙ √λ) · scale` with `z` standard normal from a
/// seeded ChaCha8 stream. Unclamped; see [`clamp_makeup`] for export.
pub fn sample_makeup(model: &MakeupPcaModel, seed: u64, scale: f64) -> Result<TextureMap> {
    model.reconstruct(&sample_coeffs(model, seed, scale))
}

/// The coefficient vector [`sample_makeup`] uses for `seed`.
pub fn sample_coeffs(model: &MakeupPcaModel, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model
        .eigenvalues
        .iter()
        .map(|l| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * l.sqrt() * scale
        })
        .collect()
}

/// Clamps a makeup texture to the displayable `[0, 1]` range.
pub fn clamp_makeup(tex: &TextureMap) -> TextureMap {
    tex.clamp(0.0, 1.0)
}

/// Albedo extended by a makeup texture, `albedo + makeup`, unclamped so
/// compositions stay linear.
pub fn extended_albedo(albedo: &TextureMap, makeup: &TextureMap) -> Result<TextureMap> {
    albedo.ensure_channels(3, "albedo")?;
    albedo.zip_map(makeup, |a, m| a + m)
}

/// Mean over samples of the squared L2 reconstruction error with `k`
/// components.
pub fn reconstruction_error(model: &MakeupPcaModel, samples: &[TextureMap], k: usize) -> Result<f64> {
    let m = model.truncated(k)?;
    let mut total = 0.0;
    for s in samples {
        let r = m.reconstruct(&fit_coeffs(&m, s)?)?;
        total += s.data().iter().zip(r.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn samples(seed: u64, n: usize, w: usize) -> Vec<TextureMap> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| TextureMap::from_fn(w, w, 3, |_, _, _| rng.random_range(0.0..0.5)))
            .collect()
    }

    #[test]
    fn identical_samples_have_no_variance() {
        let s = samples(1, 1, 4);
        let all = vec![s[0].clone(); 5];
        let m = build_pca(&all, 3).unwrap();
        assert!(m.mean().max_abs_diff(&s[0]).unwrap() < 1e-15);
        assert!(m.eigenvalues().iter().all(|&l| l == 0.0));
        m.validate().unwrap();
    }

    #[test]
    fn two_point_closed_form() {
        let s = samples(2, 2, 5);
        let m = build_pca(&s, 1).unwrap();
        let d: Vec<f64> = s[0].data().iter().zip(s[1].data()).map(|(a, b)| a - b).collect();
        let norm2 = dot(&d, &d);
        assert!((m.eigenvalues()[0] - norm2 / 4.0).abs() < 1e-12 * norm2);
        let col = m.basis().column(0);
        let cos = dot(col, &d) / norm2.sqrt();
        assert!((cos.abs() - 1.0).abs() < 1e-12, "{cos}");
        let mid = s[0].zip_map(&s[1], |a, b| (a + b) / 2.0).unwrap();
        assert!(m.mean().max_abs_diff(&mid).unwrap() < 1e-15);
    }

    #[test]
    fn full_rank_reconstructs_training_set() {
        let s = samples(3, 6, 6);
        let m = build_pca(&s, 5).unwrap();
        for x in &s {
            let r = m.reconstruct(&fit_coeffs(&m, x).unwrap()).unwrap();
            let err: f64 = x.data().iter().zip(r.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(err <= 1e-5, "{err}");
        }
    }

    #[test]
    fn error_equals_eigenvalue_tail() {
        let s = samples(4, 8, 6);
        let m = build_pca(&s, 7).unwrap();
        let mut last = f64::INFINITY;
        for k in 0..=7 {
            let err = reconstruction_error(&m, &s, k).unwrap();
            let tail: f64 = m.eigenvalues()[k..].iter().sum();
            assert!((err - tail).abs() <= 1e-5, "k={k}: {err} vs {tail}");
            assert!(err <= last + 1e-12);
            last = err;
        }
    }

    #[test]
    fn mean_is_sample_average() {
        let s = samples(5, 4, 4);
        let m = build_pca(&s, 2).unwrap();
        let avg = TextureMap::from_fn(4, 4, 3, |x, y, c| s.iter().map(|t| t.get(x, y, c)).sum::<f64>() / 4.0);
        assert!(m.mean().max_abs_diff(&avg).unwrap() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = samples(6, 3, 4);
        assert!(build_pca(&s[..1], 0).is_err());
        assert!(build_pca(&s, 3).is_err());
        let mut odd = s.clone();
        odd[1] = TextureMap::zeros(3, 3, 3);
        assert!(build_pca(&odd, 1).is_err());
    }

    #[test]
    fn coefficient_oracles() {
        let s = samples(7, 5, 4);
        let m = build_pca(&s, 4).unwrap();
        assert!(fit_coeffs(&m, &m.mean()).unwrap().iter().all(|&c| c.abs() < 1e-15));
        let mut coeffs = vec![0.0; 4];
        coeffs[0] = 2.0;
        let t = m.reconstruct(&coeffs).unwrap();
        let got = fit_coeffs(&m, &t).unwrap();
        for (g, w) in got.iter().zip(&coeffs) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
        assert!(fit_coeffs(&m, &TextureMap::zeros(5, 4, 3)).is_err());
    }

    #[test]
    fn residual_is_orthogonal_to_span() {
        let s = samples(8, 5, 4);
        let m = build_pca(&s, 3).unwrap();
        let x = &samples(9, 1, 4)[0];
        let r = m.reconstruct(&fit_coeffs(&m, x).unwrap()).unwrap();
        let resid: Vec<f64> = x.data().iter().zip(r.data()).map(|(a, b)| a - b).collect();
        for k in 0..3 {
            assert!(dot(&resid, m.basis().column(k)).abs() <= 1e-5);
        }
    }

    #[test]
    fn sampling_oracles() {
        let s = samples(10, 5, 4);
        let m = build_pca(&s, 4).unwrap();
        assert_eq!(sample_makeup(&m, 3, 0.0).unwrap(), m.mean());
        assert_eq!(sample_makeup(&m, 3, 1.0).unwrap(), sample_makeup(&m, 3, 1.0).unwrap());
        assert_ne!(sample_makeup(&m, 3, 1.0).unwrap(), sample_makeup(&m, 4, 1.0).unwrap());
        let near = sample_makeup(&m, 3, 1e-9).unwrap();
        assert!(near.rmse(&m.mean()).unwrap() < 1e-8);
    }

    #[test]
    fn sample_variance_matches_eigenvalues() {
        let s = samples(11, 6, 4);
        let m = build_pca(&s, 5).unwrap();
        let scale = 1.5;
        let draws = 10_000;
        let mut sq = [0.0; 5];
        for seed in 0..draws {
            let tex = sample_makeup(&m, seed, scale).unwrap();
            let c = fit_coeffs(&m, &tex).unwrap();
            sq.iter_mut().zip(&c).for_each(|(a, b)| *a += b * b);
        }
        for (k, &l) in m.eigenvalues().iter().enumerate() {
            let var = sq[k] / draws as f64;
            let want = l * scale * scale;
            assert!((var - want).abs() <= 0.05 * want, "component {k}: {var} vs {want}");
        }
    }

    #[test]
    fn extended_albedo_is_additive() {
        let d = samples(12, 1, 4).remove(0);
        let ms = samples(13, 2, 4);
        assert_eq!(extended_albedo(&d, &TextureMap::zeros(4, 4, 3)).unwrap(), d);
        let both = ms[0].zip_map(&ms[1], |a, b| a + b).unwrap();
        let a = extended_albedo(&d, &both).unwrap();
        let b = extended_albedo(&extended_albedo(&d, &ms[0]).unwrap(), &ms[1]).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
        assert!(extended_albedo(&d, &TextureMap::zeros(2, 2, 3)).is_err());
    }

    #[test]
    fn model_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("makeup.mkp");
        let m = build_pca(&samples(14, 4, 4), 3).unwrap();
        m.save(&path).unwrap();
        assert_eq!(MakeupPcaModel::load(&path).unwrap(), m);
        assert!(manifest_path(&path).exists());
        std::fs::write(&path, b"FLM1junk").unwrap();
        assert!(MakeupPcaModel::load(&path).unwrap_err().is_io());
    }

    proptest! {
        #[test]
        fn basis_is_orthonormal_and_sorted(seed in 0u64..500, n in 2usize..7) {
            let s = samples(seed, n, 3);
            let m = build_pca(&s, n - 1).unwrap();
            prop_assert!(m.validate().is_ok());
            prop_assert!(m.eigenvalues().windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn error_is_monotone_in_k(seed in 0u64..200) {
            let s = samples(seed, 5, 3);
            let m = build_pca(&s, 4).unwrap();
            let errs: Vec<f64> = (0..=4).map(|k| reconstruction_error(&m, &s, k).unwrap()).collect();
            prop_assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }
}
