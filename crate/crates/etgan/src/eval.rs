//! Objective metrics: Fréchet distance over pluggable embedders (toy FAD)
//! and Mel-cepstral distortion, plus Gaussian statistics fitting with a
//! numerically safe matrix square root.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, MCEP_DIMS, SEGMENT_FRAMES};
use crate::networks::{bind, classifier_forward, ClassifierConfig, ModelParameters};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Gaussian fit of an embedding set.
#[derive(Debug, Clone)]
pub struct EmbeddingStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

/// Sample mean and unbiased (1/(n-1)) covariance, symmetrized.
pub fn fit_gaussian(embeddings: &[Vec<f64>]) -> Result<EmbeddingStats> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::contract(format!(
            "gaussian fit needs at least 2 embeddings, got {n}"
        )));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::dim("embeddings have inconsistent dimensions".to_string()));
    }
    let mut mean = DVector::zeros(d);
    for e in embeddings {
        mean += DVector::from_column_slice(e);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for e in embeddings {
        let c = DVector::from_column_slice(e) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(EmbeddingStats { mean, cov, count: n })
}

/// Symmetric PSD square root by eigendecomposition, eigenvalues clamped to
/// zero from below.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::try_new(sym, 1e-13, 500).ok_or_else(|| {
        Error::numeric(format!(
            "eigendecomposition did not converge for a {}x{} matrix with norm {:.3e}",
            m.nrows(),
            m.ncols(),
            m.norm()
        ))
    })?;
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians:
/// `||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with the cross term
/// computed via the symmetric route `sqrtm(sqrtm(S1) S2 sqrtm(S1))`.
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::contract(format!(
            "stats dimensions differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let s = sqrtm_psd(&a.cov)?;
    let cross = sqrtm_psd(&(&s * &b.cov * &s))?;
    let trace_term = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok((mean_term + trace_term).max(0.0))
}

/// Fixed-dimension deterministic map from a 24xT segment to an embedding
/// vector.
pub enum Embedder {
    /// Per-dimension mean over time; d = 24.
    IdentityFlatten,
    /// Bottleneck activation of a trained speaker classifier;
    /// d = embedding_dim.
    ClassifierBottleneck { model: ModelParameters<f32>, config: ClassifierConfig },
}

impl Embedder {
    pub fn name(&self) -> &'static str {
        match self {
            Embedder::IdentityFlatten => "identity",
            Embedder::ClassifierBottleneck { .. } => "classifier",
        }
    }

    pub fn embed(&self, fm: &FeatureMatrix) -> Result<Vec<f64>> {
        match self {
            Embedder::IdentityFlatten => {
                let mut out = vec![0.0f64; MCEP_DIMS];
                for t in 0..fm.frames {
                    for (d, &v) in fm.frame(t).iter().enumerate() {
                        out[d] += v as f64;
                    }
                }
                for v in &mut out {
                    *v /= fm.frames as f64;
                }
                Ok(out)
            }
            Embedder::ClassifierBottleneck { model, config } => {
                let mut tape: Tape<f32> = Tape::new();
                let bound = bind(&mut tape, model, false)?;
                let x = tape.leaf(
                    fm.to_channels_major(),
                    vec![1, MCEP_DIMS, fm.frames],
                    false,
                )?;
                let (_, embedding) = classifier_forward(&mut tape, &bound, config, x)?;
                Ok(tape.value(embedding).iter().map(|&v| v as f64).collect())
            }
        }
    }
}

/// Center crop to `length` frames.
pub fn center_crop(fm: &FeatureMatrix, length: usize) -> Result<FeatureMatrix> {
    if fm.frames < length {
        return Err(Error::contract(format!(
            "recording has {} frames, cannot center-crop to {length}",
            fm.frames
        )));
    }
    fm.segment((fm.frames - length) / 2, length)
}

fn embed_all(samples: &[FeatureMatrix], embedder: &Embedder) -> Result<Vec<Vec<f64>>> {
    let crops: Vec<FeatureMatrix> = samples
        .iter()
        .map(|fm| center_crop(fm, SEGMENT_FRAMES))
        .collect::<Result<_>>()?;
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        crops.par_iter().map(|fm| embedder.embed(fm)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        crops.iter().map(|fm| embedder.embed(fm)).collect()
    }
}

/// Toy FAD: embed center-cropped segments of both sets, fit Gaussians,
/// return their Fréchet distance. Symmetric in its arguments.
pub fn fad(
    real: &[FeatureMatrix],
    generated: &[FeatureMatrix],
    embedder: &Embedder,
) -> Result<f64> {
    let stats_real = fit_gaussian(&embed_all(real, embedder)?)?;
    let stats_gen = fit_gaussian(&embed_all(generated, embedder)?)?;
    frechet_distance(&stats_real, &stats_gen)
}

/// Mel-cepstral distortion in dB: mean over frames of
/// `(10 / ln 10) * sqrt(2 * sum_d (c_d - c'_d)^2)` over all 24 dimensions.
/// Paired frames only; no alignment.
pub fn mcd(reference: &FeatureMatrix, test: &FeatureMatrix) -> Result<f64> {
    if reference.frames != test.frames {
        return Err(Error::contract(format!(
            "mcd needs equal frame counts, got {} vs {}",
            reference.frames, test.frames
        )));
    }
    let scale = 10.0 / std::f64::consts::LN_10;
    let mut total = 0.0f64;
    for t in 0..reference.frames {
        let sq: f64 = reference
            .frame(t)
            .iter()
            .zip(test.frame(t))
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        total += scale * (2.0 * sq).sqrt();
    }
    Ok(total / reference.frames as f64)
}

/// One `evaluate` output line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub metric: String,
    pub value: f64,
    pub embedder: String,
    pub n_real: usize,
    pub n_generated: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::build_classifier;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn gaussian_fit_hand_fixture() {
        let stats = fit_gaussian(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(stats.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(stats.cov[(0, 0)], 2.0);
        assert_eq!(stats.cov[(0, 1)], 0.0);
        assert_eq!(stats.cov[(1, 1)], 0.0);
        assert_eq!(stats.count, 2);
    }

    #[test]
    fn gaussian_fit_identical_rows_zero_covariance() {
        let stats = fit_gaussian(&vec![vec![1.0, 2.0]; 5]).unwrap();
        assert!(stats.cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_fit_is_permutation_invariant() {
        let rows = vec![vec![1.0, -1.0], vec![0.5, 2.0], vec![-2.0, 0.25]];
        let mut shuffled = rows.clone();
        shuffled.rotate_left(1);
        let a = fit_gaussian(&rows).unwrap();
        let b = fit_gaussian(&shuffled).unwrap();
        assert_abs_diff_eq!((a.mean - b.mean).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((a.cov - b.cov).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_fit_rejects_single_row() {
        assert!(matches!(fit_gaussian(&[vec![1.0]]), Err(Error::Contract(_))));
    }

    fn diag_stats(mean: &[f64], var: &[f64]) -> EmbeddingStats {
        EmbeddingStats {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::from_diagonal(&DVector::from_column_slice(var)),
            count: 2,
        }
    }

    #[test]
    fn frechet_identical_stats_is_zero() {
        let s = diag_stats(&[0.3, -0.7], &[1.0, 2.5]);
        assert_abs_diff_eq!(frechet_distance(&s, &s).unwrap(), 0.0, epsilon = 1e-8);
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let a = diag_stats(&[0.0], &[1.0]);
        let b = diag_stats(&[1.0], &[1.0]);
        assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn frechet_diagonal_closed_form() {
        let a = diag_stats(&[0.0, 0.0], &[1.0, 4.0]);
        let b = diag_stats(&[0.0, 0.0], &[9.0, 16.0]);
        // (1-3)^2 + (2-4)^2
        assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap(), 8.0, epsilon = 1e-6);
    }

    #[test]
    fn frechet_is_symmetric() {
        let a = diag_stats(&[0.5, 1.0, -0.25], &[1.0, 0.5, 2.0]);
        let b = diag_stats(&[0.0, 0.75, 0.5], &[2.0, 1.5, 0.25]);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-8);
    }

    #[test]
    fn frechet_rejects_dimension_mismatch() {
        let a = diag_stats(&[0.0], &[1.0]);
        let b = diag_stats(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn frechet_monte_carlo_matches_analytic_within_5_percent() {
        // d=4: mean shift 1 per dim, variances 1 vs 4
        // analytic: 4 * (1 + (1-2)^2) = 8
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draw = |rng: &mut ChaCha8Rng, mu: f64, sigma: f64, n: usize| -> Vec<Vec<f64>> {
            let normal = Normal::new(mu, sigma).unwrap();
            (0..n).map(|_| (0..4).map(|_| normal.sample(rng)).collect()).collect()
        };
        let a = fit_gaussian(&draw(&mut rng, 0.0, 1.0, 5000)).unwrap();
        let b = fit_gaussian(&draw(&mut rng, 1.0, 2.0, 5000)).unwrap();
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 8.0).abs() / 8.0 < 0.05, "monte-carlo estimate {d} vs analytic 8");
    }

    fn constant_features(frames: usize, value: f32) -> FeatureMatrix {
        FeatureMatrix::new(vec![value; frames * MCEP_DIMS], frames).unwrap()
    }

    fn random_features(frames: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..frames * MCEP_DIMS).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMatrix::new(data, frames).unwrap()
    }

    #[test]
    fn mcd_identical_is_zero() {
        let a = random_features(40, 2);
        assert_eq!(mcd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mcd_unit_offset_single_dim_fixture() {
        let a = constant_features(10, 0.0);
        let mut b = constant_features(10, 0.0);
        for t in 0..10 {
            b.mcep[t * MCEP_DIMS + 3] = 1.0;
        }
        let expected = 10.0 / std::f64::consts::LN_10 * 2.0f64.sqrt();
        assert_abs_diff_eq!(mcd(&a, &b).unwrap(), expected, epsilon = 1e-4);
        assert_abs_diff_eq!(expected, 6.1418, epsilon = 1e-3);
    }

    #[test]
    fn mcd_is_symmetric() {
        let a = random_features(25, 3);
        let b = random_features(25, 4);
        assert_eq!(mcd(&a, &b).unwrap(), mcd(&b, &a).unwrap());
    }

    #[test]
    fn mcd_satisfies_the_triangle_inequality() {
        for seed in 0..5u64 {
            let a = random_features(12, 10 + seed);
            let b = random_features(12, 20 + seed);
            let c = random_features(12, 30 + seed);
            let ab = mcd(&a, &b).unwrap();
            let bc = mcd(&b, &c).unwrap();
            let ac = mcd(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-9, "triangle violated: {ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn mcd_rejects_frame_count_mismatch() {
        let a = random_features(10, 5);
        let b = random_features(11, 6);
        assert!(matches!(mcd(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn fad_of_a_set_with_itself_is_zero() {
        let set: Vec<FeatureMatrix> =
            (0..4).map(|i| random_features(SEGMENT_FRAMES, 40 + i)).collect();
        let d = fad(&set, &set, &Embedder::IdentityFlatten).unwrap();
        assert_abs_diff_eq!(d, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn fad_is_symmetric_across_sets() {
        let a: Vec<FeatureMatrix> =
            (0..4).map(|i| random_features(SEGMENT_FRAMES + 10, 50 + i)).collect();
        let b: Vec<FeatureMatrix> =
            (0..4).map(|i| random_features(SEGMENT_FRAMES + 10, 60 + i)).collect();
        let ab = fad(&a, &b, &Embedder::IdentityFlatten).unwrap();
        let ba = fad(&b, &a, &Embedder::IdentityFlatten).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-8);
        assert!(ab >= 0.0);
    }

    #[test]
    fn classifier_embedder_is_deterministic_with_fixed_dimension() {
        let config = ClassifierConfig {
            n_speakers: 4,
            embedding_dim: 8,
            conv_depth: 2,
            base_channels: 4,
        };
        let model = build_classifier(&config, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let embedder = Embedder::ClassifierBottleneck { model, config };
        let fm = random_features(SEGMENT_FRAMES, 70);
        let a = embedder.embed(&fm).unwrap();
        let b = embedder.embed(&fm).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
    }

    #[test]
    fn center_crop_takes_the_middle_and_checks_length() {
        let fm = random_features(130, 80);
        let cropped = center_crop(&fm, SEGMENT_FRAMES).unwrap();
        assert_eq!(cropped.frames, SEGMENT_FRAMES);
        assert_eq!(cropped.frame(0), fm.frame(1));
        let short = random_features(100, 81);
        assert!(matches!(center_crop(&short, SEGMENT_FRAMES), Err(Error::Contract(_))));
    }
}
