//! Vector primitives for image/question embeddings.
//!
//! Fusion of the two modalities into a single classifier input, L2
//! normalization, cosine similarity and the prompt-based zero-shot
//! classifier. Components are stored as `f32`; every reduction (dot
//! products, norms, softmax sums) is accumulated in `f64`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Logit scale applied to cosine similarities before the zero-shot softmax.
pub const DEFAULT_TEMPERATURE: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding must have at least one component")]
    Empty,
    #[error("embedding component {index} is not finite ({value})")]
    NonFinite { index: usize, value: f32 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("cosine similarity is undefined for two zero vectors")]
    UndefinedSimilarity,
    #[error("prompt set is empty")]
    EmptyPromptSet,
    #[error("duplicate label {0} in prompt set")]
    DuplicateLabel(u16),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("unknown fusion mode `{0}` (expected add, mul or cat)")]
    UnknownFusion(String),
}

/// A finite, non-empty embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { index, value });
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Result<Self, EmbeddingError> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

/// How image and question embeddings are combined into one feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Add,
    Mul,
    Cat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Add, FusionMode::Mul, FusionMode::Cat];

    /// Width of the fused vector for the given input widths, or `None` when
    /// the widths are incompatible with this mode.
    pub fn output_dim(self, img_dim: usize, txt_dim: usize) -> Option<usize> {
        match self {
            FusionMode::Add | FusionMode::Mul if img_dim == txt_dim => Some(img_dim),
            FusionMode::Add | FusionMode::Mul => None,
            FusionMode::Cat => Some(img_dim + txt_dim),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Add => "add",
            FusionMode::Mul => "mul",
            FusionMode::Cat => "cat",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "add" => Ok(FusionMode::Add),
            "mul" => Ok(FusionMode::Mul),
            "cat" => Ok(FusionMode::Cat),
            _ => Err(EmbeddingError::UnknownFusion(s.to_string())),
        }
    }
}

/// Writes the fusion of `img` and `txt` into `out`, which must already have
/// the mode's output width. Used by the batch feature builder to avoid an
/// allocation per record.
pub(crate) fn fuse_into(img: &[f32], txt: &[f32], mode: FusionMode, out: &mut [f32]) {
    match mode {
        FusionMode::Add => {
            for ((o, a), b) in out.iter_mut().zip(img).zip(txt) {
                *o = a + b;
            }
        }
        FusionMode::Mul => {
            for ((o, a), b) in out.iter_mut().zip(img).zip(txt) {
                *o = a * b;
            }
        }
        FusionMode::Cat => {
            let (head, tail) = out.split_at_mut(img.len());
            head.copy_from_slice(img);
            tail.copy_from_slice(txt);
        }
    }
}

/// Combines an image and a question embedding.
///
/// `Add` and `Mul` are elementwise and need equal widths; `Cat` appends the
/// question embedding after the image embedding.
pub fn fuse(
    img: &EmbeddingVector,
    txt: &EmbeddingVector,
    mode: FusionMode,
) -> Result<EmbeddingVector, EmbeddingError> {
    let dim = mode
        .output_dim(img.dim(), txt.dim())
        .ok_or(EmbeddingError::DimMismatch { left: img.dim(), right: txt.dim() })?;
    let mut out = vec![0.0f32; dim];
    fuse_into(img.as_slice(), txt.as_slice(), mode, &mut out);
    // Sums/products of finite f32 can overflow to infinity.
    EmbeddingVector::new(out)
}

/// Result of [`l2_normalize`]. `degenerate` is set when the input was the
/// zero vector, which is passed through unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: EmbeddingVector,
    pub degenerate: bool,
}

pub fn l2_normalize(v: &EmbeddingVector) -> Normalized {
    let norm = v.norm();
    if norm == 0.0 {
        log::warn!("l2_normalize called on a zero vector of dim {}", v.dim());
        return Normalized { vector: v.clone(), degenerate: true };
    }
    let values = v.as_slice().iter().map(|&x| (x as f64 / norm) as f32).collect();
    Normalized { vector: EmbeddingVector { values }, degenerate: false }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine of the angle between `a` and `b`.
///
/// When exactly one argument is the zero vector the similarity is taken to
/// be 0; two zero vectors are rejected.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch { left: a.dim(), right: b.dim() });
    }
    let na = a.norm();
    let nb = b.norm();
    match (na == 0.0, nb == 0.0) {
        (true, true) => Err(EmbeddingError::UndefinedSimilarity),
        (true, false) | (false, true) => Ok(0.0),
        (false, false) => Ok((dot(a.as_slice(), b.as_slice()) / (na * nb)).clamp(-1.0, 1.0)),
    }
}

/// Candidate-answer prompt embeddings for one question category.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    task_id: u16,
    entries: Vec<(u16, EmbeddingVector)>,
}

impl PromptSet {
    pub fn new(task_id: u16, entries: Vec<(u16, EmbeddingVector)>) -> Result<Self, EmbeddingError> {
        if let Some((_, first)) = entries.first() {
            let dim = first.dim();
            let mut seen = std::collections::BTreeSet::new();
            for (label, emb) in &entries {
                if emb.dim() != dim {
                    return Err(EmbeddingError::DimMismatch { left: dim, right: emb.dim() });
                }
                if !seen.insert(*label) {
                    return Err(EmbeddingError::DuplicateLabel(*label));
                }
            }
        }
        Ok(Self { task_id, entries })
    }

    pub fn task_id(&self) -> u16 {
        self.task_id
    }

    pub fn entries(&self) -> &[(u16, EmbeddingVector)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.first().map(|(_, e)| e.dim())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotPrediction {
    pub label_id: u16,
    /// Posterior over the prompt set, in prompt-set order.
    pub posterior: Vec<f64>,
}

/// Scores `img` against every prompt by cosine similarity and returns the
/// softmax posterior at the given logit scale together with its argmax.
/// Ties go to the earliest prompt.
pub fn zero_shot_predict(
    img: &EmbeddingVector,
    prompts: &PromptSet,
    temperature: f64,
) -> Result<ZeroShotPrediction, EmbeddingError> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(EmbeddingError::BadTemperature(temperature));
    }
    let dim = prompts.dim().ok_or(EmbeddingError::EmptyPromptSet)?;
    if dim != img.dim() {
        return Err(EmbeddingError::DimMismatch { left: img.dim(), right: dim });
    }

    let img = l2_normalize(img).vector;
    let logits = prompts
        .entries
        .iter()
        .map(|(_, p)| cosine_similarity(&img, &l2_normalize(p).vector).map(|c| temperature * c))
        .collect::<Result<Vec<_>, _>>()?;

    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let posterior: Vec<f64> = exps.into_iter().map(|e| e / total).collect();

    let mut best = 0;
    for (k, &p) in posterior.iter().enumerate() {
        if p > posterior[best] {
            best = k;
        }
    }
    Ok(ZeroShotPrediction { label_id: prompts.entries[best].0, posterior })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert_eq!(EmbeddingVector::new(vec![]), Err(EmbeddingError::Empty));
        assert!(matches!(
            EmbeddingVector::new(vec![1.0, f32::NAN]),
            Err(EmbeddingError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn fuse_examples() {
        let out = fuse(&ev(&[1., 2., 3.]), &ev(&[4., 5., 6.]), FusionMode::Mul).unwrap();
        assert_eq!(out.as_slice(), &[4., 10., 18.]);

        let v = ev(&[0.5, -2.0, 7.25]);
        let z = EmbeddingVector::zeros(3).unwrap();
        assert_eq!(fuse(&v, &z, FusionMode::Add).unwrap(), v);

        let a = EmbeddingVector::new(vec![0.1; 768]).unwrap();
        let b = EmbeddingVector::new(vec![0.2; 768]).unwrap();
        let cat = fuse(&a, &b, FusionMode::Cat).unwrap();
        assert_eq!(cat.dim(), 1536);
        assert_eq!(&cat.as_slice()[..768], a.as_slice());
        assert_eq!(&cat.as_slice()[768..], b.as_slice());
    }

    #[test]
    fn fuse_dim_mismatch_names_both_dims() {
        let err = fuse(&ev(&[1., 2.]), &ev(&[1., 2., 3.]), FusionMode::Add).unwrap_err();
        assert_eq!(err, EmbeddingError::DimMismatch { left: 2, right: 3 });
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'));
        assert!(fuse(&ev(&[1., 2.]), &ev(&[1., 2., 3.]), FusionMode::Cat).is_ok());
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&ev(&[3., 4.]));
        assert!(!n.degenerate);
        assert!((n.vector.as_slice()[0] - 0.6).abs() < 1e-7);
        assert!((n.vector.as_slice()[1] - 0.8).abs() < 1e-7);

        let unit = ev(&[0., 1., 0.]);
        assert_eq!(l2_normalize(&unit).vector, unit);

        let z = l2_normalize(&ev(&[0., 0.]));
        assert!(z.degenerate);
        assert_eq!(z.vector.as_slice(), &[0., 0.]);
    }

    #[test]
    fn cosine_examples() {
        let v = ev(&[0.3, -1.2, 2.5]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&ev(&[1., 0.]), &ev(&[0., 1.])).unwrap(), 0.0);
        let scaled = ev(&[3., -12., 25.]);
        assert!((cosine_similarity(&v, &scaled).unwrap() - 1.0).abs() < 1e-7);
        assert_eq!(
            cosine_similarity(&ev(&[0., 0.]), &ev(&[0., 0.])),
            Err(EmbeddingError::UndefinedSimilarity)
        );
        assert_eq!(cosine_similarity(&ev(&[0., 0.]), &ev(&[1., 0.])).unwrap(), 0.0);
    }

    #[test]
    fn zero_shot_picks_identical_prompt() {
        let prompts = PromptSet::new(
            0,
            vec![(3, ev(&[1., 0., 0.])), (7, ev(&[0., 1., 0.])), (9, ev(&[0., 0., 1.]))],
        )
        .unwrap();
        let pred = zero_shot_predict(&ev(&[0., 2., 0.]), &prompts, DEFAULT_TEMPERATURE).unwrap();
        assert_eq!(pred.label_id, 7);
        assert!((pred.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_shot_errors() {
        let empty = PromptSet::new(0, vec![]).unwrap();
        assert_eq!(
            zero_shot_predict(&ev(&[1.]), &empty, 1.0),
            Err(EmbeddingError::EmptyPromptSet)
        );
        let prompts = PromptSet::new(0, vec![(0, ev(&[1., 0.]))]).unwrap();
        assert!(matches!(
            zero_shot_predict(&ev(&[1., 0., 0.]), &prompts, 1.0),
            Err(EmbeddingError::DimMismatch { .. })
        ));
        assert!(matches!(
            zero_shot_predict(&ev(&[1., 0.]), &prompts, 0.0),
            Err(EmbeddingError::BadTemperature(_))
        ));
        assert!(matches!(
            PromptSet::new(0, vec![(1, ev(&[1.])), (1, ev(&[2.]))]),
            Err(EmbeddingError::DuplicateLabel(1))
        ));
    }

    /// Direct cosine + softmax, computed without the production helpers.
    fn brute_force_posterior(img: &[f32], prompts: &[Vec<f32>], temperature: f64) -> Vec<f64> {
        let norm = |v: &[f32]| v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let logits: Vec<f64> = prompts
            .iter()
            .map(|p| {
                let d: f64 = img.iter().zip(p).map(|(&a, &b)| a as f64 * b as f64).sum();
                temperature * d / (norm(img) * norm(p))
            })
            .collect();
        let exps: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|e| e / z).collect()
    }

    #[test]
    fn zero_shot_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let dim = 16;
            let img: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let raw: Vec<Vec<f32>> =
                (0..5).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let prompts =
                PromptSet::new(0, raw.iter().enumerate().map(|(k, p)| (k as u16, ev(p))).collect())
                    .unwrap();
            // Moderate logit scale keeps exp() in range for the unshifted oracle.
            let t = 5.0;
            let pred = zero_shot_predict(&ev(&img), &prompts, t).unwrap();
            let expected = brute_force_posterior(&img, &raw, t);
            for (a, b) in pred.posterior.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
            let argmax = (0..5).max_by(|&a, &b| expected[a].total_cmp(&expected[b])).unwrap();
            assert_eq!(pred.label_id as usize, argmax);
        }
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-10.0f32..10.0, dim)
    }

    proptest! {
        #[test]
        fn add_and_mul_commute((a, b) in (1usize..32).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d)))) {
            let (a, b) = (ev(&a), ev(&b));
            prop_assert_eq!(fuse(&a, &b, FusionMode::Add).unwrap(), fuse(&b, &a, FusionMode::Add).unwrap());
            prop_assert_eq!(fuse(&a, &b, FusionMode::Mul).unwrap(), fuse(&b, &a, FusionMode::Mul).unwrap());
        }

        #[test]
        fn cat_dim_is_sum(da in 1usize..64, db in 1usize..64) {
            let a = EmbeddingVector::new(vec![1.0; da]).unwrap();
            let b = EmbeddingVector::new(vec![2.0; db]).unwrap();
            prop_assert_eq!(fuse(&a, &b, FusionMode::Cat).unwrap().dim(), da + db);
        }

        #[test]
        fn posterior_is_distribution_and_scale_invariant(
            img in vec_strategy(8),
            prompts in prop::collection::vec(vec_strategy(8), 1..6),
            scale in 0.01f32..100.0,
            pscale in 0.01f32..100.0,
        ) {
            prop_assume!(img.iter().any(|&x| x.abs() > 1e-3));
            prop_assume!(prompts.iter().all(|p| p.iter().any(|&x| x.abs() > 1e-3)));
            let set = PromptSet::new(0, prompts.iter().enumerate().map(|(k, p)| (k as u16, ev(p))).collect()).unwrap();
            let pred = zero_shot_predict(&ev(&img), &set, DEFAULT_TEMPERATURE).unwrap();
            prop_assert!(pred.posterior.iter().all(|&p| p >= 0.0));
            prop_assert!((pred.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-6);

            let scaled: Vec<f32> = img.iter().map(|&x| x * scale).collect();
            let pred2 = zero_shot_predict(&ev(&scaled), &set, DEFAULT_TEMPERATURE).unwrap();
            for (a, b) in pred.posterior.iter().zip(&pred2.posterior) {
                prop_assert!((a - b).abs() < 1e-4);
            }

            let mut rescaled = prompts.clone();
            for x in rescaled[0].iter_mut() { *x *= pscale; }
            let set2 = PromptSet::new(0, rescaled.iter().enumerate().map(|(k, p)| (k as u16, ev(p))).collect()).unwrap();
            let pred3 = zero_shot_predict(&ev(&img), &set2, DEFAULT_TEMPERATURE).unwrap();
            // Argmax is stable unless two prompts are within rounding of each other.
            let mut sorted = pred.posterior.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted.len() < 2 || sorted[0] - sorted[1] > 1e-3 {
                prop_assert_eq!(pred.label_id, pred3.label_id);
            }
        }
    }
}
