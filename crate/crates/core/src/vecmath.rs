//! Dense `f64` vector primitives, layer partitions and the seeded random stream.
//!
//! Parameters, gradients, cumulative paths and reference walks all live in a
//! [`FlatVector`]. A [`Partition`] slices that vector into named contiguous
//! segments (one per layer) so that per-layer quantities can be maintained
//! without copying.

use std::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A dense vector of `f64` with a fixed length of at least one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatVector(Vec<f64>);

impl FlatVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Dimension("a vector needs at least one entry".into()));
        }
        Ok(Self(data))
    }

    /// # Panics
    ///
    /// Panics if `d == 0`.
    pub fn zeros(d: usize) -> Self {
        assert!(d >= 1, "a vector needs at least one entry");
        Self(vec![0.0; d])
    }

    /// # Panics
    ///
    /// Panics if `d == 0`.
    pub fn filled(d: usize, value: f64) -> Self {
        assert!(d >= 1, "a vector needs at least one entry");
        Self(vec![value; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Deref for FlatVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for FlatVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl TryFrom<Vec<f64>> for FlatVector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Self::new(data)
    }
}

/// A named contiguous range `[start, start + len)` of a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Contiguous, disjoint segments covering `[0, d)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    segments: Vec<Segment>,
    dim: usize,
}

impl Partition {
    /// Builds a partition from `(name, len)` pairs laid out back to back.
    pub fn from_lengths<S: Into<String>>(parts: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut segments = Vec::new();
        let mut start = 0;
        for (name, len) in parts {
            if len == 0 {
                return Err(Error::Dimension("partition segments must be nonempty".into()));
            }
            segments.push(Segment {
                name: name.into(),
                start,
                len,
            });
            start += len;
        }
        if segments.is_empty() {
            return Err(Error::Dimension("a partition needs at least one segment".into()));
        }
        Ok(Self {
            segments,
            dim: start,
        })
    }

    /// Validates explicit segments against the vector length `dim`.
    pub fn new(segments: Vec<Segment>, dim: usize) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Dimension("a partition needs at least one segment".into()));
        }
        let mut expected = 0;
        for s in &segments {
            if s.start != expected {
                return Err(Error::Dimension(format!(
                    "segment `{}` starts at {} but the previous one ends at {}",
                    s.name, s.start, expected
                )));
            }
            if s.len == 0 {
                return Err(Error::Dimension(format!("segment `{}` is empty", s.name)));
            }
            expected += s.len;
        }
        if expected != dim {
            return Err(Error::Dimension(format!(
                "segments cover {expected} entries, vector has {dim}"
            )));
        }
        Ok(Self { segments, dim })
    }

    /// One segment spanning the whole vector.
    pub fn single(dim: usize) -> Result<Self> {
        Self::from_lengths([("all", dim)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Segment> {
        self.segments.iter()
    }
}

/// Deterministic random stream backed by ChaCha8.
///
/// Substreams derived with [`RngStream::substream`] share the seed but use a
/// distinct ChaCha stream id, so they never overlap.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream for replica or worker `index`.
    pub fn substream(&self, index: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(index.wrapping_add(1));
        Self {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        self.inner.random_range(low..high)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

/// Squared Euclidean norm.
pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fills `out` with a vector drawn uniformly on the unit sphere.
pub fn fill_unit_vector(out: &mut [f64], rng: &mut RngStream) {
    loop {
        for x in out.iter_mut() {
            *x = rng.standard_normal();
        }
        let n2 = norm_sq(out);
        if n2 > 0.0 && n2.is_finite() {
            let norm = n2.sqrt();
            out.iter_mut().for_each(|x| *x /= norm);
            return;
        }
    }
}

/// Draws a vector uniformly on the unit sphere of dimension `d` (normalized Gaussian).
pub fn sample_unit_vector(d: usize, rng: &mut RngStream) -> Result<FlatVector> {
    if d == 0 {
        return Err(Error::Dimension("unit vectors need d >= 1".into()));
    }
    let mut v = FlatVector::zeros(d);
    fill_unit_vector(&mut v, rng);
    Ok(v)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!("path weight must lie in (0, 1], got {alpha}")));
    }
    Ok(())
}

/// In-place form of [`update_path`]: `p <- alpha * g / |g| + (1 - alpha) * p`.
///
/// On a zero gradient `p` is left untouched and [`Error::ZeroGradient`] is returned.
pub fn update_path_in_place(p: &mut [f64], g: &[f64], alpha: f64) -> Result<()> {
    check_alpha(alpha)?;
    if p.len() != g.len() {
        return Err(Error::Dimension(format!(
            "path has {} entries, gradient has {}",
            p.len(),
            g.len()
        )));
    }
    let norm = norm_sq(g).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroGradient);
    }
    if !norm.is_finite() {
        return Err(Error::Parameter("gradient norm is not finite".into()));
    }
    let scale = alpha / norm;
    let keep = 1.0 - alpha;
    for (pi, gi) in p.iter_mut().zip(g) {
        *pi = scale * gi + keep * *pi;
    }
    Ok(())
}

/// Exponential moving average of normalized gradients: `alpha * g / |g| + (1 - alpha) * p`.
pub fn update_path(p: &FlatVector, g: &FlatVector, alpha: f64) -> Result<FlatVector> {
    let mut out = p.clone();
    update_path_in_place(&mut out, g, alpha)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn norm_sq_examples() {
        assert_eq!(norm_sq(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(norm_sq(&[3.0, 4.0]), 25.0);
        assert!((norm_sq(&[0.6, 0.8]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unit_vector_in_one_dimension_is_a_sign() {
        let mut rng = RngStream::new(7);
        for _ in 0..100 {
            let u = sample_unit_vector(1, &mut rng).unwrap();
            assert!(u[0] == 1.0 || u[0] == -1.0, "got {}", u[0]);
        }
    }

    #[test]
    fn unit_vector_rejects_zero_dimension() {
        let mut rng = RngStream::new(0);
        assert!(matches!(sample_unit_vector(0, &mut rng), Err(Error::Dimension(_))));
    }

    #[test]
    fn unit_vector_coordinates_are_centered_with_variance_one_over_d() {
        let d = 3;
        let n = 100_000;
        let mut rng = RngStream::new(42);
        let mut sum = [0.0; 3];
        let mut sum_sq = [0.0; 3];
        for _ in 0..n {
            let u = sample_unit_vector(d, &mut rng).unwrap();
            for i in 0..d {
                sum[i] += u[i];
                sum_sq[i] += u[i] * u[i];
            }
        }
        let nf = n as f64;
        // coordinate variance 1/d
        let mean_tol = 4.0 / (nf / d as f64).sqrt();
        for i in 0..d {
            let mean = sum[i] / nf;
            assert!(mean.abs() < mean_tol, "coordinate {i}: mean {mean}");
            // u_i^2 has mean 1/3 and variance 4/45 for d = 3
            let msq = sum_sq[i] / nf;
            let se = (4.0f64 / 45.0).sqrt() / nf.sqrt();
            assert!((msq - 1.0 / 3.0).abs() < 5.0 * se, "coordinate {i}: E[u^2] {msq}");
        }
    }

    #[test]
    fn update_path_examples() {
        let p = FlatVector::zeros(2);
        let g = FlatVector::new(vec![3.0, 4.0]).unwrap();
        let out = update_path(&p, &g, 1.0).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15 && (out[1] - 0.8).abs() < 1e-15);

        let p = FlatVector::new(vec![1.0, 0.0]).unwrap();
        let g = FlatVector::new(vec![0.0, 2.0]).unwrap();
        let out = update_path(&p, &g, 0.5).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5]);

        let zero = FlatVector::zeros(2);
        assert!(matches!(update_path(&p, &zero, 0.5), Err(Error::ZeroGradient)));
    }

    #[test]
    fn update_path_rejects_bad_weight_and_dimension() {
        let p = FlatVector::zeros(2);
        let g = FlatVector::new(vec![1.0, 1.0]).unwrap();
        assert!(update_path(&p, &g, 0.0).is_err());
        assert!(update_path(&p, &g, 1.5).is_err());
        let g3 = FlatVector::new(vec![1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(update_path(&p, &g3, 0.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn partitions_must_tile_the_vector() {
        let p = Partition::from_lengths([("a", 3), ("b", 2)]).unwrap();
        assert_eq!(p.dim(), 5);
        assert_eq!(p.segments()[1].range(), 3..5);
        let gap = vec![
            Segment { name: "a".into(), start: 0, len: 2 },
            Segment { name: "b".into(), start: 3, len: 2 },
        ];
        assert!(Partition::new(gap, 5).is_err());
        let short = vec![Segment { name: "a".into(), start: 0, len: 2 }];
        assert!(Partition::new(short, 5).is_err());
        assert!(Partition::from_lengths([("a", 0)]).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = RngStream::new(99);
        let mut b = RngStream::new(99);
        for _ in 0..10 {
            let u = sample_unit_vector(5, &mut a).unwrap();
            let v = sample_unit_vector(5, &mut b).unwrap();
            assert_eq!(u, v);
        }
        let mut s0 = a.substream(0);
        let mut s1 = a.substream(1);
        assert_ne!(s0.uniform(), s1.uniform());
    }

    proptest! {
        #[test]
        fn unit_vectors_have_unit_norm(d in 1usize..200, seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let u = sample_unit_vector(d, &mut rng).unwrap();
            prop_assert!((u.norm_sq().sqrt() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn path_stays_in_unit_ball(
            p in proptest::collection::vec(-1.0f64..1.0, 4),
            g in proptest::collection::vec(-10.0f64..10.0, 4),
            alpha in 0.001f64..=1.0,
        ) {
            let mut p = FlatVector::new(p).unwrap();
            let n = p.norm_sq().sqrt();
            if n > 1.0 {
                p.iter_mut().for_each(|x| *x /= n);
            }
            let g = FlatVector::new(g).unwrap();
            prop_assume!(g.norm_sq() > 0.0);
            let out = update_path(&p, &g, alpha).unwrap();
            prop_assert!(out.norm_sq().sqrt() <= 1.0 + 1e-12);
        }
    }
}
