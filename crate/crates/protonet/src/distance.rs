//! Distance functions between embeddings and prototypes.
//!
//! Squared Euclidean and diagonal Mahalanobis are Bregman divergences (and
//! are cross-checked against their generator forms); cosine distance is not,
//! which is exactly why [`mean_minimizer_check`] refuses it.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::fmt;
use std::sync::Arc;

type PhiFn = dyn Fn(&[f64]) -> Result<f64> + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync;

/// A strictly convex generator φ with its gradient, defining the Bregman
/// divergence d_φ(z, z′) = φ(z) − φ(z′) − (z − z′)ᵀ∇φ(z′).
#[derive(Clone)]
pub struct Generator {
    name: String,
    phi: Arc<PhiFn>,
    grad: Arc<GradFn>,
}

impl Generator {
    pub fn new(
        name: impl Into<String>,
        phi: impl Fn(&[f64]) -> Result<f64> + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync + 'static,
    ) -> Self {
        Generator {
            name: name.into(),
            phi: Arc::new(phi),
            grad: Arc::new(grad),
        }
    }

    /// Built-in generators addressable from config files.
    ///
    /// - `sq_norm`: φ(z) = ‖z‖², whose divergence is squared Euclidean.
    /// - `neg_entropy`: φ(z) = Σ zᵢ ln zᵢ on positive vectors, whose
    ///   divergence is the generalized KL divergence.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "sq_norm" => Ok(Generator::new(
                "sq_norm",
                |z| Ok(z.iter().map(|v| v * v).sum()),
                |z| Ok(z.iter().map(|v| 2.0 * v).collect()),
            )),
            "neg_entropy" => Ok(Generator::new(
                "neg_entropy",
                |z| {
                    if z.iter().any(|&v| v <= 0.0) {
                        return Err(Error::NumericDomain {
                            op: "neg_entropy",
                            detail: "requires strictly positive coordinates".into(),
                        });
                    }
                    Ok(z.iter().map(|&v| v * v.ln()).sum())
                },
                |z| {
                    if z.iter().any(|&v| v <= 0.0) {
                        return Err(Error::NumericDomain {
                            op: "neg_entropy",
                            detail: "requires strictly positive coordinates".into(),
                        });
                    }
                    Ok(z.iter().map(|&v| v.ln() + 1.0).collect())
                },
            )),
            other => Err(Error::Config(format!("unknown bregman generator '{other}'"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn phi(&self, z: &[f64]) -> Result<f64> {
        (self.phi)(z)
    }

    pub fn grad(&self, z: &[f64]) -> Result<Vec<f64>> {
        (self.grad)(z)
    }
}

#[derive(Clone)]
pub enum DistanceFn {
    SqEuclidean,
    Cosine,
    /// Σ wᵢ(zᵢ−z′ᵢ)² with strictly positive per-coordinate weights.
    MahalanobisDiag(Vec<f64>),
    Bregman(Generator),
}

impl fmt::Debug for DistanceFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DistanceFn({})", self.config_name())
    }
}

impl DistanceFn {
    pub fn mahalanobis(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::contract(
                "mahalanobis_diag",
                "weights must be nonempty and strictly positive",
            ));
        }
        Ok(DistanceFn::MahalanobisDiag(weights))
    }

    /// Parse a config-file distance name: `sq_euclidean`, `cosine`,
    /// `mahalanobis_diag:<w1,w2,...>`, or `bregman:<builtin>`.
    pub fn parse(name: &str) -> Result<Self> {
        if name == "sq_euclidean" {
            return Ok(DistanceFn::SqEuclidean);
        }
        if name == "cosine" {
            return Ok(DistanceFn::Cosine);
        }
        if let Some(weights) = name.strip_prefix("mahalanobis_diag:") {
            let weights: Vec<f64> = weights
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad mahalanobis weight '{s}'")))
                })
                .collect::<Result<_>>()?;
            return DistanceFn::mahalanobis(weights);
        }
        if let Some(gen) = name.strip_prefix("bregman:") {
            return Ok(DistanceFn::Bregman(Generator::builtin(gen)?));
        }
        Err(Error::Config(format!(
            "unknown distance '{name}' (expected sq_euclidean, cosine, \
             mahalanobis_diag:<weights>, or bregman:<generator>)"
        )))
    }

    /// Inverse of [`DistanceFn::parse`], used in reports.
    pub fn config_name(&self) -> String {
        match self {
            DistanceFn::SqEuclidean => "sq_euclidean".into(),
            DistanceFn::Cosine => "cosine".into(),
            DistanceFn::MahalanobisDiag(w) => format!(
                "mahalanobis_diag:{}",
                w.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            DistanceFn::Bregman(g) => format!("bregman:{}", g.name()),
        }
    }

    /// Whether the divergence is Bregman-representable (prototype-as-mean is
    /// provably optimal). Cosine is not.
    pub fn is_bregman(&self) -> bool {
        !matches!(self, DistanceFn::Cosine)
    }

    pub fn distance(&self, z: &[f64], z_prime: &[f64]) -> Result<f64> {
        if z.len() != z_prime.len() {
            return Err(Error::shape(
                "distance",
                format!("{} vs {}", z.len(), z_prime.len()),
            ));
        }
        match self {
            DistanceFn::SqEuclidean => {
                Ok(z.iter().zip(z_prime).map(|(a, b)| (a - b) * (a - b)).sum())
            }
            DistanceFn::Cosine => {
                let dot: f64 = z.iter().zip(z_prime).map(|(a, b)| a * b).sum();
                let na: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = z_prime.iter().map(|v| v * v).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::DegenerateInput {
                        op: "cosine",
                        detail: "zero vector has no direction".into(),
                    });
                }
                // Clamp similarity against rounding excursions past ±1 so the
                // distance stays in [0, 2].
                Ok(1.0 - (dot / (na * nb)).clamp(-1.0, 1.0))
            }
            DistanceFn::MahalanobisDiag(w) => {
                if w.len() != z.len() {
                    return Err(Error::shape(
                        "mahalanobis_diag",
                        format!("{} weights vs {} dims", w.len(), z.len()),
                    ));
                }
                Ok(z.iter()
                    .zip(z_prime)
                    .zip(w)
                    .map(|((a, b), wi)| wi * (a - b) * (a - b))
                    .sum())
            }
            DistanceFn::Bregman(g) => {
                let grad = g.grad(z_prime)?;
                let cross: f64 = z
                    .iter()
                    .zip(z_prime)
                    .zip(&grad)
                    .map(|((a, b), gv)| (a - b) * gv)
                    .sum();
                Ok(g.phi(z)? - g.phi(z_prime)? - cross)
            }
        }
    }

    /// D[q,k] = distance(queries[q], prototypes[k]).
    pub fn pairwise(&self, queries: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
        let (sq, sp) = (queries.shape(), prototypes.shape());
        if sq.len() != 2 || sp.len() != 2 || sq[1] != sp[1] {
            return Err(Error::shape("pairwise", format!("{:?} vs {:?}", sq, sp)));
        }
        let mut out = Vec::with_capacity(sq[0] * sp[0]);
        for i in 0..sq[0] {
            for j in 0..sp[0] {
                out.push(self.distance(queries.row(i), prototypes.row(j))?);
            }
        }
        Tensor::from_vec(vec![sq[0], sp[0]], out)
    }

    /// Tape-integrated pairwise distances for training. Generic Bregman
    /// divergences are evaluation-only.
    pub fn pairwise_on_tape(&self, tape: &mut Tape, queries: Var, prototypes: Var) -> Result<Var> {
        match self {
            DistanceFn::SqEuclidean => tape.pairwise_sq_euclidean(queries, prototypes),
            DistanceFn::Cosine => tape.pairwise_cosine(queries, prototypes),
            DistanceFn::MahalanobisDiag(w) => {
                tape.pairwise_mahalanobis(queries, prototypes, w.clone())
            }
            DistanceFn::Bregman(g) => Err(Error::Unsupported(format!(
                "bregman:{} is evaluation-only; training requires sq_euclidean, \
                 cosine, or mahalanobis_diag",
                g.name()
            ))),
        }
    }
}

/// Stochastic check of the Bregman mean-minimizer property: does `candidate`
/// achieve total divergence Σᵢ d(pointsᵢ, candidate) no larger than every one
/// of `trials` perturbed candidates within `radius`?
///
/// Perturbation norms are drawn in [radius/4, radius] so no trial degenerates
/// into a numerically invisible step.
pub fn mean_minimizer_check(
    d: &DistanceFn,
    points: &Tensor,
    candidate: &[f64],
    trials: usize,
    radius: f64,
    rng: &mut Rng,
) -> Result<bool> {
    if !d.is_bregman() {
        return Err(Error::Unsupported(
            "mean_minimizer_check requires a Bregman divergence; cosine is not one".into(),
        ));
    }
    let shape = points.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::contract(
            "mean_minimizer_check",
            "points must be a nonempty N x M matrix",
        ));
    }
    let (n, m) = (shape[0], shape[1]);
    if candidate.len() != m {
        return Err(Error::shape(
            "mean_minimizer_check",
            format!("candidate dim {} vs points dim {}", candidate.len(), m),
        ));
    }
    let total = |c: &[f64]| -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..n {
            acc += d.distance(points.row(i), c)?;
        }
        Ok(acc)
    };
    let base = total(candidate)?;
    let mut perturbed = vec![0.0; m];
    for _ in 0..trials {
        let mut norm2 = 0.0;
        for p in perturbed.iter_mut() {
            *p = rng.normal();
            norm2 += *p * *p;
        }
        let scale = radius * rng.uniform(0.25, 1.0) / norm2.sqrt().max(1e-300);
        for (p, &c) in perturbed.iter_mut().zip(candidate) {
            *p = c + *p * scale;
        }
        if total(&perturbed)? < base {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn rand_vec(rng: &mut Rng, m: usize) -> Vec<f64> {
        (0..m).map(|_| rng.normal()).collect()
    }

    #[test]
    fn squared_euclidean_hand_example() {
        let d = DistanceFn::SqEuclidean;
        assert_eq!(d.distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
    }

    #[test]
    fn cosine_hand_examples() {
        let d = DistanceFn::Cosine;
        assert_eq!(d.distance(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), 2.0);
        let z = [0.3, -1.2, 0.07];
        assert!(d.distance(&z, &z).unwrap().abs() < 1e-12);
        assert!(d.distance(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn bregman_sq_norm_equals_squared_euclidean() {
        let breg = DistanceFn::Bregman(Generator::builtin("sq_norm").unwrap());
        let eucl = DistanceFn::SqEuclidean;
        let mut rng = Rng::new(71);
        for _ in 0..1000 {
            let a = rand_vec(&mut rng, 6);
            let b = rand_vec(&mut rng, 6);
            let diff = (breg.distance(&a, &b).unwrap() - eucl.distance(&a, &b).unwrap()).abs();
            assert!(diff < 1e-10, "diff = {diff}");
        }
    }

    #[test]
    fn bregman_weighted_sq_norm_equals_mahalanobis() {
        let w = vec![0.5, 1.0, 2.5, 0.125];
        let wc = w.clone();
        let wg = w.clone();
        let breg = DistanceFn::Bregman(Generator::new(
            "weighted_sq_norm",
            move |z| Ok(z.iter().zip(&wc).map(|(v, wi)| wi * v * v).sum()),
            move |z| Ok(z.iter().zip(&wg).map(|(v, wi)| 2.0 * wi * v).collect()),
        ));
        let mah = DistanceFn::mahalanobis(w).unwrap();
        let mut rng = Rng::new(73);
        for _ in 0..1000 {
            let a = rand_vec(&mut rng, 4);
            let b = rand_vec(&mut rng, 4);
            let diff = (breg.distance(&a, &b).unwrap() - mah.distance(&a, &b).unwrap()).abs();
            assert!(diff < 1e-10, "diff = {diff}");
        }
    }

    #[test]
    fn neg_entropy_is_generalized_kl() {
        let d = DistanceFn::Bregman(Generator::builtin("neg_entropy").unwrap());
        let a: [f64; 3] = [0.2, 0.5, 0.3];
        let b: [f64; 3] = [0.4, 0.4, 0.2];
        let want: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| x * (x / y).ln() - x + y)
            .sum();
        assert!((d.distance(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!(d.distance(&[0.0, 1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn pairwise_matches_per_pair_loop() {
        let mut rng = Rng::new(79);
        let q = Tensor::from_vec(vec![4, 3], rand_vec(&mut rng, 12)).unwrap();
        let p = Tensor::from_vec(vec![5, 3], rand_vec(&mut rng, 15)).unwrap();
        for d in [
            DistanceFn::SqEuclidean,
            DistanceFn::Cosine,
            DistanceFn::mahalanobis(vec![1.0, 0.5, 2.0]).unwrap(),
        ] {
            let got = d.pairwise(&q, &p).unwrap();
            assert_eq!(got.shape(), &[4, 5]);
            for i in 0..4 {
                for j in 0..5 {
                    // independent scalar recomputation
                    let want = match &d {
                        DistanceFn::SqEuclidean => q
                            .row(i)
                            .iter()
                            .zip(p.row(j))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum(),
                        DistanceFn::Cosine => {
                            let dot: f64 = q.row(i).iter().zip(p.row(j)).map(|(a, b)| a * b).sum();
                            let na = q.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                            let nb = p.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
                            1.0 - dot / (na * nb)
                        }
                        DistanceFn::MahalanobisDiag(w) => q
                            .row(i)
                            .iter()
                            .zip(p.row(j))
                            .zip(w)
                            .map(|((a, b), wi)| wi * (a - b) * (a - b))
                            .sum(),
                        _ => unreachable!(),
                    };
                    assert!((got.data()[i * 5 + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pairwise_diagonal_is_zero_when_queries_equal_prototypes() {
        let mut rng = Rng::new(83);
        let q = Tensor::from_vec(vec![3, 4], rand_vec(&mut rng, 12)).unwrap();
        let d = DistanceFn::SqEuclidean.pairwise(&q, &q).unwrap();
        for i in 0..3 {
            assert_eq!(d.data()[i * 3 + i], 0.0);
        }
    }

    #[test]
    fn single_row_pairwise_reduces_to_distance() {
        let q = Tensor::from_vec(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = Tensor::from_vec(vec![1, 3], vec![0.0, 2.0, 5.0]).unwrap();
        let d = DistanceFn::SqEuclidean;
        let pw = d.pairwise(&q, &p).unwrap();
        assert_eq!(pw.data()[0], d.distance(q.row(0), p.row(0)).unwrap());
    }

    #[test]
    fn mean_minimizer_trivial_and_mean_cases() {
        let mut rng = Rng::new(89);
        // Single point, candidate = the point itself.
        let single = Tensor::from_vec(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        assert!(mean_minimizer_check(
            &DistanceFn::SqEuclidean,
            &single,
            &[0.5, -1.0, 2.0],
            100,
            0.5,
            &mut rng
        )
        .unwrap());

        // Ten random points: arithmetic mean survives 500 perturbations.
        let pts = Tensor::from_vec(vec![10, 4], rand_vec(&mut rng, 40)).unwrap();
        let mut mean = vec![0.0; 4];
        for i in 0..10 {
            for j in 0..4 {
                mean[j] += pts.row(i)[j] / 10.0;
            }
        }
        assert!(mean_minimizer_check(
            &DistanceFn::SqEuclidean,
            &pts,
            &mean,
            500,
            0.5,
            &mut rng
        )
        .unwrap());

        // Shifting the candidate off the mean is caught.
        let mut shifted = mean.clone();
        shifted[0] += 1.0;
        assert!(!mean_minimizer_check(
            &DistanceFn::SqEuclidean,
            &pts,
            &shifted,
            500,
            0.5,
            &mut rng
        )
        .unwrap());

        // Mahalanobis shares the property (it is Bregman).
        let mah = DistanceFn::mahalanobis(vec![0.5, 2.0, 1.0, 0.25]).unwrap();
        assert!(mean_minimizer_check(&mah, &pts, &mean, 500, 0.5, &mut rng).unwrap());
    }

    #[test]
    fn mean_minimizer_rejects_cosine() {
        let mut rng = Rng::new(97);
        let pts = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            mean_minimizer_check(&DistanceFn::Cosine, &pts, &[0.5, 0.5], 10, 0.1, &mut rng),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn parse_round_trips_and_rejects_unknown() {
        for name in [
            "sq_euclidean",
            "cosine",
            "mahalanobis_diag:0.5,1,2",
            "bregman:sq_norm",
            "bregman:neg_entropy",
        ] {
            let d = DistanceFn::parse(name).unwrap();
            assert_eq!(d.config_name(), name);
        }
        assert!(DistanceFn::parse("euclidean").is_err());
        assert!(DistanceFn::parse("bregman:unknown").is_err());
        assert!(DistanceFn::parse("mahalanobis_diag:1,-2").is_err());
        assert!(DistanceFn::parse("mahalanobis_diag:abc").is_err());
    }

    proptest! {
        #[test]
        fn nonnegative_and_self_zero(
            a in prop::collection::vec(-100.0f64..100.0, 5),
            b in prop::collection::vec(-100.0f64..100.0, 5),
        ) {
            for d in [
                DistanceFn::SqEuclidean,
                DistanceFn::mahalanobis(vec![0.5, 1.0, 2.0, 0.1, 3.0]).unwrap(),
                DistanceFn::Bregman(Generator::builtin("sq_norm").unwrap()),
            ] {
                prop_assert!(d.distance(&a, &b).unwrap() >= 0.0);
                prop_assert_eq!(d.distance(&a, &a).unwrap(), 0.0);
            }
            let nonzero = a.iter().any(|&v| v != 0.0) && b.iter().any(|&v| v != 0.0);
            if nonzero {
                let d = DistanceFn::Cosine;
                prop_assert!(d.distance(&a, &b).unwrap() >= 0.0);
                prop_assert!(d.distance(&a, &a).unwrap().abs() < 1e-12);
            }
        }

        #[test]
        fn bregman_matches_euclidean_everywhere(
            a in prop::collection::vec(-50.0f64..50.0, 4),
            b in prop::collection::vec(-50.0f64..50.0, 4),
        ) {
            let breg = DistanceFn::Bregman(Generator::builtin("sq_norm").unwrap());
            let diff = (breg.distance(&a, &b).unwrap()
                - DistanceFn::SqEuclidean.distance(&a, &b).unwrap())
                .abs();
            prop_assert!(diff < 1e-10);
        }
    }
}
