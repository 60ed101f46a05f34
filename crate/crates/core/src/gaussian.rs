//! Diagonal Gaussian node embeddings with reparameterized sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{dim_err, Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{elu_plus_one, Scalar};
use crate::tape::{Tape, Var};

/// Guard added to `|μ_i|` in [`uncertainty_score`].
pub const UNCERTAINTY_EPS: f64 = 1e-12;

/// `ELU(σ) + 1`: `σ + 1` for `σ ≥ 0`, `exp(σ)` below. Always positive.
pub fn transform_variance<T: Scalar>(raw: T) -> T {
    elu_plus_one(raw)
}

/// Per-node mean and unconstrained raw variance, both `rows x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEmbeddingTable<T> {
    pub means: Matrix<T>,
    pub raw_variances: Matrix<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec {
    pub mean_scale: f64,
    pub raw_var_init: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            mean_scale: 0.1,
            raw_var_init: -2.0,
        }
    }
}

impl<T: Scalar> GaussianEmbeddingTable<T> {
    pub fn new(means: Matrix<T>, raw_variances: Matrix<T>) -> Result<Self> {
        if means.shape() != raw_variances.shape() {
            return Err(dim_err(
                format!("{:?}", means.shape()),
                format!("{:?}", raw_variances.shape()),
            ));
        }
        Ok(Self {
            means,
            raw_variances,
        })
    }

    pub fn rows(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// Transformed variances `σ′`.
    pub fn variances(&self) -> Matrix<T> {
        self.raw_variances.map(transform_variance)
    }
}

/// `μ ~ N(0, mean_scale²)` entrywise and `σ_raw = raw_var_init`.
pub fn init_table<T: Scalar>(
    rows: usize,
    dim: usize,
    init: InitSpec,
    seed: u64,
) -> Result<GaussianEmbeddingTable<T>> {
    if rows == 0 || dim == 0 {
        return Err(Error::InvalidSpec(format!(
            "embedding table needs positive shape, got {rows}x{dim}"
        )));
    }
    if !(init.mean_scale >= 0.0 && init.mean_scale.is_finite() && init.raw_var_init.is_finite()) {
        return Err(Error::InvalidSpec(format!("bad init {init:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, init.mean_scale).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let means = Matrix::from_fn(rows, dim, |_, _| T::lit(normal.sample(&mut rng)));
    let raw = Matrix::filled(rows, dim, T::lit(init.raw_var_init));
    GaussianEmbeddingTable::new(means, raw)
}

/// Standard-normal noise, regenerable from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<T> {
    pub eps: Matrix<T>,
    pub seed: Option<u64>,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn generate(rows: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = Matrix::from_fn(rows, dim, |_, _| {
            let x: f64 = StandardNormal.sample(&mut rng);
            T::lit(x)
        });
        Self {
            eps,
            seed: Some(seed),
        }
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            eps: Matrix::zeros(rows, dim),
            seed: None,
        }
    }
}

/// `e = μ + sqrt(σ′) ⊙ ε`.
pub fn sample<T: Scalar>(table: &GaussianEmbeddingTable<T>, noise: &NoiseDraw<T>) -> Result<Matrix<T>> {
    if noise.eps.shape() != table.means.shape() {
        return Err(dim_err(
            format!("{:?}", table.means.shape()),
            format!("{:?}", noise.eps.shape()),
        ));
    }
    let mut out = table.means.clone();
    for ((o, &r), &e) in out
        .data_mut()
        .iter_mut()
        .zip(table.raw_variances.data())
        .zip(noise.eps.data())
    {
        *o += transform_variance(r).sqrt() * e;
    }
    Ok(out)
}

/// Records the reparameterized sample on a tape with `ε` held constant.
/// When `noise` is `None` the sample is the mean itself.
pub fn sample_on<T: Scalar>(
    tape: &mut Tape<T>,
    means: Var,
    raw_variances: Var,
    noise: Option<&NoiseDraw<T>>,
) -> Result<Var> {
    let Some(noise) = noise else { return Ok(means) };
    let var = tape.elu_plus_one(raw_variances);
    let std = tape.sqrt(var);
    let eps = tape.constant(noise.eps.clone());
    let scaled = tape.mul(std, eps)?;
    tape.add(means, scaled)
}

/// `Σ_i sqrt(σ′_i) / (|μ_i| + 1e-12)` for one node.
pub fn uncertainty_score<T: Scalar>(table: &GaussianEmbeddingTable<T>, node: usize) -> T {
    let guard = T::lit(UNCERTAINTY_EPS);
    table
        .means
        .row(node)
        .iter()
        .zip(table.raw_variances.row(node))
        .map(|(&m, &r)| transform_variance(r).sqrt() / (m.abs() + guard))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn elu_transform_values() {
        assert_eq!(transform_variance(0.0), 1.0);
        assert_eq!(transform_variance(2.0), 3.0);
        assert!((transform_variance(-20.0f64) - 2.061_153_622_438_558e-9).abs() < 1e-20);
    }

    #[test]
    fn reparameterized_sample() {
        let raw = m(&[vec![3.0, 8.0]]); // σ′ = (4, 9)
        let t = GaussianEmbeddingTable::new(m(&[vec![1.0, 1.0]]), raw).unwrap();
        let noise = NoiseDraw {
            eps: m(&[vec![1.0, -1.0]]),
            seed: None,
        };
        assert_eq!(sample(&t, &noise).unwrap().row(0), &[3.0, -2.0]);
        assert_eq!(sample(&t, &NoiseDraw::zeros(1, 2)).unwrap(), t.means);
        assert!(sample(&t, &NoiseDraw::zeros(2, 2)).is_err());
    }

    #[test]
    fn uncertainty_values() {
        let t = GaussianEmbeddingTable::new(m(&[vec![1.0, 1.0]]), m(&[vec![0.0, 3.0]])).unwrap();
        assert!((uncertainty_score(&t, 0) - 3.0).abs() < 1e-9);
        let t = GaussianEmbeddingTable::new(m(&[vec![0.0, 1.0]]), m(&[vec![0.0, 0.0]])).unwrap();
        let s = uncertainty_score(&t, 0);
        assert!((s - (1e12 + 1.0)).abs() / 1e12 < 1e-9);
        let t = GaussianEmbeddingTable::new(m(&[vec![0.5, -2.0]]), m(&[vec![-200.0, -200.0]])).unwrap();
        assert!(uncertainty_score(&t, 0) < 1e-40);
        assert!(transform_variance(-1e6f64) > 0.0);
    }

    #[test]
    fn init_contract() {
        let a: GaussianEmbeddingTable<f64> = init_table(4, 3, InitSpec::default(), 11).unwrap();
        let b: GaussianEmbeddingTable<f64> = init_table(4, 3, InitSpec::default(), 11).unwrap();
        assert_eq!(a, b);
        let expect = (-2.0f64).exp();
        assert!(a.variances().data().iter().all(|&v| (v - expect).abs() < 1e-15));
        let z: GaussianEmbeddingTable<f64> = init_table(
            2,
            2,
            InitSpec {
                mean_scale: 0.0,
                raw_var_init: -2.0,
            },
            1,
        )
        .unwrap();
        assert!(z.means.data().iter().all(|&x| x == 0.0));
        assert!(init_table::<f64>(0, 2, InitSpec::default(), 0).is_err());
    }

    #[test]
    fn noise_regenerates_from_seed() {
        let a = NoiseDraw::<f64>::generate(3, 4, 77);
        let b = NoiseDraw::<f64>::generate(3, 4, a.seed.unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn sample_gradient_matches_closed_form_and_fd() {
        let mu = m(&[vec![0.3, -0.2, 1.0]]);
        let raw = m(&[vec![-1.5, 0.7, -0.1]]);
        let noise = NoiseDraw {
            eps: m(&[vec![0.8, -1.3, 2.0]]),
            seed: None,
        };
        let mut tape = Tape::new();
        let mv = tape.leaf(mu.clone());
        let rv = tape.leaf(raw.clone());
        let e = sample_on(&mut tape, mv, rv, Some(&noise)).unwrap();
        let s = tape.sum(e);
        let g = tape.backward(s).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            assert_eq!(g.wrt(mv).get(0, j), 1.0);
            let r = raw.get(0, j);
            let d_elu = if r >= 0.0 { 1.0 } else { r.exp() };
            let closed = noise.eps.get(0, j) * d_elu / (2.0 * transform_variance(r).sqrt());
            let f = |x: f64| mu.get(0, j) + transform_variance(x).sqrt() * noise.eps.get(0, j);
            let fd = (f(r + h) - f(r - h)) / (2.0 * h);
            let an = g.wrt(rv).get(0, j);
            assert!((an - closed).abs() <= 1e-12 * closed.abs().max(1.0));
            assert!((an - fd).abs() / an.abs() < 1e-6, "{an} vs {fd}");
        }
    }

    proptest! {
        #[test]
        fn transformed_variance_positive(x in prop_oneof![-1e6f64..1e6, -50.0f64..50.0, Just(-1e6), Just(1e6)]) {
            let v = transform_variance(x);
            prop_assert!(v > 0.0 && v.is_finite());
            prop_assert!(transform_variance(x as f32) > 0.0);
        }
    }
}
