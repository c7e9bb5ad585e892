//! Synthetic fleets drawn from multivariate normal parameter, regressor and
//! noise distributions.
//!
//! Random numbers come from ChaCha20 (`rand_chacha::ChaCha20Rng`, seeded with
//! `seed_from_u64`) and standard normals from the ziggurat sampler in
//! `rand_distr::StandardNormal`. Draw order is fixed: systems in index
//! order; per system the parameter vector first, then all regressor rows in
//! observation order, then all noise terms.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FleetError, Result};
use crate::linalg;
use crate::model::{FleetDataset, GroundTruth, SystemDataset};

/// Name of the generator recorded in dataset headers.
pub const RNG_NAME: &str = "chacha20/rand_chacha-0.9/ziggurat-normal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub systems: usize,
    pub observations: usize,
    pub dim: usize,
    pub noise_variance: f64,
    pub nominal_mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub nominal_cov: Vec<Vec<f64>>,
    pub anomal_mean: Vec<f64>,
    pub anomal_cov: Vec<Vec<f64>>,
    pub regressor_mean: Vec<f64>,
    pub regressor_cov: Vec<Vec<f64>>,
    /// One-based system tags of the anomalous systems.
    pub anomaly_tags: Vec<usize>,
    pub seed: u64,
}

const NOMINAL_COV: [[f64; 4]; 4] = [
    [0.04, 0.12, -0.02, 0.02],
    [0.12, 0.84, -0.09, 0.1],
    [-0.02, -0.09, 0.03, 0.0],
    [0.02, 0.1, 0.0, 0.05],
];

const REGRESSOR_COV: [[f64; 4]; 4] = [
    [0.25, -0.02, 0.12, -0.04],
    [-0.02, 0.45, 0.03, -0.52],
    [0.12, 0.03, 1.05, -1.26],
    [-0.04, -0.52, -1.26, 3.89],
];

fn rows(a: &[[f64; 4]; 4]) -> Vec<Vec<f64>> {
    a.iter().map(|r| r.to_vec()).collect()
}

/// The aircraft-fleet experiment: 200 systems, 500 observations, four
/// parameters, three anomalies.
pub fn default_paper_config() -> GenConfig {
    GenConfig {
        systems: 200,
        observations: 500,
        dim: 4,
        noise_variance: 0.83,
        nominal_mean: vec![0.8, -2.7, -0.63, 0.46],
        nominal_cov: rows(&NOMINAL_COV),
        anomal_mean: vec![3.5, -0.1, -3.0, 0.001],
        anomal_cov: rows(&NOMINAL_COV),
        regressor_mean: vec![0.95, -1.22, -2.79, 7.11],
        regressor_cov: rows(&REGRESSOR_COV),
        anomaly_tags: vec![27, 161, 183],
        seed: 0,
    }
}

impl GenConfig {
    /// A fleet with no nominal spread: normal systems share `nominal`,
    /// anomalies sit at `nominal + offset`, regressors are standard normal.
    pub fn planted(
        systems: usize,
        observations: usize,
        nominal: Vec<f64>,
        offset: Vec<f64>,
        anomaly_tags: Vec<usize>,
        noise_variance: f64,
        seed: u64,
    ) -> Self {
        let dim = nominal.len();
        let zero = vec![vec![0.0; dim]; dim];
        let eye = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let anomal_mean = nominal.iter().zip(&offset).map(|(a, b)| a + b).collect();
        Self {
            systems,
            observations,
            dim,
            noise_variance,
            nominal_mean: nominal,
            nominal_cov: zero.clone(),
            anomal_mean,
            anomal_cov: zero,
            regressor_mean: vec![0.0; dim],
            regressor_cov: eye,
            anomaly_tags,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.dim;
        if self.systems == 0 || self.observations == 0 || m == 0 {
            return Err(FleetError::domain("systems, observations and dim must be positive"));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(FleetError::domain("noise variance must be finite and nonnegative"));
        }
        for (name, v) in [
            ("nominal_mean", &self.nominal_mean),
            ("anomal_mean", &self.anomal_mean),
            ("regressor_mean", &self.regressor_mean),
        ] {
            if v.len() != m || v.iter().any(|x| !x.is_finite()) {
                return Err(FleetError::domain(format!("{name} must have {m} finite entries")));
            }
        }
        for (name, c) in [
            ("nominal_cov", &self.nominal_cov),
            ("anomal_cov", &self.anomal_cov),
            ("regressor_cov", &self.regressor_cov),
        ] {
            if c.len() != m || c.iter().any(|r| r.len() != m) {
                return Err(FleetError::domain(format!("{name} must be {m}x{m}")));
            }
        }
        let mut tags = self.anomaly_tags.clone();
        tags.sort_unstable();
        tags.dedup();
        if tags.len() != self.anomaly_tags.len()
            || tags.iter().any(|&t| t == 0 || t > self.systems)
        {
            return Err(FleetError::domain(format!(
                "anomaly tags must be distinct and within 1..={}",
                self.systems
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let m = rows.len();
    DMatrix::from_fn(m, m, |i, j| rows[i][j])
}

/// A multivariate normal with a precomputed lower Cholesky-type factor.
#[derive(Debug, Clone)]
pub struct Mvn {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl Mvn {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>, name: &str) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(FleetError::domain(format!("{name} does not match its mean")));
        }
        let factor = linalg::psd_cholesky(cov, name)?;
        Ok(Self { mean, factor })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_iterator(
            self.mean.len(),
            (0..self.mean.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        &self.mean + &self.factor * z
    }
}

/// One draw of `mean + L z`, `L` the lower factor of `cov`.
pub fn mvn_sample<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    Ok(Mvn::new(mean.clone(), cov, "covariance")?.sample(rng))
}

pub fn rng_from_seed(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn generate_fleet(config: &GenConfig) -> Result<FleetDataset> {
    config.validate()?;
    let m = config.dim;
    let nominal = Mvn::new(
        DVector::from_column_slice(&config.nominal_mean),
        &matrix(&config.nominal_cov),
        "nominal_cov",
    )?;
    let anomal = Mvn::new(
        DVector::from_column_slice(&config.anomal_mean),
        &matrix(&config.anomal_cov),
        "anomal_cov",
    )?;
    let regressor = Mvn::new(
        DVector::from_column_slice(&config.regressor_mean),
        &matrix(&config.regressor_cov),
        "regressor_cov",
    )?;
    let noise_sd = config.noise_variance.sqrt();
    let anomalies: Vec<usize> = {
        let mut a: Vec<usize> = config.anomaly_tags.iter().map(|t| t - 1).collect();
        a.sort_unstable();
        a
    };

    let mut rng = rng_from_seed(config.seed);
    let mut systems = Vec::with_capacity(config.systems);
    let mut parameters = Vec::with_capacity(config.systems);
    for i in 0..config.systems {
        let dist = if anomalies.binary_search(&i).is_ok() {
            &anomal
        } else {
            &nominal
        };
        let theta = dist.sample(&mut rng);
        let mut phi = DMatrix::zeros(config.observations, m);
        for t in 0..config.observations {
            let row = regressor.sample(&mut rng);
            phi.row_mut(t).copy_from(&row.transpose());
        }
        let noise = DVector::from_iterator(
            config.observations,
            (0..config.observations).map(|_| noise_sd * rng.sample::<f64, _>(StandardNormal)),
        );
        let y = &phi * &theta + noise;
        systems.push(SystemDataset::new(phi, y)?);
        parameters.push(theta.iter().cloned().collect());
    }
    FleetDataset::new(
        systems,
        Some(GroundTruth {
            parameters,
            anomalies,
            noise_variance: config.noise_variance,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::least_squares;

    #[test]
    fn aircraft_constants() {
        let c = default_paper_config();
        assert_eq!((c.systems, c.observations, c.dim), (200, 500, 4));
        assert_eq!(c.noise_variance, 0.83);
        assert_eq!(c.anomaly_tags, vec![27, 161, 183]);
        assert_eq!(c.anomal_cov, c.nominal_cov);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn zero_covariance_sample_is_the_mean() {
        let mean = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let mut rng = rng_from_seed(3);
        let s = mvn_sample(&mean, &DMatrix::zeros(3, 3), &mut rng).unwrap();
        assert_eq!(s, mean);
    }

    #[test]
    fn identity_cov_sample_mean_within_clt_band() {
        let mut rng = rng_from_seed(11);
        let mvn = Mvn::new(DVector::zeros(2), &DMatrix::identity(2, 2), "id").unwrap();
        let n = 100_000;
        let mut acc = DVector::zeros(2);
        for _ in 0..n {
            acc += mvn.sample(&mut rng);
        }
        acc /= n as f64;
        assert!(acc.amax() < 0.02, "{acc}");
    }

    #[test]
    fn diagonal_cov_sample_variances() {
        let mut rng = rng_from_seed(12);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let mvn = Mvn::new(DVector::zeros(2), &cov, "diag").unwrap();
        let n = 100_000;
        let draws: Vec<DVector<f64>> = (0..n).map(|_| mvn.sample(&mut rng)).collect();
        for (k, target) in [4.0, 9.0].into_iter().enumerate() {
            let mean = draws.iter().map(|d| d[k]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((var / target - 1.0).abs() < 0.05, "var {var} target {target}");
        }
    }

    #[test]
    fn non_psd_covariance_names_the_matrix() {
        let mut c = default_paper_config();
        c.systems = 3;
        c.anomaly_tags = vec![1];
        c.regressor_cov[0][0] = -1.0;
        let err = generate_fleet(&c).unwrap_err().to_string();
        assert!(err.contains("regressor_cov"), "{err}");
    }

    #[test]
    fn noise_free_generation_recovers_nominal() {
        let c = GenConfig::planted(5, 12, vec![0.5, -1.0, 2.0], vec![0.0; 3], vec![], 0.0, 9);
        let fleet = generate_fleet(&c).unwrap();
        for s in fleet.systems() {
            let theta = least_squares(std::slice::from_ref(s)).unwrap();
            for (a, b) in theta.iter().zip(&c.nominal_mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truth_marks_anomalies() {
        let c = GenConfig::planted(6, 10, vec![0.0, 0.0], vec![5.0, -5.0], vec![2, 6], 0.1, 1);
        let fleet = generate_fleet(&c).unwrap();
        let truth = fleet.truth().unwrap();
        assert_eq!(truth.anomalies, vec![1, 5]);
        assert_eq!(truth.tags(), vec![2, 6]);
        for (i, p) in truth.parameters.iter().enumerate() {
            let expect = if truth.anomalies.contains(&i) { [5.0, -5.0] } else { [0.0, 0.0] };
            assert_eq!(p.as_slice(), &expect);
        }
    }

    #[test]
    fn bad_tags_rejected() {
        let c = GenConfig::planted(3, 4, vec![0.0], vec![1.0], vec![4], 0.1, 1);
        assert!(c.validate().is_err());
        let c = GenConfig::planted(3, 4, vec![0.0], vec![1.0], vec![0], 0.1, 1);
        assert!(c.validate().is_err());
    }
}
