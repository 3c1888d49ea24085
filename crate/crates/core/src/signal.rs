//! Sparse sources, the DCT measurement operator, paired datasets and the
//! NMSE / rate metrics every method is scored with.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binfmt;
use crate::error::{config, shape, Error, Result};
use crate::rng::{substream, StreamRng};

/// NMSE reported for an exact reconstruction, where the true value is -inf.
pub const PERFECT_NMSE_DB: f64 = -1e9;

const DATASET_MAGIC: &[u8; 8] = b"QCSDATA\0";
const DATASET_VERSION: u64 = 1;

/// `y = phi x + n` with a fixed, column-normalized partial DCT.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub phi: DMatrix<f64>,
    pub noise_variance: f64,
    pub n_dim: usize,
    pub m_dim: usize,
}

impl MeasurementModel {
    pub fn dct(n_dim: usize, m_dim: usize, noise_variance: f64) -> Result<Self> {
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return config(format!(
                "noise variance must be finite and >= 0, got {noise_variance}"
            ));
        }
        Ok(Self {
            phi: make_measurement_matrix(n_dim, m_dim)?,
            noise_variance,
            n_dim,
            m_dim,
        })
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_variance.sqrt()
    }
}

/// First `m_dim` rows of the orthonormal `n_dim`-point DCT-II, with every
/// column rescaled to unit Euclidean norm.
pub fn make_measurement_matrix(n_dim: usize, m_dim: usize) -> Result<DMatrix<f64>> {
    if m_dim == 0 || m_dim > n_dim {
        return config(format!("need 1 <= M <= N, got N={n_dim}, M={m_dim}"));
    }
    let n = n_dim as f64;
    let mut phi = DMatrix::from_fn(m_dim, n_dim, |k, j| {
        let scale = if k == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        };
        scale * (std::f64::consts::PI * (2 * j + 1) as f64 * k as f64 / (2.0 * n)).cos()
    });
    for mut col in phi.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    Ok(phi)
}

/// Distribution of S-sparse sources with i.i.d. N(0, 1) nonzeros.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseSourceSpec {
    pub n_dim: usize,
    pub sparsity: usize,
    /// When false the support size is drawn uniformly from `0..=sparsity`.
    pub exact_sparsity: bool,
}

impl SparseSourceSpec {
    pub fn new(n_dim: usize, sparsity: usize) -> Self {
        Self {
            n_dim,
            sparsity,
            exact_sparsity: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_dim == 0 {
            return config("source dimension must be positive");
        }
        if self.sparsity > self.n_dim {
            return config(format!(
                "sparsity {} exceeds dimension {}",
                self.sparsity, self.n_dim
            ));
        }
        Ok(())
    }
}

pub fn sample_source<R: Rng + ?Sized>(
    spec: &SparseSourceSpec,
    rng: &mut R,
) -> Result<DVector<f64>> {
    spec.validate()?;
    let count = if spec.exact_sparsity {
        spec.sparsity
    } else {
        rng.random_range(0..=spec.sparsity)
    };
    let mut x = DVector::zeros(spec.n_dim);
    for j in rand::seq::index::sample(rng, spec.n_dim, count) {
        x[j] = rng.sample(StandardNormal);
    }
    Ok(x)
}

/// Paired sources (columns of an N x count matrix) and measurements (M x count).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sources: DMatrix<f64>,
    pub measurements: DMatrix<f64>,
    pub sparsity: usize,
    pub noise_variance: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sources.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_dim(&self) -> usize {
        self.sources.nrows()
    }

    pub fn m_dim(&self) -> usize {
        self.measurements.nrows()
    }

    pub fn source(&self, k: usize) -> DVectorView<'_, f64> {
        self.sources.column(k)
    }

    pub fn measurement(&self, k: usize) -> DVectorView<'_, f64> {
        self.measurements.column(k)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Header of 8-byte little-endian fields (magic, version, N, M, S,
    /// noise variance, count, seed), then sources and measurements, one
    /// sample per row.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binfmt::write_magic(w, DATASET_MAGIC)?;
        binfmt::write_u64(w, DATASET_VERSION)?;
        binfmt::write_u64(w, self.n_dim() as u64)?;
        binfmt::write_u64(w, self.m_dim() as u64)?;
        binfmt::write_u64(w, self.sparsity as u64)?;
        binfmt::write_f64(w, self.noise_variance)?;
        binfmt::write_u64(w, self.len() as u64)?;
        binfmt::write_u64(w, self.seed)?;
        // Column-major storage with one sample per column is exactly the
        // row-major sample-per-row layout.
        binfmt::write_f64s(w, self.sources.iter().copied())?;
        binfmt::write_f64s(w, self.measurements.iter().copied())?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binfmt::read_magic(r, DATASET_MAGIC)?;
        let version = binfmt::read_u64(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let n = binfmt::read_usize(r, "N")?;
        let m = binfmt::read_usize(r, "M")?;
        let sparsity = binfmt::read_usize(r, "S")?;
        let noise_variance = binfmt::read_f64(r)?;
        let count = binfmt::read_usize(r, "count")?;
        let seed = binfmt::read_u64(r)?;
        let sources = DMatrix::from_vec(n, count, binfmt::read_f64s(r, n * count)?);
        let measurements = DMatrix::from_vec(m, count, binfmt::read_f64s(r, m * count)?);
        Ok(Self {
            sources,
            measurements,
            sparsity,
            noise_variance,
            seed,
        })
    }

    /// Plain CSV export: one row per sample, `x_1..x_N, y_1..y_M`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = (1..=self.n_dim())
            .map(|j| format!("x{j}"))
            .chain((1..=self.m_dim()).map(|i| format!("y{i}")))
            .collect();
        w.write_record(&header)?;
        for k in 0..self.len() {
            let row: Vec<String> = self
                .source(k)
                .iter()
                .chain(self.measurement(k).iter())
                .map(|v| format!("{v:e}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws one (x, y) pair from the substream dedicated to sample `index`.
fn sample_pair(
    model: &MeasurementModel,
    spec: &SparseSourceSpec,
    rng: &mut StreamRng,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let x = sample_source(spec, rng)?;
    let mut y = &model.phi * &x;
    let std = model.noise_std();
    if std > 0.0 {
        for v in y.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
    Ok((x, y))
}

/// Draws `count` samples; sample `k` uses substream `k` of `seed`.
pub fn sample_dataset(
    model: &MeasurementModel,
    spec: &SparseSourceSpec,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return config("dataset count must be at least 1");
    }
    if spec.n_dim != model.n_dim {
        return shape(format!(
            "source dimension {} != model N {}",
            spec.n_dim, model.n_dim
        ));
    }
    let mut sources = DMatrix::zeros(model.n_dim, count);
    let mut measurements = DMatrix::zeros(model.m_dim, count);
    for k in 0..count {
        let mut rng = substream(seed, k as u64);
        let (x, y) = sample_pair(model, spec, &mut rng)?;
        sources.set_column(k, &x);
        measurements.set_column(k, &y);
    }
    Ok(Dataset {
        sources,
        measurements,
        sparsity: spec.sparsity,
        noise_variance: model.noise_variance,
        seed,
    })
}

/// Streaming accumulator for `sum ||x - x_hat||^2` and `sum ||x||^2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct NmseAccumulator {
    pub error_energy: f64,
    pub signal_energy: f64,
    pub count: usize,
}

impl NmseAccumulator {
    pub fn add(&mut self, estimate: DVectorView<'_, f64>, truth: DVectorView<'_, f64>) {
        self.error_energy += (estimate - truth).norm_squared();
        self.signal_energy += truth.norm_squared();
        self.count += 1;
    }

    pub fn mse(&self) -> f64 {
        self.error_energy / self.count.max(1) as f64
    }

    pub fn nmse_db(&self) -> Result<f64> {
        ratio_db(self.error_energy, self.signal_energy)
    }
}

fn ratio_db(error_energy: f64, signal_energy: f64) -> Result<f64> {
    if signal_energy <= 0.0 {
        return Err(Error::Undefined(
            "NMSE needs at least one nonzero truth vector".into(),
        ));
    }
    if error_energy == 0.0 {
        return Ok(PERFECT_NMSE_DB);
    }
    Ok(10.0 * (error_energy / signal_energy).log10())
}

/// `10 log10( sum ||x - x_hat||^2 / sum ||x||^2 )` over paired columns.
pub fn nmse_db(estimates: &DMatrix<f64>, truths: &DMatrix<f64>) -> Result<f64> {
    if estimates.shape() != truths.shape() {
        return shape(format!(
            "estimates {:?} vs truths {:?}",
            estimates.shape(),
            truths.shape()
        ));
    }
    if truths.ncols() == 0 {
        return config("NMSE over an empty set");
    }
    ratio_db((estimates - truths).norm_squared(), truths.norm_squared())
}

/// `ceil(log2(levels))`, i.e. bits per index with fixed-length coding.
pub fn bits_per_index(levels: usize) -> u32 {
    if levels <= 1 {
        0
    } else {
        usize::BITS - (levels - 1).leading_zeros()
    }
}

/// Bits per source entry when `k_width` indices of `levels` levels are
/// coded independently: `K ceil(log2 I) / N`.
pub fn rate_bits(k_width: usize, levels: usize, n_dim: usize) -> f64 {
    (k_width as f64 * bits_per_index(levels) as f64) / n_dim as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// DCT-II entry with the row weights of the orthonormal transform up to a
    /// common factor, normalized column-wise afterwards.
    fn dct_oracle(n: usize, m: usize) -> Vec<Vec<f64>> {
        let mut rows = vec![vec![0.0; n]; m];
        for (k, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let alpha = if k == 0 { 1.0 } else { 2f64.sqrt() };
                *v = alpha * (std::f64::consts::PI / n as f64 * (j as f64 + 0.5) * k as f64).cos();
            }
        }
        for j in 0..n {
            let norm = (0..m).map(|k| rows[k][j] * rows[k][j]).sum::<f64>().sqrt();
            for row in rows.iter_mut() {
                row[j] /= norm;
            }
        }
        rows
    }

    #[test]
    fn measurement_matrix_columns_unit_norm() {
        let phi = make_measurement_matrix(20, 10).unwrap();
        assert_eq!(phi.shape(), (10, 20));
        for col in phi.column_iter() {
            assert!((col.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_dct_is_orthonormal() {
        let phi = make_measurement_matrix(4, 4).unwrap();
        let gram = &phi * phi.transpose();
        assert!((gram - DMatrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn partial_dct_matches_elementwise_oracle() {
        let phi = make_measurement_matrix(4, 2).unwrap();
        let oracle = dct_oracle(4, 2);
        for k in 0..2 {
            for j in 0..4 {
                assert!((phi[(k, j)] - oracle[k][j]).abs() < 1e-14, "({k},{j})");
            }
        }
    }

    #[test]
    fn bad_dimensions_rejected() {
        assert!(matches!(
            make_measurement_matrix(4, 5),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_measurement_matrix(4, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_sparsity_gives_zero_vector() {
        let mut rng = substream(1, 0);
        let x = sample_source(&SparseSourceSpec::new(20, 0), &mut rng).unwrap();
        assert_eq!(x, DVector::zeros(20));
    }

    #[test]
    fn exact_support_size() {
        let mut rng = substream(2, 0);
        for _ in 0..100 {
            let x = sample_source(&SparseSourceSpec::new(20, 2), &mut rng).unwrap();
            assert_eq!(x.iter().filter(|v| **v != 0.0).count(), 2);
        }
    }

    #[test]
    fn oversparse_spec_rejected() {
        let mut rng = substream(2, 0);
        assert!(matches!(
            sample_source(&SparseSourceSpec::new(3, 4), &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn at_most_s_mode_never_exceeds_s() {
        let mut rng = substream(3, 0);
        let spec = SparseSourceSpec {
            exact_sparsity: false,
            ..SparseSourceSpec::new(10, 3)
        };
        let mut seen = [false; 4];
        for _ in 0..500 {
            let x = sample_source(&spec, &mut rng).unwrap();
            let nnz = x.iter().filter(|v| **v != 0.0).count();
            assert!(nnz <= 3);
            seen[nnz] = true;
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn nonzero_values_have_unit_variance() {
        let spec = SparseSourceSpec::new(20, 2);
        let mut rng = substream(11, 0);
        let (mut sum, mut sum_sq, mut n) = (0.0, 0.0, 0.0);
        for _ in 0..100_000 {
            let x = sample_source(&spec, &mut rng).unwrap();
            for v in x.iter().filter(|v| **v != 0.0) {
                sum += v;
                sum_sq += v * v;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let var = sum_sq / n - mean * mean;
        assert!((0.97..=1.03).contains(&var), "variance {var}");
    }

    #[test]
    fn singleton_supports_are_uniform() {
        let spec = SparseSourceSpec::new(7, 1);
        let mut rng = substream(12, 0);
        let draws = 100_000;
        let mut counts = [0usize; 7];
        for _ in 0..draws {
            let x = sample_source(&spec, &mut rng).unwrap();
            counts[x.iter().position(|v| *v != 0.0).unwrap()] += 1;
        }
        let p = 1.0 / 7.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - draws as f64 * p).abs() < 5.0 * sigma,
                "{counts:?}"
            );
        }
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let model = MeasurementModel::dct(20, 10, 0.0).unwrap();
        let data = sample_dataset(&model, &SparseSourceSpec::new(20, 2), 1, 5).unwrap();
        assert_eq!(
            data.measurement(0).into_owned(),
            &model.phi * data.source(0)
        );
    }

    #[test]
    fn same_seed_same_bits() {
        let model = MeasurementModel::dct(20, 10, 1e-4).unwrap();
        let spec = SparseSourceSpec::new(20, 2);
        let a = sample_dataset(&model, &spec, 50, 99).unwrap();
        let b = sample_dataset(&model, &spec, 50, 99).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let c = sample_dataset(&model, &spec, 50, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn samples_do_not_depend_on_count() {
        let model = MeasurementModel::dct(10, 5, 1e-2).unwrap();
        let spec = SparseSourceSpec::new(10, 2);
        let short = sample_dataset(&model, &spec, 3, 4).unwrap();
        let long = sample_dataset(&model, &spec, 10, 4).unwrap();
        assert_eq!(short.sources, long.sources.columns(0, 3).into_owned());
    }

    #[test]
    fn measurement_noise_has_configured_variance() {
        let model = MeasurementModel::dct(20, 10, 1e-4).unwrap();
        let data = sample_dataset(&model, &SparseSourceSpec::new(20, 2), 100_000, 8).unwrap();
        let noise = &data.measurements - &model.phi * &data.sources;
        let var = noise.norm_squared() / noise.len() as f64;
        assert!((0.9e-4..=1.1e-4).contains(&var), "variance {var}");
    }

    #[test]
    fn dataset_file_roundtrip() {
        let model = MeasurementModel::dct(8, 4, 1e-3).unwrap();
        let data = sample_dataset(&model, &SparseSourceSpec::new(8, 2), 17, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        data.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), data);
        let mut bytes = Vec::new();
        data.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 8 * 8 + 8 * 17 * (8 + 4));
        // first source value sits right after the header
        assert_eq!(
            f64::from_le_bytes(bytes[64..72].try_into().unwrap()),
            data.sources[(0, 0)]
        );
    }

    #[test]
    fn corrupt_magic_rejected() {
        let bytes = [0u8; 80];
        assert!(matches!(
            Dataset::read_from(&mut &bytes[..]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn nmse_examples() {
        let truth = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(nmse_db(&truth, &truth).unwrap(), PERFECT_NMSE_DB);
        assert_eq!(nmse_db(&DMatrix::zeros(2, 1), &truth).unwrap(), 0.0);
        let est = DMatrix::from_column_slice(2, 1, &[0.9, 0.0]);
        assert!((nmse_db(&est, &truth).unwrap() + 20.0).abs() < 1e-9);
        assert!(matches!(
            nmse_db(&truth, &DMatrix::zeros(2, 1)),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn accumulator_matches_batch() {
        let model = MeasurementModel::dct(8, 4, 1e-3).unwrap();
        let data = sample_dataset(&model, &SparseSourceSpec::new(8, 2), 20, 3).unwrap();
        let est = data.sources.map(|v| 0.8 * v + 0.01);
        let mut acc = NmseAccumulator::default();
        for k in 0..data.len() {
            acc.add(est.column(k), data.source(k));
        }
        let a = acc.nmse_db().unwrap();
        let b = nmse_db(&est, &data.sources).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rate_examples() {
        assert_eq!(rate_bits(10, 2, 20), 0.5);
        assert_eq!(rate_bits(10, 3, 20), 1.0);
        assert_eq!(rate_bits(15, 4, 30), 1.0);
        assert_eq!(rate_bits(10, 1, 20), 0.0);
        assert_eq!(bits_per_index(32), 5);
        assert_eq!(bits_per_index(33), 6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn columns_normalized_for_any_shape(n in 1usize..=256, frac in 0.0f64..1.0) {
            let m = 1 + ((n - 1) as f64 * frac) as usize;
            let phi = make_measurement_matrix(n, m).unwrap();
            for col in phi.column_iter() {
                prop_assert!((col.norm() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn nmse_is_scale_invariant(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0],
        ) {
            let truth = DMatrix::from_column_slice(3, 2, &vals[..6]);
            let est = DMatrix::from_column_slice(3, 2, &vals[6..]);
            prop_assume!(truth.norm_squared() > 1e-6 && (&est - &truth).norm_squared() > 1e-9);
            let a = nmse_db(&est, &truth).unwrap();
            let b = nmse_db(&(est * c), &(truth * c)).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
