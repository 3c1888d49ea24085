//! Hard scalar quantizers with right-closed regions, uniform and Lloyd-Max
//! scalar design, and Lloyd (k-means) vector quantizers.
//!
//! Scalar indices are 1-based (`1..=I`); vector codebook indices are 0-based.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;

use crate::binfmt;
use crate::error::{config, shape, Error, Result};

pub const DEFAULT_LLOYD_TOL: f64 = 1e-6;
pub const LLOYD_MAX_ITERS: usize = 500;

/// Regions `R_1 = (-inf, t_1]`, `R_i = (t_{i-1}, t_i]`, `R_I = (t_{I-1}, inf)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarQuantizer {
    pub thresholds_t: Vec<f64>,
    pub levels_g: Vec<f64>,
}

impl ScalarQuantizer {
    pub fn new(thresholds_t: Vec<f64>, levels_g: Vec<f64>) -> Result<Self> {
        if levels_g.len() != thresholds_t.len() + 1 {
            return shape(format!(
                "{} levels for {} thresholds",
                levels_g.len(),
                thresholds_t.len()
            ));
        }
        if thresholds_t.windows(2).any(|w| !(w[0] <= w[1])) {
            return config("thresholds must be nondecreasing");
        }
        if thresholds_t.iter().chain(&levels_g).any(|v| !v.is_finite()) {
            return config("quantizer entries must be finite");
        }
        Ok(Self {
            thresholds_t,
            levels_g,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels_g.len()
    }

    /// Encode-then-decode.
    pub fn quantize(&self, value: f64) -> Result<f64> {
        let i = sq_encode(self, value)?;
        sq_decode(self, i)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binfmt::write_u64(w, self.num_levels() as u64)?;
        binfmt::write_f64s(w, self.thresholds_t.iter().copied())?;
        binfmt::write_f64s(w, self.levels_g.iter().copied())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let levels = binfmt::read_usize(r, "quantizer levels")?;
        if levels == 0 {
            return Err(Error::Format("quantizer with zero levels".into()));
        }
        let t = binfmt::read_f64s(r, levels - 1)?;
        let g = binfmt::read_f64s(r, levels)?;
        Self::new(t, g).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn sq_encode(q: &ScalarQuantizer, value: f64) -> Result<usize> {
    if !value.is_finite() {
        return Err(Error::Domain(format!("cannot quantize {value}")));
    }
    Ok(1 + q.thresholds_t.partition_point(|&t| t < value))
}

pub fn sq_decode(q: &ScalarQuantizer, index: usize) -> Result<f64> {
    if index == 0 || index > q.num_levels() {
        return Err(Error::Protocol(format!(
            "index {index} outside 1..={}",
            q.num_levels()
        )));
    }
    Ok(q.levels_g[index - 1])
}

/// Equal-width cells over `[lo, hi]` with levels at the cell midpoints.
pub fn uniform_sq(lo: f64, hi: f64, levels: usize) -> Result<ScalarQuantizer> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return config(format!("uniform range needs lo < hi, got [{lo}, {hi}]"));
    }
    if levels == 0 {
        return config("uniform quantizer needs at least one level");
    }
    let width = (hi - lo) / levels as f64;
    let thresholds = (1..levels).map(|i| lo + i as f64 * width).collect();
    let g = (0..levels).map(|i| lo + (i as f64 + 0.5) * width).collect();
    ScalarQuantizer::new(thresholds, g)
}

/// Mean squared quantization error of `q` over `samples`.
pub fn sq_distortion(q: &ScalarQuantizer, samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return config("distortion over an empty sample set");
    }
    let mut total = 0.0;
    for &x in samples {
        let e = x - q.quantize(x)?;
        total += e * e;
    }
    Ok(total / samples.len() as f64)
}

/// Outcome of a Lloyd design: the result plus the training distortion after
/// every centroid update.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydTrace<T> {
    pub design: T,
    pub distortion_history: Vec<f64>,
}

pub fn lloyd_max_sq(samples: &[f64], levels: usize, tol: f64) -> Result<ScalarQuantizer> {
    Ok(lloyd_max_sq_traced(samples, levels, tol)?.design)
}

/// Lloyd-Max design. Seeds at the sample quantiles `(i + 1/2) / I`, then
/// alternates midpoint thresholds and cell means until the relative
/// distortion improvement drops below `tol`.
pub fn lloyd_max_sq_traced(
    samples: &[f64],
    levels: usize,
    tol: f64,
) -> Result<LloydTrace<ScalarQuantizer>> {
    if levels == 0 {
        return config("Lloyd-Max needs at least one level");
    }
    if samples.len() < levels {
        return config(format!("{} samples for {levels} levels", samples.len()));
    }
    if !(tol > 0.0) {
        return config(format!("tolerance must be positive, got {tol}"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite training sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();

    let mut g: Vec<f64> = (0..levels)
        .map(|i| sorted[(((i as f64 + 0.5) / levels as f64) * n as f64) as usize])
        .collect();
    let mut history = Vec::new();
    for _ in 0..LLOYD_MAX_ITERS {
        let t = midpoints(&g);
        // Cell i covers sorted[bounds[i]..bounds[i + 1]].
        let mut bounds = Vec::with_capacity(levels + 1);
        bounds.push(0);
        bounds.extend(t.iter().map(|&ti| sorted.partition_point(|&x| x <= ti)));
        bounds.push(n);
        let mut empty = Vec::new();
        for i in 0..levels {
            let cell = &sorted[bounds[i]..bounds[i + 1]];
            if cell.is_empty() {
                empty.push(i);
            } else {
                g[i] = cell.iter().sum::<f64>() / cell.len() as f64;
            }
        }
        let mut errors: Vec<f64> = Vec::new();
        if !empty.is_empty() {
            errors = (0..levels)
                .flat_map(|i| {
                    sorted[bounds[i]..bounds[i + 1]]
                        .iter()
                        .map(move |&x| (i, x))
                })
                .map(|(i, x)| (x - g[i]).powi(2))
                .collect();
        }
        for i in empty {
            let (worst, _) = errors
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("samples are non-empty");
            g[i] = sorted[worst];
            errors[worst] = 0.0;
        }
        g.sort_by(f64::total_cmp);
        let q = ScalarQuantizer::new(midpoints(&g), g.clone())?;
        let d = sq_distortion(&q, &sorted)?;
        let done = match history.last() {
            Some(&prev) => prev <= 0.0 || (prev - d) / prev < tol,
            None => d == 0.0,
        };
        history.push(d);
        if done {
            break;
        }
    }
    Ok(LloydTrace {
        design: ScalarQuantizer::new(midpoints(&g), g)?,
        distortion_history: history,
    })
}

fn midpoints(g: &[f64]) -> Vec<f64> {
    g.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Codewords stored one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorCodebook {
    pub codewords: DMatrix<f64>,
}

impl VectorCodebook {
    pub fn new(codewords: DMatrix<f64>) -> Result<Self> {
        if codewords.ncols() == 0 || codewords.nrows() == 0 {
            return config("codebook must have at least one codeword of positive dimension");
        }
        if codewords.iter().any(|v| !v.is_finite()) {
            return config("codewords must be finite");
        }
        Ok(Self { codewords })
    }

    pub fn size(&self) -> usize {
        self.codewords.ncols()
    }

    pub fn dim(&self) -> usize {
        self.codewords.nrows()
    }

    pub fn codeword(&self, index: usize) -> Result<DVectorView<'_, f64>> {
        if index >= self.size() {
            return Err(Error::Protocol(format!(
                "codeword {index} outside 0..{}",
                self.size()
            )));
        }
        Ok(self.codewords.column(index))
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

    /// `size`, `dim` as u64, then one codeword per row.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binfmt::write_u64(w, self.size() as u64)?;
        binfmt::write_u64(w, self.dim() as u64)?;
        binfmt::write_f64s(w, self.codewords.iter().copied())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let size = binfmt::read_usize(r, "codebook size")?;
        let dim = binfmt::read_usize(r, "codebook dimension")?;
        let vals = binfmt::read_f64s(r, size * dim)?;
        Self::new(DMatrix::from_vec(dim, size, vals)).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Nearest codeword by exact Euclidean distance; ties go to the lower index.
pub fn vq_quantize(book: &VectorCodebook, v: &DVector<f64>) -> Result<(usize, DVector<f64>)> {
    if v.len() != book.dim() {
        return shape(format!(
            "vector length {} != codeword dim {}",
            v.len(),
            book.dim()
        ));
    }
    let mut best = (0, f64::INFINITY);
    for (k, c) in book.codewords.column_iter().enumerate() {
        let d = (c - v).norm_squared();
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok((best.0, book.codewords.column(best.0).into_owned()))
}

/// Samples per block in the GEMM-based assignment.
const ASSIGN_BLOCK: usize = 2048;

/// Nearest-codeword index for every column of `samples`. Distances are
/// expanded as `||c||^2 - 2 c.x` and evaluated blockwise with a matrix
/// product.
pub fn vq_assign(book: &VectorCodebook, samples: &DMatrix<f64>) -> Result<Vec<usize>> {
    if samples.nrows() != book.dim() {
        return shape(format!(
            "sample dim {} != codeword dim {}",
            samples.nrows(),
            book.dim()
        ));
    }
    let norms: Vec<f64> = book
        .codewords
        .column_iter()
        .map(|c| c.norm_squared())
        .collect();
    let cw_t = book.codewords.transpose();
    let mut out = Vec::with_capacity(samples.ncols());
    let mut start = 0;
    while start < samples.ncols() {
        let len = ASSIGN_BLOCK.min(samples.ncols() - start);
        let block = samples.columns(start, len);
        let dots = &cw_t * block;
        for j in 0..len {
            let col = dots.column(j);
            let mut best = (0, f64::INFINITY);
            for (k, (&nk, &dk)) in norms.iter().zip(col.iter()).enumerate() {
                let d = nk - 2.0 * dk;
                if d < best.1 {
                    best = (k, d);
                }
            }
            out.push(best.0);
        }
        start += len;
    }
    Ok(out)
}

fn assignment_errors(book: &DMatrix<f64>, samples: &DMatrix<f64>, assign: &[usize]) -> Vec<f64> {
    samples
        .column_iter()
        .zip(assign)
        .map(|(x, &k)| (x - book.column(k)).norm_squared())
        .collect()
}

pub fn lloyd_vq<R: Rng + ?Sized>(
    samples: &DMatrix<f64>,
    size: usize,
    tol: f64,
    rng: &mut R,
) -> Result<VectorCodebook> {
    Ok(lloyd_vq_traced(samples, size, tol, rng)?.design)
}

/// k-means with k-means++ seeding. `samples` holds one vector per column.
pub fn lloyd_vq_traced<R: Rng + ?Sized>(
    samples: &DMatrix<f64>,
    size: usize,
    tol: f64,
    rng: &mut R,
) -> Result<LloydTrace<VectorCodebook>> {
    let count = samples.ncols();
    if size == 0 {
        return config("codebook size must be positive");
    }
    if size > count {
        return config(format!(
            "codebook size {size} exceeds {count} training samples"
        ));
    }
    if !(tol > 0.0) {
        return config(format!("tolerance must be positive, got {tol}"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite training sample".into()));
    }
    let dim = samples.nrows();
    let mut book = VectorCodebook {
        codewords: seed_plus_plus(samples, size, rng),
    };
    let mut history = Vec::new();
    for _ in 0..LLOYD_MAX_ITERS {
        let assign = vq_assign(&book, samples)?;
        let mut sums = DMatrix::<f64>::zeros(dim, size);
        let mut counts = vec![0usize; size];
        for (x, &k) in samples.column_iter().zip(&assign) {
            let mut s = sums.column_mut(k);
            s += x;
            counts[k] += 1;
        }
        let mut empty = Vec::new();
        for (k, &n) in counts.iter().enumerate() {
            if n == 0 {
                empty.push(k);
            } else {
                let mean = sums.column(k) / n as f64;
                book.codewords.set_column(k, &mean);
            }
        }
        if !empty.is_empty() {
            let mut errors = assignment_errors(&book.codewords, samples, &assign);
            for k in empty {
                let (worst, _) = errors
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .expect("samples are non-empty");
                book.codewords.set_column(k, &samples.column(worst));
                errors[worst] = 0.0;
            }
        }
        // Distortion of the updated codebook under the current partition,
        // which bounds the next nearest-neighbor distortion from above.
        let d = assignment_errors(&book.codewords, samples, &assign)
            .iter()
            .sum::<f64>()
            / count as f64;
        let done = match history.last() {
            Some(&prev) => prev <= 0.0 || (prev - d) / prev < tol,
            None => d == 0.0,
        };
        history.push(d);
        if done {
            break;
        }
    }
    Ok(LloydTrace {
        design: book,
        distortion_history: history,
    })
}

fn seed_plus_plus<R: Rng + ?Sized>(
    samples: &DMatrix<f64>,
    size: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let count = samples.ncols();
    let mut book = DMatrix::zeros(samples.nrows(), size);
    let first = rng.random_range(0..count);
    book.set_column(0, &samples.column(first));
    let mut dist: Vec<f64> = samples
        .column_iter()
        .map(|x| (x - samples.column(first)).norm_squared())
        .collect();
    for k in 1..size {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = count - 1;
            for (j, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = j;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..count)
        };
        book.set_column(k, &samples.column(pick));
        let c = samples.column(pick);
        for (d, x) in dist.iter_mut().zip(samples.column_iter()) {
            *d = d.min((x - c).norm_squared());
        }
    }
    book
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fig2() -> ScalarQuantizer {
        ScalarQuantizer::new(vec![-0.2, 0.0, 2.0 / 3.0], vec![-1.0, -0.7, 0.1, 1.0]).unwrap()
    }

    fn gaussian(count: usize, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, 0);
        (0..count).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn non_increasing(h: &[f64]) -> bool {
        h.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12))
    }

    #[test]
    fn encode_examples() {
        let q = fig2();
        assert_eq!(sq_encode(&q, 0.5).unwrap(), 3);
        assert_eq!(sq_encode(&q, -5.0).unwrap(), 1);
        assert_eq!(sq_encode(&q, 5.0).unwrap(), 4);
        assert_eq!(sq_encode(&q, -0.2).unwrap(), 1);
        assert_eq!(sq_encode(&q, 0.0).unwrap(), 2);
        assert_eq!(sq_encode(&q, 2.0 / 3.0).unwrap(), 3);
        assert!(matches!(sq_encode(&q, f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(
            sq_encode(&q, f64::INFINITY),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn decode_examples() {
        let q = fig2();
        assert_eq!(sq_decode(&q, 3).unwrap(), 0.1);
        assert!(matches!(sq_decode(&q, 0), Err(Error::Protocol(_))));
        assert!(matches!(sq_decode(&q, 5), Err(Error::Protocol(_))));
    }

    #[test]
    fn uniform_examples() {
        let q = uniform_sq(-1.0, 1.0, 4).unwrap();
        assert_eq!(q.thresholds_t, vec![-0.5, 0.0, 0.5]);
        assert_eq!(q.levels_g, vec![-0.75, -0.25, 0.25, 0.75]);
        let one = uniform_sq(-1.0, 1.0, 1).unwrap();
        assert!(one.thresholds_t.is_empty());
        assert_eq!(one.levels_g, vec![0.0]);
        assert!(matches!(uniform_sq(1.0, 1.0, 4), Err(Error::Config(_))));
        assert!(matches!(uniform_sq(2.0, 1.0, 4), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_distortion_is_delta_squared_over_twelve() {
        let mut rng = substream(3, 0);
        let samples: Vec<f64> = (0..200_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = uniform_sq(-1.0, 1.0, 8).unwrap();
        let d = sq_distortion(&q, &samples).unwrap();
        let expected = (2.0f64 / 8.0).powi(2) / 12.0;
        assert!((d / expected - 1.0).abs() < 0.05, "{d} vs {expected}");
    }

    #[test]
    fn lloyd_max_gaussian_one_bit() {
        let samples = gaussian(1_000_000, 4);
        let q = lloyd_max_sq(&samples, 2, 1e-9).unwrap();
        let target = (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (q.levels_g[1] / target - 1.0).abs() < 0.01,
            "{:?}",
            q.levels_g
        );
        assert!(
            (q.levels_g[0] / -target - 1.0).abs() < 0.01,
            "{:?}",
            q.levels_g
        );
    }

    #[test]
    fn lloyd_max_uniform_one_bit() {
        let mut rng = substream(5, 0);
        let samples: Vec<f64> = (0..1_000_000)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let q = lloyd_max_sq(&samples, 2, 1e-9).unwrap();
        assert!((q.levels_g[0] + 0.5).abs() < 0.005);
        assert!((q.levels_g[1] - 0.5).abs() < 0.005);
    }

    #[test]
    fn lloyd_max_history_non_increasing() {
        let samples = gaussian(20_000, 6);
        for levels in [2, 3, 8, 32] {
            let trace = lloyd_max_sq_traced(&samples, levels, 1e-10).unwrap();
            assert!(non_increasing(&trace.distortion_history), "{levels}");
            assert!(trace.distortion_history.len() <= LLOYD_MAX_ITERS);
        }
    }

    #[test]
    fn lloyd_max_reseeds_empty_cells() {
        // Heavy duplicates force coincident quantile seeds.
        let mut samples = vec![0.0; 90];
        samples.extend((0..10).map(|i| 1.0 + i as f64));
        let q = lloyd_max_sq(&samples, 4, 1e-6).unwrap();
        let mut distinct = q.levels_g.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 4, "{:?}", q.levels_g);
    }

    #[test]
    fn lloyd_max_rejects_bad_inputs() {
        assert!(matches!(
            lloyd_max_sq(&[1.0], 2, 1e-6),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            lloyd_max_sq(&[1.0, 2.0], 2, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn vq_size_one_is_mean() {
        let samples = DMatrix::from_fn(3, 50, |i, j| (i * 50 + j) as f64 * 0.1);
        let book = lloyd_vq(&samples, 1, 1e-6, &mut substream(1, 0)).unwrap();
        let mean = samples.column_mean();
        assert!((book.codewords.column(0) - mean).amax() < 1e-12);
    }

    #[test]
    fn vq_rejects_oversized_codebook() {
        let samples = DMatrix::zeros(2, 3);
        assert!(matches!(
            lloyd_vq(&samples, 4, 1e-6, &mut substream(1, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn vq_matches_lloyd_max_in_one_dimension() {
        // Empirical Lloyd stalls wherever no sample changes cell, so both
        // variants run to an exact fixed point on a large sample.
        let samples = gaussian(200_000, 7);
        for size in [2, 4] {
            let sq = lloyd_max_sq(&samples, size, 1e-300).unwrap();
            let d_sq = sq_distortion(&sq, &samples).unwrap();
            let mat = DMatrix::from_row_slice(1, samples.len(), &samples);
            let trace = lloyd_vq_traced(&mat, size, 1e-300, &mut substream(8, 0)).unwrap();
            let d_vq = *trace.distortion_history.last().unwrap();
            assert!((d_sq - d_vq).abs() < 1e-6, "size {size}: {d_sq} vs {d_vq}");
        }
    }

    #[test]
    fn vq_history_non_increasing() {
        let mut rng = substream(9, 0);
        let samples = DMatrix::from_fn(4, 3000, |_, _| rng.sample::<f64, _>(StandardNormal));
        let trace = lloyd_vq_traced(&samples, 32, 1e-9, &mut substream(9, 1)).unwrap();
        assert!(non_increasing(&trace.distortion_history));
    }

    #[test]
    fn vq_exact_match_and_tie() {
        let cw = DMatrix::from_fn(2, 8, |i, j| (i + 3 * j) as f64);
        let book = VectorCodebook::new(cw.clone()).unwrap();
        let (k, c) = vq_quantize(&book, &cw.column(5).into_owned()).unwrap();
        assert_eq!(k, 5);
        assert_eq!(c, cw.column(5).into_owned());
        let tie = VectorCodebook::new(DMatrix::from_column_slice(1, 2, &[-1.0, 1.0])).unwrap();
        assert_eq!(
            vq_quantize(&tie, &DVector::from_vec(vec![0.0])).unwrap().0,
            0
        );
        assert!(matches!(
            vq_quantize(&book, &DVector::zeros(3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn codebook_roundtrip() {
        let book = VectorCodebook::new(DMatrix::from_fn(3, 5, |i, j| (i * 5 + j) as f64)).unwrap();
        let mut bytes = Vec::new();
        book.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 8 * 15);
        // second value of the first row is codeword 0, coordinate 1
        assert_eq!(
            f64::from_le_bytes(bytes[24..32].try_into().unwrap()),
            book.codewords[(1, 0)]
        );
        assert_eq!(VectorCodebook::read_from(&mut &bytes[..]).unwrap(), book);
    }

    #[test]
    fn scalar_quantizer_roundtrip() {
        let q = fig2();
        let mut bytes = Vec::new();
        q.write_to(&mut bytes).unwrap();
        assert_eq!(ScalarQuantizer::read_from(&mut &bytes[..]).unwrap(), q);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn encode_is_monotone_partition(
            mut t in proptest::collection::vec(-10.0f64..10.0, 1..8),
            a in -20.0f64..20.0,
            b in -20.0f64..20.0,
        ) {
            t.sort_by(f64::total_cmp);
            let g: Vec<f64> = (0..=t.len()).map(|i| i as f64).collect();
            let q = ScalarQuantizer::new(t.clone(), g).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (ilo, ihi) = (sq_encode(&q, lo).unwrap(), sq_encode(&q, hi).unwrap());
            prop_assert!(ilo <= ihi);
            prop_assert!((1..=q.num_levels()).contains(&ilo));
            // value lies in R_i = (t_{i-1}, t_i]
            if ilo > 1 { prop_assert!(lo > t[ilo - 2]); }
            if ilo <= t.len() { prop_assert!(lo <= t[ilo - 1]); }
        }

        #[test]
        fn decode_encode_roundtrip_for_interior_levels(
            mut g in proptest::collection::vec(-10.0f64..10.0, 2..8),
        ) {
            g.sort_by(f64::total_cmp);
            g.dedup();
            prop_assume!(g.len() >= 2 && g.windows(2).all(|w| w[1] - w[0] > 1e-9));
            let q = ScalarQuantizer::new(midpoints(&g), g.clone()).unwrap();
            for i in 1..=g.len() {
                prop_assert_eq!(sq_encode(&q, sq_decode(&q, i).unwrap()).unwrap(), i);
            }
        }

        #[test]
        fn vq_quantize_is_nearest(seed in 0u64..1000) {
            let mut rng = substream(seed, 0);
            let cw = DMatrix::from_fn(3, 16, |_, _| rng.random_range(-1.0..1.0));
            let book = VectorCodebook::new(cw).unwrap();
            let v = DVector::from_fn(3, |_, _| rng.random_range(-1.5..1.5));
            let (k, c) = vq_quantize(&book, &v).unwrap();
            let best = (&c - &v).norm_squared();
            for j in 0..book.size() {
                prop_assert!(best <= (book.codewords.column(j) - &v).norm_squared());
            }
            let batch = vq_assign(&book, &DMatrix::from_columns(std::slice::from_ref(&v))).unwrap();
            prop_assert_eq!(batch[0], k);
        }
    }
}
