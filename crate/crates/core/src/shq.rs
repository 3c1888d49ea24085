//! Soft-to-hard quantization layer: a weighted sum of shifted tanh steps
//! whose steepness is annealed during training, plus extraction of the hard
//! scalar quantizer it converges to.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{config, shape, Error, Result};
use crate::quantizer::ScalarQuantizer;

/// Level coefficients start at `INITIAL_LEVEL_SPAN / (I - 1)` each.
pub const INITIAL_LEVEL_SPAN: f64 = 0.8;
/// Shifts are spread over `h * [-SHIFT_SPAN, SHIFT_SPAN]`.
pub const SHIFT_SPAN: f64 = 0.8;

/// `f(a) = sum_i v_i tanh(h a - s_i)`.
///
/// Shifts are expected in ascending order; [`build_quantizer`] re-sorts the
/// `(s_i, v_i)` pairs if they are not.
#[derive(Debug, Clone, PartialEq)]
pub struct ShqLayer {
    pub levels_v: Vec<f64>,
    pub shifts_s: Vec<f64>,
    pub steepness_h: f64,
    pub num_levels: usize,
}

impl ShqLayer {
    pub fn new(levels_v: Vec<f64>, shifts_s: Vec<f64>, steepness_h: f64) -> Result<Self> {
        let layer = Self {
            num_levels: levels_v.len() + 1,
            levels_v,
            shifts_s,
            steepness_h,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Equal level coefficients and the scheduled shifts for steepness `h`.
    pub fn initial(num_levels: usize, steepness_h: f64) -> Result<Self> {
        if num_levels < 2 {
            return config(format!(
                "need at least 2 quantization levels, got {num_levels}"
            ));
        }
        let v = INITIAL_LEVEL_SPAN / (num_levels - 1) as f64;
        Self::new(
            vec![v; num_levels - 1],
            shifts_at(num_levels, steepness_h)?,
            steepness_h,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_levels < 2 {
            return config(format!(
                "need at least 2 quantization levels, got {}",
                self.num_levels
            ));
        }
        if self.levels_v.len() != self.num_levels - 1 || self.shifts_s.len() != self.num_levels - 1
        {
            return shape(format!(
                "I={} needs {} level and shift coefficients, got {} and {}",
                self.num_levels,
                self.num_levels - 1,
                self.levels_v.len(),
                self.shifts_s.len()
            ));
        }
        if self.levels_v.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return config("level coefficients must be finite and non-negative");
        }
        if self.shifts_s.iter().any(|s| !s.is_finite()) {
            return config("shift coefficients must be finite");
        }
        if !(self.steepness_h > 0.0 && self.steepness_h.is_finite()) {
            return config(format!(
                "steepness must be positive, got {}",
                self.steepness_h
            ));
        }
        Ok(())
    }

    /// `sum_i v_i`, the saturation bound of the output.
    pub fn saturation(&self) -> f64 {
        self.levels_v.iter().sum()
    }

    /// Projects the level coefficients back onto `[0, inf)`.
    pub fn clamp_levels(&mut self) {
        for v in self.levels_v.iter_mut() {
            *v = v.max(0.0);
        }
    }

    /// Evaluates the layer at one scalar input.
    pub fn eval(&self, a: f64) -> f64 {
        let h = self.steepness_h;
        self.levels_v
            .iter()
            .zip(&self.shifts_s)
            .map(|(v, s)| v * (h * a - s).tanh())
            .sum()
    }

    /// `df/da = h sum_i v_i sech^2(h a - s_i)`.
    pub fn derivative(&self, a: f64) -> f64 {
        let h = self.steepness_h;
        h * self
            .levels_v
            .iter()
            .zip(&self.shifts_s)
            .map(|(v, s)| v * sech2(h * a - s))
            .sum::<f64>()
    }

    pub fn write_segment<W: Write>(&self, w: &mut W) -> Result<()> {
        binfmt::write_u64(w, self.num_levels as u64)?;
        binfmt::write_f64s(w, self.levels_v.iter().copied())?;
        binfmt::write_f64s(w, self.shifts_s.iter().copied())?;
        binfmt::write_f64(w, self.steepness_h)
    }

    pub fn read_segment<R: Read>(r: &mut R) -> Result<Self> {
        let levels = binfmt::read_usize(r, "SHQ levels")?;
        if levels < 2 {
            return Err(Error::Format(format!("SHQ with {levels} levels")));
        }
        let v = binfmt::read_f64s(r, levels - 1)?;
        let s = binfmt::read_f64s(r, levels - 1)?;
        let h = binfmt::read_f64(r)?;
        Self::new(v, s, h).map_err(|e| Error::Format(e.to_string()))
    }
}

/// `sech^2(u) = 4 e / (1 + e)^2` with `e = exp(-2|u|)`, which never overflows.
#[inline]
pub fn sech2(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    4.0 * e / ((1.0 + e) * (1.0 + e))
}

pub fn shq_forward(layer: &ShqLayer, a: &DVector<f64>) -> DVector<f64> {
    a.map(|x| layer.eval(x))
}

/// Forward pass over a `K x B` batch, keeping `tanh(h a - s_i)` for backward.
#[derive(Debug, Clone, PartialEq)]
pub struct ShqBatch {
    pub output: DMatrix<f64>,
    /// One `K x B` matrix per level coefficient.
    pub tanh_terms: Vec<DMatrix<f64>>,
}

pub fn shq_forward_batch(layer: &ShqLayer, a: &DMatrix<f64>) -> ShqBatch {
    let h = layer.steepness_h;
    let mut output = DMatrix::zeros(a.nrows(), a.ncols());
    let mut tanh_terms = Vec::with_capacity(layer.levels_v.len());
    for (&v, &s) in layer.levels_v.iter().zip(&layer.shifts_s) {
        let t = a.map(|x| (h * x - s).tanh());
        output.zip_apply(&t, |o, ti| *o += v * ti);
        tanh_terms.push(t);
    }
    ShqBatch { output, tanh_terms }
}

/// Gradients returned by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ShqGradients<T> {
    /// Gradient passed on to the encoder output.
    pub xi: T,
    pub grad_v: Vec<f64>,
    pub grad_s: Vec<f64>,
}

fn check_beta(beta_t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta_t) {
        return config(format!("blend weight must lie in [0, 1], got {beta_t}"));
    }
    Ok(())
}

/// Backward pass for one sample. `xi` blends the saturation-masked
/// pass-through (weight `1 - beta_t`) with the true derivative (weight
/// `beta_t`); `grad_v` and `grad_s` are exact.
pub fn shq_backward(
    layer: &ShqLayer,
    a: &DVector<f64>,
    delta1: &DVector<f64>,
    beta_t: f64,
) -> Result<ShqGradients<DVector<f64>>> {
    check_beta(beta_t)?;
    if a.len() != delta1.len() {
        return shape(format!(
            "input length {} != gradient length {}",
            a.len(),
            delta1.len()
        ));
    }
    let a_mat = DMatrix::from_column_slice(a.len(), 1, a.as_slice());
    let d_mat = DMatrix::from_column_slice(a.len(), 1, delta1.as_slice());
    let cache = shq_forward_batch(layer, &a_mat);
    let g = shq_backward_batch(layer, &a_mat, &cache, &d_mat, beta_t)?;
    Ok(ShqGradients {
        xi: DVector::from_column_slice(g.xi.as_slice()),
        grad_v: g.grad_v,
        grad_s: g.grad_s,
    })
}

/// Batched backward pass; `grad_v` and `grad_s` are summed over the batch.
pub fn shq_backward_batch(
    layer: &ShqLayer,
    a: &DMatrix<f64>,
    cache: &ShqBatch,
    delta1: &DMatrix<f64>,
    beta_t: f64,
) -> Result<ShqGradients<DMatrix<f64>>> {
    check_beta(beta_t)?;
    if a.shape() != delta1.shape() || cache.output.shape() != a.shape() {
        return shape("SHQ input, cache and gradient shapes differ");
    }
    let h = layer.steepness_h;
    let bound = layer.saturation();
    let mut xi = delta1.zip_map(a, |d, x| {
        if x.abs() <= bound {
            (1.0 - beta_t) * d
        } else {
            0.0
        }
    });
    let mut grad_v = Vec::with_capacity(layer.levels_v.len());
    let mut grad_s = Vec::with_capacity(layer.levels_v.len());
    for ((&v, &s), t) in layer
        .levels_v
        .iter()
        .zip(&layer.shifts_s)
        .zip(&cache.tanh_terms)
    {
        grad_v.push(delta1.dot(t));
        let mut gs = 0.0;
        for ((x, d), out) in a.iter().zip(delta1.iter()).zip(xi.iter_mut()) {
            let sq = sech2(h * x - s);
            gs -= d * v * sq;
            if beta_t > 0.0 {
                *out += beta_t * d * h * v * sq;
            }
        }
        grad_s.push(gs);
    }
    Ok(ShqGradients { xi, grad_v, grad_s })
}

/// How the steepness grows with the iteration count `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SteepnessRamp {
    /// `alpha * t`.
    Linear { alpha: f64 },
    /// `increment * ceil(t / period)`.
    Stepped { increment: f64, period: u64 },
}

impl SteepnessRamp {
    pub fn offset(&self, t: u64) -> f64 {
        match *self {
            SteepnessRamp::Linear { alpha } => alpha * t as f64,
            SteepnessRamp::Stepped { increment, period } => increment * t.div_ceil(period) as f64,
        }
    }
}

/// `h(t) = min(h_init + ramp(t), h_max)`, `beta(t) = min(beta * t, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub h_init: f64,
    pub h_max: f64,
    pub ramp: SteepnessRamp,
    pub beta: f64,
}

impl AnnealSchedule {
    pub fn linear(h_init: f64, h_max: f64, alpha: f64, beta: f64) -> Result<Self> {
        let s = Self {
            h_init,
            h_max,
            ramp: SteepnessRamp::Linear { alpha },
            beta,
        };
        s.validate()?;
        Ok(s)
    }

    /// Slow anneal used for the main model.
    pub fn standard() -> Self {
        Self {
            h_init: 5.0,
            h_max: 300.0,
            ramp: SteepnessRamp::Linear { alpha: 1e-5 },
            beta: 1e-7,
        }
    }

    /// Fixed steep layer with the pure saturation-aware straight-through
    /// gradient.
    pub fn ste() -> Self {
        Self {
            h_init: 400.0,
            h_max: 400.0,
            ramp: SteepnessRamp::Linear { alpha: 0.0 },
            beta: 0.0,
        }
    }

    /// Stepped steepness with the true gradient throughout.
    pub fn quantization_only() -> Self {
        Self {
            h_init: 5.0,
            h_max: 300.0,
            ramp: SteepnessRamp::Stepped {
                increment: 0.05,
                period: 100,
            },
            beta: 1.0,
        }
    }

    /// Faster steepness and blend ramps.
    pub fn quick_gradient() -> Self {
        Self {
            h_init: 5.0,
            h_max: 300.0,
            ramp: SteepnessRamp::Linear { alpha: 1e-4 },
            beta: 1e-6,
        }
    }

    /// Same shape of schedule with the rates rescaled so that `h_max` and a
    /// full blend weight are reached after `fraction * iters` iterations. A
    /// zero rate stays zero and a blend rate of at least 1 is kept.
    pub fn fitted_to(self, iters: u64, fraction: f64) -> Self {
        let horizon = (fraction * iters as f64).max(1.0);
        let span = self.h_max - self.h_init;
        let ramp = match self.ramp {
            SteepnessRamp::Linear { alpha } if alpha > 0.0 => SteepnessRamp::Linear {
                alpha: span / horizon,
            },
            SteepnessRamp::Stepped { increment, period } if increment > 0.0 => {
                SteepnessRamp::Stepped {
                    increment: span * period as f64 / horizon,
                    period,
                }
            }
            other => other,
        };
        let beta = if self.beta > 0.0 && self.beta < 1.0 {
            1.0 / horizon
        } else {
            self.beta
        };
        Self { ramp, beta, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h_init > 0.0 && self.h_init.is_finite() && self.h_max.is_finite()) {
            return config(format!(
                "h_init must be positive and finite, got {}",
                self.h_init
            ));
        }
        if self.h_init > self.h_max {
            return config(format!(
                "h_init {} exceeds h_max {}",
                self.h_init, self.h_max
            ));
        }
        let rate_ok = match self.ramp {
            SteepnessRamp::Linear { alpha } => alpha >= 0.0 && alpha.is_finite(),
            SteepnessRamp::Stepped { increment, period } => {
                increment >= 0.0 && increment.is_finite() && period > 0
            }
        };
        if !rate_ok {
            return config("steepness ramp must be non-negative with a positive period");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return config(format!(
                "blend rate must be non-negative, got {}",
                self.beta
            ));
        }
        Ok(())
    }
}

pub fn steepness_at(sched: &AnnealSchedule, t: u64) -> f64 {
    (sched.h_init + sched.ramp.offset(t)).min(sched.h_max)
}

pub fn blend_at(sched: &AnnealSchedule, t: u64) -> f64 {
    (sched.beta * t as f64).min(1.0)
}

/// Shift coefficients kept proportional to the steepness: `[0]` for two
/// levels, otherwise `h_t` times an even grid over `[-0.8, 0.8]`.
pub fn shifts_at(num_levels: usize, h_t: f64) -> Result<Vec<f64>> {
    if num_levels < 2 {
        return config(format!(
            "need at least 2 quantization levels, got {num_levels}"
        ));
    }
    if num_levels == 2 {
        return Ok(vec![0.0]);
    }
    let step = 2.0 * SHIFT_SPAN / (num_levels - 2) as f64;
    Ok((0..num_levels - 1)
        .map(|k| h_t * (-SHIFT_SPAN + k as f64 * step))
        .collect())
}

/// The hard quantizer the layer approaches as `h` grows: thresholds at
/// `s_i / h` and levels at the plateaus
/// `g_i = sum v - 2 sum_{i' >= i} v_{i'}`.
pub fn build_quantizer(layer: &ShqLayer) -> Result<ScalarQuantizer> {
    let h = layer.steepness_h;
    if !(h > 0.0 && h.is_finite()) {
        return config(format!("cannot build a quantizer at steepness {h}"));
    }
    layer.validate()?;
    // Each v_i belongs to the tanh step at s_i, so the pairs sort together.
    let mut pairs: Vec<(f64, f64)> = layer
        .shifts_s
        .iter()
        .copied()
        .zip(layer.levels_v.iter().copied())
        .collect();
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut levels = Vec::with_capacity(layer.num_levels);
    let mut tail = total;
    levels.push(-total);
    for &(_, v) in &pairs[..pairs.len() - 1] {
        tail -= v;
        levels.push(total - 2.0 * tail);
    }
    levels.push(total);
    let thresholds = pairs.iter().map(|p| p.0 / h).collect();
    ScalarQuantizer::new(thresholds, levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{sq_decode, sq_encode};
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;

    fn fig2(h: f64) -> ShqLayer {
        ShqLayer::new(vec![0.15, 0.4, 0.45], vec![-0.2 * h, 0.0, 2.0 / 3.0 * h], h).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn zero_levels_give_zero_output() {
        let layer = ShqLayer::new(vec![0.0; 3], vec![-1.0, 0.0, 1.0], 10.0).unwrap();
        let out = shq_forward(&layer, &DVector::from_vec(vec![-3.0, 0.1, 7.0]));
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fig2_value_at_zero() {
        let layer = fig2(40.0);
        let expected = 0.15 * 8f64.tanh() - 0.45 * (80.0f64 / 3.0).tanh();
        let out = layer.eval(0.0);
        assert!((out - expected).abs() < 1e-15);
        assert!((out + 0.3).abs() < 1e-6);
    }

    #[test]
    fn saturates_at_sum_of_levels() {
        let layer = fig2(40.0);
        assert!((layer.eval(1e6) - 1.0).abs() < 1e-12);
        assert!((layer.eval(-1e6) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn initial_layer() {
        let layer = ShqLayer::initial(5, 2.0).unwrap();
        assert_eq!(layer.levels_v, vec![0.2; 4]);
        assert_eq!(layer.shifts_s.len(), 4);
        assert!(matches!(ShqLayer::initial(1, 2.0), Err(Error::Config(_))));
    }

    #[test]
    fn beta_zero_inside_bound_passes_through() {
        let layer = fig2(10.0);
        let a = DVector::from_vec(vec![-0.9, 0.0, 0.3, 1.0]);
        let d = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.25]);
        let g = shq_backward(&layer, &a, &d, 0.0).unwrap();
        assert_eq!(g.xi, d);
    }

    #[test]
    fn beta_zero_outside_bound_is_nullified() {
        let layer = fig2(10.0);
        let a = DVector::from_vec(vec![-1.5, 0.0, 1.0001]);
        let d = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let g = shq_backward(&layer, &a, &d, 0.0).unwrap();
        assert_eq!(g.xi.as_slice(), &[0.0, -1.0, 0.0]);
    }

    #[test]
    fn beta_outside_unit_interval_rejected() {
        let layer = fig2(10.0);
        let a = DVector::zeros(2);
        assert!(matches!(
            shq_backward(&layer, &a, &a, 1.5),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            shq_backward(&layer, &a, &a, -0.1),
            Err(Error::Config(_))
        ));
    }

    /// Random layer and input with a linear loss `sum_n c_n f(a_n)`.
    fn fd_case(seed: u64) -> f64 {
        let mut rng = substream(seed, 0);
        let levels = rng.random_range(2..=6usize);
        let h = rng.random_range(0.5..20.0);
        let v: Vec<f64> = (0..levels - 1)
            .map(|_| rng.random_range(0.0..0.5))
            .collect();
        let mut s: Vec<f64> = (0..levels - 1)
            .map(|_| h * rng.random_range(-0.8..0.8))
            .collect();
        s.sort_by(f64::total_cmp);
        let layer = ShqLayer::new(v, s, h).unwrap();
        let k = 5;
        let a = DVector::from_fn(k, |_, _| rng.random_range(-1.2..1.2));
        let c = DVector::from_fn(k, |_, _| rng.random_range(-1.0..1.0));
        let loss = |l: &ShqLayer, x: &DVector<f64>| shq_forward(l, x).dot(&c);
        let g = shq_backward(&layer, &a, &c, 1.0).unwrap();
        let step = 1e-6;
        let mut worst: f64 = 0.0;
        for n in 0..k {
            let (mut p, mut m) = (a.clone(), a.clone());
            p[n] += step;
            m[n] -= step;
            let fd = (loss(&layer, &p) - loss(&layer, &m)) / (2.0 * step);
            worst = worst.max(rel_err(g.xi[n], fd));
        }
        for i in 0..levels - 1 {
            let (mut p, mut m) = (layer.clone(), layer.clone());
            p.levels_v[i] += step;
            m.levels_v[i] -= step;
            let fd = (loss(&p, &a) - loss(&m, &a)) / (2.0 * step);
            worst = worst.max(rel_err(g.grad_v[i], fd));
            let (mut p, mut m) = (layer.clone(), layer.clone());
            p.shifts_s[i] += step;
            m.shifts_s[i] -= step;
            let fd = (loss(&p, &a) - loss(&m, &a)) / (2.0 * step);
            worst = worst.max(rel_err(g.grad_s[i], fd));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..100 {
            let worst = fd_case(seed);
            assert!(worst < 1e-5, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn batch_backward_sums_single_samples() {
        let layer = fig2(7.0);
        let a = DMatrix::from_fn(3, 4, |i, j| ((i * 4 + j) as f64 * 0.7).sin());
        let d = DMatrix::from_fn(3, 4, |i, j| ((i + j) as f64 * 0.3).cos());
        let cache = shq_forward_batch(&layer, &a);
        let batch = shq_backward_batch(&layer, &a, &cache, &d, 0.4).unwrap();
        let mut gv = [0.0; 3];
        for j in 0..4 {
            let single = shq_backward(
                &layer,
                &a.column(j).into_owned(),
                &d.column(j).into_owned(),
                0.4,
            )
            .unwrap();
            assert!((single.xi - batch.xi.column(j)).amax() < 1e-12);
            for (acc, g) in gv.iter_mut().zip(&single.grad_v) {
                *acc += g;
            }
            assert!(
                (shq_forward(&layer, &a.column(j).into_owned()) - cache.output.column(j)).amax()
                    < 1e-15
            );
        }
        for (x, y) in gv.iter().zip(&batch.grad_v) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sech2_is_stable() {
        assert_eq!(sech2(0.0), 1.0);
        assert_eq!(sech2(1e4), 0.0);
        assert!((sech2(0.7) - 1.0 / 0.7f64.cosh().powi(2)).abs() < 1e-15);
        assert!(sech2(-800.0).is_finite());
    }

    #[test]
    fn steepness_schedule() {
        let s = AnnealSchedule::standard();
        assert_eq!(steepness_at(&s, 0), 5.0);
        assert!((steepness_at(&s, 1_000_000) - 15.0).abs() < 1e-12);
        assert_eq!(steepness_at(&s, 1_000_000_000), 300.0);
        let q = AnnealSchedule::quantization_only();
        assert_eq!(steepness_at(&q, 1), 5.05);
        assert_eq!(steepness_at(&q, 100), 5.05);
        assert!((steepness_at(&q, 101) - 5.1).abs() < 1e-12);
        assert_eq!(steepness_at(&AnnealSchedule::ste(), 12345), 400.0);
    }

    #[test]
    fn blend_schedule() {
        let s = AnnealSchedule::standard();
        assert_eq!(blend_at(&s, 0), 0.0);
        assert!((blend_at(&s, 1000) - 1e-4).abs() < 1e-18);
        assert_eq!(blend_at(&s, 20_000_000), 1.0);
        assert_eq!(blend_at(&AnnealSchedule::quantization_only(), 1), 1.0);
        assert_eq!(blend_at(&AnnealSchedule::ste(), 1_000_000), 0.0);
    }

    #[test]
    fn fitted_schedule_reaches_targets() {
        let s = AnnealSchedule::standard().fitted_to(200_000, 0.8);
        assert!((steepness_at(&s, 160_000) - 300.0).abs() < 1e-9);
        assert!(steepness_at(&s, 80_000) < 300.0);
        assert!((blend_at(&s, 160_000) - 1.0).abs() < 1e-12);
        let q = AnnealSchedule::quantization_only().fitted_to(200_000, 0.8);
        assert!((steepness_at(&q, 160_000) - 300.0).abs() < 1e-9);
        assert_eq!(blend_at(&q, 1), 1.0);
        assert_eq!(
            AnnealSchedule::ste().fitted_to(1000, 0.5),
            AnnealSchedule::ste()
        );
    }

    #[test]
    fn schedule_validation() {
        assert!(AnnealSchedule::linear(10.0, 5.0, 0.0, 0.0).is_err());
        assert!(AnnealSchedule::linear(1.0, 5.0, -1.0, 0.0).is_err());
        assert!(AnnealSchedule::linear(1.0, 5.0, 1.0, -1.0).is_err());
        for s in [
            AnnealSchedule::standard(),
            AnnealSchedule::ste(),
            AnnealSchedule::quantization_only(),
            AnnealSchedule::quick_gradient(),
        ] {
            s.validate().unwrap();
        }
    }

    #[test]
    fn shift_schedule_examples() {
        assert_eq!(shifts_at(2, 50.0).unwrap(), vec![0.0]);
        let four = shifts_at(4, 1.0).unwrap();
        assert_eq!(four.len(), 3);
        assert!(
            (four[0] + 0.8).abs() < 1e-15 && four[1].abs() < 1e-15 && (four[2] - 0.8).abs() < 1e-15
        );
        let three = shifts_at(3, 10.0).unwrap();
        assert!((three[0] + 8.0).abs() < 1e-12 && (three[1] - 8.0).abs() < 1e-12);
        assert_eq!(shifts_at(32, 3.0).unwrap().len(), 31);
    }

    #[test]
    fn fig2_quantizer() {
        let q = build_quantizer(&fig2(40.0)).unwrap();
        let expected_g = [-1.0, -0.7, 0.1, 1.0];
        for (g, e) in q.levels_g.iter().zip(expected_g) {
            assert!((g - e).abs() < 1e-12, "{:?}", q.levels_g);
        }
        let expected_t = [-0.2, 0.0, 2.0 / 3.0];
        for (t, e) in q.thresholds_t.iter().zip(expected_t) {
            assert!((t - e).abs() < 1e-12, "{:?}", q.thresholds_t);
        }
    }

    #[test]
    fn two_level_quantizer() {
        let layer = ShqLayer::new(vec![0.3], vec![0.0], 5.0).unwrap();
        let q = build_quantizer(&layer).unwrap();
        assert_eq!(q.levels_g, vec![-0.3, 0.3]);
        assert_eq!(q.thresholds_t, vec![0.0]);
    }

    #[test]
    fn unsorted_pairs_are_sorted_together() {
        let sorted = fig2(40.0);
        let mut shuffled = sorted.clone();
        shuffled.levels_v = vec![0.45, 0.15, 0.4];
        shuffled.shifts_s = vec![sorted.shifts_s[2], sorted.shifts_s[0], sorted.shifts_s[1]];
        assert_eq!(
            build_quantizer(&shuffled).unwrap(),
            build_quantizer(&sorted).unwrap()
        );
    }

    #[test]
    fn zero_steepness_rejected() {
        let mut layer = fig2(40.0);
        layer.steepness_h = 0.0;
        assert!(matches!(build_quantizer(&layer), Err(Error::Config(_))));
    }

    #[test]
    fn converges_to_hard_quantizer() {
        let h = 300.0;
        let layer = fig2(h);
        let q = build_quantizer(&layer).unwrap();
        let mut checked = 0;
        for k in 0..10_000 {
            let a = -2.0 + 4.0 * k as f64 / 9_999.0;
            if q.thresholds_t.iter().any(|t| (a - t).abs() < 10.0 / h) {
                continue;
            }
            let hard = sq_decode(&q, sq_encode(&q, a).unwrap()).unwrap();
            assert!((layer.eval(a) - hard).abs() < 1e-3, "a={a}");
            checked += 1;
        }
        assert!(checked > 9_000);
    }

    #[test]
    fn midpoint_at_thresholds() {
        let h = 300.0;
        let layer = fig2(h);
        let q = build_quantizer(&layer).unwrap();
        for (i, t) in q.thresholds_t.iter().enumerate() {
            let mid = 0.5 * (q.levels_g[i] + q.levels_g[i + 1]);
            assert!((layer.eval(*t) - mid).abs() < 1e-12, "threshold {i}");
        }
    }

    #[test]
    fn segment_roundtrip() {
        let layer = fig2(12.0);
        let mut bytes = Vec::new();
        layer.write_segment(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 8 * (1 + 3 + 3 + 1));
        assert_eq!(ShqLayer::read_segment(&mut &bytes[..]).unwrap(), layer);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn forward_is_monotone_and_bounded(
            v in proptest::collection::vec(0.0f64..1.0, 1..6),
            h in 0.1f64..400.0,
            a in -3.0f64..3.0,
            da in 0.0f64..1.0,
        ) {
            let n = v.len();
            let shifts = shifts_at(n + 1, h).unwrap();
            let layer = ShqLayer::new(v, shifts, h).unwrap();
            let (lo, hi) = (layer.eval(a), layer.eval(a + da));
            prop_assert!(hi >= lo - 1e-12);
            prop_assert!(lo.abs() <= layer.saturation() + 1e-12);
        }

        #[test]
        fn quantizer_levels_strictly_increase(
            v in proptest::collection::vec(1e-3f64..1.0, 1..8),
            h in 0.5f64..300.0,
        ) {
            let n = v.len();
            let layer = ShqLayer::new(v, shifts_at(n + 1, h).unwrap(), h).unwrap();
            let q = build_quantizer(&layer).unwrap();
            prop_assert!(q.levels_g.windows(2).all(|w| w[0] < w[1]));
            prop_assert!((q.levels_g[0] + layer.saturation()).abs() < 1e-12);
        }
    }
}
