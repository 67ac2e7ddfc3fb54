//! Muon and AdamW optimizers with WSD/cosine learning-rate schedules,
//! weight-decay annealing and per-group learning-rate multipliers.
//!
//! Muon updates a matrix parameter along (an approximation of) the polar
//! factor of its momentum buffer `B <- beta B + G`, computed by quintic
//! Newton-Schulz iterations. Non-matrix parameters (embeddings, norm gains,
//! gate vectors) take an Adam-style scalar update instead.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quintic Newton-Schulz coefficients. Tuned for a steep slope at zero; the
/// iterate oscillates inside a band around 1 instead of converging to the
/// exact polar factor, which is all Muon needs.
pub const NS_COEFFS: (f64, f64, f64) = (3.4445, -4.7750, 2.0315);

/// Default number of Newton-Schulz iterations.
pub const NS_STEPS: usize = 5;

/// How the orthogonalized update is scaled before application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScaling {
    /// `0.2 * sqrt(max(rows, cols))`, matching the RMS of Adam-style updates.
    RmsMatched,
    /// `sqrt(max(1, rows/cols))`.
    Spectral,
}

impl UpdateScaling {
    pub fn factor(self, rows: usize, cols: usize) -> f64 {
        match self {
            UpdateScaling::RmsMatched => 0.2 * (rows.max(cols) as f64).sqrt(),
            UpdateScaling::Spectral => (rows as f64 / cols as f64).max(1.0).sqrt(),
        }
    }
}

/// Approximate polar factor via Newton-Schulz: normalize by the Frobenius
/// norm, then iterate `X <- aX + b (XX^T) X + c (XX^T)^2 X`. Wide inputs are
/// transposed so the Gram matrix stays on the short side. After five steps
/// the singular values of the output sit in roughly [0.68, 1.14] for inputs
/// whose normalized spectrum is not too degenerate.
pub fn newton_schulz_polar(b: &Tensor<f64>, steps: usize) -> Result<Tensor<f64>> {
    let norm = b.frob_norm();
    if norm == 0.0 {
        return Err(Error::ZeroMatrix("newton_schulz_polar"));
    }
    let transposed = b.rows() > b.cols();
    let mut x = if transposed { b.transpose() } else { b.clone() };
    x.scale_in_place(1.0 / norm);

    let (a, bc, c) = NS_COEFFS;
    for _ in 0..steps {
        let gram = x.matmul_transb(&x); // X X^T, [m, m] with m <= n
        let gram2 = gram.matmul(&gram);
        // poly = b*A + c*A^2
        let mut poly = gram2;
        poly.scale_in_place(c);
        poly.axpy(bc, &gram);
        let mut next = poly.matmul(&x);
        next.axpy(a, &x);
        x = next;
    }
    if transposed {
        x = x.transpose();
    }
    x.check_finite("newton_schulz_polar output")?;
    Ok(x)
}

/// Per-parameter Muon state: the momentum buffer and hyperparameters.
#[derive(Debug, Clone)]
pub struct MuonState {
    pub momentum: Tensor<f64>,
    pub beta: f64,
    pub ns_steps: usize,
    pub wd: f64,
    pub scaling: UpdateScaling,
}

impl MuonState {
    pub fn new(shape: &[usize], beta: f64, ns_steps: usize, wd: f64) -> Self {
        MuonState {
            momentum: Tensor::zeros(shape),
            beta,
            ns_steps,
            wd,
            scaling: UpdateScaling::RmsMatched,
        }
    }
}

/// One Muon step on a 2-D parameter:
/// `B <- beta B + G`, `W <- W - lr * scale * NS(B) - lr * wd_eff * W`.
/// `wd_mult` is the annealing multiplier from the schedule.
pub fn muon_step(
    w: &mut Tensor<f64>,
    g: &Tensor<f64>,
    state: &mut MuonState,
    lr: f64,
    wd_mult: f64,
) -> Result<()> {
    if w.dims().len() != 2 {
        return Err(Error::Optim(format!(
            "muon_step handles 2-D parameters; a {:?}-shaped parameter belongs on the scalar fallback path",
            w.dims()
        )));
    }
    if g.dims() != w.dims() {
        return Err(Error::shape("gradient shape must match parameter"));
    }
    state.momentum.scale_in_place(state.beta);
    state.momentum.add_assign(g);
    let decay = lr * state.wd * wd_mult;
    if state.momentum.frob_norm() == 0.0 {
        // Zero buffer and zero gradient: decay only.
        for x in w.data_mut() {
            *x -= decay * *x;
        }
        return Ok(());
    }
    let polar = newton_schulz_polar(&state.momentum, state.ns_steps)?;
    let scale = state.scaling.factor(w.rows(), w.cols());
    for (x, &u) in w.data_mut().iter_mut().zip(polar.data()) {
        *x = *x - lr * scale * u - decay * *x;
    }
    Ok(())
}

/// Per-parameter Adam(W) state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor<f64>,
    pub v: Tensor<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub wd: f64,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize], beta1: f64, beta2: f64, eps: f64, wd: f64) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            beta1,
            beta2,
            eps,
            wd,
            t: 0,
        }
    }

    /// Table-default AdamW moments (0.9, 0.95) with eps 1e-8.
    pub fn adamw_default(shape: &[usize], wd: f64) -> Self {
        Self::new(shape, 0.9, 0.95, 1e-8, wd)
    }

    /// Scalar-fallback moments used for non-matrix parameters under Muon:
    /// (0.8, 0.95) with eps 1e-7.
    pub fn muon_fallback(shape: &[usize], wd: f64) -> Self {
        Self::new(shape, 0.8, 0.95, 1e-7, wd)
    }
}

/// Bias-corrected AdamW with decoupled weight decay.
pub fn adamw_step(
    w: &mut Tensor<f64>,
    g: &Tensor<f64>,
    state: &mut AdamState,
    lr: f64,
    wd_mult: f64,
) -> Result<()> {
    if g.dims() != w.dims() {
        return Err(Error::shape("gradient shape must match parameter"));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    let decay = lr * state.wd * wd_mult;
    for (((x, &gg), m), v) in w
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(state.m.data_mut())
        .zip(state.v.data_mut())
    {
        *m = b1 * *m + (1.0 - b1) * gg;
        *v = b2 * *v + (1.0 - b2) * gg * gg;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *x = *x - lr * m_hat / (v_hat.sqrt() + state.eps) - decay * *x;
    }
    Ok(())
}

/// Rescale a set of gradients so their global L2 norm does not exceed
/// `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut Tensor<f64>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for g in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    total
}

/// Learning-rate schedule shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Wsd,
    Cosine,
}

/// Schedule: warmup, stable/cosine body, decay stage, and the weight-decay
/// annealing exponent (`wda_gamma = 0` keeps the decay coefficient flat).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub warmup_frac: f64,
    pub decay_start_frac: f64,
    pub total_steps: usize,
    pub peak_lr: f64,
    pub wda_gamma: f64,
}

impl ScheduleSpec {
    /// Warmup-stable-decay: 0% warmup, constant until 80%, linear to zero.
    pub fn wsd(total_steps: usize, peak_lr: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Wsd,
            warmup_frac: 0.0,
            decay_start_frac: 0.8,
            total_steps,
            peak_lr,
            wda_gamma: 0.0,
        }
    }

    /// 1% linear warmup then cosine to zero; the decay stage (for annealing
    /// purposes) spans everything after warmup.
    pub fn cosine(total_steps: usize, peak_lr: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            warmup_frac: 0.01,
            decay_start_frac: 0.01,
            total_steps,
            peak_lr,
            wda_gamma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_frac)
            || !(0.0..=1.0).contains(&self.decay_start_frac)
            || self.warmup_frac > self.decay_start_frac
        {
            return Err(Error::Config(format!(
                "schedule fractions must satisfy 0 <= warmup ({}) <= decay_start ({}) <= 1",
                self.warmup_frac, self.decay_start_frac
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.wda_gamma < 0.0 {
            return Err(Error::Config("wda_gamma must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Learning rate and weight-decay multiplier at a step. The multiplier is
/// `(1 - t)^gamma` with `t` the fractional progress through the decay
/// stage (so it is 1 before the decay stage begins).
pub fn lr_and_wd_at(step: usize, spec: &ScheduleSpec) -> Result<(f64, f64)> {
    spec.validate()?;
    if step > spec.total_steps {
        return Err(Error::Config(format!(
            "step {} out of range [0, {}]",
            step, spec.total_steps
        )));
    }
    let total = spec.total_steps as f64;
    let t = step as f64 / total;
    let warmup = spec.warmup_frac;
    let lr = match spec.kind {
        ScheduleKind::Wsd => {
            let ds = spec.decay_start_frac;
            if t < warmup {
                spec.peak_lr * t / warmup
            } else if t < ds || ds >= 1.0 {
                spec.peak_lr
            } else {
                spec.peak_lr * (1.0 - (t - ds) / (1.0 - ds))
            }
        }
        ScheduleKind::Cosine => {
            if t < warmup {
                spec.peak_lr * t / warmup
            } else {
                let phase = (t - warmup) / (1.0 - warmup);
                spec.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
            }
        }
    };
    let ds = spec.decay_start_frac.max(spec.warmup_frac);
    let wd_mult = if t <= ds || ds >= 1.0 {
        1.0
    } else {
        let progress = (t - ds) / (1.0 - ds);
        (1.0 - progress).powf(spec.wda_gamma)
    };
    Ok((lr, wd_mult))
}

/// Parameter-group tags; every trainable parameter lands in exactly one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTag {
    Matrix,
    Embed,
    Norm,
}

/// Per-group learning-rate multiplier under Muon (1x / 0.3x / 0.015x);
/// AdamW runs every group at 1x.
pub fn lr_multiplier(tag: GroupTag, muon: bool) -> f64 {
    if !muon {
        return 1.0;
    }
    match tag {
        GroupTag::Matrix => 1.0,
        GroupTag::Embed => 0.3,
        GroupTag::Norm => 0.015,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{polar_oracle, singular_values_jacobi};
    use crate::testutil::{assert_close, max_abs_diff, randn_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ns_of_orthogonal_stays_on_direction() {
        // A rotation stays a scalar multiple of itself through the quintic
        // iteration; after 5 steps the scalar sits in the singular-value
        // band, not at 1 exactly.
        let (s, c) = 0.7_f64.sin_cos();
        let b = Tensor::matrix(2, 2, vec![c, -s, s, c]).unwrap();
        let ns = newton_schulz_polar(&b, NS_STEPS).unwrap();
        let ratio = ns.at(0, 0) / b.at(0, 0);
        for i in 0..2 {
            for j in 0..2 {
                assert_close(ns.at(i, j), ratio * b.at(i, j), 1e-9);
            }
        }
        assert!((0.65..=1.2).contains(&ratio), "scalar {ratio}");
    }

    #[test]
    fn ns_diagonal_band_and_signs() {
        let b = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 0.5]).unwrap();
        let ns = newton_schulz_polar(&b, NS_STEPS).unwrap();
        assert!(ns.at(0, 0) > 0.0 && ns.at(1, 1) > 0.0);
        for sv in singular_values_jacobi(&ns).unwrap() {
            assert!((0.68..=1.14).contains(&sv), "singular value {sv}");
        }
        // signed diagonal keeps its signs
        let b = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, -3.0]).unwrap();
        let ns = newton_schulz_polar(&b, NS_STEPS).unwrap();
        assert!(ns.at(0, 0) > 0.0 && ns.at(1, 1) < 0.0);
    }

    #[test]
    fn ns_close_to_polar_oracle_on_tall_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let b = randn_tensor(&mut rng, &[16, 8], 1.0);
        let ns = newton_schulz_polar(&b, NS_STEPS).unwrap();
        let polar = polar_oracle(&b).unwrap();
        let dist = {
            let mut d = ns.clone();
            d.axpy(-1.0, &polar);
            d.frob_norm() / (8.0_f64).sqrt()
        };
        assert!(dist <= 0.35, "NS-to-polar distance {dist}");
    }

    #[test]
    fn ns_band_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let shapes = [(8, 4), (16, 8), (32, 16), (64, 32), (24, 8), (12, 6)];
        for trial in 0..60 {
            let (m, n) = shapes[trial % shapes.len()];
            let b = if trial % 2 == 0 {
                randn_tensor(&mut rng, &[m, n], 1.0)
            } else {
                randn_tensor(&mut rng, &[n, m], 1.0)
            };
            let ns = newton_schulz_polar(&b, NS_STEPS).unwrap();
            for sv in singular_values_jacobi(&ns).unwrap() {
                assert!(
                    (0.65..=1.2).contains(&sv),
                    "trial {trial} shape ({m},{n}): sv {sv}"
                );
            }
        }
    }

    #[test]
    fn ns_sign_and_orthogonal_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let b = randn_tensor(&mut rng, &[8, 8], 1.0);
        let ns = newton_schulz_polar(&b, NS_STEPS).unwrap();
        let mut neg = b.clone();
        neg.scale_in_place(-1.0);
        let ns_neg = newton_schulz_polar(&neg, NS_STEPS).unwrap();
        let mut flipped = ns.clone();
        flipped.scale_in_place(-1.0);
        assert!(max_abs_diff(&ns_neg, &flipped) <= 1e-9);

        // NS(QB) = Q NS(B) for orthogonal Q
        let q = polar_oracle(&randn_tensor(&mut rng, &[8, 8], 1.0)).unwrap();
        let qb = q.matmul(&b);
        let ns_qb = newton_schulz_polar(&qb, NS_STEPS).unwrap();
        let q_ns = q.matmul(&ns);
        assert!(max_abs_diff(&ns_qb, &q_ns) <= 1e-6);
    }

    #[test]
    fn ns_rejects_zero() {
        let z = Tensor::<f64>::zeros(&[4, 4]);
        assert!(newton_schulz_polar(&z, NS_STEPS).is_err());
    }

    #[test]
    fn muon_noop_without_gradient_or_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let mut w = randn_tensor(&mut rng, &[6, 4], 1.0);
        let orig = w.clone();
        let mut st = MuonState::new(&[6, 4], 0.95, NS_STEPS, 0.0);
        muon_step(&mut w, &Tensor::zeros(&[6, 4]), &mut st, 0.01, 1.0).unwrap();
        assert_eq!(w.data(), orig.data());
    }

    #[test]
    fn muon_update_is_well_conditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut w = randn_tensor(&mut rng, &[16, 8], 0.1);
        let before = w.clone();
        let g = randn_tensor(&mut rng, &[16, 8], 1.0);
        let mut st = MuonState::new(&[16, 8], 0.95, NS_STEPS, 0.0);
        muon_step(&mut w, &g, &mut st, 0.02, 1.0).unwrap();
        let mut update = before;
        update.axpy(-1.0, &w); // lr * scale * NS(B)
        let svs = singular_values_jacobi(&update).unwrap();
        let cond = svs[0] / svs[svs.len() - 1];
        assert!(cond <= 1.7, "condition number {cond}");
    }

    #[test]
    fn muon_beta_zero_is_independent_polar_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let w0 = randn_tensor(&mut rng, &[8, 4], 0.1);
        let g1 = randn_tensor(&mut rng, &[8, 4], 1.0);
        let g2 = randn_tensor(&mut rng, &[8, 4], 1.0);
        let lr = 0.05;
        let scale = UpdateScaling::RmsMatched.factor(8, 4);

        let mut w = w0.clone();
        let mut st = MuonState::new(&[8, 4], 0.0, NS_STEPS, 0.0);
        muon_step(&mut w, &g1, &mut st, lr, 1.0).unwrap();
        muon_step(&mut w, &g2, &mut st, lr, 1.0).unwrap();

        let mut expect = w0.clone();
        for g in [&g1, &g2] {
            let u = newton_schulz_polar(g, NS_STEPS).unwrap();
            expect.axpy(-lr * scale, &u);
        }
        assert!(max_abs_diff(&w, &expect) <= 1e-12);
    }

    #[test]
    fn muon_rejects_vectors() {
        let mut w = Tensor::<f64>::zeros(&[8]);
        let g = Tensor::<f64>::zeros(&[8]);
        let mut st = MuonState::new(&[8], 0.95, NS_STEPS, 0.0);
        assert!(matches!(
            muon_step(&mut w, &g, &mut st, 0.01, 1.0),
            Err(Error::Optim(_))
        ));
    }

    #[test]
    fn adamw_decay_only_at_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let mut w = randn_tensor(&mut rng, &[4, 4], 1.0);
        let orig = w.clone();
        let mut st = AdamState::adamw_default(&[4, 4], 0.1);
        adamw_step(&mut w, &Tensor::zeros(&[4, 4]), &mut st, 1e-2, 1.0).unwrap();
        for (a, b) in w.data().iter().zip(orig.data()) {
            assert_close(*a, b * (1.0 - 1e-2 * 0.1), 1e-15);
        }
    }

    #[test]
    fn adamw_single_step_bias_correction_oracle() {
        let mut w = Tensor::matrix(1, 2, vec![0.5, -0.25]).unwrap();
        let g = Tensor::matrix(1, 2, vec![0.3, -0.8]).unwrap();
        let mut st = AdamState::adamw_default(&[1, 2], 0.0);
        let lr = 1e-3;
        adamw_step(&mut w, &g, &mut st, lr, 1.0).unwrap();
        // hand-rolled: m_hat = g, v_hat = g^2, update = lr g/(|g| + eps)
        for (i, (w0, g0)) in [(0.5, 0.3), (-0.25, -0.8)].iter().enumerate() {
            let want = w0 - lr * g0 / (g0.abs() + 1e-8);
            assert_close(w.data()[i], want, 1e-12);
        }
    }

    #[test]
    fn adamw_constant_gradient_approaches_sign_update() {
        let mut w = Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let g = Tensor::matrix(1, 3, vec![2.0, -0.01, 5.0]).unwrap();
        let mut st = AdamState::adamw_default(&[1, 3], 0.0);
        let lr = 1e-3;
        let mut prev;
        let mut last_step = [0.0; 3];
        for _ in 0..200 {
            prev = w.clone();
            adamw_step(&mut w, &g, &mut st, lr, 1.0).unwrap();
            for i in 0..3 {
                last_step[i] = prev.data()[i] - w.data()[i];
            }
        }
        for i in 0..3 {
            assert_close(last_step[i] / lr, g.data()[i].signum(), 1e-3);
        }
    }

    #[test]
    fn wsd_schedule_endpoints() {
        let spec = ScheduleSpec::wsd(1000, 5e-3);
        let (lr0, wd0) = lr_and_wd_at(0, &spec).unwrap();
        assert_close(lr0, 5e-3, 1e-15);
        assert_close(wd0, 1.0, 1e-15);
        let (lr_end, _) = lr_and_wd_at(1000, &spec).unwrap();
        assert_close(lr_end, 0.0, 1e-15);
        let (lr_mid, _) = lr_and_wd_at(799, &spec).unwrap();
        assert_close(lr_mid, 5e-3, 1e-15);
        assert!(lr_and_wd_at(1001, &spec).is_err());
    }

    #[test]
    fn cosine_schedule_shape() {
        let spec = ScheduleSpec::cosine(1000, 3e-4);
        let (lr_w, _) = lr_and_wd_at(5, &spec).unwrap();
        assert_close(lr_w, 3e-4 * 0.5, 1e-12); // halfway through warmup
        let (lr_end, _) = lr_and_wd_at(1000, &spec).unwrap();
        assert!(lr_end.abs() < 1e-18);
    }

    #[test]
    fn wda_multiplier_formula() {
        let mut spec = ScheduleSpec::wsd(1000, 1.0);
        spec.wda_gamma = 2.0;
        // halfway into the decay stage: t = 0.9 of total
        let (_, wd) = lr_and_wd_at(900, &spec).unwrap();
        assert_close(wd, 0.25, 1e-12);
        // gamma = 0 keeps the multiplier at 1 everywhere
        spec.wda_gamma = 0.0;
        let (_, wd) = lr_and_wd_at(900, &spec).unwrap();
        assert_close(wd, 1.0, 1e-15);
    }

    #[test]
    fn schedules_are_step_continuous() {
        // Outside warmup the per-step jump stays within 10x the average
        // slope; inside warmup the slope is peak/warmup_steps by
        // construction, so that region gets its own bound.
        for spec in [ScheduleSpec::wsd(500, 1e-2), ScheduleSpec::cosine(500, 1e-2)] {
            let total = spec.total_steps as f64;
            let body_bound = spec.peak_lr / total * 10.0;
            let warmup_bound = if spec.warmup_frac > 0.0 {
                spec.peak_lr / (spec.warmup_frac * total)
            } else {
                0.0
            };
            let warmup_end = (spec.warmup_frac * total).ceil() as usize;
            let mut prev = lr_and_wd_at(0, &spec).unwrap().0;
            for step in 1..=500 {
                let (lr, _) = lr_and_wd_at(step, &spec).unwrap();
                let bound = if step <= warmup_end {
                    warmup_bound.max(body_bound)
                } else {
                    body_bound
                };
                assert!(
                    (lr - prev).abs() <= bound + 1e-15,
                    "{:?} jump at step {step}: {} -> {}",
                    spec.kind,
                    prev,
                    lr
                );
                prev = lr;
            }
        }
    }

    #[test]
    fn group_multipliers() {
        assert_close(lr_multiplier(GroupTag::Matrix, true), 1.0, 0.0);
        assert_close(lr_multiplier(GroupTag::Embed, true), 0.3, 0.0);
        assert_close(lr_multiplier(GroupTag::Norm, true), 0.015, 0.0);
        assert_close(lr_multiplier(GroupTag::Embed, false), 1.0, 0.0);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut g1 = Tensor::matrix(1, 2, vec![3.0, 0.0]).unwrap();
        let mut g2 = Tensor::matrix(1, 2, vec![0.0, 4.0]).unwrap();
        let norm = clip_global_norm(&mut [&mut g1, &mut g2], 1.0);
        assert_close(norm, 5.0, 1e-15);
        assert_close(g1.data()[0], 3.0 / 5.0, 1e-15);
        assert_close(g2.data()[1], 4.0 / 5.0, 1e-15);

        let mut g3 = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        let norm = clip_global_norm(&mut [&mut g3], 1.0);
        assert_close(norm, 0.5, 1e-15);
        assert_close(g3.data()[0], 0.5, 1e-15);
    }
}
