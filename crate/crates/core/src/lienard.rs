//! Forced Liénard oscillator: vector field, classical RK4 integration and the
//! residual operators that the physics losses are built on.
//!
//! ```text
//! dx/dt = y
//! dy/dt = -alpha*x*y - gamma*x - beta*x^3 + f*sin(omega*t)
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients of the forced oscillator. All dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LienardParams {
    /// Nonlinear damping.
    pub alpha: f64,
    /// Strength of the cubic nonlinearity.
    pub beta: f64,
    /// Internal-frequency term.
    pub gamma: f64,
    /// Forcing amplitude.
    pub f: f64,
    /// Forcing angular frequency.
    pub omega: f64,
}

impl LienardParams {
    /// Parameter set for which the forced oscillator shows rare, recurrent
    /// large-amplitude spikes.
    pub const EXTREME_EVENTS: LienardParams = LienardParams {
        alpha: 0.45,
        beta: 0.5,
        gamma: -0.5,
        f: 0.2,
        omega: 0.642,
    };

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("f", self.f),
            ("omega", self.omega),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::invalid(format!("Liénard parameter {name} = {v} is not finite")));
            }
        }
        Ok(())
    }

    /// Same parameters with the external forcing switched off.
    pub fn unforced(self) -> Self {
        LienardParams { f: 0.0, ..self }
    }

    #[inline]
    pub fn forcing(&self, t: f64) -> f64 {
        self.f * (self.omega * t).sin()
    }
}

impl Default for LienardParams {
    fn default() -> Self {
        Self::EXTREME_EVENTS
    }
}

/// Phase-space point (position and velocity). Also used for derivative pairs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OscState {
    pub x: f64,
    pub y: f64,
}

impl OscState {
    pub const fn new(x: f64, y: f64) -> Self {
        OscState { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    #[inline]
    fn axpy(self, a: f64, d: OscState) -> OscState {
        OscState {
            x: self.x + a * d.x,
            y: self.y + a * d.y,
        }
    }
}

/// Vector field of the forced oscillator at `(s, t)`.
#[inline]
pub fn lienard_rhs(s: OscState, t: f64, p: &LienardParams) -> OscState {
    let OscState { x, y } = s;
    OscState {
        x: y,
        y: -p.alpha * x * y - p.gamma * x - p.beta * x * x * x + p.forcing(t),
    }
}

#[inline]
pub(crate) fn rk4_advance(s: OscState, t: f64, h: f64, p: &LienardParams) -> OscState {
    let k1 = lienard_rhs(s, t, p);
    let k2 = lienard_rhs(s.axpy(0.5 * h, k1), t + 0.5 * h, p);
    let k3 = lienard_rhs(s.axpy(0.5 * h, k2), t + 0.5 * h, p);
    let k4 = lienard_rhs(s.axpy(h, k3), t + h, p);
    OscState {
        x: s.x + h / 6.0 * (k1.x + 2.0 * k2.x + 2.0 * k3.x + k4.x),
        y: s.y + h / 6.0 * (k1.y + 2.0 * k2.y + 2.0 * k3.y + k4.y),
    }
}

/// One classical fourth-order Runge–Kutta step of size `h > 0`.
pub fn rk4_step(s: OscState, t: f64, h: f64, p: &LienardParams) -> Result<OscState> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid(format!("RK4 step size must be positive and finite, got {h}")));
    }
    Ok(rk4_advance(s, t, h, p))
}

/// Uniformly sampled solution of the oscillator.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    t0: f64,
    dt_sample: f64,
    states: Vec<OscState>,
    times: Vec<f64>,
}

impl Trajectory {
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt_sample(&self) -> f64 {
        self.dt_sample
    }

    pub fn states(&self) -> &[OscState] {
        &self.states
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn x(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.x).collect()
    }

    pub fn y(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.y).collect()
    }

    /// Drops the first `n` samples (transient warm-up). At least two samples
    /// must remain.
    pub fn discard_warmup(mut self, n: usize) -> Result<Self> {
        if n + 2 > self.states.len() {
            return Err(Error::TooShort {
                needed: n + 2,
                got: self.states.len(),
            });
        }
        self.states.drain(..n);
        self.times.drain(..n);
        self.t0 = self.times[0];
        Ok(self)
    }

    /// Writes `t,x,y` rows with 17 significant digits, which round-trips
    /// 64-bit floats exactly.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_csv_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "t,x,y")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            writeln!(w, "{:.16e},{:.16e},{:.16e}", t, s.x, s.y)?;
        }
        Ok(())
    }
}

/// Integrates with fixed RK4 steps of `h_internal` and records a sample every
/// `dt_sample`, covering `[t0, t_end]`.
pub fn simulate(
    p: &LienardParams,
    s0: OscState,
    t0: f64,
    t_end: f64,
    h_internal: f64,
    dt_sample: f64,
) -> Result<Trajectory> {
    p.validate()?;
    if !s0.is_finite() {
        return Err(Error::invalid("initial state must be finite"));
    }
    if !(t0.is_finite() && t_end.is_finite() && t_end > t0) {
        return Err(Error::invalid(format!("need finite t_end > t0, got [{t0}, {t_end}]")));
    }
    if !(h_internal.is_finite() && dt_sample.is_finite() && h_internal > 0.0 && h_internal <= dt_sample) {
        return Err(Error::invalid(format!(
            "need 0 < h_internal <= dt_sample, got h_internal={h_internal}, dt_sample={dt_sample}"
        )));
    }
    let ratio = dt_sample / h_internal;
    let substeps = ratio.round();
    if (substeps * h_internal - dt_sample).abs() > 1e-9 * dt_sample {
        return Err(Error::invalid(format!(
            "dt_sample={dt_sample} is not an integer multiple of h_internal={h_internal}"
        )));
    }
    let substeps = substeps as usize;
    let n_samples = ((t_end - t0) / dt_sample + 1e-9).floor() as usize + 1;
    if n_samples < 2 {
        return Err(Error::invalid("interval shorter than one sampling step"));
    }

    let mut states = Vec::with_capacity(n_samples);
    let mut times = Vec::with_capacity(n_samples);
    let mut s = s0;
    states.push(s);
    times.push(t0);
    for i in 1..n_samples {
        let base = (i - 1) * substeps;
        for j in 0..substeps {
            let t = t0 + (base + j) as f64 * h_internal;
            s = rk4_advance(s, t, h_internal, p);
            if !s.is_finite() {
                return Err(Error::BlowUp {
                    t: t + h_internal,
                    x: s.x,
                    y: s.y,
                });
            }
        }
        states.push(s);
        times.push(t0 + i as f64 * dt_sample);
    }
    Ok(Trajectory {
        t0,
        dt_sample,
        states,
        times,
    })
}

/// `d2x + alpha*x*dx + gamma*x + beta*x^3 - f*sin(omega*t)`; zero exactly when
/// the triple satisfies the forced equation at time `t`.
#[inline]
pub fn lienard_residual(x: f64, dx: f64, d2x: f64, t: f64, p: &LienardParams) -> f64 {
    lienard_operator(x, dx, d2x, p) - p.forcing(t)
}

/// Forcing-free left-hand side `d2x + alpha*x*dx + gamma*x + beta*x^3`.
#[inline]
pub fn lienard_operator(x: f64, dx: f64, d2x: f64, p: &LienardParams) -> f64 {
    d2x + p.alpha * x * dx + p.gamma * x + p.beta * x * x * x
}

/// Partial derivatives of [`lienard_operator`] with respect to `(x, dx, d2x)`.
#[inline]
pub fn lienard_operator_grad(x: f64, dx: f64, p: &LienardParams) -> [f64; 3] {
    [p.alpha * dx + p.gamma + 3.0 * p.beta * x * x, p.alpha * x, 1.0]
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANON: LienardParams = LienardParams::EXTREME_EVENTS;

    #[test]
    fn rhs_vanishes_at_origin_at_t0() {
        assert_eq!(lienard_rhs(OscState::new(0.0, 0.0), 0.0, &CANON), OscState::new(0.0, 0.0));
    }

    #[test]
    fn rhs_harmonic_reduction() {
        let p = LienardParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
            f: 0.0,
            omega: 0.0,
        };
        assert_eq!(lienard_rhs(OscState::new(1.0, 0.0), 0.0, &p), OscState::new(0.0, -1.0));
    }

    #[test]
    fn rhs_golden_value() {
        // -0.45*0.5*(-0.2) + 0.5*0.5 - 0.5*0.125 + 0.2*sin(1.926)
        let d = lienard_rhs(OscState::new(0.5, -0.2), 3.0, &CANON);
        assert_eq!(d.x, -0.2);
        assert!((d.y - 0.420_015_134_905_599_83).abs() < 1e-15, "{}", d.y);
    }

    #[test]
    fn rk4_rejects_bad_steps() {
        let s = OscState::new(1.0, 0.0);
        assert!(rk4_step(s, 0.0, 0.0, &CANON).is_err());
        assert!(rk4_step(s, 0.0, -0.1, &CANON).is_err());
        assert!(rk4_step(s, 0.0, f64::NAN, &CANON).is_err());
        assert!(rk4_step(s, 0.0, f64::INFINITY, &CANON).is_err());
    }

    #[test]
    fn rk4_free_particle_is_exact() {
        let p = LienardParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            f: 0.0,
            omega: 0.642,
        };
        for &h in &[0.01, 0.5, 2.0] {
            let s = rk4_step(OscState::new(1.0, 2.0), 0.3, h, &p).unwrap();
            assert_eq!(s, OscState::new(1.0 + 2.0 * h, 2.0));
        }
    }

    #[test]
    fn rk4_unforced_fixed_point() {
        let s = rk4_step(OscState::new(0.0, 0.0), 0.0, 0.01, &CANON.unforced()).unwrap();
        assert_eq!(s, OscState::new(0.0, 0.0));
    }

    #[test]
    fn rk4_matches_fine_euler() {
        let h = 0.01;
        let rk = rk4_step(OscState::new(0.1, 0.1), 0.0, h, &CANON).unwrap();
        let n = 10_000;
        let he = h / n as f64;
        let mut s = OscState::new(0.1, 0.1);
        for i in 0..n {
            let d = lienard_rhs(s, i as f64 * he, &CANON);
            s = s.axpy(he, d);
        }
        assert!((rk.x - s.x).abs() <= 1e-8, "{} vs {}", rk.x, s.x);
        assert!((rk.y - s.y).abs() <= 1e-8, "{} vs {}", rk.y, s.y);
    }

    #[test]
    fn rk4_time_reversal_returns_near_start() {
        for &h in &[0.05, 0.02, 0.01] {
            let s0 = OscState::new(0.7, -0.3);
            let fwd = rk4_advance(s0, 1.0, h, &CANON);
            let back = rk4_advance(fwd, 1.0 + h, -h, &CANON);
            let err = (back.x - s0.x).abs().max((back.y - s0.y).abs());
            assert!(err < 10.0 * h.powi(5), "h={h}: err={err}");
        }
    }

    #[test]
    fn simulate_checks_preconditions() {
        let s0 = OscState::new(0.1, 0.1);
        assert!(simulate(&CANON, s0, 0.0, 0.0, 0.01, 1.0).is_err());
        assert!(simulate(&CANON, s0, 0.0, 10.0, 0.0, 1.0).is_err());
        assert!(simulate(&CANON, s0, 0.0, 10.0, 2.0, 1.0).is_err());
        assert!(simulate(&CANON, s0, 0.0, 10.0, 0.03, 0.1).is_err());
        let bad = LienardParams { f: f64::NAN, ..CANON };
        assert!(simulate(&bad, s0, 0.0, 10.0, 0.01, 1.0).is_err());
    }

    #[test]
    fn simulate_sampling_grid() {
        let tr = simulate(&CANON, OscState::new(0.1, 0.1), 2.0, 12.0, 0.01, 0.5).unwrap();
        assert_eq!(tr.len(), 21);
        for (i, &t) in tr.times().iter().enumerate() {
            assert!((t - (2.0 + 0.5 * i as f64)).abs() <= 1e-12 * t.abs().max(1.0));
        }
        assert_eq!(*tr.times().last().unwrap(), 12.0);
    }

    #[test]
    fn simulate_unforced_origin_stays_zero() {
        let tr = simulate(&CANON.unforced(), OscState::default(), 0.0, 200.0, 0.01, 1.0).unwrap();
        assert!(tr.states().iter().all(|s| s.x == 0.0 && s.y == 0.0));
    }

    #[test]
    fn simulate_detects_blow_up() {
        // Negative cubic stiffness: escapes to infinity in finite time.
        let p = LienardParams {
            alpha: 0.0,
            beta: -1.0,
            gamma: 0.0,
            f: 0.0,
            omega: 0.0,
        };
        let err = simulate(&p, OscState::new(2.0, 2.0), 0.0, 100.0, 0.01, 0.1).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }), "{err}");
    }

    #[test]
    fn self_convergence_factor_near_sixteen() {
        let s0 = OscState::new(0.1, 0.1);
        let end = |h: f64| {
            let tr = simulate(&CANON, s0, 0.0, 10.0, h, 10.0).unwrap();
            *tr.states().last().unwrap()
        };
        let reference = end(1e-5);
        let err = |h: f64| {
            let e = end(h);
            ((e.x - reference.x).powi(2) + (e.y - reference.y).powi(2)).sqrt()
        };
        let ratio = err(0.02) / err(0.01);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn residual_identities() {
        assert_eq!(lienard_residual(0.0, 0.0, 0.0, 0.0, &CANON), 0.0);
        assert_eq!(lienard_operator(0.0, 0.0, 0.0, &CANON), 0.0);
        assert!((lienard_operator(1.0, 1.0, 1.0, &CANON) - 1.45).abs() < 1e-15);

        let tr = simulate(&CANON, OscState::new(0.1, 0.1), 0.0, 50.0, 0.01, 0.5).unwrap();
        for (s, &t) in tr.states().iter().zip(tr.times()) {
            let d = lienard_rhs(*s, t, &CANON);
            let r = lienard_residual(s.x, s.y, d.y, t, &CANON);
            assert!(r.abs() <= 1e-12, "residual {r} at t={t}");
        }
    }

    #[test]
    fn operator_grad_matches_difference_quotient() {
        let (x, dx, d2x) = (0.8, -1.3, 0.4);
        let g = lienard_operator_grad(x, dx, &CANON);
        let h = 1e-6;
        let fd = [
            (lienard_operator(x + h, dx, d2x, &CANON) - lienard_operator(x - h, dx, d2x, &CANON)) / (2.0 * h),
            (lienard_operator(x, dx + h, d2x, &CANON) - lienard_operator(x, dx - h, d2x, &CANON)) / (2.0 * h),
            (lienard_operator(x, dx, d2x + h, &CANON) - lienard_operator(x, dx, d2x - h, &CANON)) / (2.0 * h),
        ];
        for k in 0..3 {
            assert!((g[k] - fd[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn csv_round_trips_exactly() {
        let tr = simulate(&CANON, OscState::new(0.1, 0.1), 0.0, 20.0, 0.01, 1.0).unwrap();
        let mut buf = Vec::new();
        tr.write_csv_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x,y"));
        for (line, (s, &t)) in lines.zip(tr.states().iter().zip(tr.times())) {
            let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(v, vec![t, s.x, s.y]);
        }
    }
}
