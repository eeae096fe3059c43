//! Dormand–Prince 5(4) explicit integrator with embedded error control and
//! event location by step bisection.

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// Absolute resolution used when locating an event inside a step.
    pub event_tol: f64,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            max_steps: 200_000,
            event_tol: 1e-13,
        }
    }
}

impl OdeOptions {
    pub fn with_rtol(rtol: f64) -> Self {
        Self {
            rtol,
            atol: rtol * 1e-2,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OdeStop {
    Completed,
    /// The event predicate fired; `t` is the last time where it was still quiet.
    Event { code: usize, t: f64 },
}

#[derive(Debug, Clone)]
pub struct OdeOutcome {
    pub t: f64,
    pub y: Vec<f64>,
    pub steps: usize,
    pub err_estimate: f64,
    pub stop: OdeStop,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OdeError {
    StepLimit { t: f64 },
    StepUnderflow { t: f64 },
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b - b*, the embedded 4th order error weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Stepper {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
}

impl Stepper {
    fn new(n: usize) -> Self {
        Self {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
        }
    }

    /// One trial step from (t, y) with size h. Writes the 5th order solution into
    /// `out` and returns the per-component error estimate vector in `err`.
    fn step<F>(&mut self, f: &mut F, t: f64, y: &[f64], h: f64, out: &mut [f64], err: &mut [f64])
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let tmp = &mut self.tmp;
        f(t, y, k1);
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        f(t + C2 * h, tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * h, tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * h, tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * h, tmp, k5);
        for i in 0..n {
            tmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + h, tmp, k6);
        for i in 0..n {
            out[i] = y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        f(t + h, out, k7);
        for i in 0..n {
            err[i] = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
    }
}

fn error_norm(y: &[f64], y_new: &[f64], err: &[f64], opts: &OdeOptions) -> f64 {
    let n = y.len() as f64;
    let sum: f64 = y
        .iter()
        .zip(y_new)
        .zip(err)
        .map(|((a, b), e)| {
            let sc = opts.atol + opts.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

/// Integrates `y' = f(t, y)` from `t0` to `t1` (either direction).
///
/// `event` is checked on every accepted state; when it returns `Some(code)` the
/// crossing is located by bisecting the last step and the integration stops at
/// the last quiet point.
pub fn integrate<F, E>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    opts: &OdeOptions,
    mut event: E,
) -> Result<OdeOutcome, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    E: FnMut(f64, &[f64]) -> Option<usize>,
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(OdeOutcome {
            t: t0,
            y,
            steps: 0,
            err_estimate: 0.0,
            stop: OdeStop::Completed,
        });
    }
    let dir = span.signum();
    let mut t = t0;
    let mut h = dir * (span.abs() * 0.05).min(0.05).max(1e-6);
    let mut stepper = Stepper::new(n);
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut steps = 0usize;
    let mut err_total = 0.0;

    while (t1 - t) * dir > 0.0 {
        if steps >= opts.max_steps {
            return Err(OdeError::StepLimit { t });
        }
        let last = (t + h - t1) * dir >= 0.0;
        let h_try = if last { t1 - t } else { h };
        stepper.step(&mut f, t, &y, h_try, &mut y_new, &mut err);
        let en = error_norm(&y, &y_new, &err, opts);
        if en <= 1.0 {
            let t_new = if last { t1 } else { t + h_try };
            if let Some(code) = event(t_new, &y_new) {
                // bisect the step length on the event predicate
                let (mut lo, mut hi) = (0.0f64, h_try.abs());
                let mut y_lo = y.clone();
                let mut y_mid = vec![0.0; n];
                while hi - lo > opts.event_tol {
                    let mid = 0.5 * (lo + hi);
                    stepper.step(&mut f, t, &y, dir * mid, &mut y_mid, &mut err);
                    if event(t + dir * mid, &y_mid).is_some() {
                        hi = mid;
                    } else {
                        lo = mid;
                        y_lo.copy_from_slice(&y_mid);
                    }
                }
                return Ok(OdeOutcome {
                    t: t + dir * lo,
                    y: y_lo,
                    steps: steps + 1,
                    err_estimate: err_total + en * opts.rtol,
                    stop: OdeStop::Event {
                        code,
                        t: t + dir * lo,
                    },
                });
            }
            t = t_new;
            y.copy_from_slice(&y_new);
            steps += 1;
            err_total += en * opts.rtol;
            let fac = if en == 0.0 {
                5.0
            } else {
                (0.9 * en.powf(-0.2)).clamp(0.2, 5.0)
            };
            if !last {
                h = h_try * fac;
            }
        } else {
            let fac = if en.is_finite() {
                (0.9 * en.powf(-0.2)).clamp(0.1, 0.9)
            } else {
                0.1
            };
            h = h_try * fac;
            if h.abs() < 1e-14 * t.abs().max(1.0) {
                return Err(OdeError::StepUnderflow { t });
            }
        }
    }
    Ok(OdeOutcome {
        t,
        y,
        steps,
        err_estimate: err_total,
        stop: OdeStop::Completed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_event(_: f64, _: &[f64]) -> Option<usize> {
        None
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let out = integrate(
            |_, y, dy| dy[0] = -0.7 * y[0],
            0.0,
            &[2.0],
            3.0,
            &OdeOptions::default(),
            no_event,
        )
        .unwrap();
        let exact = 2.0 * (-2.1f64).exp();
        assert!((out.y[0] - exact).abs() < 1e-9 * exact);
        assert_eq!(out.stop, OdeStop::Completed);
    }

    #[test]
    fn backward_integration_inverts_forward() {
        let f = |t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0] + 0.1 * t.sin();
        };
        let opts = OdeOptions::default();
        let fwd = integrate(f, 0.0, &[1.0, 0.0], 2.5, &opts, no_event).unwrap();
        let back = integrate(f, 2.5, &fwd.y, 0.0, &opts, no_event).unwrap();
        assert!((back.y[0] - 1.0).abs() < 1e-8);
        assert!(back.y[1].abs() < 1e-8);
    }

    #[test]
    fn event_is_located() {
        // y' = 1 from 0; event when y > 0.75
        let out = integrate(
            |_, _, dy| dy[0] = 1.0,
            0.0,
            &[0.0],
            2.0,
            &OdeOptions::default(),
            |_, y| (y[0] > 0.75).then_some(3),
        )
        .unwrap();
        match out.stop {
            OdeStop::Event { code, t } => {
                assert_eq!(code, 3);
                assert!((t - 0.75).abs() < 1e-10);
            }
            _ => panic!("event not detected"),
        }
    }
}
