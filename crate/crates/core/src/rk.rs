//! Dormand–Prince 5(4) with the 4th-order continuous extension.
//!
//! Integration may run forwards or backwards in t. Sample points are
//! served from the dense output of the step that covers them.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct Dopri5Options {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step magnitude; 0 selects a heuristic.
    pub h_init: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for Dopri5Options {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            h_init: 0.0,
            h_min: 1e-14,
            max_steps: 50_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Stats {
    pub accepted: usize,
    pub rejected: usize,
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
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Integrates y' = f(t, y) from t0 to t1 and returns y(t1).
///
/// `max_step(t)` bounds the step magnitude (use `f64::INFINITY` for none).
/// Each entry of `samples` (ordered along the direction of integration and
/// inside [t0, t1]) is reported through `on_sample` exactly once.
#[allow(clippy::too_many_arguments)]
pub fn solve<const N: usize, F, H, S>(
    mut f: F,
    t0: f64,
    y0: [f64; N],
    t1: f64,
    opts: &Dopri5Options,
    mut max_step: H,
    samples: &[f64],
    mut on_sample: S,
) -> Result<([f64; N], Stats)>
where
    F: FnMut(f64, &[f64; N], &mut [f64; N]),
    H: FnMut(f64) -> f64,
    S: FnMut(usize, f64, &[f64; N]),
{
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let mut stats = Stats::default();
    let mut t = t0;
    let mut y = y0;
    let mut next_sample = 0;
    while next_sample < samples.len() && (samples[next_sample] - t0) * dir <= 0.0 {
        on_sample(next_sample, samples[next_sample], &y);
        next_sample += 1;
    }
    if t0 == t1 {
        return Ok((y, stats));
    }

    let mut k1 = [0.0; N];
    let mut k2 = [0.0; N];
    let mut k3 = [0.0; N];
    let mut k4 = [0.0; N];
    let mut k5 = [0.0; N];
    let mut k6 = [0.0; N];
    let mut k7 = [0.0; N];
    let mut ytmp = [0.0; N];
    let mut ynew = [0.0; N];
    f(t, &y, &mut k1);

    let mut h = if opts.h_init > 0.0 {
        opts.h_init
    } else {
        let n0 = norm_scaled(&y, &y, opts);
        let n1 = norm_scaled(&k1, &y, opts);
        let h0 = if n0 < 1e-5 || n1 < 1e-5 { 1e-6 } else { 0.01 * n0 / n1 };
        h0.min((t1 - t0).abs())
    };
    h = h.min(max_step(t)).max(opts.h_min);
    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;

    loop {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::TooManySteps(opts.max_steps));
        }
        let remaining = (t1 - t) * dir;
        let mut last = false;
        if h >= remaining {
            h = remaining;
            last = true;
        }
        let hs = h * dir;

        for i in 0..N {
            ytmp[i] = y[i] + hs * A21 * k1[i];
        }
        f(t + C2 * hs, &ytmp, &mut k2);
        for i in 0..N {
            ytmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * hs, &ytmp, &mut k3);
        for i in 0..N {
            ytmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * hs, &ytmp, &mut k4);
        for i in 0..N {
            ytmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * hs, &ytmp, &mut k5);
        for i in 0..N {
            ytmp[i] = y[i]
                + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let t_new = if last { t1 } else { t + hs };
        f(t + hs, &ytmp, &mut k6);
        for i in 0..N {
            ynew[i] = y[i]
                + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(t_new, &ynew, &mut k7);

        let mut err = 0.0;
        for i in 0..N {
            let e = hs
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / N as f64).sqrt();

        if err <= 1.0 || h <= opts.h_min {
            if h <= opts.h_min && err > 1.0 {
                return Err(Error::StepUnderflow(t));
            }
            stats.accepted += 1;
            while next_sample < samples.len()
                && (samples[next_sample] - t_new) * dir <= 0.0
            {
                let ts = samples[next_sample];
                let theta = ((ts - t) / hs).clamp(0.0, 1.0);
                let th1 = 1.0 - theta;
                let mut ys = [0.0; N];
                for i in 0..N {
                    let r1 = y[i];
                    let r2 = ynew[i] - y[i];
                    let r3 = hs * k1[i] - r2;
                    let r4 = r2 - hs * k7[i] - r3;
                    let r5 = hs
                        * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                            + D7 * k7[i]);
                    ys[i] = r1 + theta * (r2 + th1 * (r3 + theta * (r4 + th1 * r5)));
                }
                on_sample(next_sample, ts, &ys);
                next_sample += 1;
            }
            t = t_new;
            y = ynew;
            k1 = k7;
            if last {
                return Ok((y, stats));
            }
            // PI step-size control (Gustafsson)
            let fac11 = err.max(1e-10).powf(0.17);
            let mut fac = fac11 / fac_old.powf(0.04) / 0.9;
            fac = fac.clamp(0.1, 5.0);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            fac_old = err.max(1e-4);
            last_rejected = false;
            h = h_new.min(max_step(t)).max(opts.h_min);
        } else {
            stats.rejected += 1;
            let fac = (err.powf(0.2) / 0.9).min(5.0);
            h = (h / fac).max(opts.h_min);
            last_rejected = true;
        }
    }
}

fn norm_scaled<const N: usize>(v: &[f64; N], y: &[f64; N], opts: &Dopri5Options) -> f64 {
    let mut s = 0.0;
    for i in 0..N {
        let sc = opts.atol + opts.rtol * y[i].abs();
        s += (v[i] / sc) * (v[i] / sc);
    }
    (s / N as f64).sqrt()
}
