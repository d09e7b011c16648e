//! Explicit Runge-Kutta stepping over a single dose-free span.

use crate::model::ModelDefinition;

/// Scratch buffers reused across steps.
pub(crate) struct Workspace {
    k: [Vec<f64>; 6],
    tmp: Vec<f64>,
    y5: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(n: usize) -> Self {
        Workspace {
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y5: vec![0.0; n],
        }
    }
}

/// Number of equal sub-steps used to cover `len` with steps no longer than `step`.
pub(crate) fn substeps(len: f64, step: f64) -> usize {
    ((len / step) - 1e-9).ceil().max(1.0) as usize
}

fn all_finite(y: &[f64]) -> bool {
    y.iter().all(|v| v.is_finite())
}

/// Classic fourth-order Runge-Kutta from `t0` to `t1` in equal steps.
/// On a non-finite state returns the time at which it appeared.
pub(crate) fn rk4_span(
    model: &ModelDefinition,
    params: &[f64],
    t0: f64,
    t1: f64,
    step: f64,
    y: &mut [f64],
    ws: &mut Workspace,
) -> Result<(), f64> {
    let n = substeps(t1 - t0, step);
    let h = (t1 - t0) / n as f64;
    let [k1, k2, k3, k4, _, _] = &mut ws.k;
    let tmp = &mut ws.tmp;
    for i in 0..n {
        let t = t0 + i as f64 * h;
        model.derivatives(t, y, params, k1);
        for j in 0..y.len() {
            tmp[j] = y[j] + 0.5 * h * k1[j];
        }
        model.derivatives(t + 0.5 * h, tmp, params, k2);
        for j in 0..y.len() {
            tmp[j] = y[j] + 0.5 * h * k2[j];
        }
        model.derivatives(t + 0.5 * h, tmp, params, k3);
        for j in 0..y.len() {
            tmp[j] = y[j] + h * k3[j];
        }
        model.derivatives(t + h, tmp, params, k4);
        for j in 0..y.len() {
            y[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if !all_finite(y) {
            return Err(if i + 1 == n { t1 } else { t + h });
        }
    }
    Ok(())
}

// Runge-Kutta-Fehlberg 4(5) tableau.
const A2: [f64; 1] = [1.0 / 4.0];
const A3: [f64; 2] = [3.0 / 32.0, 9.0 / 32.0];
const A4: [f64; 3] = [1932.0 / 2197.0, -7200.0 / 2197.0, 7296.0 / 2197.0];
const A5: [f64; 4] = [439.0 / 216.0, -8.0, 3680.0 / 513.0, -845.0 / 4104.0];
const A6: [f64; 5] = [-8.0 / 27.0, 2.0, -3544.0 / 2565.0, 1859.0 / 4104.0, -11.0 / 40.0];
const C: [f64; 6] = [0.0, 1.0 / 4.0, 3.0 / 8.0, 12.0 / 13.0, 1.0, 1.0 / 2.0];
const B5: [f64; 6] = [16.0 / 135.0, 0.0, 6656.0 / 12825.0, 28561.0 / 56430.0, -9.0 / 50.0, 2.0 / 55.0];
const E: [f64; 6] = [
    1.0 / 360.0,
    0.0,
    -128.0 / 4275.0,
    -2197.0 / 75240.0,
    1.0 / 50.0,
    2.0 / 55.0,
];

const MIN_STEP: f64 = 1e-12;
const MAX_STEPS: usize = 1_000_000;

/// Adaptive RKF45 from `t0` to `t1`. `h` carries the step-size proposal in
/// and out so that consecutive spans continue the same controller.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rkf45_span(
    model: &ModelDefinition,
    params: &[f64],
    t0: f64,
    t1: f64,
    h: &mut f64,
    rtol: f64,
    atol: f64,
    y: &mut [f64],
    ws: &mut Workspace,
) -> Result<(), f64> {
    let n = y.len();
    let mut t = t0;
    let mut steps = 0;
    while t < t1 {
        steps += 1;
        if steps > MAX_STEPS || *h < MIN_STEP || !h.is_finite() {
            return Err(t);
        }
        let remaining = t1 - t;
        let last = *h >= remaining * (1.0 - 1e-12);
        let step = if last { remaining } else { *h };

        let Workspace { k, tmp, y5 } = ws;
        model.derivatives(t, y, params, &mut k[0]);
        let stages: [&[f64]; 5] = [&A2, &A3, &A4, &A5, &A6];
        for (s, a) in stages.iter().enumerate() {
            let stage = s + 1;
            for j in 0..n {
                let mut acc = 0.0;
                for (m, am) in a.iter().enumerate() {
                    acc += am * k[m][j];
                }
                tmp[j] = y[j] + step * acc;
            }
            model.derivatives(t + C[stage] * step, tmp, params, &mut k[stage]);
        }

        let mut err: f64 = 0.0;
        for j in 0..n {
            let mut hi = 0.0;
            let mut e = 0.0;
            for m in 0..6 {
                hi += B5[m] * k[m][j];
                e += E[m] * k[m][j];
            }
            y5[j] = y[j] + step * hi;
            let scale = atol + rtol * y[j].abs().max(y5[j].abs());
            err = err.max((step * e).abs() / scale);
        }
        if !err.is_finite() {
            // Shrink and retry; a genuinely divergent model ends at MIN_STEP.
            *h = step * 0.1;
            continue;
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        if err <= 1.0 {
            y.copy_from_slice(y5);
            t = if last { t1 } else { t + step };
            if !all_finite(y) {
                return Err(t);
            }
            if !last || factor < 1.0 {
                *h = step * factor;
            }
        } else {
            *h = step * factor;
        }
    }
    Ok(())
}
