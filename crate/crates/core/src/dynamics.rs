//! One-dimensional stationarity dynamics and their score-following limit.
//!
//! With momentum `p = φ′/‖φ′‖²` the curve obeys
//! `φ′ = p/‖p‖²`, `p′ = s(φ) − (log q)′ p`. Along any solution the 1D
//! energy `log‖p‖ − log p_data(φ) + log q(z)` is constant.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{DensityModel, ModelError, PriorModel};
use crate::numerics::norm2;

/// Momentum norms below this are turning points.
pub const TURNING_POINT: f64 = 1e-12;
/// Score norms below this make the score-following field undefined.
pub const CRITICAL_SCORE: f64 = 1e-10;
/// Default RK4 resolution.
pub const STEPS_PER_UNIT: usize = 2000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("turning point at z = {z}: momentum norm {norm:e}")]
    TurningPoint { z: f64, norm: f64 },
    #[error("near-critical point of the log-density: score norm {norm:e}")]
    CriticalPoint { norm: f64 },
    #[error("invalid dynamics input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeState {
    pub z: f64,
    pub phi: Vec<f64>,
    pub p: Vec<f64>,
}

/// `(φ′, p′)` at `state`.
pub fn el_ode_rhs(
    state: &OdeState,
    prior: &PriorModel,
    density: &DensityModel,
) -> Result<(Vec<f64>, Vec<f64>), DynamicsError> {
    if prior.dim() != 1 {
        return Err(DynamicsError::Invalid(
            "the curve dynamics need a one-dimensional prior".into(),
        ));
    }
    let norm = norm2(&state.p);
    if !(norm > TURNING_POINT) {
        return Err(DynamicsError::TurningPoint { z: state.z, norm });
    }
    let n2 = norm * norm;
    let dphi = state.p.iter().map(|v| v / n2).collect();
    let s = density.score(&state.phi)?;
    let dlogq = prior.score(&[state.z])?[0];
    let dp = s.iter().zip(&state.p).map(|(si, pi)| si - dlogq * pi).collect();
    Ok((dphi, dp))
}

/// 1D embedding energy `−½ log‖φ′‖² − log p_data(φ) + log q`, using
/// `‖φ′‖ = 1/‖p‖`.
pub fn energy_1d(state: &OdeState, prior: &PriorModel, density: &DensityModel) -> Result<f64, DynamicsError> {
    Ok(norm2(&state.p).ln() - density.log_density(&state.phi)? + prior.log_density(&[state.z])?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trajectory {
    pub states: Vec<OdeState>,
    /// Why integration stopped early, if it did.
    pub halt: Option<String>,
}

impl Trajectory {
    pub fn last(&self) -> &OdeState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

fn add_scaled(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

fn rk4_combine(x: &[f64], h: f64, k: [&[f64]; 4]) -> Vec<f64> {
    (0..x.len())
        .map(|i| x[i] + h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]))
        .collect()
}

/// Classical fixed-step RK4 over `z_span` in `steps` steps. A failing
/// right-hand side (turning point, leaving the prior support, score
/// underflow) truncates the trajectory and records the reason.
pub fn integrate_el(
    initial: &OdeState,
    z_span: (f64, f64),
    steps: usize,
    prior: &PriorModel,
    density: &DensityModel,
) -> Result<Trajectory, DynamicsError> {
    if steps == 0 {
        return Err(DynamicsError::Invalid("need at least one step".into()));
    }
    if initial.phi.len() != density.dim() || initial.p.len() != density.dim() {
        return Err(DynamicsError::Invalid(
            "state dimension does not match the density".into(),
        ));
    }
    if initial.z != z_span.0 {
        return Err(DynamicsError::Invalid(
            "initial state must sit at the start of the span".into(),
        ));
    }
    let h = (z_span.1 - z_span.0) / steps as f64;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(initial.clone());
    let mut cur = initial.clone();
    for k in 0..steps {
        let stage = |z: f64, phi: Vec<f64>, p: Vec<f64>| el_ode_rhs(&OdeState { z, phi, p }, prior, density);
        let step = (|| {
            let (a1, b1) = stage(cur.z, cur.phi.clone(), cur.p.clone())?;
            let zm = cur.z + 0.5 * h;
            let (a2, b2) = stage(zm, add_scaled(&cur.phi, 0.5 * h, &a1), add_scaled(&cur.p, 0.5 * h, &b1))?;
            let (a3, b3) = stage(zm, add_scaled(&cur.phi, 0.5 * h, &a2), add_scaled(&cur.p, 0.5 * h, &b2))?;
            let z1 = z_span.0 + (k + 1) as f64 * h;
            let (a4, b4) = stage(z1, add_scaled(&cur.phi, h, &a3), add_scaled(&cur.p, h, &b3))?;
            Ok::<_, DynamicsError>(OdeState {
                z: z1,
                phi: rk4_combine(&cur.phi, h, [&a1, &a2, &a3, &a4]),
                p: rk4_combine(&cur.p, h, [&b1, &b2, &b3, &b4]),
            })
        })();
        match step {
            Ok(next) => {
                states.push(next.clone());
                cur = next;
            }
            Err(e) => {
                return Ok(Trajectory {
                    states,
                    halt: Some(e.to_string()),
                });
            }
        }
    }
    Ok(Trajectory { states, halt: None })
}

/// `φ′ = γ s(φ)/‖s(φ)‖²`.
pub fn score_following_rhs(phi: &[f64], gamma: f64, density: &DensityModel) -> Result<Vec<f64>, DynamicsError> {
    let s = density.score(phi)?;
    let n = norm2(&s);
    if !(n > CRITICAL_SCORE) {
        return Err(DynamicsError::CriticalPoint { norm: n });
    }
    Ok(s.iter().map(|v| gamma * v / (n * n)).collect())
}

/// Points `(t, φ(t))` of a first-order flow.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlowPath {
    pub t: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub halt: Option<String>,
}

fn integrate_flow(
    phi0: &[f64],
    span: (f64, f64),
    steps: usize,
    field: impl Fn(&[f64]) -> Result<Vec<f64>, DynamicsError>,
) -> Result<FlowPath, DynamicsError> {
    if steps == 0 {
        return Err(DynamicsError::Invalid("need at least one step".into()));
    }
    let h = (span.1 - span.0) / steps as f64;
    let mut path = FlowPath {
        t: vec![span.0],
        phi: vec![phi0.to_vec()],
        halt: None,
    };
    let mut x = phi0.to_vec();
    for k in 0..steps {
        let step = (|| {
            let k1 = field(&x)?;
            let k2 = field(&add_scaled(&x, 0.5 * h, &k1))?;
            let k3 = field(&add_scaled(&x, 0.5 * h, &k2))?;
            let k4 = field(&add_scaled(&x, h, &k3))?;
            Ok::<_, DynamicsError>(rk4_combine(&x, h, [&k1, &k2, &k3, &k4]))
        })();
        match step {
            Ok(next) => {
                x = next;
                path.t.push(span.0 + (k + 1) as f64 * h);
                path.phi.push(x.clone());
            }
            Err(e) => {
                path.halt = Some(e.to_string());
                break;
            }
        }
    }
    Ok(path)
}

/// Reduced flow `φ′(z) = γ s/‖s‖²` over `z_span`.
pub fn integrate_score_following(
    phi0: &[f64],
    gamma: f64,
    z_span: (f64, f64),
    steps: usize,
    density: &DensityModel,
) -> Result<FlowPath, DynamicsError> {
    integrate_flow(phi0, z_span, steps, |x| score_following_rhs(x, gamma, density))
}

/// Plain score flow `φ′(τ) = s(φ(τ))`. Stops at points where the density
/// underflows; a mode is a fixed point.
pub fn reparameterized_flow(
    phi0: &[f64],
    tau_span: (f64, f64),
    steps: usize,
    density: &DensityModel,
) -> Result<FlowPath, DynamicsError> {
    integrate_flow(phi0, tau_span, steps, |x| Ok(density.score(x)?))
}

/// Per-point comparison of the curve dynamics under the exponential prior
/// `q = γe^{γz}` against the reduced score-following flow.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LimitComparison {
    pub gamma: f64,
    pub z: Vec<f64>,
    /// `‖p − s(φ)/γ‖ / ‖s(φ)/γ‖` along the curve trajectory.
    pub momentum_gap: Vec<f64>,
    /// `‖φ_EL(z) − φ_flow(z)‖`.
    pub position_gap: Vec<f64>,
    /// Samples with `z > z0 + 5/γ`.
    pub post_transient_start: usize,
    pub max_post_transient_momentum_gap: f64,
    pub sup_post_transient_position_gap: f64,
    pub el_halt: Option<String>,
    pub flow_halt: Option<String>,
}

impl LimitComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("z_latent,momentum_gap_relative,position_gap_ambient_units,post_transient\n");
        for k in 0..self.z.len() {
            out.push_str(&format!(
                "{:e},{:e},{:e},{}\n",
                self.z[k],
                self.momentum_gap[k],
                self.position_gap[k],
                u8::from(k >= self.post_transient_start)
            ));
        }
        out
    }
}

/// Runs both systems from `initial` over `z_span` and compares them on the
/// shared grid. The transient window `(z0, z0 + 5/γ]` is excluded from the
/// summary maxima.
pub fn score_limit_comparison(
    initial: &OdeState,
    gamma: f64,
    z_span: (f64, f64),
    steps: usize,
    density: &DensityModel,
) -> Result<(Trajectory, FlowPath, LimitComparison), DynamicsError> {
    let prior = PriorModel::exponential(gamma)?;
    let el = integrate_el(initial, z_span, steps, &prior, density)?;
    let flow = integrate_score_following(&initial.phi, gamma, z_span, steps, density)?;
    let n = el.states.len().min(flow.phi.len());
    let mut cmp = LimitComparison {
        gamma,
        z: Vec::with_capacity(n),
        momentum_gap: Vec::with_capacity(n),
        position_gap: Vec::with_capacity(n),
        post_transient_start: n,
        max_post_transient_momentum_gap: f64::NAN,
        sup_post_transient_position_gap: f64::NAN,
        el_halt: el.halt.clone(),
        flow_halt: flow.halt.clone(),
    };
    let cutoff = z_span.0 + 5.0 / gamma;
    for k in 0..n {
        let st = &el.states[k];
        let s = density.score(&st.phi)?;
        let target: Vec<f64> = s.iter().map(|v| v / gamma).collect();
        let diff: Vec<f64> = st.p.iter().zip(&target).map(|(a, b)| a - b).collect();
        cmp.z.push(st.z);
        cmp.momentum_gap.push(norm2(&diff) / norm2(&target));
        let pos: Vec<f64> = st.phi.iter().zip(&flow.phi[k]).map(|(a, b)| a - b).collect();
        cmp.position_gap.push(norm2(&pos));
        if st.z > cutoff && cmp.post_transient_start == n {
            cmp.post_transient_start = k;
        }
    }
    let post = cmp.post_transient_start;
    if post < n {
        cmp.max_post_transient_momentum_gap = cmp.momentum_gap[post..].iter().copied().fold(0.0, f64::max);
        cmp.sup_post_transient_position_gap = cmp.position_gap[post..].iter().copied().fold(0.0, f64::max);
    }
    Ok((el, flow, cmp))
}

/// Trajectory CSV: z, φ and p components, 1D energy.
pub fn trajectory_csv(traj: &Trajectory, prior: &PriorModel, density: &DensityModel) -> String {
    let dim = traj.states[0].phi.len();
    let mut header = vec!["z_latent".to_string()];
    header.extend((0..dim).map(|i| format!("phi{i}_ambient")));
    header.extend((0..dim).map(|i| format!("p{i}_inverse_ambient")));
    header.push("energy_nats".into());
    let mut out = header.join(",");
    out.push('\n');
    for st in &traj.states {
        let mut row = vec![format!("{:e}", st.z)];
        row.extend(st.phi.iter().map(|v| format!("{v:e}")));
        row.extend(st.p.iter().map(|v| format!("{v:e}")));
        let e = energy_1d(st, prior, density).unwrap_or(f64::NAN);
        row.push(format!("{e:e}"));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
