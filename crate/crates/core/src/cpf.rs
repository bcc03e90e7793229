//! Continuation power flow.
//!
//! Traces `f(x, λ) = g(x) + λ·b = 0` from the base solution (`λ = 0`) towards
//! the saddle-node point, where `b` is the per-bus load increase of the
//! transfer schedule. Each step predicts along the normalized tangent of the
//! augmented system and corrects with Newton on the parameterized equations.
//! The nose is detected by the sign change of the tangent `dλ` and refined by
//! halving the step until it falls below `step_min`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::NetworkCase;
use crate::powerflow::{inf_norm, solve_dense, Network, PFState, DEFAULT_MAX_ITER, DEFAULT_TOL};

#[derive(Debug, Error, PartialEq)]
pub enum CpfError {
    #[error("base-case power flow did not converge")]
    BaseCaseDiverged,
    #[error("augmented tangent system is singular")]
    SingularAugmentedSystem,
    #[error("corrector diverged")]
    CorrectorDiverged,
    #[error("target scale must exceed 1, got {0}")]
    BadTargetScale(f64),
    #[error("schedule has {got} entries, expected {expected}")]
    ScheduleLength { expected: usize, got: usize },
    #[error("invalid options: {0}")]
    BadOptions(&'static str),
}

/// Per-bus load increase `[ΔP_0..ΔP_{N-1}, ΔQ_0..ΔQ_{N-1}]` in pu between the
/// base and the target case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSchedule {
    pub b: Vec<f64>,
}

impl TransferSchedule {
    pub fn zeros(n: usize) -> Self {
        TransferSchedule { b: vec![0.0; 2 * n] }
    }

    pub fn n(&self) -> usize {
        self.b.len() / 2
    }

    pub fn dp(&self) -> &[f64] {
        &self.b[..self.n()]
    }

    pub fn dq(&self) -> &[f64] {
        &self.b[self.n()..]
    }

    pub fn is_zero(&self) -> bool {
        self.b.iter().all(|v| *v == 0.0)
    }

    fn as_complex(&self) -> Vec<Complex64> {
        self.dp()
            .iter()
            .zip(self.dq())
            .map(|(&p, &q)| Complex64::new(p, q))
            .collect()
    }
}

/// Scales every bus load by `target_scale`; the slack absorbs the extra
/// active power and PV buses keep their setpoints.
pub fn transfer_schedule(
    base: &NetworkCase,
    target_scale: f64,
) -> Result<TransferSchedule, CpfError> {
    if !(target_scale > 1.0) {
        return Err(CpfError::BadTargetScale(target_scale));
    }
    let k = target_scale - 1.0;
    let mut b: Vec<f64> = base
        .buses
        .iter()
        .map(|bus| k * bus.pd / base.base_mva)
        .collect();
    b.extend(base.buses.iter().map(|bus| k * bus.qd / base.base_mva));
    Ok(TransferSchedule { b })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parameterization {
    Natural,
    PseudoArcLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpfOptions {
    pub scheme: Parameterization,
    pub step: f64,
    pub step_min: f64,
    pub step_max: f64,
    pub adapt: bool,
    pub corrector_tol: f64,
    pub corrector_max_iter: usize,
    pub max_steps: usize,
}

impl Default for CpfOptions {
    fn default() -> Self {
        CpfOptions {
            scheme: Parameterization::PseudoArcLength,
            step: 0.1,
            step_min: 1e-5,
            step_max: 1.0,
            adapt: true,
            corrector_tol: 1e-8,
            corrector_max_iter: 10,
            max_steps: 500,
        }
    }
}

impl CpfOptions {
    pub fn validate(&self) -> Result<(), CpfError> {
        if !(self.step_min > 0.0 && self.step_min <= self.step && self.step <= self.step_max) {
            return Err(CpfError::BadOptions("need 0 < step_min <= step <= step_max"));
        }
        if !(self.corrector_tol > 0.0) || self.corrector_max_iter == 0 || self.max_steps == 0 {
            return Err(CpfError::BadOptions("tolerances and iteration limits must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    NoseDetected,
    TargetReached,
    StepUnderflow,
    CorrectorFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub state: PFState,
    pub lambda: f64,
    /// `dλ` component of the normalized tangent at this point.
    pub dlambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpfTrace {
    pub points: Vec<TracePoint>,
    pub max_lambda: f64,
    pub critical_state: PFState,
    pub terminated: Termination,
    pub steps: usize,
}

impl CpfTrace {
    /// CSV with columns `step,lambda,dlambda,vm_min_bus,vm_min`; the bus is
    /// reported by external id.
    pub fn to_csv(&self, case: &NetworkCase) -> String {
        let mut s = String::from("step,lambda,dlambda,vm_min_bus,vm_min\n");
        for (k, p) in self.points.iter().enumerate() {
            let (bus, vm) = p.state.vm_min();
            let _ = writeln!(
                s,
                "{k},{},{},{},{}",
                p.lambda, p.dlambda, case.buses[bus].id, vm
            );
        }
        s
    }
}

/// The parameterized problem: network, schedule and solver settings.
pub struct Continuation<'a> {
    pub net: Network,
    delta: Vec<Complex64>,
    f_lambda: Vec<f64>,
    opts: &'a CpfOptions,
}

/// Unknowns `[x; λ]` and their state form.
#[derive(Debug, Clone)]
pub struct Point {
    pub state: PFState,
    pub lambda: f64,
}

impl<'a> Continuation<'a> {
    pub fn new(
        case: &NetworkCase,
        schedule: &TransferSchedule,
        opts: &'a CpfOptions,
    ) -> Result<Self, CpfError> {
        opts.validate()?;
        let n = case.n_buses();
        if schedule.b.len() != 2 * n {
            return Err(CpfError::ScheduleLength {
                expected: 2 * n,
                got: schedule.b.len(),
            });
        }
        let net = Network::new(case);
        let delta = schedule.as_complex();
        let mut f_lambda: Vec<f64> = net.pvpq.iter().map(|&k| delta[k].re).collect();
        f_lambda.extend(net.pq.iter().map(|&k| delta[k].im));
        Ok(Continuation {
            net,
            delta,
            f_lambda,
            opts,
        })
    }

    fn schedule_at(&self, lambda: f64) -> Vec<Complex64> {
        self.net
            .sbus
            .iter()
            .zip(&self.delta)
            .map(|(s, d)| s - d * lambda)
            .collect()
    }

    /// `f(x, λ)` in solver ordering.
    pub fn residual(&self, p: &Point) -> Vec<f64> {
        self.net.mismatch_with(&p.state, &self.schedule_at(p.lambda))
    }

    fn pack(&self, p: &Point) -> DVector<f64> {
        let mut y = self.net.pack(&p.state);
        y.push(p.lambda);
        DVector::from_vec(y)
    }

    fn unpack(&self, y: &DVector<f64>, template: &PFState) -> Point {
        let mut state = template.clone();
        let d = self.net.dim();
        self.net.unpack_into(&y.as_slice()[..d], &mut state);
        Point {
            state,
            lambda: y[d],
        }
    }

    /// `[J  f_λ; row]`.
    fn augmented(&self, p: &Point, row: &DVector<f64>) -> DMatrix<f64> {
        let d = self.net.dim();
        let jac = self.net.jacobian(&p.state);
        let mut a = DMatrix::zeros(d + 1, d + 1);
        a.view_mut((0, 0), (d, d)).copy_from(&jac);
        for r in 0..d {
            a[(r, d)] = self.f_lambda[r];
        }
        for c in 0..=d {
            a[(d, c)] = row[c];
        }
        a
    }

    /// Unit vector selecting `λ`; the natural-parameter row.
    pub fn lambda_row(&self) -> DVector<f64> {
        let d = self.net.dim();
        let mut e = DVector::zeros(d + 1);
        e[d] = 1.0;
        e
    }

    /// Normalized tangent at `p`, solving `[J f_λ; prev] z = [0; 1]`.
    pub fn tangent(&self, p: &Point, prev: &DVector<f64>) -> Result<DVector<f64>, CpfError> {
        let d = self.net.dim();
        let mut rhs = DVector::zeros(d + 1);
        rhs[d] = 1.0;
        let z = solve_dense(self.augmented(p, prev), rhs).ok_or(CpfError::SingularAugmentedSystem)?;
        let norm = z.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(CpfError::SingularAugmentedSystem);
        }
        let mut z = z / norm;
        if z.dot(prev) < 0.0 {
            z = -z;
        }
        Ok(z)
    }

    fn param_row(&self, tangent: &DVector<f64>) -> DVector<f64> {
        match self.opts.scheme {
            Parameterization::Natural => self.lambda_row(),
            Parameterization::PseudoArcLength => tangent.clone(),
        }
    }

    /// Tangent at `p` given the previous tangent, then a step of length
    /// `step` along it. Returns the predicted point and the tangent.
    pub fn predict(
        &self,
        p: &Point,
        prev_tangent: &DVector<f64>,
        step: f64,
    ) -> Result<(Point, DVector<f64>), CpfError> {
        let z = self.tangent(p, &self.param_row(prev_tangent))?;
        let y = self.pack(p) + &z * step;
        Ok((self.unpack(&y, &p.state), z))
    }

    /// Newton on `[f(x, λ); p(x, λ)] = 0`. Returns the corrected point and
    /// the number of Newton updates taken.
    pub fn correct(
        &self,
        predicted: &Point,
        tangent: &DVector<f64>,
    ) -> Result<(Point, usize), CpfError> {
        let d = self.net.dim();
        let anchor = self.pack(predicted);
        let row = self.param_row(tangent);
        let mut y = anchor.clone();
        let mut point = predicted.clone();
        for iter in 0..=self.opts.corrector_max_iter {
            let f = self.residual(&point);
            let constraint = row.dot(&(&y - &anchor));
            let norm = inf_norm(&f).max(constraint.abs());
            if !norm.is_finite() {
                return Err(CpfError::CorrectorDiverged);
            }
            if norm <= self.opts.corrector_tol {
                return Ok((point, iter));
            }
            if iter == self.opts.corrector_max_iter {
                break;
            }
            let rhs = DVector::from_iterator(
                d + 1,
                f.iter().map(|v| -v).chain(std::iter::once(-constraint)),
            );
            let dy = solve_dense(self.augmented(&point, &row), rhs)
                .ok_or(CpfError::CorrectorDiverged)?;
            y += dy;
            point = self.unpack(&y, &point.state);
        }
        Err(CpfError::CorrectorDiverged)
    }

    /// Base-case solution at `λ = 0` from a flat start.
    pub fn base_point(&self) -> Result<Point, CpfError> {
        let sol = self
            .net
            .solve_with(
                &self.net.flat_start(),
                &self.net.sbus,
                DEFAULT_TOL.min(self.opts.corrector_tol),
                DEFAULT_MAX_ITER,
            )
            .map_err(|_| CpfError::BaseCaseDiverged)?;
        if !sol.converged {
            return Err(CpfError::BaseCaseDiverged);
        }
        Ok(Point {
            state: sol.state,
            lambda: 0.0,
        })
    }
}

fn finish(points: Vec<TracePoint>, terminated: Termination, steps: usize) -> CpfTrace {
    let best = points
        .iter()
        .enumerate()
        .fold(0, |b, (k, p)| if p.lambda > points[b].lambda { k } else { b });
    CpfTrace {
        max_lambda: points[best].lambda,
        critical_state: points[best].state.clone(),
        points,
        terminated,
        steps,
    }
}

/// Runs predictor/corrector continuation from the base case until the nose
/// is located (or the step collapses).
pub fn run_cpf(
    case: &NetworkCase,
    schedule: &TransferSchedule,
    opts: &CpfOptions,
) -> Result<CpfTrace, CpfError> {
    let cont = Continuation::new(case, schedule, opts)?;
    let base = cont.base_point()?;

    if schedule.is_zero() {
        let point = TracePoint {
            state: base.state,
            lambda: 0.0,
            dlambda: 0.0,
        };
        return Ok(finish(vec![point], Termination::TargetReached, 0));
    }

    let mut tangent = cont.tangent(&base, &cont.lambda_row())?;
    let mut current = base;
    let mut points = vec![TracePoint {
        state: current.state.clone(),
        lambda: 0.0,
        dlambda: tangent[tangent.len() - 1],
    }];
    let mut step = opts.step;
    let mut crossing: Option<TracePoint> = None;
    let mut steps = 0;

    let terminated = loop {
        if steps >= opts.max_steps {
            break Termination::StepUnderflow;
        }
        steps += 1;

        // The tangent at `current` was computed when it was accepted.
        let y = cont.pack(&current) + &tangent * step;
        let predicted = cont.unpack(&y, &current.state);
        let corrected = cont.correct(&predicted, &tangent);
        let (next, iters) = match corrected {
            Ok(ok) => ok,
            Err(_) => {
                step *= 0.5;
                if step < opts.step_min {
                    break if crossing.is_some() {
                        Termination::NoseDetected
                    } else {
                        Termination::StepUnderflow
                    };
                }
                continue;
            }
        };
        let next_tangent = match cont.tangent(&next, &cont.param_row(&tangent)) {
            Ok(z) => z,
            Err(_) => {
                step *= 0.5;
                if step < opts.step_min {
                    break Termination::CorrectorFailed;
                }
                continue;
            }
        };
        let dlambda = next_tangent[next_tangent.len() - 1];

        if dlambda <= 0.0 || next.lambda <= current.lambda {
            // Past the nose: keep the crossing and bisect the step.
            crossing = Some(TracePoint {
                state: next.state,
                lambda: next.lambda,
                dlambda: dlambda.min(0.0),
            });
            step *= 0.5;
            if step < opts.step_min {
                break Termination::NoseDetected;
            }
            continue;
        }

        points.push(TracePoint {
            state: next.state.clone(),
            lambda: next.lambda,
            dlambda,
        });
        current = next;
        tangent = next_tangent;
        if opts.adapt && crossing.is_none() && iters <= 3 {
            step = (step * 1.5).min(opts.step_max);
        }
    };

    if terminated == Termination::NoseDetected {
        if let Some(c) = crossing {
            points.push(c);
        }
    }
    Ok(finish(points, terminated, steps))
}
