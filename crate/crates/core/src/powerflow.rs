//! Newton–Raphson AC power flow in polar coordinates.
//!
//! Unknowns are ordered `[va(pv ++ pq), vm(pq)]` and mismatches
//! `[P(pv ++ pq), Q(pq)]`, which is also the layout the continuation solver
//! augments with the load parameter.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::case::{build_ybus, BusKind, NetworkCase};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 30;

#[derive(Debug, Error, PartialEq)]
pub enum PfError {
    #[error("power-flow Jacobian is singular")]
    SingularJacobian,
    #[error("state has {got} buses, case has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Bus voltage angles (rad) and magnitudes (pu).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PFState {
    pub va: Vec<f64>,
    pub vm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PFSolution {
    pub state: PFState,
    pub iterations: usize,
    pub converged: bool,
    pub max_mismatch: f64,
}

impl PFState {
    pub fn voltages(&self) -> Vec<Complex64> {
        self.va
            .iter()
            .zip(&self.vm)
            .map(|(&a, &m)| Complex64::from_polar(m, a))
            .collect()
    }

    /// Index and value of the lowest voltage magnitude.
    pub fn vm_min(&self) -> (usize, f64) {
        self.vm
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, v)| if v < acc.1 { (k, v) } else { acc })
    }
}

/// Precomputed admittance matrix, bus classification and scheduled
/// injections for one case.
#[derive(Debug, Clone)]
pub struct Network {
    pub ybus: DMatrix<Complex64>,
    pub slack: usize,
    pub pv: Vec<usize>,
    pub pq: Vec<usize>,
    pub pvpq: Vec<usize>,
    /// Scheduled complex injection `(Pg - Pd) + j(Qg - Qd)` in pu.
    pub sbus: Vec<Complex64>,
    /// Voltage setpoints for the slack and PV buses; 1.0 elsewhere.
    pub v_set: Vec<f64>,
    pub slack_angle: f64,
}

impl Network {
    pub fn new(case: &NetworkCase) -> Self {
        let n = case.n_buses();
        let idx = case.index_map();
        let mut has_gen = vec![false; n];
        let mut sbus = vec![Complex64::new(0.0, 0.0); n];
        let mut v_set = vec![1.0; n];
        for (k, bus) in case.buses.iter().enumerate() {
            sbus[k] -= Complex64::new(bus.pd, bus.qd) / case.base_mva;
        }
        for g in case.gens.iter().filter(|g| g.status) {
            let k = idx[&g.bus];
            has_gen[k] = true;
            sbus[k] += Complex64::new(g.pg, g.qg) / case.base_mva;
            v_set[k] = g.vg;
        }
        let slack = case.slack_index();
        let mut pv = Vec::new();
        let mut pq = Vec::new();
        for (k, bus) in case.buses.iter().enumerate() {
            match bus.kind {
                BusKind::Slack => {}
                BusKind::PV if has_gen[k] => pv.push(k),
                _ => pq.push(k),
            }
        }
        if !has_gen[slack] {
            v_set[slack] = case.buses[slack].vm;
        }
        for &k in &pq {
            v_set[k] = 1.0;
        }
        let pvpq = pv.iter().chain(&pq).copied().collect();
        Network {
            ybus: build_ybus(case),
            slack,
            pv,
            pq,
            pvpq,
            sbus,
            v_set,
            slack_angle: case.buses[slack].va.to_radians(),
        }
    }

    pub fn n(&self) -> usize {
        self.sbus.len()
    }

    /// Number of unknowns, `N_pv + 2 N_pq`.
    pub fn dim(&self) -> usize {
        self.pvpq.len() + self.pq.len()
    }

    pub fn flat_start(&self) -> PFState {
        PFState {
            va: vec![self.slack_angle; self.n()],
            vm: self.v_set.clone(),
        }
    }

    /// Network injection `V ⊙ conj(Y V)`.
    pub fn calc_power(&self, state: &PFState) -> Vec<Complex64> {
        let v = state.voltages();
        let n = v.len();
        (0..n)
            .map(|i| {
                let mut current = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    current += self.ybus[(i, j)] * v[j];
                }
                v[i] * current.conj()
            })
            .collect()
    }

    /// Mismatch against an arbitrary schedule, in solver ordering.
    pub fn mismatch_with(&self, state: &PFState, sched: &[Complex64]) -> Vec<f64> {
        let s = self.calc_power(state);
        let mut out = Vec::with_capacity(self.dim());
        out.extend(self.pvpq.iter().map(|&k| (s[k] - sched[k]).re));
        out.extend(self.pq.iter().map(|&k| (s[k] - sched[k]).im));
        out
    }

    pub fn mismatch(&self, state: &PFState) -> Vec<f64> {
        self.mismatch_with(state, &self.sbus)
    }

    /// Analytic `∂mismatch / ∂[va(pvpq), vm(pq)]`.
    pub fn jacobian(&self, state: &PFState) -> DMatrix<f64> {
        let n = self.n();
        let v = state.voltages();
        let vnorm: Vec<Complex64> = v.iter().map(|x| x / x.norm()).collect();
        let ibus: Vec<Complex64> = (0..n)
            .map(|i| (0..n).map(|j| self.ybus[(i, j)] * v[j]).sum())
            .collect();
        let j_unit = Complex64::new(0.0, 1.0);
        // dS/dVa = j diag(V) conj(diag(I) - Y diag(V))
        // dS/dVm = diag(V) conj(Y diag(Vnorm)) + conj(diag(I)) diag(Vnorm)
        let ds_dva = |i: usize, k: usize| -> Complex64 {
            let mut inner = -(self.ybus[(i, k)] * v[k]);
            if i == k {
                inner += ibus[i];
            }
            j_unit * v[i] * inner.conj()
        };
        let ds_dvm = |i: usize, k: usize| -> Complex64 {
            let mut out = v[i] * (self.ybus[(i, k)] * vnorm[k]).conj();
            if i == k {
                out += ibus[i].conj() * vnorm[i];
            }
            out
        };
        let npvpq = self.pvpq.len();
        let dim = self.dim();
        let mut jac = DMatrix::zeros(dim, dim);
        for (r, &i) in self.pvpq.iter().enumerate() {
            for (c, &k) in self.pvpq.iter().enumerate() {
                jac[(r, c)] = ds_dva(i, k).re;
            }
            for (c, &k) in self.pq.iter().enumerate() {
                jac[(r, npvpq + c)] = ds_dvm(i, k).re;
            }
        }
        for (r, &i) in self.pq.iter().enumerate() {
            for (c, &k) in self.pvpq.iter().enumerate() {
                jac[(npvpq + r, c)] = ds_dva(i, k).im;
            }
            for (c, &k) in self.pq.iter().enumerate() {
                jac[(npvpq + r, npvpq + c)] = ds_dvm(i, k).im;
            }
        }
        jac
    }

    /// Packs the unknowns of `state` in solver ordering.
    pub fn pack(&self, state: &PFState) -> Vec<f64> {
        let mut x: Vec<f64> = self.pvpq.iter().map(|&k| state.va[k]).collect();
        x.extend(self.pq.iter().map(|&k| state.vm[k]));
        x
    }

    /// Writes solver-ordered unknowns back into `state`.
    pub fn unpack_into(&self, x: &[f64], state: &mut PFState) {
        let npvpq = self.pvpq.len();
        for (c, &k) in self.pvpq.iter().enumerate() {
            state.va[k] = x[c];
        }
        for (c, &k) in self.pq.iter().enumerate() {
            state.vm[k] = x[npvpq + c];
        }
    }

    /// Newton iterations against `sched` starting from `init`.
    pub fn solve_with(
        &self,
        init: &PFState,
        sched: &[Complex64],
        tol: f64,
        max_iter: usize,
    ) -> Result<PFSolution, PfError> {
        let mut state = init.clone();
        let mut f = self.mismatch_with(&state, sched);
        let mut norm = inf_norm(&f);
        let mut iterations = 0;
        while !(norm <= tol) && iterations < max_iter {
            if !norm.is_finite() {
                break;
            }
            let jac = self.jacobian(&state);
            let dx = solve_dense(jac, DVector::from_vec(f.iter().map(|v| -v).collect()))
                .ok_or(PfError::SingularJacobian)?;
            let mut x = self.pack(&state);
            for (xi, d) in x.iter_mut().zip(dx.iter()) {
                *xi += d;
            }
            self.unpack_into(&x, &mut state);
            iterations += 1;
            f = self.mismatch_with(&state, sched);
            norm = inf_norm(&f);
        }
        Ok(PFSolution {
            converged: norm <= tol,
            state,
            iterations,
            max_mismatch: norm,
        })
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| {
        if x.is_nan() || m.is_nan() {
            f64::NAN
        } else {
            m.max(x.abs())
        }
    })
}

/// Dense LU solve with partial pivoting; `None` when singular or the result
/// is not finite.
pub(crate) fn solve_dense(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    let x = a.lu().solve(&b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn check_dims(case: &NetworkCase, state: &PFState) -> Result<(), PfError> {
    let expected = case.n_buses();
    for got in [state.va.len(), state.vm.len()] {
        if got != expected {
            return Err(PfError::DimensionMismatch { expected, got });
        }
    }
    Ok(())
}

/// Active and reactive network injections (pu) from the polar admittance
/// sums `Σ V_i V_j |Y_ij| cos/sin(δ_i − δ_j − ∠Y_ij)`.
pub fn injections(case: &NetworkCase, state: &PFState) -> Result<(Vec<f64>, Vec<f64>), PfError> {
    check_dims(case, state)?;
    let y = build_ybus(case);
    let n = case.n_buses();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let yij = y[(i, j)];
            if yij.norm() == 0.0 {
                continue;
            }
            let ang = state.va[i] - state.va[j] - yij.arg();
            let mag = state.vm[i] * state.vm[j] * yij.norm();
            p[i] += mag * ang.cos();
            q[i] += mag * ang.sin();
        }
    }
    Ok((p, q))
}

pub fn mismatch(case: &NetworkCase, state: &PFState) -> Result<Vec<f64>, PfError> {
    check_dims(case, state)?;
    Ok(Network::new(case).mismatch(state))
}

pub fn jacobian(case: &NetworkCase, state: &PFState) -> Result<DMatrix<f64>, PfError> {
    check_dims(case, state)?;
    Ok(Network::new(case).jacobian(state))
}

/// Solves the base-case power flow. Non-convergence is reported in the
/// solution, not as an error.
pub fn solve_newton(
    case: &NetworkCase,
    init: &PFState,
    tol: f64,
    max_iter: usize,
) -> Result<PFSolution, PfError> {
    check_dims(case, init)?;
    let net = Network::new(case);
    net.solve_with(init, &net.sbus, tol, max_iter)
}

/// Flat start: `va` at the slack angle, `vm` at generator setpoints or 1.0.
pub fn flat_start(case: &NetworkCase) -> PFState {
    Network::new(case).flat_start()
}
