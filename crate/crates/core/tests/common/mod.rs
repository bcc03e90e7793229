//! Independent reference routines used by the integration tests. None of
//! these call into the solver paths they check, apart from the plain Newton
//! solve used by the λ-sweep.
#![allow(dead_code)]

pub mod nets;

use contingen_core::{solve_newton, NetworkCase, PFState, TransferSchedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest λ on a uniform grid for which a warm-started Newton solve of the
/// load-scaled case converges.
pub fn sweep_max_lambda(case: &NetworkCase, sched: &TransferSchedule, spacing: f64) -> f64 {
    let n = case.n_buses();
    let mut init = contingen_core::flat_start(case);
    let mut best = f64::NAN;
    let mut k = 0usize;
    loop {
        let lambda = k as f64 * spacing;
        let mut scaled = case.clone();
        for (i, bus) in scaled.buses.iter_mut().enumerate() {
            bus.pd += lambda * sched.b[i] * case.base_mva;
            bus.qd += lambda * sched.b[n + i] * case.base_mva;
        }
        let sol = solve_newton(&scaled, &init, 1e-8, 30).unwrap();
        if !sol.converged {
            return best;
        }
        best = lambda;
        init = sol.state;
        k += 1;
    }
}

/// Connectivity by union-find over in-service branches.
pub fn connected_by_union_find(case: &NetworkCase) -> bool {
    let n = case.n_buses();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        if p[x] != x {
            let r = find(p, p[x]);
            p[x] = r;
        }
        p[x]
    }
    for br in case.branches.iter().filter(|b| b.status) {
        let f = case.buses.iter().position(|b| b.id == br.from).unwrap();
        let t = case.buses.iter().position(|b| b.id == br.to).unwrap();
        let (a, b) = (find(&mut parent, f), find(&mut parent, t));
        parent[a] = b;
    }
    let root = find(&mut parent, 0);
    (0..n).all(|k| find(&mut parent, k) == root)
}

/// Series/shunt admittance stamps assembled branch by branch with real
/// arithmetic: returns (G, B) dense matrices.
pub fn stamped_admittance(case: &NetworkCase) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = case.n_buses();
    let mut g = vec![vec![0.0; n]; n];
    let mut b = vec![vec![0.0; n]; n];
    let pos = |id: u32| case.buses.iter().position(|x| x.id == id).unwrap();
    for br in case.branches.iter().filter(|x| x.status) {
        let (f, t) = (pos(br.from), pos(br.to));
        let den = br.r * br.r + br.x * br.x;
        let (gs, bs) = (br.r / den, -br.x / den);
        let a = br.tap;
        g[f][f] += gs / (a * a);
        b[f][f] += (bs + br.b_charging / 2.0) / (a * a);
        g[t][t] += gs;
        b[t][t] += bs + br.b_charging / 2.0;
        g[f][t] -= gs / a;
        b[f][t] -= bs / a;
        g[t][f] -= gs / a;
        b[t][f] -= bs / a;
    }
    for (k, bus) in case.buses.iter().enumerate() {
        g[k][k] += bus.gs / case.base_mva;
        b[k][k] += bus.bs / case.base_mva;
    }
    (g, b)
}

/// Net injections P_i = V_i Σ_j V_j (G_ij cos θ_ij + B_ij sin θ_ij) and the
/// matching Q, from the stamped G/B matrices.
pub fn loop_injections(case: &NetworkCase, state: &PFState) -> (Vec<f64>, Vec<f64>) {
    let (g, b) = stamped_admittance(case);
    let n = case.n_buses();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let th = state.va[i] - state.va[j];
            p[i] += state.vm[i] * state.vm[j] * (g[i][j] * th.cos() + b[i][j] * th.sin());
            q[i] += state.vm[i] * state.vm[j] * (g[i][j] * th.sin() - b[i][j] * th.cos());
        }
    }
    (p, q)
}

/// Mismatch in the `[P(pv++pq); Q(pq)]` layout computed from the loop
/// injections and the case schedule.
pub fn loop_mismatch(case: &NetworkCase, state: &PFState) -> Vec<f64> {
    use contingen_core::BusKind;
    let (p, q) = loop_injections(case, state);
    let n = case.n_buses();
    let mut pg = vec![0.0; n];
    let mut qg = vec![0.0; n];
    let mut has_gen = vec![false; n];
    for gen in case.gens.iter().filter(|g| g.status) {
        let k = case.buses.iter().position(|b| b.id == gen.bus).unwrap();
        pg[k] += gen.pg;
        qg[k] += gen.qg;
        has_gen[k] = true;
    }
    let pv: Vec<usize> = (0..n)
        .filter(|&k| case.buses[k].kind == BusKind::PV && has_gen[k])
        .collect();
    let pq: Vec<usize> = (0..n)
        .filter(|&k| case.buses[k].kind != BusKind::Slack && !pv.contains(&k))
        .collect();
    let base = case.base_mva;
    let mut out = Vec::new();
    for &k in pv.iter().chain(&pq) {
        out.push(p[k] - (pg[k] - case.buses[k].pd) / base);
    }
    for &k in &pq {
        out.push(q[k] - (qg[k] - case.buses[k].qd) / base);
    }
    out
}

pub fn random_state(case: &NetworkCase, rng: &mut ChaCha8Rng) -> PFState {
    let n = case.n_buses();
    PFState {
        va: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        vm: (0..n).map(|_| rng.gen_range(0.85..1.15)).collect(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
