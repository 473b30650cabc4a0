//! Monte Carlo side of the laboratory: Euler-Maruyama particle ensembles
//! with counter-indexed noise, energy-balance audits against the
//! generator's mean-energy identities, particle histograms for
//! cross-validation against the kinetic solver, and the noise-free
//! dissipation scenario with its momentum-zero break events.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::entropy::PositionTilt;
use crate::equilibrium::position_weight_log;
use crate::error::{Error, Result};
use crate::grid::{DensityField, PhaseGrid};
use crate::linalg::polyfit;
use crate::model::{Axis, ModelSpec};
use crate::rng::CounterRng;

/// Stream ids above this tag are reserved for initial-condition draws so
/// the dynamics can index its noise from counter zero.
const INIT_STREAM_TAG: u64 = 1 << 63;

/// Particle ensemble in flat particle-major storage. Trajectories are a
/// pure function of (seed, configuration): noise for particle k at step s
/// comes from stream k at counter index s, regardless of how the update
/// loop is scheduled.
#[derive(Clone, Debug)]
pub struct Ensemble {
    dim: usize,
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    alive: Vec<bool>,
    pub time: f64,
    seed: u64,
    steps: u64,
    dead: usize,
}

impl Ensemble {
    /// All particles at one phase point.
    pub fn at_point(model: &ModelSpec, n: usize, q0: &[f64], p0: &[f64], seed: u64) -> Result<Self> {
        let dim = model.dim();
        if n == 0 {
            return Err(Error::config("ensemble needs at least one particle"));
        }
        if q0.len() != dim || p0.len() != dim {
            return Err(Error::config("initial phase point has wrong dimension"));
        }
        let mut q0 = q0.to_vec();
        model.space().wrap(&mut q0);
        let mut q = Vec::with_capacity(n * dim);
        let mut p = Vec::with_capacity(n * dim);
        for _ in 0..n {
            q.extend_from_slice(&q0);
            p.extend_from_slice(p0);
        }
        Ok(Ensemble { dim, q, p, alive: vec![true; n], time: 0.0, seed, steps: 0, dead: 0 })
    }

    /// Particles drawn from the invariant law: positions by inverse CDF of
    /// the invariant position weight, momenta Gaussian with variance
    /// T M(q). One-dimensional models only.
    pub fn from_equilibrium(model: &ModelSpec, n: usize, seed: u64) -> Result<Self> {
        Self::sampled(model, None, 1.0, n, seed)
    }

    /// Equilibrium draw with every momentum scaled by a constant factor;
    /// factor 1 recovers the invariant law.
    pub fn from_equilibrium_scaled(
        model: &ModelSpec,
        n: usize,
        momentum_factor: f64,
        seed: u64,
    ) -> Result<Self> {
        if !momentum_factor.is_finite() {
            return Err(Error::config("momentum factor must be finite"));
        }
        Self::sampled(model, None, momentum_factor, n, seed)
    }

    /// Particles drawn from the break state g0 h*: tilted positions with
    /// the conditional momentum factor at equilibrium.
    pub fn from_tilted(model: &ModelSpec, tilt: &PositionTilt, n: usize, seed: u64) -> Result<Self> {
        tilt.validate(model)?;
        Self::sampled(model, Some(tilt), 1.0, n, seed)
    }

    fn sampled(
        model: &ModelSpec,
        tilt: Option<&PositionTilt>,
        momentum_factor: f64,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        if model.dim() != 1 {
            return Err(Error::config("equilibrium sampling requires a one-dimensional model"));
        }
        if n == 0 {
            return Err(Error::config("ensemble needs at least one particle"));
        }
        let table = CdfTable::build(model, tilt)?;
        let root = CounterRng::new(seed);
        let temp = model.temperature();
        let mut q = vec![0.0; n];
        let mut p = vec![0.0; n];
        for (k, (qk, pk)) in q.iter_mut().zip(p.iter_mut()).enumerate() {
            let stream = root.stream(k as u64 | INIT_STREAM_TAG);
            let x = table.sample(stream.uniform(0));
            let m = model.scalar_coeffs(x).mass;
            *qk = x;
            *pk = momentum_factor * (temp * m).sqrt() * stream.normal_pair(1).0;
        }
        model.space().wrap(&mut q);
        Ok(Ensemble { dim: 1, q, p, alive: vec![true; n], time: 0.0, seed, steps: 0, dead: 0 })
    }

    pub fn len(&self) -> usize {
        self.alive.len()
    }
    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn steps(&self) -> u64 {
        self.steps
    }
    pub fn is_alive(&self, k: usize) -> bool {
        self.alive[k]
    }
    pub fn dead_count(&self) -> usize {
        self.dead
    }
    pub fn dead_fraction(&self) -> f64 {
        self.dead as f64 / self.alive.len() as f64
    }
    pub fn particle(&self, k: usize) -> (&[f64], &[f64]) {
        (&self.q[k * self.dim..(k + 1) * self.dim], &self.p[k * self.dim..(k + 1) * self.dim])
    }

    /// Normalized counting density of the living particles on a grid.
    /// Positions bin by nearest cell, momenta beyond the grid cutoff fall
    /// into the outermost cells. One-dimensional models only.
    pub fn histogram(&self, grid: &Arc<PhaseGrid>) -> Result<DensityField> {
        if self.dim != 1 {
            return Err(Error::config("histograms require a one-dimensional ensemble"));
        }
        let alive = (self.alive.len() - self.dead) as f64;
        if alive == 0.0 {
            return Err(Error::numerical("no living particles to bin"));
        }
        let (nq, np) = (grid.nq(), grid.np());
        let (q_lo, _) = grid.q_bounds();
        let (dq, dp, p_max) = (grid.dq(), grid.dp(), grid.p_max());
        let mut counts = DMatrix::zeros(nq, np);
        for k in 0..self.alive.len() {
            if !self.alive[k] {
                continue;
            }
            let i = if grid.is_periodic() {
                ((self.q[k] / dq + 0.5).floor() as i64).rem_euclid(nq as i64) as usize
            } else {
                (((self.q[k] - q_lo) / dq).floor().max(0.0) as usize).min(nq - 1)
            };
            let j = (((self.p[k] + p_max) / dp + 0.5).floor().max(0.0) as usize).min(np - 1);
            counts[(i, j)] += 1.0;
        }
        let scale = 1.0 / (alive * grid.cell_weight());
        Ok(DensityField::from_data(grid.clone(), counts * scale))
    }
}

/// Tabulated inverse-CDF sampler for the position marginal.
struct CdfTable {
    lo: f64,
    h: f64,
    cum: Vec<f64>,
}

impl CdfTable {
    const CELLS: usize = 8192;

    fn build(model: &ModelSpec, tilt: Option<&PositionTilt>) -> Result<Self> {
        let (lo, hi) = match model.space().axes[0] {
            Axis::Circle => (0.0, crate::model::TWO_PI),
            Axis::Line { lo, hi } => (lo, hi),
        };
        let h = (hi - lo) / Self::CELLS as f64;
        let logs: Vec<f64> = (0..Self::CELLS)
            .map(|c| {
                let x = lo + (c as f64 + 0.5) * h;
                match tilt {
                    Some(t) => t.weight_log(model, x),
                    None => position_weight_log(model, x),
                }
            })
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::numerical("position weight is not finite anywhere"));
        }
        let mut cum = Vec::with_capacity(Self::CELLS + 1);
        cum.push(0.0);
        let mut acc = 0.0;
        for l in &logs {
            acc += (l - top).exp();
            cum.push(acc);
        }
        if acc <= 0.0 || !acc.is_finite() {
            return Err(Error::numerical("position weight has no mass"));
        }
        for c in cum.iter_mut() {
            *c /= acc;
        }
        cum[Self::CELLS] = 1.0;
        Ok(CdfTable { lo, h, cum })
    }

    /// Piecewise-linear inverse at u in (0, 1).
    fn sample(&self, u: f64) -> f64 {
        let idx = self.cum.partition_point(|c| *c < u).clamp(1, Self::CELLS) - 1;
        let lo_c = self.cum[idx];
        let hi_c = self.cum[idx + 1];
        let frac = if hi_c > lo_c { (u - lo_c) / (hi_c - lo_c) } else { 0.5 };
        self.lo + (idx as f64 + frac) * self.h
    }
}

/// One Euler-Maruyama step for every living particle, using noise indexed
/// by the ensemble's step counter. Particles reaching a nonfinite state
/// are flagged dead and frozen; the count is available from the ensemble.
pub fn em_step(model: &ModelSpec, ens: &mut Ensemble, dt: f64) -> Result<()> {
    if !dt.is_finite() || dt <= 0.0 {
        return Err(Error::config(format!("step size must be positive, got {dt}")));
    }
    if ens.dim != model.dim() {
        return Err(Error::config("ensemble dimension does not match the model"));
    }
    let plan = StepPlan { base: 0, step: ens.steps, dt, seed: ens.seed };
    ens.dead += step_range(model, &mut ens.q, &mut ens.p, &mut ens.alive, plan);
    ens.steps += 1;
    ens.time += dt;
    Ok(())
}

/// Where one update sits in the run: which global particle the slices
/// start at, which step is being taken, and with what size and seed.
#[derive(Clone, Copy)]
struct StepPlan {
    base: usize,
    step: u64,
    dt: f64,
    seed: u64,
}

/// Advances the particles in `q[..]/p[..]` (a contiguous particle range
/// starting at the plan's base index) by one step. Returns the number of
/// particles that died.
fn step_range(
    model: &ModelSpec,
    q: &mut [f64],
    p: &mut [f64],
    alive: &mut [bool],
    plan: StepPlan,
) -> usize {
    let StepPlan { base, step, dt, seed } = plan;
    let dim = model.dim();
    let root = CounterRng::new(seed);
    let sqrt_dt = dt.sqrt();
    let mut dead = 0;
    if dim == 1 {
        let periodic = matches!(model.space().axes[0], Axis::Circle);
        for (k, ok) in alive.iter_mut().enumerate() {
            if !*ok {
                continue;
            }
            let c = model.scalar_coeffs(q[k]);
            let v = p[k] / c.mass;
            let z = root.stream((base + k) as u64).normal_at(step);
            let qn = q[k] + v * dt;
            let pn = p[k] - (c.grad_hamiltonian(p[k]) + c.damping * v) * dt
                + c.diffusion.sqrt() * sqrt_dt * z;
            if qn.is_finite() && pn.is_finite() {
                let mut qa = [qn];
                if periodic {
                    model.space().wrap(&mut qa);
                }
                q[k] = qa[0];
                p[k] = pn;
            } else {
                *ok = false;
                dead += 1;
            }
        }
    } else {
        for (k, ok) in alive.iter_mut().enumerate() {
            if !*ok {
                continue;
            }
            let qs = &mut q[k * dim..(k + 1) * dim];
            let ps = &mut p[k * dim..(k + 1) * dim];
            let (dq_h, v) = model.grad_hamiltonian(qs, ps);
            let damp = model.damping_matrix(qs);
            let noise = model
                .diffusion_sqrt(qs)
                .expect("diffusion square root exists for a validated model");
            let stream = root.stream((base + k) as u64);
            let z = DVector::from_fn(dim, |a, _| stream.normal_at(step * dim as u64 + a as u64));
            let kick = noise * z * sqrt_dt;
            let drag = &damp * &v;
            let mut fine = true;
            for a in 0..dim {
                let qn = qs[a] + v[a] * dt;
                let pn = ps[a] - (dq_h[a] + drag[a]) * dt + kick[a];
                if !qn.is_finite() || !pn.is_finite() {
                    fine = false;
                    break;
                }
                qs[a] = qn;
                ps[a] = pn;
            }
            if fine {
                model.space().wrap(qs);
            } else {
                *ok = false;
                dead += 1;
            }
        }
    }
    dead
}

/// Advances a whole segment of steps, splitting the particles across
/// `threads` identical chunks. The result is bitwise independent of the
/// thread count because every particle's noise is indexed, not drawn from
/// shared state.
fn advance_segment(model: &ModelSpec, ens: &mut Ensemble, steps: usize, dt: f64, threads: usize) {
    let n = ens.alive.len();
    let dim = ens.dim;
    let threads = threads.max(1).min(n);
    let first_step = ens.steps;
    if threads == 1 {
        for s in 0..steps {
            let plan = StepPlan { base: 0, step: first_step + s as u64, dt, seed: ens.seed };
            ens.dead += step_range(model, &mut ens.q, &mut ens.p, &mut ens.alive, plan);
        }
    } else {
        let chunk = n.div_ceil(threads);
        let seed = ens.seed;
        let dead: usize = std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(threads);
            let mut q_rest = ens.q.as_mut_slice();
            let mut p_rest = ens.p.as_mut_slice();
            let mut alive_rest = ens.alive.as_mut_slice();
            let mut base = 0;
            while !alive_rest.is_empty() {
                let take = chunk.min(alive_rest.len());
                let (q_now, q_next) = q_rest.split_at_mut(take * dim);
                let (p_now, p_next) = p_rest.split_at_mut(take * dim);
                let (a_now, a_next) = alive_rest.split_at_mut(take);
                q_rest = q_next;
                p_rest = p_next;
                alive_rest = a_next;
                let this_base = base;
                base += take;
                handles.push(scope.spawn(move || {
                    let mut dead = 0;
                    for s in 0..steps {
                        let plan = StepPlan {
                            base: this_base,
                            step: first_step + s as u64,
                            dt,
                            seed,
                        };
                        dead += step_range(model, q_now, p_now, a_now, plan);
                    }
                    dead
                }));
            }
            handles.into_iter().map(|h| h.join().expect("worker panicked")).sum()
        });
        ens.dead += dead;
    }
    ens.steps += steps as u64;
    ens.time += steps as f64 * dt;
}

/// Ensemble statistics at one sample time. The mean energy is the sum of
/// the mean kinetic and potential parts by construction; standard errors
/// come from 64 contiguous particle batches. Interval rates are mean
/// per-particle energy differences against the previous sample and carry
/// a quiet NaN on the first sample. The conditional columns evaluate the
/// mean-energy identities through binned conditional momentum moments and
/// are NaN for models with more than one degree of freedom.
#[derive(Clone, Debug, Serialize)]
pub struct MomentSample {
    pub time: f64,
    pub mean_hamiltonian: f64,
    pub se_hamiltonian: f64,
    pub mean_kinetic: f64,
    pub mean_potential: f64,
    pub energy_rate_formula: f64,
    pub se_energy_rate: f64,
    pub energy_rate_conditional: f64,
    pub kinetic_rate_conditional: f64,
    pub interval_energy_rate: f64,
    pub se_interval_energy_rate: f64,
    pub interval_kinetic_rate: f64,
    pub se_interval_kinetic_rate: f64,
    pub merged_bins: usize,
    pub alive: usize,
}

const BATCHES: usize = 64;
const MIN_BIN_COUNT: usize = 30;

/// Mean and batch-means standard error over the living particles.
fn batch_stats(values: &[f64], alive: &[bool]) -> (f64, f64) {
    let n = alive.iter().filter(|a| **a).count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut batch_sums = [0.0; BATCHES];
    let mut batch_counts = [0usize; BATCHES];
    let mut rank = 0usize;
    for (v, ok) in values.iter().zip(alive) {
        if *ok {
            let b = rank * BATCHES / n;
            batch_sums[b.min(BATCHES - 1)] += v;
            batch_counts[b.min(BATCHES - 1)] += 1;
            rank += 1;
        }
    }
    let total: f64 = batch_sums.iter().sum();
    let mean = total / n as f64;
    let mut var = 0.0;
    let mut used = 0;
    for b in 0..BATCHES {
        if batch_counts[b] > 0 {
            let d = batch_sums[b] / batch_counts[b] as f64 - mean;
            var += d * d;
            used += 1;
        }
    }
    if used < 2 {
        return (mean, f64::NAN);
    }
    (mean, (var / (used * (used - 1)) as f64).sqrt())
}

/// Greedy left-to-right grouping of histogram bins so every group holds at
/// least `MIN_BIN_COUNT` particles; a trailing light group merges into its
/// neighbor. Returns the bin-to-group map and the number of groups.
fn merge_bins(counts: &[usize]) -> (Vec<usize>, usize) {
    let mut group_of = vec![0usize; counts.len()];
    let mut group = 0usize;
    let mut in_group = 0usize;
    for (b, c) in counts.iter().enumerate() {
        group_of[b] = group;
        in_group += c;
        if in_group >= MIN_BIN_COUNT && b + 1 < counts.len() {
            group += 1;
            in_group = 0;
        }
    }
    let groups = group + 1;
    if in_group < MIN_BIN_COUNT && groups > 1 {
        // Fold the light trailing group into the one before it.
        for g in group_of.iter_mut() {
            if *g == groups - 1 {
                *g = groups - 2;
            }
        }
        return (group_of, groups - 1);
    }
    (group_of, groups)
}

struct MomentScratch {
    kinetic: Vec<f64>,
    potential: Vec<f64>,
    hamiltonian: Vec<f64>,
    rate: Vec<f64>,
}

impl MomentScratch {
    fn new(n: usize) -> Self {
        MomentScratch {
            kinetic: vec![0.0; n],
            potential: vec![0.0; n],
            hamiltonian: vec![0.0; n],
            rate: vec![0.0; n],
        }
    }
}

/// One full statistics pass over the ensemble; `prev` supplies the
/// previous sample's per-particle energies for the interval rates.
fn moment_pass(
    model: &ModelSpec,
    ens: &Ensemble,
    bins: usize,
    scratch: &mut MomentScratch,
    prev: Option<(f64, &[f64], &[f64])>,
) -> MomentSample {
    let n = ens.alive.len();
    let dim = ens.dim;
    for k in 0..n {
        if !ens.alive[k] {
            scratch.kinetic[k] = f64::NAN;
            scratch.potential[k] = f64::NAN;
            scratch.hamiltonian[k] = f64::NAN;
            scratch.rate[k] = f64::NAN;
            continue;
        }
        if dim == 1 {
            let c = model.scalar_coeffs(ens.q[k]);
            scratch.kinetic[k] = c.kinetic(ens.p[k]);
            scratch.potential[k] = c.potential;
            scratch.rate[k] = c.energy_rate(ens.p[k]);
        } else {
            let (qs, ps) = ens.particle(k);
            let split = model.hamiltonian(qs, ps);
            scratch.kinetic[k] = split.kinetic;
            scratch.potential[k] = split.potential;
            let minv = model.mass_inv(qs);
            let d = model.diffusion_matrix(qs);
            let f = model.damping_matrix(qs);
            let v = &minv * DVector::from_column_slice(ps);
            scratch.rate[k] = 0.5 * (&minv * &d).trace() - v.dot(&(&f * &v));
        }
        scratch.hamiltonian[k] = scratch.kinetic[k] + scratch.potential[k];
    }
    let (mean_kinetic, _) = batch_stats(&scratch.kinetic, &ens.alive);
    let (mean_potential, _) = batch_stats(&scratch.potential, &ens.alive);
    let (_, se_hamiltonian) = batch_stats(&scratch.hamiltonian, &ens.alive);
    let (energy_rate_formula, se_energy_rate) = batch_stats(&scratch.rate, &ens.alive);

    let (energy_rate_conditional, kinetic_rate_conditional, merged_bins) = if dim == 1 {
        conditional_rates(model, ens, bins)
    } else {
        (f64::NAN, f64::NAN, 0)
    };

    let mut interval_energy_rate = f64::NAN;
    let mut se_interval_energy_rate = f64::NAN;
    let mut interval_kinetic_rate = f64::NAN;
    let mut se_interval_kinetic_rate = f64::NAN;
    if let Some((t_prev, h_prev, t_kin_prev)) = prev {
        let span = ens.time - t_prev;
        if span > 0.0 {
            let diffs: Vec<f64> = (0..n)
                .map(|k| (scratch.hamiltonian[k] - h_prev[k]) / span)
                .collect();
            let (m, se) = batch_stats(&diffs, &ens.alive);
            interval_energy_rate = m;
            se_interval_energy_rate = se;
            let diffs: Vec<f64> =
                (0..n).map(|k| (scratch.kinetic[k] - t_kin_prev[k]) / span).collect();
            let (m, se) = batch_stats(&diffs, &ens.alive);
            interval_kinetic_rate = m;
            se_interval_kinetic_rate = se;
        }
    }

    MomentSample {
        time: ens.time,
        mean_hamiltonian: mean_kinetic + mean_potential,
        se_hamiltonian,
        mean_kinetic,
        mean_potential,
        energy_rate_formula,
        se_energy_rate,
        energy_rate_conditional,
        kinetic_rate_conditional,
        interval_energy_rate,
        se_interval_energy_rate,
        interval_kinetic_rate,
        se_interval_kinetic_rate,
        merged_bins,
        alive: n - ens.dead,
    }
}

/// Tower-property evaluation of the mean energy and kinetic-energy rates:
/// per-particle coefficients with conditional momentum moments shared
/// across uniform position bins (merged where undersampled). Returns
/// (energy rate, kinetic rate, bins lost to merging).
fn conditional_rates(model: &ModelSpec, ens: &Ensemble, bins: usize) -> (f64, f64, usize) {
    let (lo, hi) = match model.space().axes[0] {
        Axis::Circle => (0.0, crate::model::TWO_PI),
        Axis::Line { lo, hi } => (lo, hi),
    };
    let width = (hi - lo) / bins as f64;
    let bin_of = |q: f64| (((q - lo) / width).floor().max(0.0) as usize).min(bins - 1);
    let mut counts = vec![0usize; bins];
    for k in 0..ens.alive.len() {
        if ens.alive[k] {
            counts[bin_of(ens.q[k])] += 1;
        }
    }
    let (group_of, n_groups) = merge_bins(&counts);
    let mut sum_p = vec![0.0; n_groups];
    let mut sum_pp = vec![0.0; n_groups];
    let mut group_counts = vec![0usize; n_groups];
    for k in 0..ens.alive.len() {
        if ens.alive[k] {
            let g = group_of[bin_of(ens.q[k])];
            sum_p[g] += ens.p[k];
            sum_pp[g] += ens.p[k] * ens.p[k];
            group_counts[g] += 1;
        }
    }
    let mut energy = 0.0;
    let mut kinetic = 0.0;
    let mut n_alive = 0usize;
    for k in 0..ens.alive.len() {
        if !ens.alive[k] {
            continue;
        }
        let g = group_of[bin_of(ens.q[k])];
        if group_counts[g] == 0 {
            continue;
        }
        let p_bar = sum_p[g] / group_counts[g] as f64;
        let pp_bar = sum_pp[g] / group_counts[g] as f64;
        let c = model.scalar_coeffs(ens.q[k]);
        let e = (0.5 * c.diffusion - pp_bar * c.damping / c.mass) / c.mass;
        energy += e;
        kinetic += e - p_bar * c.grad_potential / c.mass;
        n_alive += 1;
    }
    if n_alive == 0 {
        return (f64::NAN, f64::NAN, bins - n_groups);
    }
    (energy / n_alive as f64, kinetic / n_alive as f64, bins - n_groups)
}

/// How the particles start.
#[derive(Clone, Debug)]
pub enum EnsembleInit {
    /// Inverse-CDF positions from the invariant weight, Gaussian momenta.
    Equilibrium,
    /// Equilibrium draw with momenta scaled by a constant factor.
    EquilibriumScaledMomentum { factor: f64 },
    /// Positions from a tilted invariant weight, momenta at equilibrium.
    Tilted(PositionTilt),
    /// Every particle at the same phase point.
    Point { q: Vec<f64>, p: Vec<f64> },
}

/// Simulation plan: particle count, step size, horizon, seed, moment
/// sampling density, initial law, conditional binning and threading.
#[derive(Clone, Debug)]
pub struct SdeConfig {
    pub n_particles: usize,
    pub dt: f64,
    pub t_end: f64,
    pub seed: u64,
    pub n_samples: usize,
    pub init: EnsembleInit,
    pub conditional_bins: usize,
    pub threads: usize,
}

impl SdeConfig {
    pub fn new(n_particles: usize, dt: f64, t_end: f64, seed: u64) -> Self {
        SdeConfig {
            n_particles,
            dt,
            t_end,
            seed,
            n_samples: 9,
            init: EnsembleInit::Equilibrium,
            conditional_bins: 32,
            threads: 1,
        }
    }
    pub fn with_samples(mut self, n_samples: usize) -> Self {
        self.n_samples = n_samples;
        self
    }
    pub fn with_init(mut self, init: EnsembleInit) -> Self {
        self.init = init;
        self
    }
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads;
        self
    }
}

/// A finished simulation: the moment series and the final ensemble.
/// `dt` is the actual step used, the requested one shrunk to divide the
/// sampling interval exactly.
#[derive(Debug)]
pub struct SdeRun {
    pub samples: Vec<MomentSample>,
    pub ensemble: Ensemble,
    pub dt: f64,
}

/// Runs the Euler-Maruyama ensemble and records moment statistics at
/// uniformly spaced sample times. Deterministic for a fixed (seed,
/// config) pair, bitwise identical for any thread count. Fails if more
/// than 0.1% of the particles reach a nonfinite state.
pub fn simulate_ensemble(model: &ModelSpec, config: &SdeConfig) -> Result<SdeRun> {
    if !config.dt.is_finite() || config.dt <= 0.0 {
        return Err(Error::config("step size must be positive"));
    }
    if !config.t_end.is_finite() || config.t_end <= 0.0 {
        return Err(Error::config("time horizon must be positive"));
    }
    if config.n_samples < 2 {
        return Err(Error::config("at least two moment samples are needed"));
    }
    if config.conditional_bins == 0 {
        return Err(Error::config("conditional binning needs at least one bin"));
    }
    let mut ens = match &config.init {
        EnsembleInit::Equilibrium => {
            Ensemble::from_equilibrium(model, config.n_particles, config.seed)?
        }
        EnsembleInit::EquilibriumScaledMomentum { factor } => {
            Ensemble::from_equilibrium_scaled(model, config.n_particles, *factor, config.seed)?
        }
        EnsembleInit::Tilted(tilt) => {
            Ensemble::from_tilted(model, tilt, config.n_particles, config.seed)?
        }
        EnsembleInit::Point { q, p } => {
            Ensemble::at_point(model, config.n_particles, q, p, config.seed)?
        }
    };
    let span = config.t_end / (config.n_samples - 1) as f64;
    let steps_per_segment = (span / config.dt).ceil().max(1.0) as usize;
    let dt = span / steps_per_segment as f64;

    let n = config.n_particles;
    let mut scratch = MomentScratch::new(n);
    let mut samples = Vec::with_capacity(config.n_samples);
    samples.push(moment_pass(model, &ens, config.conditional_bins, &mut scratch, None));
    let mut h_prev = scratch.hamiltonian.clone();
    let mut t_prev = scratch.kinetic.clone();
    let mut time_prev = ens.time;
    for _ in 1..config.n_samples {
        advance_segment(model, &mut ens, steps_per_segment, dt, config.threads);
        let sample = moment_pass(
            model,
            &ens,
            config.conditional_bins,
            &mut scratch,
            Some((time_prev, &h_prev, &t_prev)),
        );
        samples.push(sample);
        h_prev.copy_from_slice(&scratch.hamiltonian);
        t_prev.copy_from_slice(&scratch.kinetic);
        time_prev = ens.time;
    }
    if ens.dead_fraction() > 1e-3 {
        return Err(Error::numerical(format!(
            "run failed: {} of {} particles reached a nonfinite state",
            ens.dead_count(),
            n
        )));
    }
    Ok(SdeRun { samples, ensemble: ens, dt })
}

/// Whole-trajectory comparison of the measured mean-energy motion against
/// the generator's identities, in combined standard errors.
#[derive(Clone, Debug, Serialize)]
pub struct EnergyAudit {
    pub t_start: f64,
    pub t_end: f64,
    /// Mean per-particle energy change per unit time over the window.
    pub fd_energy_rate: f64,
    pub se_fd_energy_rate: f64,
    /// Time average of the instantaneous formula (1/2)<M^-1,D> - |q_dot|^2_F.
    pub formula_energy_rate: f64,
    pub se_formula_energy_rate: f64,
    /// Time average of the binned tower-property form.
    pub conditional_energy_rate: f64,
    pub fd_kinetic_rate: f64,
    pub se_fd_kinetic_rate: f64,
    pub conditional_kinetic_rate: f64,
    /// |fd - formula| in combined standard errors, for each comparison.
    pub sigma_energy_direct: f64,
    pub sigma_energy_conditional: f64,
    pub sigma_kinetic: f64,
    /// Worst single-interval deviation of the energy rate, informational.
    pub max_interval_sigma: f64,
    pub merged_bins_max: usize,
    pub pass: bool,
}

/// Audits a recorded moment series: the mean energy rate measured from
/// per-particle differences must match the instantaneous-formula average
/// and the conditional-moment form within three combined standard errors,
/// and likewise for the kinetic energy against its tower-property rate.
pub fn energy_balance_audit(samples: &[MomentSample]) -> Result<EnergyAudit> {
    if samples.len() < 100 {
        return Err(Error::config(format!(
            "energy audit needs at least 100 samples, got {}",
            samples.len()
        )));
    }
    for s in samples {
        if s.mean_hamiltonian.to_bits() != (s.mean_kinetic + s.mean_potential).to_bits() {
            return Err(Error::invariant("mean energy is not the sum of its parts"));
        }
    }
    let t_start = samples[0].time;
    let t_end = samples[samples.len() - 1].time;
    let span = t_end - t_start;
    if !span.is_finite() || span <= 0.0 {
        return Err(Error::config("audit window has zero length"));
    }
    let m = samples.len() - 1;

    // Increments over disjoint intervals are nearly independent, so the
    // whole-window rate variance is the sum of the interval variances
    // weighted by their share of the window.
    let mut fd_h = 0.0;
    let mut var_fd_h = 0.0;
    let mut fd_t = 0.0;
    let mut var_fd_t = 0.0;
    let mut max_interval_sigma: f64 = 0.0;
    for k in 1..samples.len() {
        let w = (samples[k].time - samples[k - 1].time) / span;
        fd_h += samples[k].interval_energy_rate * w;
        var_fd_h += (samples[k].se_interval_energy_rate * w).powi(2);
        fd_t += samples[k].interval_kinetic_rate * w;
        var_fd_t += (samples[k].se_interval_kinetic_rate * w).powi(2);
        let mid_formula =
            0.5 * (samples[k].energy_rate_formula + samples[k - 1].energy_rate_formula);
        let se = samples[k]
            .se_interval_energy_rate
            .hypot(samples[k].se_energy_rate.max(samples[k - 1].se_energy_rate));
        if se > 0.0 {
            max_interval_sigma =
                max_interval_sigma.max((samples[k].interval_energy_rate - mid_formula).abs() / se);
        }
    }
    let se_fd_h = var_fd_h.sqrt();
    let se_fd_t = var_fd_t.sqrt();

    // Trapezoid time averages of the formula columns. Successive samples
    // of the formula are positively correlated, so the average of the
    // per-sample standard errors is kept as a conservative error bar.
    let mut formula_h = 0.0;
    let mut se_formula_h = 0.0;
    let mut cond_h = 0.0;
    let mut cond_t = 0.0;
    let mut merged_max = 0usize;
    for k in 1..samples.len() {
        let w = (samples[k].time - samples[k - 1].time) / span;
        formula_h +=
            0.5 * (samples[k].energy_rate_formula + samples[k - 1].energy_rate_formula) * w;
        cond_h += 0.5
            * (samples[k].energy_rate_conditional + samples[k - 1].energy_rate_conditional)
            * w;
        cond_t += 0.5
            * (samples[k].kinetic_rate_conditional + samples[k - 1].kinetic_rate_conditional)
            * w;
    }
    for s in samples {
        se_formula_h += s.se_energy_rate / (m + 1) as f64;
        merged_max = merged_max.max(s.merged_bins);
    }

    let sigma = |a: f64, b: f64, se: f64| if se > 0.0 { (a - b).abs() / se } else { f64::NAN };
    let sigma_energy_direct = sigma(fd_h, formula_h, se_fd_h.hypot(se_formula_h));
    let sigma_energy_conditional = if cond_h.is_nan() {
        f64::NAN
    } else {
        sigma(fd_h, cond_h, se_fd_h.hypot(se_formula_h))
    };
    let sigma_kinetic = if cond_t.is_nan() {
        f64::NAN
    } else {
        sigma(fd_t, cond_t, se_fd_t.hypot(se_formula_h))
    };
    let pass = sigma_energy_direct <= 3.0
        && (sigma_energy_conditional.is_nan() || sigma_energy_conditional <= 3.0)
        && (sigma_kinetic.is_nan() || sigma_kinetic <= 3.0);
    Ok(EnergyAudit {
        t_start,
        t_end,
        fd_energy_rate: fd_h,
        se_fd_energy_rate: se_fd_h,
        formula_energy_rate: formula_h,
        se_formula_energy_rate: se_formula_h,
        conditional_energy_rate: cond_h,
        fd_kinetic_rate: fd_t,
        se_fd_kinetic_rate: se_fd_t,
        conditional_kinetic_rate: cond_t,
        sigma_energy_direct,
        sigma_energy_conditional,
        sigma_kinetic,
        max_interval_sigma,
        merged_bins_max: merged_max,
        pass,
    })
}

/// One momentum zero along a noise-free damped trajectory, with the local
/// polynomial picture of the three energies around it.
#[derive(Clone, Debug, Serialize)]
pub struct BreakEvent {
    pub time: f64,
    pub position: f64,
    /// Fitted dH/dt at the event; vanishes at a break.
    pub h_slope: f64,
    /// Fitted d2H/dt2 at the event; vanishes at a break.
    pub h_curvature: f64,
    /// Fitted d3H/dt3 against -2 |M^-1 V'|^2_F.
    pub h_third: f64,
    pub h_third_predicted: f64,
    /// Fitted d2V/dt2 against -|V'|^2_{M^-1}; the potential peaks.
    pub v_curvature: f64,
    pub v_curvature_predicted: f64,
    /// Fitted d2T/dt2 against +|V'|^2_{M^-1}; the kinetic energy dips.
    pub t_curvature: f64,
    pub kinetic_at_event: f64,
    pub window: f64,
    pub slope_vanishes: bool,
    pub curvature_vanishes: bool,
    pub third_matches: bool,
    pub potential_peaks: bool,
    pub kinetic_dips: bool,
}

impl BreakEvent {
    pub fn all_pass(&self) -> bool {
        self.slope_vanishes
            && self.curvature_vanishes
            && self.third_matches
            && self.potential_peaks
            && self.kinetic_dips
    }
}

/// Noise-free trajectory audit: the energy-dissipation identity along the
/// path, the sign of the energy rate, and the break events.
#[derive(Clone, Debug, Serialize)]
pub struct DeterministicEnergyReport {
    pub t_end: f64,
    pub steps: usize,
    /// Worst mismatch of H(t) - H(0) against the integrated dissipation
    /// rate, relative to the larger of |H(0)| and the total change.
    pub energy_identity_error: f64,
    /// Worst positive excursion of the dissipation formula relative to its
    /// magnitude scale; the rate is nonpositive up to rounding.
    pub rate_sign_violation: f64,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub events: Vec<BreakEvent>,
}

impl DeterministicEnergyReport {
    pub fn all_events_pass(&self) -> bool {
        self.events.iter().all(BreakEvent::all_pass)
    }
}

const ODE_TOL: f64 = 1e-10;

/// Integrates the damped noise-free equations of motion from a phase
/// point with an adaptive embedded Runge-Kutta pair, audits the energy
/// identity dH/dt = -|M^-1 P|^2_F along the way, and analyses every
/// momentum zero crossed with a nonvanishing potential gradient: the
/// energy stalls to second order and resumes falling at the predicted
/// cubic rate while the potential and kinetic energies trade a strict
/// local maximum against a strict local minimum. Event detection covers
/// one-dimensional models; the trajectory audit itself is general.
pub fn deterministic_energy_audit(
    model: &ModelSpec,
    q0: &[f64],
    p0: &[f64],
    t_end: f64,
) -> Result<DeterministicEnergyReport> {
    let dim = model.dim();
    if q0.len() != dim || p0.len() != dim {
        return Err(Error::config("initial phase point has wrong dimension"));
    }
    if !t_end.is_finite() || t_end <= 0.0 {
        return Err(Error::config("time horizon must be positive"));
    }
    let mut y0 = Vec::with_capacity(2 * dim + 1);
    y0.extend_from_slice(q0);
    model.space().wrap(&mut y0);
    y0.extend_from_slice(p0);
    y0.push(0.0);

    let mut rhs = damped_flow(model);
    let mut ts = Vec::new();
    let mut ys: Vec<Vec<f64>> = Vec::new();
    integrate_adaptive(&mut rhs, 0.0, &y0, t_end, ODE_TOL, |t, y| {
        ts.push(t);
        ys.push(y.to_vec());
    })?;

    let h_of = |y: &[f64]| model.hamiltonian(&y[..dim], &y[dim..2 * dim]).total;
    let h0 = h_of(&y0);
    let mut max_change: f64 = 0.0;
    let mut identity_err: f64 = 0.0;
    let mut rate_max: f64 = 0.0;
    let mut rate_positive: f64 = 0.0;
    for y in &ys {
        let h = h_of(y);
        let aux = y[2 * dim];
        max_change = max_change.max((h - h0).abs());
        identity_err = identity_err.max((h - h0 - aux).abs());
        let rate = dissipation_rate(model, y, dim);
        rate_max = rate_max.max(rate.abs());
        rate_positive = rate_positive.max(rate);
    }
    let scale = max_change.max(h0.abs()).max(1e-300);
    let report_scale = rate_max.max(1e-300);

    let mut events = Vec::new();
    if dim == 1 {
        let dv_scale = ys
            .iter()
            .map(|y| model.scalar_coeffs(y[0]).grad_potential.abs())
            .fold(0.0, f64::max)
            .max(1e-300);
        let mut zero_times = Vec::new();
        for k in 1..ys.len() {
            if ys[k - 1][1] * ys[k][1] < 0.0 {
                let t0 = bisect_momentum_zero(
                    &mut rhs,
                    ts[k - 1],
                    &ys[k - 1],
                    ts[k],
                )?;
                zero_times.push((t0, k - 1));
            }
        }
        for (idx, &(t0, seg)) in zero_times.iter().enumerate() {
            let y_at = integrate_to(&mut rhs, ts[seg], &ys[seg], t0)?;
            if model.scalar_coeffs(y_at[0]).grad_potential.abs() <= 1e-8 * dv_scale {
                continue;
            }
            let prev_zero = if idx == 0 { 0.0 } else { zero_times[idx - 1].0 };
            let next_zero = zero_times.get(idx + 1).map(|z| z.0).unwrap_or(t_end);
            let half_period = (t0 - prev_zero).min(next_zero - t0).max(1e-6 * t_end);
            let window = 0.015 * 2.0 * half_period;
            events.push(analyse_event(model, &mut rhs, &ts, &ys, t0, window, t_end)?);
        }
    }

    Ok(DeterministicEnergyReport {
        t_end,
        steps: ts.len(),
        energy_identity_error: identity_err / scale,
        rate_sign_violation: rate_positive.max(0.0) / report_scale,
        initial_energy: h0,
        final_energy: h_of(ys.last().map(Vec::as_slice).unwrap_or(&y0)),
        events,
    })
}

/// dq = M^-1 p, dp = -dH/dq - F M^-1 p, and the running integral of the
/// dissipation rate as the last component.
fn damped_flow(model: &ModelSpec) -> impl FnMut(f64, &[f64], &mut [f64]) + '_ {
    let dim = model.dim();
    move |_t, y, dy| {
        let q = &y[..dim];
        let p = &y[dim..2 * dim];
        let (dq_h, v) = model.grad_hamiltonian(q, p);
        let drag = model.damping_matrix(q) * &v;
        for a in 0..dim {
            dy[a] = v[a];
            dy[dim + a] = -dq_h[a] - drag[a];
        }
        dy[2 * dim] = -v.dot(&(model.damping_matrix(q) * &v));
    }
}

fn dissipation_rate(model: &ModelSpec, y: &[f64], dim: usize) -> f64 {
    let v = model.velocity(&y[..dim], &y[dim..2 * dim]);
    -v.dot(&(model.damping_matrix(&y[..dim]) * &v))
}

/// Refines a momentum sign change inside (t_lo, t_hi) by bisection on
/// short re-integrations from the stored left state.
fn bisect_momentum_zero(
    rhs: &mut impl FnMut(f64, &[f64], &mut [f64]),
    t_lo: f64,
    y_lo: &[f64],
    t_hi: f64,
) -> Result<f64> {
    let p_index = (y_lo.len() - 1) / 2;
    let sign_lo = y_lo[p_index].signum();
    let (mut a, mut b) = (t_lo, t_hi);
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        if mid == a || mid == b {
            break;
        }
        let y_mid = integrate_to(rhs, t_lo, y_lo, mid)?;
        if y_mid[p_index].signum() == sign_lo && y_mid[p_index] != 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Samples the three energies across a symmetric window around an event,
/// fits cubics and compares against the break predictions.
fn analyse_event(
    model: &ModelSpec,
    rhs: &mut impl FnMut(f64, &[f64], &mut [f64]),
    ts: &[f64],
    ys: &[Vec<f64>],
    t0: f64,
    window: f64,
    t_end: f64,
) -> Result<BreakEvent> {
    let window = window.min(t0).min(t_end - t0).max(1e-9 * t_end);
    let start = t0 - window;
    // Anchor the window sampling on the last accepted state before it.
    let seg = ts.partition_point(|t| *t <= start).saturating_sub(1);
    let n_samples = 13;
    let times: Vec<f64> =
        (0..n_samples).map(|i| start + 2.0 * window * i as f64 / (n_samples - 1) as f64).collect();

    let mut rel = Vec::with_capacity(n_samples);
    let mut h_series = Vec::with_capacity(n_samples);
    let mut v_series = Vec::with_capacity(n_samples);
    let mut t_series = Vec::with_capacity(n_samples);
    let mut y = ys[seg].clone();
    let mut t = ts[seg];
    // The middle sample of the symmetric window is the event itself.
    let mut y_event = ys[seg].clone();
    for (i, target) in times.iter().enumerate() {
        y = integrate_to(rhs, t, &y, *target)?;
        t = *target;
        if i == n_samples / 2 {
            y_event.copy_from_slice(&y);
        }
        let split = model.hamiltonian(&y[..1], &y[1..2]);
        rel.push(target - t0);
        h_series.push(split.total);
        v_series.push(split.potential);
        t_series.push(split.kinetic);
    }
    let c0 = model.scalar_coeffs(y_event[0]);
    let kinetic_at_event = c0.kinetic(y_event[1]);
    let dv = c0.grad_potential;
    let v_curvature_predicted = -dv * dv / c0.mass;
    let h_third_predicted = -2.0 * (dv / c0.mass).powi(2) * c0.damping;

    let (h_fit, _) = polyfit(&rel, &h_series, 3)?;
    let (v_fit, _) = polyfit(&rel, &v_series, 3)?;
    let (t_fit, _) = polyfit(&rel, &t_series, 3)?;
    let h_slope = h_fit[1];
    let h_curvature = 2.0 * h_fit[2];
    let h_third = 6.0 * h_fit[3];
    let v_curvature = 2.0 * v_fit[2];
    let t_curvature = 2.0 * t_fit[2];

    // The potential curvature sets the energy-exchange scale of the
    // window; the stall conditions are measured against it.
    let exchange = v_curvature_predicted.abs().max(1e-300);
    let slope_vanishes = h_slope.abs() <= 1e-3 * exchange * window;
    let curvature_vanishes = h_curvature.abs() <= 1e-3 * exchange;
    let third_matches = if h_third_predicted.abs() > 1e-14 * exchange / window {
        (h_third - h_third_predicted).abs() <= 0.05 * h_third_predicted.abs()
    } else {
        h_third.abs() <= 1e-3 * exchange / window
    };
    let potential_peaks = v_curvature < 0.0
        && (v_curvature - v_curvature_predicted).abs() <= 0.05 * v_curvature_predicted.abs();
    let kinetic_dips = t_curvature > 0.0
        && (t_curvature + v_curvature_predicted).abs() <= 0.05 * v_curvature_predicted.abs();

    Ok(BreakEvent {
        time: t0,
        position: y_event[0],
        h_slope,
        h_curvature,
        h_third,
        h_third_predicted,
        v_curvature,
        v_curvature_predicted,
        t_curvature,
        kinetic_at_event,
        window,
        slope_vanishes,
        curvature_vanishes,
        third_matches,
        potential_peaks,
        kinetic_dips,
    })
}

// Embedded Runge-Kutta pair of orders 5 and 4 (Cash-Karp coefficients).
const CK_C: [f64; 6] = [0.0, 0.2, 0.3, 0.6, 1.0, 0.875];
const CK_A: [[f64; 5]; 6] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0],
    [0.3, -0.9, 1.2, 0.0, 0.0],
    [-11.0 / 54.0, 2.5, -70.0 / 27.0, 35.0 / 27.0, 0.0],
    [
        1631.0 / 55296.0,
        175.0 / 512.0,
        575.0 / 13824.0,
        44275.0 / 110592.0,
        253.0 / 4096.0,
    ],
];
const CK_B5: [f64; 6] = [37.0 / 378.0, 0.0, 250.0 / 621.0, 125.0 / 594.0, 0.0, 512.0 / 1771.0];
const CK_B4: [f64; 6] = [
    2825.0 / 27648.0,
    0.0,
    18575.0 / 48384.0,
    13525.0 / 55296.0,
    277.0 / 14336.0,
    0.25,
];

/// Adaptive integration from (t0, y0) to t1, calling `on_accept` after
/// every accepted step, returning the final state.
fn integrate_adaptive(
    rhs: &mut impl FnMut(f64, &[f64], &mut [f64]),
    t0: f64,
    y0: &[f64],
    t1: f64,
    tol: f64,
    mut on_accept: impl FnMut(f64, &[f64]),
) -> Result<Vec<f64>> {
    let dim = y0.len();
    let span = t1 - t0;
    if span <= 0.0 {
        return Ok(y0.to_vec());
    }
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut h = span * 1e-3;
    let mut k = vec![vec![0.0; dim]; 6];
    let mut stage = vec![0.0; dim];
    let mut y5 = vec![0.0; dim];
    let mut rejected_in_a_row = 0;
    for _ in 0..5_000_000 {
        if t >= t1 {
            return Ok(y);
        }
        h = h.min(t1 - t);
        if h < 1e-14 * span {
            return Err(Error::numerical("adaptive step size underflow"));
        }
        for s in 0..6 {
            for (d, sd) in stage.iter_mut().enumerate() {
                let mut acc = y[d];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += h * CK_A[s][j] * kj[d];
                }
                *sd = acc;
            }
            rhs(t + CK_C[s] * h, &stage, &mut k[s]);
        }
        let mut err: f64 = 0.0;
        for d in 0..dim {
            let mut v5 = y[d];
            let mut v4 = y[d];
            for s in 0..6 {
                v5 += h * CK_B5[s] * k[s][d];
                v4 += h * CK_B4[s] * k[s][d];
            }
            y5[d] = v5;
            let scale = tol + tol * y[d].abs().max(v5.abs());
            err = err.max((v5 - v4).abs() / scale);
        }
        if !err.is_finite() {
            return Err(Error::numerical("nonfinite state in adaptive integration"));
        }
        if err <= 1.0 {
            t += h;
            y.copy_from_slice(&y5);
            on_accept(t, &y);
            rejected_in_a_row = 0;
            h *= (0.9 * err.max(1e-10).powf(-0.2)).clamp(0.2, 5.0);
        } else {
            rejected_in_a_row += 1;
            if rejected_in_a_row > 60 {
                return Err(Error::numerical("adaptive integration cannot satisfy tolerance"));
            }
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    Err(Error::numerical("adaptive integration exceeded its step budget"))
}

fn integrate_to(
    rhs: &mut impl FnMut(f64, &[f64], &mut [f64]),
    t0: f64,
    y0: &[f64],
    t1: f64,
) -> Result<Vec<f64>> {
    integrate_adaptive(rhs, t0, y0, t1, ODE_TOL, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::build_break_initial_condition;
    use crate::equilibrium::build_equilibrium;
    use crate::model::{CustomParts, Damping, PositionSpace};

    fn pendulum() -> ModelSpec {
        ModelSpec::pendulum(1.0, 1.0, 1.0, 1.0).unwrap()
    }

    /// V = 0, M = 1, D = 0 on a line: momenta are conserved bit for bit
    /// and positions advance linearly.
    #[test]
    fn free_motion_keeps_momentum_bitwise() {
        let model = ModelSpec::custom(
            PositionSpace::line(-100.0, 100.0),
            1.0,
            CustomParts {
                potential: Arc::new(|_| 0.0),
                grad_potential: None,
                hess_potential: None,
                mass: Arc::new(|_| DMatrix::identity(1, 1)),
                mass_partial: None,
                diffusion: Arc::new(|_| DMatrix::zeros(1, 1)),
            },
        )
        .unwrap();
        let mut ens = Ensemble::at_point(&model, 3, &[0.25], &[0.7], 11).unwrap();
        let dt = 1.0 / 64.0;
        for _ in 0..100 {
            em_step(&model, &mut ens, dt).unwrap();
        }
        for k in 0..3 {
            assert_eq!(ens.p[k].to_bits(), 0.7f64.to_bits());
            assert!((ens.q[k] - (0.25 + 0.7 * 100.0 * dt)).abs() < 1e-12);
        }
        assert_eq!(ens.dead_count(), 0);
    }

    /// A violently stiff oscillator under a unit step explodes; every
    /// particle must be flagged dead, and a full run must refuse.
    #[test]
    fn dead_particles_are_flagged_and_reported() {
        let model = ModelSpec::harmonic(1, 1e8, 1.0, 1e-6, 1.0).unwrap();
        let mut ens = Ensemble::at_point(&model, 64, &[1.0], &[0.0], 5).unwrap();
        for _ in 0..150 {
            em_step(&model, &mut ens, 1.0).unwrap();
        }
        assert_eq!(ens.dead_count(), 64);
        assert!((0..64).all(|k| !ens.is_alive(k)));
        let config = SdeConfig::new(64, 1.0, 150.0, 5)
            .with_init(EnsembleInit::Point { q: vec![1.0], p: vec![0.0] });
        match simulate_ensemble(&model, &config) {
            Err(Error::Numerical(_)) => {}
            other => panic!("expected a numerical failure, got {other:?}"),
        }
    }

    /// Positions stay canonical on the circle and the histogram of a
    /// living ensemble carries unit mass.
    #[test]
    fn ensemble_positions_stay_canonical() {
        let model = pendulum();
        let mut ens = Ensemble::from_equilibrium(&model, 500, 42).unwrap();
        for _ in 0..50 {
            em_step(&model, &mut ens, 0.01).unwrap();
        }
        for k in 0..ens.len() {
            assert!((0.0..crate::model::TWO_PI).contains(&ens.q[k]));
            assert!(ens.p[k].is_finite());
        }
        let grid = Arc::new(PhaseGrid::periodic(16, 17, 6.0).unwrap());
        let hist = ens.histogram(&grid).unwrap();
        assert!((hist.mass() - 1.0).abs() < 1e-12);
    }

    /// The same seed reproduces a run bit for bit, the thread count never
    /// changes the result, and a different seed does.
    #[test]
    fn trajectories_reproduce_bitwise_and_ignore_threads() {
        let model = pendulum();
        let config = SdeConfig::new(37, 1e-3, 0.1, 7).with_samples(3);
        let serial = simulate_ensemble(&model, &config).unwrap();
        let again = simulate_ensemble(&model, &config).unwrap();
        let threaded = simulate_ensemble(&model, &config.clone().with_threads(3)).unwrap();
        for k in 0..37 {
            assert_eq!(serial.ensemble.q[k].to_bits(), again.ensemble.q[k].to_bits());
            assert_eq!(serial.ensemble.q[k].to_bits(), threaded.ensemble.q[k].to_bits());
            assert_eq!(serial.ensemble.p[k].to_bits(), threaded.ensemble.p[k].to_bits());
        }
        let other = simulate_ensemble(&model, &SdeConfig::new(37, 1e-3, 0.1, 8).with_samples(3))
            .unwrap();
        assert!((0..37).any(|k| other.ensemble.p[k].to_bits() != serial.ensemble.p[k].to_bits()));
    }

    /// Equilibrium draws reproduce the invariant law: the histogram is
    /// close to the grid equilibrium in L1, the mean momentum square is
    /// the temperature times the mass, and the mean position cosine
    /// matches a dense quadrature of the position weight.
    #[test]
    fn equilibrium_sampler_matches_invariant_law() {
        let model = pendulum();
        let n = 200_000;
        let ens = Ensemble::from_equilibrium(&model, n, 1234).unwrap();

        let grid = Arc::new(PhaseGrid::periodic(16, 17, 7.0).unwrap());
        let eq = build_equilibrium(&model, &grid).unwrap();
        let hist = ens.histogram(&grid).unwrap();
        let l1 = hist.l1_distance(&eq.f);
        assert!(l1 < 0.05, "sampler histogram is {l1} from equilibrium in L1");

        let mean_pp = ens.p.iter().map(|p| p * p).sum::<f64>() / n as f64;
        let tol = 3.0 * (2.0f64 / n as f64).sqrt();
        assert!((mean_pp - 1.0).abs() < tol, "momentum variance {mean_pp}");

        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..4096 {
            let q = crate::model::TWO_PI * i as f64 / 4096.0;
            let w = q.cos().exp();
            num += q.cos() * w;
            den += w;
        }
        let expected = num / den;
        let mean_cos = ens.q.iter().map(|q| q.cos()).sum::<f64>() / n as f64;
        let tol = 3.0 / (n as f64).sqrt();
        assert!(
            (mean_cos - expected).abs() < tol,
            "mean cosine {mean_cos} vs {expected}"
        );
    }

    /// Tilted draws land on the break state built by the grid route.
    #[test]
    fn histogram_of_tilted_sample_matches_break_state() {
        let model = pendulum();
        let tilt = PositionTilt::Shift { offset: 0.8 };
        let ens = Ensemble::from_tilted(&model, &tilt, 200_000, 99).unwrap();
        let grid = Arc::new(PhaseGrid::periodic(16, 17, 7.0).unwrap());
        let eq = build_equilibrium(&model, &grid).unwrap();
        let f0 = build_break_initial_condition(&model, &eq, &tilt).unwrap();
        let l1 = ens.histogram(&grid).unwrap().l1_distance(&f0);
        assert!(l1 < 0.05, "tilted histogram is {l1} from the break state in L1");
    }

    /// Critically damped oscillator relaxed from a cold start: the final
    /// ensemble reproduces the Gaussian invariant moments within three
    /// standard errors plus a small discretization allowance.
    #[test]
    fn stationary_covariances_match_gaussian_law() {
        // kappa = 4, m = 1, D = 8, beta = 1: Einstein damping f = 4 is
        // exactly critical, the slowest mode decays at rate 2.
        let model = ModelSpec::harmonic(1, 4.0, 1.0, 8.0, 1.0).unwrap();
        let n = 100_000;
        let config = SdeConfig::new(n, 1e-3, 4.5, 2024)
            .with_samples(10)
            .with_init(EnsembleInit::Point { q: vec![0.8], p: vec![0.0] });
        let run = simulate_ensemble(&model, &config).unwrap();
        let ens = &run.ensemble;
        let nf = n as f64;
        let mean_q = ens.q.iter().sum::<f64>() / nf;
        let mean_p = ens.p.iter().sum::<f64>() / nf;
        let var_q = ens.q.iter().map(|q| (q - mean_q).powi(2)).sum::<f64>() / nf;
        let var_p = ens.p.iter().map(|p| (p - mean_p).powi(2)).sum::<f64>() / nf;

        // var q = T/kappa = 1/4, var p = T m = 1; the explicit-step bias
        // allowances are (3/4) f dt relative.
        let se = (2.0 / nf).sqrt();
        assert!(mean_q.abs() < 3.0 * (0.25f64 / nf).sqrt() + 1e-3, "mean q {mean_q}");
        assert!(mean_p.abs() < 3.0 * (1.0f64 / nf).sqrt() + 1e-3, "mean p {mean_p}");
        assert!((var_q - 0.25).abs() < 3.0 * 0.25 * se + 1.5e-3, "var q {var_q}");
        assert!((var_p - 1.0).abs() < 3.0 * se + 4e-3, "var p {var_p}");
    }

    /// Halving the step moves the measured momentum variance by less than
    /// the combined statistical resolution, and both runs agree with the
    /// exact invariant value.
    #[test]
    fn weak_error_shrinks_below_noise_when_step_halves() {
        let model = ModelSpec::harmonic(1, 1.0, 1.0, 2.0, 1.0).unwrap();
        let n = 100_000;
        let nf = n as f64;
        let mean_pp = |dt: f64| {
            let config = SdeConfig::new(n, dt, 1.0, 77).with_samples(2);
            let run = simulate_ensemble(&model, &config).unwrap();
            run.ensemble.p.iter().map(|p| p * p).sum::<f64>() / nf
        };
        let coarse = mean_pp(2e-3);
        let fine = mean_pp(1e-3);
        let se = (2.0 / nf).sqrt();
        assert!((coarse - 1.0).abs() < 3.0 * se + 2e-3, "coarse variance {coarse}");
        assert!((fine - 1.0).abs() < 3.0 * se + 1e-3, "fine variance {fine}");
        assert!(
            (coarse - fine).abs() < 3.0 * se * 2.0f64.sqrt(),
            "step halving moved the variance from {coarse} to {fine}"
        );
    }

    /// The whole-window energy audit accepts a stationary run, a cold
    /// start (whose initial heating rate is exactly half the diffusion
    /// over the mass) and a hot start that must cool.
    #[test]
    fn energy_audit_accepts_stationary_and_transient_runs() {
        let model = pendulum();
        let base = SdeConfig::new(20_000, 1e-2, 1.0, 31).with_samples(101);

        let run = simulate_ensemble(&model, &base).unwrap();
        let audit = energy_balance_audit(&run.samples).unwrap();
        assert!(audit.pass, "stationary audit: {audit:?}");
        assert!(
            audit.fd_energy_rate.abs() <= 3.0 * audit.se_fd_energy_rate.hypot(audit.se_formula_energy_rate),
            "stationary drift {} exceeds its error bar",
            audit.fd_energy_rate
        );

        let cold = base
            .clone()
            .with_init(EnsembleInit::Point { q: vec![1.2], p: vec![0.0] });
        let run = simulate_ensemble(&model, &cold).unwrap();
        assert_eq!(run.samples[0].energy_rate_formula, 0.5);
        let audit = energy_balance_audit(&run.samples).unwrap();
        assert!(audit.pass, "cold audit: {audit:?}");
        assert!(audit.fd_energy_rate > 0.0);

        let hot = base
            .clone()
            .with_init(EnsembleInit::EquilibriumScaledMomentum { factor: 3.0 });
        let run = simulate_ensemble(&model, &hot).unwrap();
        let audit = energy_balance_audit(&run.samples).unwrap();
        assert!(audit.pass, "hot audit: {audit:?}");
        assert!(audit.fd_energy_rate < 0.0);
    }

    /// Transient ensemble means against an independent moment-equation
    /// oracle for the linear model, integrated with the adaptive pair.
    #[test]
    fn moment_ode_oracle_matches_transient() {
        let model = ModelSpec::harmonic(1, 1.0, 1.0, 2.0, 1.0).unwrap();
        let n = 20_000;
        let config = SdeConfig::new(n, 1e-3, 1.0, 55)
            .with_samples(2)
            .with_init(EnsembleInit::Point { q: vec![1.0], p: vec![0.5] });
        let run = simulate_ensemble(&model, &config).unwrap();

        // d/dt (mq, mp, vqq, vqp, vpp) for kappa = m = 1, f = 1, D = 2.
        let mut rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0] - y[1];
            dy[2] = 2.0 * y[3];
            dy[3] = y[4] - y[2] - y[3];
            dy[4] = -2.0 * y[3] - 2.0 * y[4] + 2.0;
        };
        let y = integrate_adaptive(&mut rhs, 0.0, &[1.0, 0.5, 0.0, 0.0, 0.0], 1.0, 1e-12, |_, _| {})
            .unwrap();
        let nf = n as f64;
        let mean_q = run.ensemble.q.iter().sum::<f64>() / nf;
        let mean_p = run.ensemble.p.iter().sum::<f64>() / nf;
        assert!((mean_q - y[0]).abs() < 3.0 * (y[2] / nf).sqrt() + 1e-3, "mean q {mean_q} vs {}", y[0]);
        assert!((mean_p - y[1]).abs() < 3.0 * (y[4] / nf).sqrt() + 1e-3, "mean p {mean_p} vs {}", y[1]);
        let oracle_h = 0.5 * (y[4] + y[1] * y[1]) + 0.5 * (y[2] + y[0] * y[0]);
        let sample = run.samples.last().unwrap();
        assert!(
            (sample.mean_hamiltonian - oracle_h).abs() < 3.0 * sample.se_hamiltonian + 2e-3,
            "mean energy {} vs oracle {oracle_h}",
            sample.mean_hamiltonian
        );
    }

    /// Damped noise-free pendulum released from rest: every momentum zero
    /// shows the full break picture, and the dissipation identity holds
    /// along the trajectory.
    #[test]
    fn break_events_match_cubic_law() {
        let model = pendulum()
            .with_damping(Damping::Constant(DMatrix::from_element(1, 1, 0.3)))
            .unwrap();
        let report = deterministic_energy_audit(&model, &[2.5], &[0.0], 20.0).unwrap();
        assert!(report.energy_identity_error < 1e-6, "identity {}", report.energy_identity_error);
        assert!(report.rate_sign_violation < 1e-9, "sign {}", report.rate_sign_violation);
        assert!(report.final_energy < report.initial_energy);
        assert!(report.events.len() >= 2, "found {} events", report.events.len());
        let first = &report.events[0];
        assert!(first.slope_vanishes, "slope {:?}", first);
        assert!(first.curvature_vanishes, "curvature {:?}", first);
        assert!(first.third_matches, "third derivative {:?}", first);
        assert!(first.potential_peaks, "potential {:?}", first);
        assert!(first.kinetic_dips, "kinetic {:?}", first);
        assert!(first.h_third_predicted < 0.0);
        assert!(first.kinetic_at_event < 1e-8 * report.initial_energy);
        assert!(report.all_events_pass(), "{:#?}", report.events);
    }

    /// Without damping the energy is conserved, the dissipation rate is
    /// identically zero, and the turning points still trade a potential
    /// maximum against a kinetic minimum.
    #[test]
    fn frictionless_run_conserves_energy() {
        let model = pendulum()
            .with_damping(Damping::Constant(DMatrix::zeros(1, 1)))
            .unwrap();
        let report = deterministic_energy_audit(&model, &[2.5], &[0.0], 40.0).unwrap();
        assert!(report.energy_identity_error < 1e-6, "identity {}", report.energy_identity_error);
        assert_eq!(report.rate_sign_violation, 0.0);
        assert!(
            (report.final_energy - report.initial_energy).abs() < 1e-6 * report.initial_energy.abs()
        );
        assert!(!report.events.is_empty());
        for event in &report.events {
            assert_eq!(event.h_third_predicted, 0.0);
            assert!(event.all_pass(), "{event:?}");
        }
    }

    /// A particle resting at the potential minimum never moves: no break
    /// events, bitwise constant energy.
    #[test]
    fn minimum_rest_point_is_inert() {
        let model = pendulum()
            .with_damping(Damping::Constant(DMatrix::from_element(1, 1, 0.3)))
            .unwrap();
        let report = deterministic_energy_audit(&model, &[0.0], &[0.0], 5.0).unwrap();
        assert!(report.events.is_empty());
        assert_eq!(report.energy_identity_error, 0.0);
        assert_eq!(report.initial_energy.to_bits(), report.final_energy.to_bits());
    }

    /// Configuration errors are reported as such.
    #[test]
    fn config_errors_are_reported() {
        let model = pendulum();
        assert!(matches!(
            simulate_ensemble(&model, &SdeConfig::new(10, -1.0, 1.0, 0)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            simulate_ensemble(&model, &SdeConfig::new(10, 1e-2, 1.0, 0).with_samples(1)),
            Err(Error::Config(_))
        ));
        assert!(matches!(energy_balance_audit(&[]), Err(Error::Config(_))));
        assert!(matches!(
            Ensemble::at_point(&model, 0, &[0.0], &[0.0], 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            deterministic_energy_audit(&model, &[0.0], &[0.0], -1.0),
            Err(Error::Config(_))
        ));
    }
}
