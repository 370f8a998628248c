//! Reproducible Brownian increments.
//!
//! Stream `i` of a bank is a ChaCha8 keystream whose key is derived from the
//! bank seed and whose stream id is `i`. ChaCha is counter based, so stream
//! `i` does not depend on how many other streams exist or on the order (or
//! thread) in which streams are filled. This gives prefix stability: the
//! first `N` streams of a bank with `N' > N` particles coincide bit for bit
//! with an `N`-particle bank of the same seed.
//!
//! Banks with different `dt` are **independent** draws, even at the same
//! seed. To compare time steps under matched noise use
//! [`NoiseBank::refine`], which splits every increment into two halves by
//! Brownian-bridge sampling so that pairwise sums reproduce the coarse bank
//! exactly (up to one rounding).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_n = n · T / n_steps` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::param(format!("time horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::param("time grid needs at least one step"));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn node(&self, n: usize) -> f64 {
        if n == self.n_steps {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    /// Same horizon, twice the steps.
    pub fn halved(&self) -> Self {
        Self {
            horizon: self.horizon,
            n_steps: self.n_steps * 2,
        }
    }

    /// Index of the node closest to `t`.
    pub fn nearest_node(&self, t: f64) -> usize {
        ((t / self.dt()).round() as usize).min(self.n_steps)
    }
}

/// SplitMix64 finalizer, used to derive keys and sub-seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic sub-seed for a labelled purpose (e.g. replication `r` of
/// ladder point `N`).
pub fn derive_seed(seed: u64, label: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(label)) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

fn keyed_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_exact_mut(8) {
        s = mix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

const REFINE_LABEL: u64 = 0x5245_4649_4e45; // "REFINE"

/// Increments of one particle's Brownian path: `n_steps` consecutive
/// `m`-vectors, each `Normal(0, dt·I)`.
fn generate_stream(seed: u64, particle: usize, base_steps: usize, base_dt: f64, m: usize, refinements: u32) -> Vec<f64> {
    let mut rng = keyed_rng(seed, particle as u64);
    let scale = base_dt.sqrt();
    let mut incs: Vec<f64> = (0..base_steps * m)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut dt = base_dt;
    for level in 0..refinements {
        let mut bridge = keyed_rng(derive_seed(seed, REFINE_LABEL, level as u64), particle as u64);
        let half_sd = 0.5 * dt.sqrt();
        let steps = incs.len() / m;
        let mut fine = vec![0.0; incs.len() * 2];
        for n in 0..steps {
            for c in 0..m {
                let coarse = incs[n * m + c];
                let z: f64 = bridge.sample(StandardNormal);
                let first = 0.5 * coarse + half_sd * z;
                fine[(2 * n) * m + c] = first;
                fine[(2 * n + 1) * m + c] = coarse - first;
            }
        }
        incs = fine;
        dt *= 0.5;
    }
    incs
}

/// Materialized Brownian increments for `n_particles` independent streams.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBank {
    seed: u64,
    n_particles: usize,
    n_steps: usize,
    dt: f64,
    m: usize,
    refinements: u32,
    /// Stream-major: `increments[(i * n_steps + n) * m + c]`.
    increments: Vec<f64>,
}

/// Builds a bank of `n_particles` streams of `n_steps` increments of size
/// `dt` in dimension `m`.
pub fn make_noise_bank(seed: u64, n_particles: usize, n_steps: usize, dt: f64, m: usize) -> Result<NoiseBank> {
    if n_particles == 0 || n_steps == 0 || m == 0 {
        return Err(Error::param(format!(
            "noise bank counts must be positive (N = {n_particles}, steps = {n_steps}, m = {m})"
        )));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::param(format!("noise bank dt must be positive, got {dt}")));
    }
    let mut bank = NoiseBank {
        seed,
        n_particles: 0,
        n_steps,
        dt,
        m,
        refinements: 0,
        increments: Vec::new(),
    };
    bank.append_streams(n_particles);
    Ok(bank)
}

/// Returns a bank with `extra_particles` more streams; existing streams are
/// unchanged bit for bit.
pub fn extend_bank(bank: &NoiseBank, extra_particles: usize) -> NoiseBank {
    let mut out = bank.clone();
    out.append_streams(extra_particles);
    out
}

impl NoiseBank {
    fn base_steps(&self) -> usize {
        self.n_steps >> self.refinements
    }

    fn base_dt(&self) -> f64 {
        self.dt * f64::from(1u32 << self.refinements)
    }

    fn append_streams(&mut self, extra: usize) {
        let start = self.n_particles;
        let len = self.n_steps * self.m;
        let (seed, base_steps, base_dt, m, refinements) =
            (self.seed, self.base_steps(), self.base_dt(), self.m, self.refinements);
        let mut fresh = vec![0.0; extra * len];
        fresh
            .par_chunks_mut(len)
            .enumerate()
            .for_each(|(k, chunk)| {
                chunk.copy_from_slice(&generate_stream(seed, start + k, base_steps, base_dt, m, refinements));
            });
        self.increments.extend_from_slice(&fresh);
        self.n_particles += extra;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn noise_dim(&self) -> usize {
        self.m
    }

    /// All increments of particle `i`.
    pub fn stream(&self, i: usize) -> &[f64] {
        let len = self.n_steps * self.m;
        &self.increments[i * len..(i + 1) * len]
    }

    /// Increment of particle `i` over `[t_n, t_{n+1}]`.
    pub fn increment(&self, i: usize, n: usize) -> &[f64] {
        let base = (i * self.n_steps + n) * self.m;
        &self.increments[base..base + self.m]
    }

    /// Copies step `n` of the first `out.len() / m` particles into `out`.
    pub fn fill_step(&self, n: usize, out: &mut [f64]) {
        for (i, o) in out.chunks_exact_mut(self.m).enumerate() {
            o.copy_from_slice(self.increment(i, n));
        }
    }

    /// Bank on the grid with `dt / 2` whose consecutive pairs of increments
    /// sum to this bank's increments.
    pub fn refine(&self) -> NoiseBank {
        let mut out = NoiseBank {
            seed: self.seed,
            n_particles: 0,
            n_steps: self.n_steps * 2,
            dt: self.dt * 0.5,
            m: self.m,
            refinements: self.refinements + 1,
            increments: Vec::new(),
        };
        out.append_streams(self.n_particles);
        out
    }

    /// Step-by-step reader over this bank's streams without materializing
    /// them.
    pub fn streaming(&self) -> NoiseStreams {
        let base_dt = self.dt * (1u64 << self.refinements) as f64;
        NoiseStreams::refined(self.seed, self.n_particles, base_dt, self.m, self.refinements)
    }
}

/// Sequential reader producing the same increments as a [`NoiseBank`] with
/// the same seed and refinement level, one step at a time, in `O(N)` memory.
pub struct NoiseStreams {
    streams: Vec<StreamState>,
    base_dt: f64,
    m: usize,
    refinements: u32,
}

struct StreamState {
    base: ChaCha8Rng,
    bridges: Vec<ChaCha8Rng>,
    buffer: Vec<f64>,
    pos: usize,
}

impl NoiseStreams {
    pub fn new(seed: u64, n_particles: usize, dt: f64, m: usize) -> Self {
        Self::refined(seed, n_particles, dt, m, 0)
    }

    /// Streams on the grid `base_dt / 2^refinements`, matching
    /// `refine()` applied `refinements` times to the bank on `base_dt`.
    pub fn refined(seed: u64, n_particles: usize, base_dt: f64, m: usize, refinements: u32) -> Self {
        let per_coarse = 1usize << refinements;
        let streams = (0..n_particles)
            .map(|i| StreamState {
                base: keyed_rng(seed, i as u64),
                bridges: (0..refinements)
                    .map(|level| keyed_rng(derive_seed(seed, REFINE_LABEL, level as u64), i as u64))
                    .collect(),
                buffer: vec![0.0; per_coarse * m],
                pos: per_coarse,
            })
            .collect();
        Self {
            streams,
            base_dt,
            m,
            refinements,
        }
    }

    pub fn n_particles(&self) -> usize {
        self.streams.len()
    }

    pub fn dt(&self) -> f64 {
        self.base_dt / (1u64 << self.refinements) as f64
    }

    /// Writes the next increment of the first `out.len() / m` streams.
    pub fn next_step(&mut self, out: &mut [f64]) {
        let (m, base_dt) = (self.m, self.base_dt);
        let per_coarse = 1usize << self.refinements;
        let scale = base_dt.sqrt();
        for (st, o) in self.streams.iter_mut().zip(out.chunks_exact_mut(m)) {
            if st.pos == per_coarse {
                let coarse: Vec<f64> = (0..m).map(|_| scale * st.base.sample::<f64, _>(StandardNormal)).collect();
                split_increment(&coarse, base_dt, &mut st.bridges, &mut st.buffer, m);
                st.pos = 0;
            }
            o.copy_from_slice(&st.buffer[st.pos * m..(st.pos + 1) * m]);
            st.pos += 1;
        }
    }
}

/// Brownian-bridge split of one increment into `out.len() / m` finer ones,
/// depth first so every level consumes its draws in time order.
fn split_increment(inc: &[f64], dt: f64, bridges: &mut [ChaCha8Rng], out: &mut [f64], m: usize) {
    let Some((bridge, deeper)) = bridges.split_first_mut() else {
        out.copy_from_slice(inc);
        return;
    };
    let half_sd = 0.5 * dt.sqrt();
    let mut first = vec![0.0; m];
    let mut second = vec![0.0; m];
    for c in 0..m {
        let z: f64 = bridge.sample(StandardNormal);
        first[c] = 0.5 * inc[c] + half_sd * z;
        second[c] = inc[c] - first[c];
    }
    let (lo, hi) = out.split_at_mut(out.len() / 2);
    split_increment(&first, 0.5 * dt, deeper, lo, m);
    split_increment(&second, 0.5 * dt, deeper, hi, m);
}

/// Source of per-step increments for a block of particles.
pub trait IncrementSource {
    fn noise_dim(&self) -> usize;
    /// Writes the increments of step `n` for the first `out.len() / m`
    /// particles. Steps must be requested in increasing order.
    fn fill(&mut self, n: usize, out: &mut [f64]);
}

impl IncrementSource for &NoiseBank {
    fn noise_dim(&self) -> usize {
        self.m
    }

    fn fill(&mut self, n: usize, out: &mut [f64]) {
        self.fill_step(n, out);
    }
}

impl IncrementSource for NoiseStreams {
    fn noise_dim(&self) -> usize {
        self.m
    }

    fn fill(&mut self, _n: usize, out: &mut [f64]) {
        self.next_step(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_prefix_stable() {
        let a = make_noise_bank(7, 64, 50, 0.01, 1).unwrap();
        let b = make_noise_bank(7, 64, 50, 0.01, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(extend_bank(&a, 0), a);
        let big = extend_bank(&a, 64);
        assert_eq!(big.n_particles(), 128);
        assert_eq!(big.stream(3), a.stream(3));
        let direct = make_noise_bank(7, 128, 50, 0.01, 1).unwrap();
        assert_eq!(direct, big);
    }

    #[test]
    fn streaming_matches_bank() {
        let bank = make_noise_bank(99, 5, 20, 0.1, 2).unwrap();
        let mut s = bank.streaming();
        let mut a = vec![0.0; 10];
        let mut b = vec![0.0; 10];
        for n in 0..20 {
            s.next_step(&mut a);
            bank.fill_step(n, &mut b);
            assert_eq!(a, b);
        }
        let fine = bank.refine().refine();
        let mut s = fine.streaming();
        assert!((s.dt() - 0.025).abs() < 1e-16);
        for n in 0..80 {
            s.next_step(&mut a);
            fine.fill_step(n, &mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn refinement_sums_to_coarse() {
        let bank = make_noise_bank(3, 4, 16, 0.25, 1).unwrap();
        let fine = bank.refine();
        assert_eq!(fine.n_steps(), 32);
        for i in 0..4 {
            for n in 0..16 {
                let s = fine.increment(i, 2 * n)[0] + fine.increment(i, 2 * n + 1)[0];
                assert!((s - bank.increment(i, n)[0]).abs() < 1e-15);
            }
        }
        let finer = fine.refine();
        assert_eq!(extend_bank(&finer, 2).stream(1), finer.stream(1));
    }

    #[test]
    fn different_dt_banks_are_independent_draws() {
        let coarse = make_noise_bank(3, 1, 16, 0.25, 1).unwrap();
        let fine = make_noise_bank(3, 1, 32, 0.125, 1).unwrap();
        let s = fine.increment(0, 0)[0] + fine.increment(0, 1)[0];
        assert!((s - coarse.increment(0, 0)[0]).abs() > 1e-12);
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(make_noise_bank(1, 0, 10, 0.1, 1).is_err());
        assert!(make_noise_bank(1, 1, 0, 0.1, 1).is_err());
        assert!(make_noise_bank(1, 1, 10, 0.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
    }
}
