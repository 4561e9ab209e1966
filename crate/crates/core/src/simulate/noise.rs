//! Counter-keyed Gaussian increments.
//!
//! Every (replication, stream) pair owns a ChaCha8 stream selected by the
//! stream id `(rep << 32) | key`, with key 0 the common noise and key
//! `i + 1` agent `i`. Normals come from Box-Muller on consecutive `u64`
//! pairs, so step `k` always sits at word offset `4 * (k / 2)` and any
//! increment can be regenerated in isolation.

use std::f64::consts::TAU;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamKey {
    Common,
    Agent(usize),
}

impl StreamKey {
    fn index(self) -> u64 {
        match self {
            StreamKey::Common => 0,
            StreamKey::Agent(i) => {
                assert!(i < u32::MAX as usize, "agent index out of range");
                i as u64 + 1
            }
        }
    }
}

/// Brownian increments for `replications` independent copies of the
/// common noise and the agents' idiosyncratic noises on a uniform grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseBundle {
    pub seed: u64,
    pub replications: usize,
    pub agents: usize,
    pub steps: usize,
    pub dt: f64,
}

impl NoiseBundle {
    pub fn new(seed: u64, replications: usize, agents: usize, steps: usize, horizon: f64) -> Self {
        assert!(steps >= 1 && horizon > 0.0);
        NoiseBundle {
            seed,
            replications,
            agents,
            steps,
            dt: horizon / steps as f64,
        }
    }

    fn rng(&self, rep: usize, key: StreamKey) -> ChaCha8Rng {
        assert!(rep < u32::MAX as usize, "replication index out of range");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((rep as u64) << 32) | key.index());
        rng
    }

    pub fn stream(&self, rep: usize, key: StreamKey) -> GaussianStream {
        GaussianStream {
            rng: self.rng(rep, key),
            spare: None,
            scale: self.dt.sqrt(),
        }
    }

    /// The increment of step `step`, generated without touching earlier ones.
    pub fn increment(&self, rep: usize, key: StreamKey, step: usize) -> f64 {
        let mut rng = self.rng(rep, key);
        rng.set_word_pos(4 * (step as u128 / 2));
        let (c, s) = box_muller(rng.next_u64(), rng.next_u64());
        self.dt.sqrt() * if step % 2 == 0 { c } else { s }
    }

    pub fn path(&self, rep: usize, key: StreamKey) -> Vec<f64> {
        let mut s = self.stream(rep, key);
        (0..self.steps).map(|_| s.next_increment()).collect()
    }
}

fn unit_open(bits: u64) -> f64 {
    // (0, 1]: never zero, so the logarithm stays finite.
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> (f64, f64) {
    let r = (-2.0 * unit_open(a).ln()).sqrt();
    let (s, c) = (TAU * unit_open(b)).sin_cos();
    (r * c, r * s)
}

/// Sequential increments `sqrt(dt) * z` of one stream.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
    scale: f64,
}

impl GaussianStream {
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (c, s) = box_muller(self.rng.next_u64(), self.rng.next_u64());
        self.spare = Some(s);
        c
    }

    #[inline]
    pub fn next_increment(&mut self) -> f64 {
        self.scale * self.next_normal()
    }
}
