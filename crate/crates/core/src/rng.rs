//! Seeding and Gaussian sampling.
//!
//! Every random stream in a run is a ChaCha8 generator seeded through
//! [`derive_seed`]. Normal variates come from the Box–Muller transform so that
//! sampled values are reproducible per seed independent of `rand_distr`
//! algorithm changes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Independent random streams of a single run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init,
    Data,
    Probe,
    Teacher,
    Trial,
    Gradient,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Data => 2,
            Stream::Probe => 3,
            Stream::Teacher => 4,
            Stream::Trial => 5,
            Stream::Gradient => 6,
        }
    }
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream` of run `run_index` under `master_seed`.
///
/// Each component is offset by a distinct multiple of the golden-ratio
/// constant, finalized with SplitMix64 and folded into the running hash, so
/// permuting the components yields unrelated seeds.
pub fn derive_seed(master_seed: u64, run_index: u64, stream: Stream) -> u64 {
    let mut h = mix64(master_seed.wrapping_add(GOLDEN));
    h = mix64(h ^ mix64(run_index.wrapping_add(GOLDEN.wrapping_mul(2))));
    mix64(h ^ mix64(stream.tag().wrapping_add(GOLDEN.wrapping_mul(3))))
}

pub fn rng_from_seed(seed: u64) -> RunRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal sampler using the Box–Muller transform, caching the
/// second variate of each pair.
pub struct Gaussian<R> {
    rng: R,
    spare: Option<f64>,
}

impl Gaussian<RunRng> {
    pub fn from_seed(seed: u64) -> Self {
        Self::new(rng_from_seed(seed))
    }
}

impl<R: Rng> Gaussian<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (z0, z1) = self.pair();
        self.spare = Some(z1);
        z0
    }

    fn pair(&mut self) -> (f64, f64) {
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2: f64 = self.rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        let mut rest = out;
        if let Some(z) = self.spare.take() {
            match rest.split_first_mut() {
                Some((first, tail)) => {
                    *first = z;
                    rest = tail;
                }
                None => {
                    self.spare = Some(z);
                    return;
                }
            }
        }
        let mut chunks = rest.chunks_exact_mut(2);
        for pair in chunks.by_ref() {
            let (a, b) = self.pair();
            pair[0] = a;
            pair[1] = b;
        }
        if let Some(last) = chunks.into_remainder().first_mut() {
            *last = self.sample();
        }
    }

    /// Uniform ±1.
    pub fn sign(&mut self) -> f64 {
        if self.rng.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }
}
