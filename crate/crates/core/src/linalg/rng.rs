use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Gamma, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Seeded xoshiro256++ generator.
///
/// Every random decision in the simulator draws from one of these, so a run
/// is a pure function of its seeds and call order.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        Rng {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by a label, e.g. `"selection"` or `"init"`.
    pub fn stream(seed: u64, label: &str) -> Self {
        let mut h = FNV_OFFSET;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
        Self::seed_from(splitmix64(seed ^ splitmix64(h)))
    }

    /// Sub-stream indexed by integers (round, client, ...).
    pub fn substream(seed: u64, label: &str, indices: &[u64]) -> Self {
        let mut s = seed;
        for &i in indices {
            s = splitmix64(s ^ splitmix64(i.wrapping_add(0x5851_f42d_4c95_7f2d)));
        }
        Self::stream(s, label)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Gamma(shape, 1). `shape` must be positive and finite.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        Gamma::new(shape, 1.0)
            .expect("gamma shape checked by caller")
            .sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `m` distinct indices from `[0, n)`, uniformly without replacement,
    /// returned ascending.
    pub fn sample_distinct(&mut self, n: usize, m: usize) -> Vec<usize> {
        let mut picked = rand::seq::index::sample(&mut self.inner, n, m.min(n)).into_vec();
        picked.sort_unstable();
        picked
    }

    /// Index drawn with probability proportional to `weights`.
    /// Returns `None` when all weights are zero.
    pub fn weighted_index(&mut self, weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut target = self.uniform() * total;
        let mut last = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            last = Some(i);
            if target < w {
                return Some(i);
            }
            target -= w;
        }
        last
    }
}

/// Symmetric Dirichlet draw via normalized Gamma(alpha, 1) variates.
pub fn dirichlet_sample(rng: &mut Rng, alpha: f64, dim: usize) -> Result<Vec<f64>> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!(
            "dirichlet concentration must be positive and finite, got {alpha}"
        )));
    }
    if dim == 0 {
        return Err(Error::Domain("dirichlet dimension must be at least 1".into()));
    }
    if dim == 1 {
        return Ok(vec![1.0]);
    }
    let draws: Vec<f64> = (0..dim).map(|_| rng.gamma(alpha)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        // every variate underflowed; the alpha -> 0 limit is a vertex
        let mut p = vec![0.0; dim];
        p[rng.below(dim)] = 1.0;
        return Ok(p);
    }
    Ok(draws.into_iter().map(|g| g / total).collect())
}
