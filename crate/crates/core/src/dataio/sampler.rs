use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DepthMap, DepthPool};
use crate::{Error, Result};

/// Exact position of a ChaCha8 stream, enough to resume it bit-for-bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Draws real depth maps uniformly from a pool, independently of any RGB
/// sample. Owns its stream; give each worker its own sampler.
#[derive(Clone, Debug)]
pub struct UnpairedSampler {
    rng: ChaCha8Rng,
}

impl UnpairedSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        Self {
            rng: state.restore(),
        }
    }

    pub fn state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn draw_index(&mut self, pool: &DepthPool) -> Result<usize> {
        if pool.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(self.rng.random_range(0..pool.len()))
    }

    pub fn draw<'p>(&mut self, pool: &'p DepthPool) -> Result<&'p DepthMap> {
        let i = self.draw_index(pool)?;
        Ok(&pool.items[i])
    }
}

pub fn sample_unpaired_depth(pool: &DepthPool, sampler: &mut UnpairedSampler) -> Result<DepthMap> {
    sampler.draw(pool).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize) -> DepthPool {
        let maps = (0..n)
            .map(|i| DepthMap::raw(2, 1, vec![100.0, 200.0 + i as f32]))
            .collect();
        DepthPool::new(maps, "test").unwrap()
    }

    #[test]
    fn single_item_pool_always_returns_it() {
        let p = pool(1);
        let mut s = UnpairedSampler::new(3);
        for _ in 0..20 {
            assert_eq!(sample_unpaired_depth(&p, &mut s).unwrap(), p.items[0]);
        }
    }

    #[test]
    fn draws_are_normalized() {
        let p = pool(3);
        let mut s = UnpairedSampler::new(1);
        let d = sample_unpaired_depth(&p, &mut s).unwrap();
        assert_eq!(d.unit, super::super::DepthUnit::Normalized);
        assert_eq!(d.values, vec![0.0, 1.0]);
    }

    #[test]
    fn same_seed_same_sequence() {
        let p = pool(5);
        let (mut a, mut b) = (UnpairedSampler::new(42), UnpairedSampler::new(42));
        let xa: Vec<_> = (0..100).map(|_| a.draw_index(&p).unwrap()).collect();
        let xb: Vec<_> = (0..100).map(|_| b.draw_index(&p).unwrap()).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn state_round_trip_resumes_sequence() {
        let p = pool(7);
        let mut a = UnpairedSampler::new(9);
        for _ in 0..13 {
            a.draw_index(&p).unwrap();
        }
        let mut b = UnpairedSampler::from_state(&a.state());
        for _ in 0..50 {
            assert_eq!(a.draw_index(&p).unwrap(), b.draw_index(&p).unwrap());
        }
    }

    #[test]
    fn uniform_frequencies() {
        // Binomial(10000, 0.25) has sd ≈ 0.0043 in frequency; [0.22, 0.28] is ±7 sd.
        let p = pool(4);
        let mut s = UnpairedSampler::new(2024);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[s.draw_index(&p).unwrap()] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.22..=0.28).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn empty_pool_errors() {
        let p = DepthPool::new(vec![], "none").unwrap();
        let mut s = UnpairedSampler::new(0);
        assert!(matches!(sample_unpaired_depth(&p, &mut s), Err(Error::EmptyPool)));
    }
}
