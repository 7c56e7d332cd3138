use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Matrix;

/// Seeded, platform-independent random stream.
///
/// Backed by ChaCha8, a counter-based generator. [`Rng::fork`] derives an
/// independent stream from the same seed, so sub-components can draw without
/// depending on how much their siblings consumed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh stream `stream` for this seed, starting at position zero.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, sigma: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| sigma * self.normal()).collect();
        Matrix::new(rows, cols, data).expect("length matches by construction")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform on `±sqrt(1/fan_in)`, with fan-in the row count of a weight
    /// applied as `x · W`.
    #[default]
    UniformFanIn,
}

pub fn init_matrix(rng: &mut Rng, rows: usize, cols: usize, scheme: InitScheme) -> Matrix {
    assert!(
        rows >= 1 && cols >= 1,
        "init_matrix needs a non-empty shape"
    );
    match scheme {
        InitScheme::UniformFanIn => {
            let bound = (1.0 / rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.uniform(-bound, bound))
                .collect();
            Matrix::new(rows, cols, data).expect("length matches by construction")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_matrix() {
        let a = init_matrix(&mut Rng::new(7), 2, 2, InitScheme::UniformFanIn);
        let b = init_matrix(&mut Rng::new(7), 2, 2, InitScheme::UniformFanIn);
        assert_eq!(a, b);
    }

    #[test]
    fn entries_respect_bound() {
        let m = init_matrix(&mut Rng::new(3), 2, 2, InitScheme::UniformFanIn);
        assert!(m.data().iter().all(|x| x.abs() <= (0.5f64).sqrt()));
        let tall = init_matrix(&mut Rng::new(3), 9, 4, InitScheme::UniformFanIn);
        assert!(tall.data().iter().all(|x| x.abs() <= 1.0 / 3.0));
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_matrix(&mut Rng::new(7), 2, 2, InitScheme::UniformFanIn);
        let b = init_matrix(&mut Rng::new(8), 2, 2, InitScheme::UniformFanIn);
        assert_ne!(a, b);
    }

    #[test]
    fn forks_are_independent_of_parent_consumption() {
        let mut parent = Rng::new(11);
        let before = parent.fork(3).normal();
        for _ in 0..100 {
            parent.normal();
        }
        assert_eq!(parent.fork(3).normal(), before);
        assert_ne!(parent.fork(4).normal(), before);
    }

    #[test]
    fn stream_is_pinned() {
        // Guards against silent generator changes across dependency upgrades.
        let mut rng = Rng::new(42);
        let first: Vec<f64> = (0..3).map(|_| rng.uniform(0.0, 1.0)).collect();
        assert_eq!(
            first,
            [0.6818961923066714, 0.950275407672484, 0.4275164028565197]
        );
        assert_eq!(rng.normal(), 0.4763469238088213);
    }
}
