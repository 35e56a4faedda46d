//! Seeded random inputs shared by the test suites and the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::BlockOperator;
use crate::spectral::{ell_norm, StateVector, Truncation, C64};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_complex(rng: &mut ChaCha8Rng) -> C64 {
    C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

/// Entries uniform in the unit square scaled by `<l,h>^{-decay}`, where `h` is
/// the block distance; entries with `h > band` are zero.
pub fn random_operator(t: Truncation, seed: u64, decay: f64, band: Option<usize>) -> BlockOperator {
    let mut r = rng(seed);
    let mut op = BlockOperator::zeros(t);
    let jm = t.j_max as i64;
    for idx in 0..t.n_ell() {
        let ln = ell_norm(&t.ell_of(idx));
        let s = op.slice_mut(idx);
        for p in 0..s.rows {
            for q in 0..s.cols {
                let h = (p as i64 - jm).unsigned_abs().abs_diff((q as i64 - jm).unsigned_abs()) as usize;
                let v = unit_complex(&mut r);
                if band.is_some_and(|b| h > b) {
                    continue;
                }
                let w = (ln.max(h).max(1) as f64).powf(-decay);
                s.set(p, q, v * w);
            }
        }
    }
    op
}

pub fn random_hermitian(t: Truncation, seed: u64, decay: f64, band: Option<usize>) -> BlockOperator {
    random_operator(t, seed, decay, band).hermitian_symmetrize()
}

pub fn random_state(j_max: usize, seed: u64) -> StateVector {
    let mut r = rng(seed);
    StateVector {
        j_max,
        coeffs: (0..2 * j_max + 1).map(|_| unit_complex(&mut r)).collect(),
    }
}
