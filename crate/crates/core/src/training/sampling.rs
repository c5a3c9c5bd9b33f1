use rand::Rng;

use crate::data::SliceSequence;
use crate::error::{Error, Result};

/// Indices of sequences with at least one tumor voxel.
pub fn tumor_sequences(sequences: &[SliceSequence]) -> Vec<usize> {
    sequences
        .iter()
        .enumerate()
        .filter(|(_, s)| s.has_tumor())
        .map(|(i, _)| i)
        .collect()
}

/// `batch` indices drawn uniformly, with replacement, from the
/// tumor-bearing sequences.
pub fn sample_phase1<R: Rng>(
    sequences: &[SliceSequence],
    batch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let pool = tumor_sequences(sequences);
    draw(&pool, batch, rng, "no sequence contains tumor")
}

/// `batch` indices drawn uniformly, with replacement, from all sequences.
pub fn sample_phase2<R: Rng>(
    sequences: &[SliceSequence],
    batch: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let pool: Vec<usize> = (0..sequences.len()).collect();
    draw(&pool, batch, rng, "dataset has no sequences")
}

pub(crate) fn draw<R: Rng>(
    pool: &[usize],
    batch: usize,
    rng: &mut R,
    why: &'static str,
) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::NoQualifyingSequence(why));
    }
    Ok((0..batch)
        .map(|_| pool[rng.random_range(0..pool.len())])
        .collect())
}
