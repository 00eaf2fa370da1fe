//! Batch index streams: plain shuffling and class-balanced sampling.

use fat_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Shuffled batches covering `n` indices once.
pub fn shuffled_batches(n: usize, batch: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx.chunks(batch).map(<[usize]>::to_vec).collect())
}

/// Cycles through a class's members, reshuffling on each pass.
struct ClassQueue {
    members: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl ClassQueue {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.clone_from(&self.members);
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Class-balanced batches over positions `0..labels.len()`.
///
/// Emits `ceil(N / batch)` batches; each holds `batch / k` items of every
/// class, and the `batch mod k` leftover slots rotate across classes. Rare
/// classes repeat (oversampling) and frequent classes are subsampled.
pub fn balanced_batches(labels: &[usize], k: usize, batch: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch < k {
        return Err(Error::Config(format!("batch size {batch} is smaller than the {k} classes")));
    }
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members
            .get_mut(l)
            .ok_or_else(|| Error::Data(format!("label {l} outside [0, {k})")))?
            .push(i);
    }
    if let Some(c) = members.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {c} has no samples to balance")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queues: Vec<ClassQueue> = members
        .into_iter()
        .map(|m| ClassQueue {
            order: Vec::new(),
            members: m,
            pos: 0,
        })
        .collect();
    let (base, extra) = (batch / k, batch % k);
    let n_batches = labels.len().div_ceil(batch);
    let mut out = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut items = Vec::with_capacity(batch);
        for (c, q) in queues.iter_mut().enumerate() {
            let rotated = (c + k - (b * extra) % k) % k;
            let take = base + usize::from(rotated < extra);
            for _ in 0..take {
                items.push(q.next(&mut rng));
            }
        }
        items.shuffle(&mut rng);
        out.push(items);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(counts: &[usize]) -> Vec<usize> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
            .collect()
    }

    #[test]
    fn two_class_forced_balance() {
        let l = labels(&[90, 10]);
        let batches = balanced_batches(&l, 2, 10, 0).unwrap();
        assert_eq!(batches.len(), 10);
        for b in &batches {
            assert_eq!(b.iter().filter(|&&i| l[i] == 1).count(), 5);
        }
    }

    #[test]
    fn balanced_input_is_a_permutation() {
        let l = labels(&[4, 4]);
        let batches = balanced_batches(&l, 2, 4, 7).unwrap();
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn leftover_slots_rotate() {
        let l = labels(&[20, 20, 20]);
        let batches = balanced_batches(&l, 3, 10, 1).unwrap();
        for b in &batches {
            let mut c = [0usize; 3];
            b.iter().for_each(|&i| c[l[i]] += 1);
            assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1, "{c:?}");
        }
    }

    #[test]
    fn small_batches_are_rejected() {
        assert!(matches!(balanced_batches(&[0, 1, 2], 3, 2, 0), Err(Error::Config(_))));
    }
}
