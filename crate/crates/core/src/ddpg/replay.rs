//! Fixed-capacity FIFO replay memory.

use rand::seq::index;
use rand::Rng;

/// One environment step. States are `(t/T, s/Q̄)`; the action is `x/Q̄`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: [f64; 2],
    pub action: f64,
    pub reward: f64,
    pub next_state: [f64; 2],
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    /// Slot overwritten next once full; also the oldest entry.
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            head: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    /// Up to `k` distinct entries, uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Vec<Transition> {
        let k = k.min(self.items.len());
        index::sample(rng, self.items.len(), k)
            .into_iter()
            .map(|i| self.items[i])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(r: f64) -> Transition {
        Transition {
            state: [0.0, 1.0],
            action: 0.5,
            reward: r,
            next_state: [0.1, 0.5],
            terminal: false,
        }
    }

    #[test]
    fn evicts_oldest_first() {
        let mut b = ReplayBuffer::new(3);
        for r in 0..5 {
            b.push(tr(r as f64));
            assert!(b.len() <= 3);
        }
        let rewards: Vec<f64> = b.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn samples_without_replacement() {
        let mut b = ReplayBuffer::new(10);
        for r in 0..10 {
            b.push(tr(r as f64));
        }
        let mut g = crate::rng::stream(1, 1);
        let mut got: Vec<f64> = b.sample(&mut g, 10).iter().map(|t| t.reward).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, (0..10).map(|r| r as f64).collect::<Vec<_>>());
        assert_eq!(b.sample(&mut g, 64).len(), 10);
    }
}
