use crate::error::{Error, Result};
use crate::mdp::Trajectory;

/// Fixed-capacity trajectory store that evicts its lowest-return entry.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Trajectory>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter("replay buffer capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity),
        })
    }

    pub fn from_trajectories(capacity: usize, trajectories: Vec<Trajectory>) -> Result<Self> {
        let mut b = Self::new(capacity)?;
        for t in trajectories {
            b.insert(t);
        }
        Ok(b)
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

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.items
    }

    pub fn min_return(&self) -> Option<f64> {
        self.items.iter().map(|t| t.episode_return).min_by(f64::total_cmp)
    }

    /// When full, removes the minimum-return trajectory (earliest on ties)
    /// before appending `traj`; returns what was evicted.
    pub fn insert(&mut self, traj: Trajectory) -> Option<Trajectory> {
        let evicted = if self.items.len() == self.capacity {
            let (idx, _) = self
                .items
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.episode_return.total_cmp(&b.1.episode_return).then(a.0.cmp(&b.0)))
                .expect("full buffer is non-empty");
            Some(self.items.remove(idx))
        } else {
            None
        };
        self.items.push(traj);
        evicted
    }
}
