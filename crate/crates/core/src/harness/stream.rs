use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Disjoint class sets presented one task at a time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Vec<usize>>,
    pub m: usize,
    pub n: usize,
    pub shuffle_seed: u64,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of tasks `0..=t`, in stream order.
    pub fn seen(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t].iter().flatten().copied().collect()
    }
}

/// Shuffle `0..num_classes` with `seed` and cut into `[m | n | n | …]`.
pub fn make_task_stream(num_classes: usize, m: usize, n: usize, seed: u64) -> Result<TaskStream> {
    if n == 0 {
        return Err(Error::Config("increment size n must be at least 1".into()));
    }
    let first = if m == 0 { n } else { m };
    if first > num_classes || !(num_classes - first).is_multiple_of(n) {
        return Err(Error::Config(format!(
            "B{m} Inc{n} does not tile {num_classes} classes"
        )));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.shuffle(&mut rng::stream(seed, "stream/class-order"));
    let mut tasks = vec![order[..first].to_vec()];
    tasks.extend(order[first..].chunks(n).map(<[usize]>::to_vec));
    Ok(TaskStream {
        tasks,
        m,
        n,
        shuffle_seed: seed,
    })
}
