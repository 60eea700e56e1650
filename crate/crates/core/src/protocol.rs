//! Task schedules for both evaluation protocols and label-mapped views of a dataset.
//!
//! Class orders are shuffled with ChaCha8 seeded by the order seed, so a seed
//! fully determines the schedule on every platform.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    /// All classes split equally across tasks.
    Equal,
    /// Half of the classes in the first task, the rest split equally.
    HalfThenEqual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub kind: ProtocolKind,
    pub tasks: usize,
}

impl ProtocolSpec {
    pub fn build(&self, n_classes: usize, seed: u64) -> Result<TaskSchedule> {
        match self.kind {
            ProtocolKind::Equal => split_equal(n_classes, self.tasks, seed),
            ProtocolKind::HalfThenEqual => split_half_then_equal(n_classes, self.tasks, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchedule {
    pub class_order: Vec<usize>,
    pub task_sizes: Vec<usize>,
    /// `global_index_of[class_id]` is the class's position in the learning order.
    pub global_index_of: Vec<usize>,
    pub protocol_name: String,
    pub order_seed: u64,
}

/// Permutation of `0..n` from ChaCha8.
pub fn class_order(n_classes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

impl TaskSchedule {
    pub fn new(class_order: Vec<usize>, task_sizes: Vec<usize>, protocol_name: &str, order_seed: u64) -> Result<Self> {
        let n = class_order.len();
        if task_sizes.iter().sum::<usize>() != n {
            return Err(Error::invalid(format!(
                "task sizes {:?} do not cover {} classes",
                task_sizes, n
            )));
        }
        if task_sizes.is_empty() || task_sizes[0] == 0 {
            return Err(Error::invalid("the first task needs at least one class"));
        }
        if task_sizes[1..].iter().any(|&s| s < 2) {
            return Err(Error::invalid("incremental tasks need at least two classes"));
        }
        let mut global_index_of = vec![usize::MAX; n];
        for (pos, &c) in class_order.iter().enumerate() {
            if c >= n || global_index_of[c] != usize::MAX {
                return Err(Error::invalid("class order is not a permutation"));
            }
            global_index_of[c] = pos;
        }
        Ok(TaskSchedule {
            class_order,
            task_sizes,
            global_index_of,
            protocol_name: protocol_name.to_string(),
            order_seed,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.task_sizes.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_order.len()
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task == 0 || task > self.n_tasks() {
            return Err(Error::invalid(format!("task {} outside 1..={}", task, self.n_tasks())));
        }
        Ok(())
    }

    /// Global label of the first class of `task` (1-based).
    pub fn offset(&self, task: usize) -> Result<usize> {
        self.check_task(task)?;
        Ok(self.task_sizes[..task - 1].iter().sum())
    }

    /// Number of classes in tasks `1..=task`.
    pub fn seen_classes(&self, task: usize) -> Result<usize> {
        self.check_task(task)?;
        Ok(self.task_sizes[..task].iter().sum())
    }

    /// Class ids of `task`, in learning order.
    pub fn task_classes(&self, task: usize) -> Result<&[usize]> {
        let off = self.offset(task)?;
        Ok(&self.class_order[off..off + self.task_sizes[task - 1]])
    }

    pub fn global_label(&self, class_id: usize) -> Option<usize> {
        self.global_index_of.get(class_id).copied()
    }

    /// `(task, local label)` of a class id.
    pub fn local_label(&self, class_id: usize) -> Option<(usize, usize)> {
        let g = self.global_label(class_id)?;
        let mut off = 0;
        for (t, &s) in self.task_sizes.iter().enumerate() {
            if g < off + s {
                return Some((t + 1, g - off));
            }
            off += s;
        }
        None
    }
}

/// `n_tasks` equal tasks over a seeded class order.
pub fn split_equal(n_classes: usize, n_tasks: usize, seed: u64) -> Result<TaskSchedule> {
    if n_tasks == 0 || n_classes % n_tasks != 0 {
        return Err(Error::invalid(format!(
            "{} tasks do not divide {} classes",
            n_tasks, n_classes
        )));
    }
    TaskSchedule::new(
        class_order(n_classes, seed),
        vec![n_classes / n_tasks; n_tasks],
        "equal",
        seed,
    )
}

/// Half of the classes first, then `n_tasks - 1` equal tasks.
pub fn split_half_then_equal(n_classes: usize, n_tasks: usize, seed: u64) -> Result<TaskSchedule> {
    if n_tasks < 2 || n_classes % 2 != 0 || (n_classes / 2) % (n_tasks - 1) != 0 {
        return Err(Error::invalid(format!(
            "cannot split {} classes into half plus {} equal tasks",
            n_classes,
            n_tasks.saturating_sub(1)
        )));
    }
    let half = n_classes / 2;
    let mut sizes = vec![half];
    sizes.extend(std::iter::repeat_n(half / (n_tasks - 1), n_tasks - 1));
    TaskSchedule::new(class_order(n_classes, seed), sizes, "half-then-equal", seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelMode {
    /// Position in the learning order.
    Global,
    /// Position within the sample's task.
    Local,
}

/// A subset of one split with labels mapped through a schedule.
#[derive(Clone, Debug)]
pub struct DatasetView<'a> {
    split: &'a Split,
    indices: Vec<usize>,
    labels: Vec<usize>,
    mode: LabelMode,
}

impl<'a> DatasetView<'a> {
    fn over(split: &'a Split, schedule: &TaskSchedule, tasks: std::ops::RangeInclusive<usize>, mode: LabelMode) -> Self {
        let mut indices = Vec::new();
        let mut labels = Vec::new();
        for (i, &c) in split.labels.iter().enumerate() {
            let Some((t, local)) = schedule.local_label(c) else { continue };
            if tasks.contains(&t) {
                indices.push(i);
                labels.push(match mode {
                    LabelMode::Global => schedule.global_index_of[c],
                    LabelMode::Local => local,
                });
            }
        }
        DatasetView {
            split,
            indices,
            labels,
            mode,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    /// Row indices into the underlying split.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Images and labels at view positions `positions`.
    pub fn batch(&self, positions: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let rows: Vec<usize> = positions.iter().map(|&p| self.indices[p]).collect();
        (
            self.split.gather(&rows),
            positions.iter().map(|&p| self.labels[p]).collect(),
        )
    }

    pub fn all(&self) -> (Tensor<f32>, Vec<usize>) {
        (self.split.gather(&self.indices), self.labels.clone())
    }
}

/// Training samples of one task.
pub fn task_train_view<'a>(schedule: &TaskSchedule, dataset: &'a Dataset, task: usize, mode: LabelMode) -> Result<DatasetView<'a>> {
    schedule.check_task(task)?;
    Ok(DatasetView::over(&dataset.train, schedule, task..=task, mode))
}

/// Test samples of one task.
pub fn task_test_view<'a>(schedule: &TaskSchedule, dataset: &'a Dataset, task: usize, mode: LabelMode) -> Result<DatasetView<'a>> {
    schedule.check_task(task)?;
    Ok(DatasetView::over(&dataset.test, schedule, task..=task, mode))
}

/// Test samples of every class learned up to `task`, with global labels.
pub fn cumulative_test_view<'a>(schedule: &TaskSchedule, dataset: &'a Dataset, task: usize) -> Result<DatasetView<'a>> {
    schedule.check_task(task)?;
    Ok(DatasetView::over(&dataset.test, schedule, 1..=task, LabelMode::Global))
}
