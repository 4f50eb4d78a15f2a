//! Synthetic task family.
//!
//! Vocabulary layout: token 0 is BOS, tokens `1..=keyword_pool` are
//! keywords, the rest are fillers. Each task owns a group of filler tokens
//! with its own Markov chain (so a task-tuned LM head assigns its inputs low
//! perplexity) and a bijection from classes to keywords. An example is a
//! filler sequence with exactly one keyword inserted; the label is the
//! keyword's class.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{Example, TaskDataset};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const BOS: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub keyword_pool: usize,
    /// Filler tokens owned by each task.
    pub filler_group: usize,
    /// Preferred successors per filler in a task's chain.
    pub successors: usize,
    /// Probability of moving to a preferred successor.
    pub chain_strength: f64,
    pub train_per_task: usize,
    pub valid_per_task: usize,
    pub test_per_task: usize,
    /// In `[0, 1]`. When positive, every odd-indexed task is derived from
    /// the task before it: same fillers and chain, and this fraction of its
    /// keyword-class pairs.
    pub relatedness: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            vocab_size: 128,
            seq_len: 12,
            num_classes: 4,
            keyword_pool: 16,
            filler_group: 8,
            successors: 2,
            chain_strength: 0.9,
            train_per_task: 500,
            valid_per_task: 100,
            test_per_task: 100,
            relatedness: 0.0,
        }
    }
}

/// The generating structure of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub fillers: Vec<usize>,
    /// `successors[i]`: preferred next fillers (indices into `fillers`).
    pub successors: Vec<Vec<usize>>,
    /// `keywords[c]` marks class `c`.
    pub keywords: Vec<usize>,
    /// Index of the task this one was derived from, if any.
    pub parent: Option<usize>,
}

impl FamilyConfig {
    fn filler_range(&self) -> std::ops::Range<usize> {
        1 + self.keyword_pool..self.vocab_size
    }

    pub fn validate(&self, tasks: usize) -> Result<()> {
        let fillers = self.vocab_size.saturating_sub(1 + self.keyword_pool);
        if self.num_classes < 2 || self.seq_len < 3 || self.successors == 0 || self.successors > self.filler_group {
            return Err(Error::Config(format!("degenerate task family {self:?}")));
        }
        if self.keyword_pool < self.num_classes {
            return Err(Error::Config(format!("{} keywords cannot mark {} classes", self.keyword_pool, self.num_classes)));
        }
        if !(0.0..=1.0).contains(&self.relatedness) || !(0.0..=1.0).contains(&self.chain_strength) {
            return Err(Error::Config("relatedness and chain_strength must lie in [0, 1]".into()));
        }
        let groups = if self.relatedness > 0.0 { tasks.div_ceil(2) } else { tasks };
        if groups * self.filler_group > fillers {
            return Err(Error::Config(format!(
                "{tasks} tasks need {} filler tokens but the vocabulary has {fillers}",
                groups * self.filler_group
            )));
        }
        let pairs_needed = groups * self.num_classes;
        if pairs_needed > self.keyword_pool * self.num_classes {
            return Err(Error::Config(format!("{tasks} tasks exhaust the {} keyword-class pairs", self.keyword_pool * self.num_classes)));
        }
        if self.train_per_task == 0 || self.valid_per_task == 0 || self.test_per_task == 0 {
            return Err(Error::Config("every split needs at least one example".into()));
        }
        Ok(())
    }
}

/// Draws a class → keyword bijection whose pairs are all unused, keeping
/// `fixed` pairs as given.
fn draw_keywords(cfg: &FamilyConfig, used: &[Vec<bool>], fixed: &[(usize, usize)], g: &mut Rng) -> Result<Vec<usize>> {
    let c = cfg.num_classes;
    for _ in 0..10_000 {
        let mut pool: Vec<usize> = (1..=cfg.keyword_pool).collect();
        pool.shuffle(g);
        let mut kw = vec![0; c];
        let mut taken = vec![false; cfg.keyword_pool + 1];
        for &(class, k) in fixed {
            kw[class] = k;
            taken[k] = true;
        }
        let mut ok = true;
        for class in 0..c {
            if fixed.iter().any(|&(fc, _)| fc == class) {
                continue;
            }
            match pool.iter().find(|&&k| !taken[k] && !used[k][class]) {
                Some(&k) => {
                    kw[class] = k;
                    taken[k] = true;
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(kw);
        }
    }
    Err(Error::Config("could not draw keyword-class pairs disjoint from earlier tasks".into()))
}

/// Task structures for a stream of `tasks` tasks.
pub fn generate_specs(cfg: &FamilyConfig, tasks: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    cfg.validate(tasks)?;
    let mut g = rng::stream(seed, "task-family");
    let mut fillers: Vec<usize> = cfg.filler_range().collect();
    fillers.shuffle(&mut g);
    let mut used = vec![vec![false; cfg.num_classes]; cfg.keyword_pool + 1];
    let mut specs: Vec<TaskSpec> = Vec::with_capacity(tasks);
    let mut group = 0;
    for i in 0..tasks {
        let parent = (cfg.relatedness > 0.0 && i % 2 == 1).then(|| i - 1);
        let spec = match parent {
            Some(p) => {
                let base = &specs[p];
                let shared = (cfg.relatedness * cfg.num_classes as f64).round() as usize;
                let mut classes: Vec<usize> = (0..cfg.num_classes).collect();
                classes.shuffle(&mut g);
                let fixed: Vec<(usize, usize)> = classes[..shared].iter().map(|&c| (c, base.keywords[c])).collect();
                let keywords = draw_keywords(cfg, &used, &fixed, &mut g)?;
                TaskSpec {
                    task_id: format!("task{i:02}"),
                    fillers: base.fillers.clone(),
                    successors: base.successors.clone(),
                    keywords,
                    parent,
                }
            }
            None => {
                let own = fillers[group * cfg.filler_group..(group + 1) * cfg.filler_group].to_vec();
                group += 1;
                let successors = (0..cfg.filler_group)
                    .map(|_| {
                        let mut idx: Vec<usize> = (0..cfg.filler_group).collect();
                        idx.shuffle(&mut g);
                        idx.truncate(cfg.successors);
                        idx
                    })
                    .collect();
                let keywords = draw_keywords(cfg, &used, &[], &mut g)?;
                TaskSpec { task_id: format!("task{i:02}"), fillers: own, successors, keywords, parent: None }
            }
        };
        for (c, &k) in spec.keywords.iter().enumerate() {
            used[k][c] = true;
        }
        specs.push(spec);
    }
    Ok(specs)
}

fn sample_example(cfg: &FamilyConfig, spec: &TaskSpec, g: &mut Rng) -> Example {
    let t = cfg.seq_len;
    let mut tokens = Vec::with_capacity(t);
    tokens.push(BOS);
    let mut cur = g.random_range(0..spec.fillers.len());
    for _ in 1..t {
        tokens.push(spec.fillers[cur]);
        cur = if g.random_bool(cfg.chain_strength) {
            let s = &spec.successors[cur];
            s[g.random_range(0..s.len())]
        } else {
            g.random_range(0..spec.fillers.len())
        };
    }
    let label = g.random_range(0..cfg.num_classes);
    let pos = g.random_range(1..t);
    tokens[pos] = spec.keywords[label];
    Example { tokens, label }
}

pub fn dataset_for(cfg: &FamilyConfig, spec: &TaskSpec, seed: u64, index: u64) -> TaskDataset {
    let mut g = rng::indexed(seed, &format!("examples/{}", spec.task_id), index);
    let mut draw = |n: usize| (0..n).map(|_| sample_example(cfg, spec, &mut g)).collect::<Vec<_>>();
    let train = draw(cfg.train_per_task);
    let valid = draw(cfg.valid_per_task);
    let test = draw(cfg.test_per_task);
    TaskDataset {
        task_id: spec.task_id.clone(),
        vocab_size: cfg.vocab_size,
        num_classes: cfg.num_classes,
        train,
        valid,
        test,
    }
}

/// `tasks` datasets with their generating specs.
pub fn generate_tasks(cfg: &FamilyConfig, tasks: usize, seed: u64) -> Result<(Vec<TaskSpec>, Vec<TaskDataset>)> {
    let specs = generate_specs(cfg, tasks, seed)?;
    let data = specs.iter().map(|s| dataset_for(cfg, s, seed, 0)).collect();
    Ok((specs, data))
}

/// Generic pretraining corpus: fillers from the whole filler range under a
/// global chain, keyword `k` labeling class `(k - 1) mod classes`.
pub fn pretraining_corpus(cfg: &FamilyConfig, examples: usize, seed: u64) -> Result<TaskDataset> {
    cfg.validate(1)?;
    let mut g = rng::stream(seed, "pretraining-corpus");
    let fillers: Vec<usize> = cfg.filler_range().collect();
    let n = fillers.len();
    let successors = (0..n)
        .map(|_| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut g);
            idx.truncate(cfg.successors.max(4));
            idx
        })
        .collect();
    let keywords = (0..cfg.num_classes).map(|c| 1 + c).collect();
    let spec = TaskSpec { task_id: "pretrain".into(), fillers, successors, keywords, parent: None };
    let mut draw = |n: usize| {
        (0..n)
            .map(|_| {
                let mut ex = sample_example(cfg, &spec, &mut g);
                let kw = g.random_range(1..=cfg.keyword_pool);
                let pos = ex.tokens.iter().position(|&t| t <= cfg.keyword_pool && t != BOS).expect("keyword present");
                ex.tokens[pos] = kw;
                ex.label = (kw - 1) % cfg.num_classes;
                ex
            })
            .collect::<Vec<_>>()
    };
    let train = draw(examples);
    let valid = draw(examples / 10 + 1);
    Ok(TaskDataset {
        task_id: "pretrain".into(),
        vocab_size: cfg.vocab_size,
        num_classes: cfg.num_classes,
        train,
        valid,
        test: Vec::new(),
    })
}

/// Bag-of-tokens softmax regression, the separability probe.
#[derive(Clone, Debug)]
pub struct BagProbe {
    classes: usize,
    /// `[vocab + 1][classes]`, last row the bias.
    w: Vec<Vec<f64>>,
}

impl BagProbe {
    /// Full-batch gradient descent on token counts.
    pub fn fit(data: &[Example], vocab: usize, classes: usize, epochs: usize, lr: f64) -> Result<BagProbe> {
        if data.is_empty() {
            return Err(Error::Empty("probe training set"));
        }
        let mut probe = BagProbe { classes, w: vec![vec![0.0; classes]; vocab + 1] };
        for _ in 0..epochs {
            let mut grad = vec![vec![0.0; classes]; vocab + 1];
            for ex in data {
                let mut p = probe.probs(&ex.tokens);
                p[ex.label] -= 1.0;
                for &t in &ex.tokens {
                    grad[t].iter_mut().zip(&p).for_each(|(g, d)| *g += d);
                }
                grad[vocab].iter_mut().zip(&p).for_each(|(g, d)| *g += d);
            }
            let step = lr / data.len() as f64;
            for (row, g) in probe.w.iter_mut().zip(&grad) {
                row.iter_mut().zip(g).for_each(|(w, g)| *w -= step * g);
            }
        }
        Ok(probe)
    }

    fn probs(&self, tokens: &[usize]) -> Vec<f64> {
        let mut z = self.w[self.w.len() - 1].clone();
        for &t in tokens {
            z.iter_mut().zip(&self.w[t]).for_each(|(z, w)| *z += w);
        }
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    pub fn predict(&self, tokens: &[usize]) -> usize {
        let p = self.probs(tokens);
        (0..self.classes).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).expect("classes > 0")
    }

    pub fn accuracy(&self, data: &[Example]) -> f64 {
        data.iter().filter(|e| self.predict(&e.tokens) == e.label).count() as f64 / data.len().max(1) as f64
    }
}

/// `m[i][j]`: accuracy of a probe trained on task `i`'s training split.
/// The diagonal is measured on task `i`'s test split; off-diagonal entries
/// use every example of task `j`, since with 100 test examples class
/// imbalance alone swings a constant predictor by several points.
/// Off-diagonal entries near chance mean no task's label mapping leaks
/// into another's.
pub fn separability_matrix(tasks: &[TaskDataset]) -> Result<Vec<Vec<f64>>> {
    tasks
        .iter()
        .map(|ti| {
            let probe = BagProbe::fit(&ti.train, ti.vocab_size, ti.num_classes, 200, 1.0)?;
            Ok(tasks
                .iter()
                .map(|tj| {
                    if std::ptr::eq(ti, tj) {
                        probe.accuracy(&tj.test)
                    } else {
                        let all: Vec<Example> = tj.train.iter().chain(&tj.valid).chain(&tj.test).cloned().collect();
                        probe.accuracy(&all)
                    }
                })
                .collect())
        })
        .collect()
}
