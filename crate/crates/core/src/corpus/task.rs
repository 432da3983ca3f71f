//! N-way K-shot task sampling and base/unseen class splits.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ClassId, GraphTextCorpus, NodeId};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Standard,
    Inductive,
    BaseUnseen,
    Continual,
    CrossDomain,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Standard => "standard",
            SplitMode::Inductive => "inductive",
            SplitMode::BaseUnseen => "base-unseen",
            SplitMode::Continual => "continual",
            SplitMode::CrossDomain => "cross-domain",
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "standard" => SplitMode::Standard,
            "inductive" => SplitMode::Inductive,
            "base-unseen" => SplitMode::BaseUnseen,
            "continual" => SplitMode::Continual,
            "cross-domain" => SplitMode::CrossDomain,
            other => return Err(Error::Parameter(format!("unknown protocol {other:?}"))),
        })
    }
}

/// Which classes tasks are drawn from (`base_classes`) and which are held out.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_classes: BTreeSet<ClassId>,
    pub unseen_classes: BTreeSet<ClassId>,
    pub mode: SplitMode,
}

impl SplitSpec {
    pub fn new(
        base_classes: BTreeSet<ClassId>,
        unseen_classes: BTreeSet<ClassId>,
        mode: SplitMode,
    ) -> Result<Self> {
        if let Some(c) = base_classes.intersection(&unseen_classes).next() {
            return Err(Error::Parameter(format!("class {c} is both base and unseen")));
        }
        Ok(Self {
            base_classes,
            unseen_classes,
            mode,
        })
    }

    /// Every labelled class is a base class.
    pub fn standard(corpus: &GraphTextCorpus) -> Self {
        Self {
            base_classes: corpus.labelled_classes().into_iter().collect(),
            unseen_classes: BTreeSet::new(),
            mode: SplitMode::Standard,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub class_ids: Vec<ClassId>,
    pub support: Vec<(NodeId, ClassId)>,
    pub validation: Vec<(NodeId, ClassId)>,
    pub query: Vec<(NodeId, ClassId)>,
}

impl FewShotTask {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn k_shot(&self) -> usize {
        if self.class_ids.is_empty() {
            0
        } else {
            self.support.len() / self.class_ids.len()
        }
    }

    /// Position of `class` in `class_ids`, the target index used by classifiers.
    pub fn class_index(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }
}

/// Samples `n_way` classes from `split.base_classes`, then `k_shot` support and
/// `k_shot` validation nodes per class; the class's remaining labelled nodes
/// form the query set.
pub fn sample_task(
    corpus: &GraphTextCorpus,
    split: &SplitSpec,
    n_way: usize,
    k_shot: usize,
    seed: u64,
) -> Result<FewShotTask> {
    if n_way == 0 {
        return Err(Error::Parameter("n_way must be positive".into()));
    }
    let pool: Vec<ClassId> = split.base_classes.iter().copied().collect();
    if pool.len() < n_way {
        return Err(Error::Sampling(format!(
            "{n_way}-way task requested but the class pool has only {} classes",
            pool.len()
        )));
    }
    let mut r = rng::rng(seed);
    let class_ids: Vec<ClassId> = pool.choose_multiple(&mut r, n_way).copied().collect();
    let need = if k_shot == 0 { 1 } else { 2 * k_shot + 1 };
    let mut task = FewShotTask {
        class_ids: class_ids.clone(),
        support: Vec::with_capacity(n_way * k_shot),
        validation: Vec::with_capacity(n_way * k_shot),
        query: Vec::new(),
    };
    for &class in &class_ids {
        let mut nodes = corpus.nodes_of_class(class);
        if nodes.len() < need {
            return Err(Error::Sampling(format!(
                "class {class} has {} labelled instances; a {k_shot}-shot task needs at least {need}",
                nodes.len()
            )));
        }
        nodes.shuffle(&mut r);
        task.support.extend(nodes[..k_shot].iter().map(|&n| (n, class)));
        task.validation.extend(nodes[k_shot..2 * k_shot].iter().map(|&n| (n, class)));
        task.query.extend(nodes[2 * k_shot..].iter().map(|&n| (n, class)));
    }
    Ok(task)
}

/// Picks `n_base` base classes and `n_base` disjoint unseen classes among the
/// labelled classes.
pub fn split_base_unseen(corpus: &GraphTextCorpus, n_base: usize, seed: u64) -> Result<SplitSpec> {
    if n_base == 0 {
        return Err(Error::Parameter("n_base must be positive".into()));
    }
    let mut classes = corpus.labelled_classes();
    if classes.len() < 2 * n_base {
        return Err(Error::Sampling(format!(
            "{n_base} base + {n_base} unseen classes requested but only {} classes are labelled",
            classes.len()
        )));
    }
    let mut r = rng::rng(seed);
    classes.shuffle(&mut r);
    SplitSpec::new(
        classes[..n_base].iter().copied().collect(),
        classes[n_base..2 * n_base].iter().copied().collect(),
        SplitMode::BaseUnseen,
    )
}
