//! Multi-phase fake-incremental task sampling from the base session.
//!
//! Each draw partitions the base label space into a fake-base set and C
//! fake-incremental phases, then samples per-phase support and query sets
//! that mirror the real few-shot incremental data format.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_without_replacement, Dataset};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("fake task needs {need} incremental classes but base has {have}")]
    TooFewClasses { need: usize, have: usize },
    #[error("class {class} has {have} instances, needs {need} (shot + query shot)")]
    Capacity {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("invalid fake task spec: {0}")]
    BadSpec(String),
}

/// Episode shape: C phases of fake_way x fake_shot supports plus
/// query_shot query instances per seen class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FakeTaskSpec {
    pub phases: usize,
    pub fake_way: usize,
    pub fake_shot: usize,
    pub query_shot: usize,
}

impl FakeTaskSpec {
    pub fn validate(&self, base_classes: usize) -> Result<(), SamplerError> {
        if self.phases == 0 || self.fake_way == 0 || self.fake_shot == 0 || self.query_shot == 0 {
            return Err(SamplerError::BadSpec("all counts must be >= 1".into()));
        }
        let need = self.fake_way * self.phases;
        if need >= base_classes {
            return Err(SamplerError::TooFewClasses {
                need,
                have: base_classes,
            });
        }
        Ok(())
    }
}

/// One sampled episode: the fake-base label set, per-phase label sets,
/// and per-phase support/query sets (instance row indices into the base
/// dataset, never copies).
#[derive(Debug, Clone)]
pub struct FakeTaskSequence {
    pub fake_base_classes: Vec<usize>,
    /// `phase_classes[c]` is the label set of fake phase c+1.
    pub phase_classes: Vec<Vec<usize>>,
    /// Support row indices per phase, grouped fake_way x fake_shot.
    pub supports: Vec<Vec<usize>>,
    /// Query row indices per phase, covering all classes seen so far.
    pub queries: Vec<Vec<usize>>,
}

impl FakeTaskSequence {
    /// Classes visible at phase c (1-based): fake base plus phases 1..=c.
    pub fn seen_classes(&self, phase: usize) -> Vec<usize> {
        let mut seen = self.fake_base_classes.clone();
        for p in &self.phase_classes[..phase] {
            seen.extend_from_slice(p);
        }
        seen
    }
}

/// Sample one fake-incremental episode.
///
/// The label space splits uniformly at random into the fake-base set and
/// fake_way * phases incremental classes; per phase, fake_shot support
/// instances per class and query_shot query instances per seen class are
/// drawn without replacement, with the query excluding that phase's
/// support instances.
pub fn sample_fake_tasks<R: Rng>(
    base: &Dataset,
    spec: &FakeTaskSpec,
    rng: &mut R,
) -> Result<FakeTaskSequence, SamplerError> {
    spec.validate(base.num_classes)?;
    let by_class = base.indices_by_class();

    let classes: Vec<usize> = by_class.keys().copied().collect();
    let incremental = sample_without_replacement(&classes, spec.fake_way * spec.phases, rng);
    let inc_set: BTreeSet<usize> = incremental.iter().copied().collect();
    let fake_base_classes: Vec<usize> = classes
        .iter()
        .copied()
        .filter(|c| !inc_set.contains(c))
        .collect();
    let phase_classes: Vec<Vec<usize>> = incremental
        .chunks(spec.fake_way)
        .map(|c| c.to_vec())
        .collect();

    let mut supports = Vec::with_capacity(spec.phases);
    let mut queries = Vec::with_capacity(spec.phases);
    let mut seen: Vec<usize> = fake_base_classes.clone();
    for phase in &phase_classes {
        let mut support = Vec::with_capacity(spec.fake_way * spec.fake_shot);
        let mut support_set: BTreeSet<usize> = BTreeSet::new();
        for &c in phase {
            let pool = &by_class[&c];
            if pool.len() < spec.fake_shot + spec.query_shot {
                return Err(SamplerError::Capacity {
                    class: c,
                    have: pool.len(),
                    need: spec.fake_shot + spec.query_shot,
                });
            }
            let drawn = sample_without_replacement(pool, spec.fake_shot, rng);
            support_set.extend(drawn.iter().copied());
            support.extend(drawn);
        }
        seen.extend_from_slice(phase);

        let mut query = Vec::with_capacity(spec.query_shot * seen.len());
        for &c in &seen {
            let pool: Vec<usize> = by_class[&c]
                .iter()
                .copied()
                .filter(|i| !support_set.contains(i))
                .collect();
            if pool.len() < spec.query_shot {
                return Err(SamplerError::Capacity {
                    class: c,
                    have: pool.len(),
                    need: spec.query_shot,
                });
            }
            query.extend(sample_without_replacement(&pool, spec.query_shot, rng));
        }
        supports.push(support);
        queries.push(query);
    }

    Ok(FakeTaskSequence {
        fake_base_classes,
        phase_classes,
        supports,
        queries,
    })
}
