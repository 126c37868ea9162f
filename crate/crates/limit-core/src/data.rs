//! Synthetic datasets, CSV feature loading, and the session split that
//! turns a flat labeled dataset into a base session plus a stream of
//! N-way K-shot incremental sessions with held-out test data.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("empty feature file")]
    Empty,
    #[error("class {class} has {have} instances, needs {need}")]
    Capacity {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("split infeasible: base {base} + way {way} x sessions {sessions} > {classes} classes")]
    Infeasible {
        base: usize,
        way: usize,
        sessions: usize,
        classes: usize,
    },
    #[error("invalid spec: {0}")]
    BadSpec(String),
}

/// Labeled feature vectors with a dense 0-based label space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Row indices per class, in dataset order.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            map.entry(l).or_default().push(i);
        }
        map
    }

    /// New dataset from a list of row indices; labels are kept as-is.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.features.row(r));
            labels.push(self.labels[r]);
        }
        Dataset {
            features: Tensor::new(vec![rows.len(), d], data).expect("subset shape"),
            labels,
            num_classes: self.num_classes,
        }
    }
}

/// How to carve a dataset into the incremental session structure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_class_count: usize,
    pub way: usize,
    pub shot: usize,
    pub session_count: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    pub seed: u64,
}

fn default_test_per_class() -> usize {
    15
}

/// One base session, B few-shot sessions, and per-session cumulative
/// test sets. Training and test instances are disjoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionStream {
    pub base: Dataset,
    pub sessions: Vec<Dataset>,
    /// `test_sets[b]` covers exactly the classes seen up to session b
    /// (index 0 is the base-only test set).
    pub test_sets: Vec<Dataset>,
    /// Label sets per session; `class_sets[0]` is the base label set.
    pub class_sets: Vec<Vec<usize>>,
}

impl SessionStream {
    pub fn num_sessions(&self) -> usize {
        self.sessions.len()
    }
}

/// Gaussian mixture: class means drawn from a unit-scale normal in R^D,
/// instances as mean + spread * noise. Deterministic given the seed.
pub fn generate_gaussian_mixture(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Dataset {
    let mut rng = crate::rng_from_seed(seed);
    let means: Vec<Tensor> = (0..num_classes)
        .map(|_| Tensor::randn(vec![dim], 1.0, &mut rng))
        .collect();
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let noise = Tensor::randn(vec![dim], 1.0, &mut rng);
            data.extend(
                mean.data()
                    .iter()
                    .zip(noise.data())
                    .map(|(m, n)| m + spread * n),
            );
            labels.push(c);
        }
    }
    Dataset {
        features: Tensor::new(vec![num_classes * per_class, dim], data).expect("mixture shape"),
        labels,
        num_classes,
    }
}

/// Mapping from the original labels in a feature file to the dense
/// 0-based labels used everywhere downstream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelMap {
    pub schema_version: u32,
    /// original label -> dense label
    pub mapping: BTreeMap<i64, usize>,
}

/// Load `label,f1,...,fD` rows; labels are remapped to a dense 0-based
/// range in order of first appearance.
pub fn load_feature_csv(path: &Path) -> Result<(Dataset, LabelMap), DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut dim: Option<usize> = None;
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: i64 = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|e| DataError::Parse {
                line: lineno,
                reason: format!("bad label: {e}"),
            })?;
        let feats: Vec<f64> = fields
            .map(|f| {
                f.trim().parse::<f64>().map_err(|e| DataError::Parse {
                    line: lineno,
                    reason: format!("bad feature: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        match dim {
            None => {
                if feats.is_empty() {
                    return Err(DataError::Parse {
                        line: lineno,
                        reason: "row has no features".into(),
                    });
                }
                dim = Some(feats.len());
            }
            Some(d) if d != feats.len() => {
                return Err(DataError::Parse {
                    line: lineno,
                    reason: format!("ragged row: expected {d} features, got {}", feats.len()),
                });
            }
            _ => {}
        }
        raw_labels.push(label);
        data.extend(feats);
    }
    let dim = dim.ok_or(DataError::Empty)?;
    let mut mapping: BTreeMap<i64, usize> = BTreeMap::new();
    let mut labels = Vec::with_capacity(raw_labels.len());
    for raw in &raw_labels {
        let next = mapping.len();
        let dense = *mapping.entry(*raw).or_insert(next);
        labels.push(dense);
    }
    let n = labels.len();
    Ok((
        Dataset {
            features: Tensor::new(vec![n, dim], data).expect("csv shape"),
            labels,
            num_classes: mapping.len(),
        },
        LabelMap {
            schema_version: 1,
            mapping,
        },
    ))
}

/// Write a dataset back out in the same `label,f1,...,fD` format.
pub fn save_feature_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, &label) in ds.labels.iter().enumerate() {
        write!(f, "{label}")?;
        for v in ds.features.row(i) {
            // shortest round-trip representation keeps load(save(x)) exact
            write!(f, ",{v}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

/// Shuffle classes by seed, take the first `base_class_count` as base and
/// the next `way * session_count` as incremental sessions; hold out
/// `test_per_class` instances per class everywhere.
pub fn split_sessions(ds: &Dataset, spec: &SplitSpec) -> Result<SessionStream, DataError> {
    if spec.base_class_count == 0 || spec.way == 0 || spec.shot == 0 || spec.test_per_class == 0 {
        return Err(DataError::BadSpec("all counts must be >= 1".into()));
    }
    let needed = spec.base_class_count + spec.way * spec.session_count;
    if needed > ds.num_classes {
        return Err(DataError::Infeasible {
            base: spec.base_class_count,
            way: spec.way,
            sessions: spec.session_count,
            classes: ds.num_classes,
        });
    }
    let mut rng = crate::rng_from_seed(spec.seed);
    let mut class_order: Vec<usize> = (0..ds.num_classes).collect();
    class_order.shuffle(&mut rng);

    let by_class = ds.indices_by_class();
    // per-class instance shuffle, then carve test from the tail
    let mut train_rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut test_rows: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &c in class_order.iter().take(needed) {
        let mut rows = by_class.get(&c).cloned().unwrap_or_default();
        let is_base = class_order[..spec.base_class_count].contains(&c);
        let need = spec.test_per_class + if is_base { 1 } else { spec.shot };
        if rows.len() < need {
            return Err(DataError::Capacity {
                class: c,
                have: rows.len(),
                need,
            });
        }
        rows.shuffle(&mut rng);
        let (test, train) = rows.split_at(spec.test_per_class);
        test_rows.insert(c, test.to_vec());
        train_rows.insert(c, train.to_vec());
    }

    let base_classes: Vec<usize> = class_order[..spec.base_class_count].to_vec();
    let mut class_sets = vec![base_classes.clone()];
    let mut base_rows = Vec::new();
    for &c in &base_classes {
        base_rows.extend_from_slice(&train_rows[&c]);
    }
    let base = ds.subset(&base_rows);

    let mut sessions = Vec::with_capacity(spec.session_count);
    for s in 0..spec.session_count {
        let start = spec.base_class_count + s * spec.way;
        let classes: Vec<usize> = class_order[start..start + spec.way].to_vec();
        let mut rows = Vec::with_capacity(spec.way * spec.shot);
        for &c in &classes {
            rows.extend_from_slice(&train_rows[&c][..spec.shot]);
        }
        sessions.push(ds.subset(&rows));
        class_sets.push(classes);
    }

    let mut test_sets = Vec::with_capacity(spec.session_count + 1);
    let mut seen: Vec<usize> = Vec::new();
    for set in &class_sets {
        seen.extend_from_slice(set);
        let mut rows = Vec::new();
        for &c in &seen {
            rows.extend_from_slice(&test_rows[&c]);
        }
        test_sets.push(ds.subset(&rows));
    }

    Ok(SessionStream {
        base,
        sessions,
        test_sets,
        class_sets,
    })
}

/// Draw `count` distinct items from `pool` without replacement.
pub(crate) fn sample_without_replacement<R: Rng, T: Copy>(
    pool: &[T],
    count: usize,
    rng: &mut R,
) -> Vec<T> {
    let mut items: Vec<T> = pool.to_vec();
    // partial Fisher-Yates: only the first `count` positions matter
    for i in 0..count {
        let j = rng.random_range(i..items.len());
        items.swap(i, j);
    }
    items.truncate(count);
    items
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn mixture_deterministic() {
        let a = generate_gaussian_mixture(3, 4, 5, 0.5, 42);
        let b = generate_gaussian_mixture(3, 4, 5, 0.5, 42);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn mixture_zero_spread_collapses_to_means() {
        let ds = generate_gaussian_mixture(2, 3, 4, 0.0, 7);
        for c in 0..2 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == c)
                .map(|i| ds.features.row(i))
                .collect();
            for r in &rows[1..] {
                assert_eq!(*r, rows[0]);
            }
        }
    }

    #[test]
    fn csv_dense_remap() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, "5,1.0,2.0\n9,3.0,4.0\n5,5.0,6.0\n").unwrap();
        let (ds, map) = load_feature_csv(&p).unwrap();
        assert_eq!(ds.num_classes, 2);
        assert_eq!(ds.labels, vec![0, 1, 0]);
        assert_eq!(map.mapping[&5], 0);
        assert_eq!(map.mapping[&9], 1);
    }

    #[test]
    fn csv_single_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, "0,1.0,2.0,3.0,4.0\n").unwrap();
        let (ds, _) = load_feature_csv(&p).unwrap();
        assert_eq!(ds.features.shape(), &[1, 4]);
    }

    #[test]
    fn csv_ragged_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        std::fs::write(&p, "0,1.0,2.0\n1,3.0\n").unwrap();
        let err = load_feature_csv(&p).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn csv_round_trip_exact() {
        let ds = generate_gaussian_mixture(3, 5, 4, 1.3, 99);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        save_feature_csv(&ds, &p).unwrap();
        let (back, _) = load_feature_csv(&p).unwrap();
        assert_eq!(ds.features, back.features);
        assert_eq!(ds.labels, back.labels);
    }

    #[test]
    fn split_covers_shuffled_classes_disjointly() {
        let ds = generate_gaussian_mixture(100, 8, 25, 1.0, 1);
        let spec = SplitSpec {
            base_class_count: 60,
            way: 5,
            shot: 5,
            session_count: 8,
            test_per_class: 5,
            seed: 3,
        };
        let stream = split_sessions(&ds, &spec).unwrap();
        assert_eq!(stream.sessions.len(), 8);
        let mut all: BTreeSet<usize> = BTreeSet::new();
        let mut total = 0;
        for set in &stream.class_sets {
            for &c in set {
                assert!(all.insert(c), "class {c} appears twice");
            }
            total += set.len();
        }
        assert_eq!(total, 100);
        for s in &stream.sessions {
            assert_eq!(s.len(), 25);
        }
        // test set after session b covers exactly the seen classes
        for (b, test) in stream.test_sets.iter().enumerate() {
            let seen: BTreeSet<usize> = stream.class_sets[..=b]
                .iter()
                .flatten()
                .copied()
                .collect();
            let present: BTreeSet<usize> = test.labels.iter().copied().collect();
            assert_eq!(seen, present);
        }
    }

    #[test]
    fn split_degenerate_no_sessions() {
        let ds = generate_gaussian_mixture(10, 4, 20, 1.0, 5);
        let spec = SplitSpec {
            base_class_count: 10,
            way: 5,
            shot: 5,
            session_count: 0,
            test_per_class: 5,
            seed: 0,
        };
        let stream = split_sessions(&ds, &spec).unwrap();
        assert!(stream.sessions.is_empty());
        assert_eq!(stream.test_sets.len(), 1);
    }

    #[test]
    fn split_train_test_instance_disjoint() {
        let ds = generate_gaussian_mixture(12, 4, 20, 1.0, 8);
        let spec = SplitSpec {
            base_class_count: 6,
            way: 3,
            shot: 5,
            session_count: 2,
            test_per_class: 5,
            seed: 2,
        };
        let stream = split_sessions(&ds, &spec).unwrap();
        let test_rows: BTreeSet<Vec<u64>> = stream
            .test_sets
            .last()
            .unwrap()
            .features
            .data()
            .chunks(4)
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut check = |d: &Dataset| {
            for i in 0..d.len() {
                let key: Vec<u64> = d.features.row(i).iter().map(|v| v.to_bits()).collect();
                assert!(!test_rows.contains(&key), "train row leaked into test");
            }
        };
        check(&stream.base);
        for s in &stream.sessions {
            check(s);
        }
    }

    #[test]
    fn split_capacity_error() {
        let ds = generate_gaussian_mixture(10, 4, 6, 1.0, 5);
        let spec = SplitSpec {
            base_class_count: 5,
            way: 5,
            shot: 5,
            session_count: 1,
            test_per_class: 5,
            seed: 0,
        };
        assert!(matches!(
            split_sessions(&ds, &spec),
            Err(DataError::Capacity { .. })
        ));
    }

    #[test]
    fn split_identical_spec_identical_stream() {
        let ds = generate_gaussian_mixture(20, 4, 25, 1.0, 5);
        let spec = SplitSpec {
            base_class_count: 10,
            way: 5,
            shot: 5,
            session_count: 2,
            test_per_class: 5,
            seed: 77,
        };
        let a = split_sessions(&ds, &spec).unwrap();
        let b = split_sessions(&ds, &spec).unwrap();
        assert_eq!(a.base.features, b.base.features);
        assert_eq!(a.class_sets, b.class_sets);
        for (x, y) in a.test_sets.iter().zip(&b.test_sets) {
            assert_eq!(x.features, y.features);
        }
    }
}
