//! Datasets, the imbalanced synthetic generator, group-wise splitting and
//! the simulated annotators.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker::{RelativeLabel, RelativePair};
use crate::seed;

/// Position of a sample inside its [`Dataset`]. Ordering on ids is the
/// dataset's record order, which is also the tie-break order everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SampleId(pub u32);

impl SampleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// External identifier as it appears in the dataset file.
    pub name: String,
    pub features: Vec<f64>,
    pub label: Option<u32>,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    by_name: HashMap<String, SampleId>,
    feature_dim: usize,
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    group: Option<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let feature_dim = samples.first().map_or(0, |s| s.features.len());
        if feature_dim == 0 && !samples.is_empty() {
            return Err(Error::Schema("samples must carry at least one feature".into()));
        }
        let mut by_name = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::Schema(format!(
                    "sample {} has {} features, expected {feature_dim}",
                    s.name,
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("sample {} has non-finite features", s.name)));
            }
            if by_name.insert(s.name.clone(), SampleId(i as u32)).is_some() {
                return Err(Error::Schema(format!("duplicate sample id {}", s.name)));
            }
        }
        let num_classes = samples
            .iter()
            .filter_map(|s| s.label)
            .max()
            .map_or(0, |m| m as usize + 1);
        Ok(Dataset {
            samples,
            by_name,
            feature_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// One more than the largest label present.
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn ids(&self) -> impl Iterator<Item = SampleId> {
        (0..self.samples.len() as u32).map(SampleId)
    }

    pub fn get(&self, id: SampleId) -> Option<&Sample> {
        self.samples.get(id.index())
    }

    pub fn sample(&self, id: SampleId) -> &Sample {
        &self.samples[id.index()]
    }

    pub fn features(&self, id: SampleId) -> &[f64] {
        &self.samples[id.index()].features
    }

    pub fn label(&self, id: SampleId) -> Option<u32> {
        self.samples[id.index()].label
    }

    pub fn lookup(&self, name: &str) -> Option<SampleId> {
        self.by_name.get(name).copied()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    /// A new dataset holding the given samples, in the given order.
    pub fn subset(&self, ids: &[SampleId]) -> Result<Dataset> {
        Dataset::new(ids.iter().map(|&id| self.sample(id).clone()).collect())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for s in &self.samples {
            let rec = Record {
                id: s.name.clone(),
                features: s.features.clone(),
                label: s.label,
                group: Some(s.group.clone()),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Parse JSON-lines records `{id, features, label?, group?}`. A missing group
/// defaults to the sample's own id.
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut samples = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        let group = rec.group.unwrap_or_else(|| rec.id.clone());
        samples.push(Sample {
            name: rec.id,
            features: rec.features,
            label: rec.label,
            group,
        });
    }
    Dataset::new(samples)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file))
}

/// Parameters of the imbalanced ordinal generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub class_proportions: Vec<f64>,
    pub n: usize,
    pub feature_dim: usize,
    /// Coordinates spanned by the severity direction; the rest are distractors.
    pub informative_dim: usize,
    pub noise_scale: f64,
    /// Samples per group (patient analogue).
    pub group_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 4,
            class_proportions: vec![0.65, 0.19, 0.14, 0.02],
            n: 5000,
            feature_dim: 16,
            informative_dim: 1,
            noise_scale: 0.3,
            group_size: 20,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.class_proportions.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} proportions for {} classes",
                self.class_proportions.len(),
                self.num_classes
            )));
        }
        if self.class_proportions.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Config("class proportions must be nonnegative".into()));
        }
        let total: f64 = self.class_proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class proportions sum to {total}, not 1")));
        }
        if self.n < self.num_classes {
            return Err(Error::Config("n must be at least the number of classes".into()));
        }
        if self.feature_dim == 0 || self.informative_dim == 0 || self.informative_dim > self.feature_dim {
            return Err(Error::Config(format!(
                "need 1 <= informative_dim ({}) <= feature_dim ({})",
                self.informative_dim, self.feature_dim
            )));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise scale must be nonnegative".into()));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group size must be positive".into()));
        }
        Ok(())
    }

    /// The fixed unit direction along which severity is expressed.
    pub fn projection(&self) -> Vec<f64> {
        let mut rng = seed::keyed_rng(self.seed, "synth-projection", &[]);
        let mut w: Vec<f64> = (0..self.informative_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        // Orient so that severity increases along +w.
        let sign = if w.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        w.iter_mut().for_each(|v| *v *= sign / norm);
        w
    }
}

/// A generated dataset plus the latent severities behind it.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: Dataset,
    pub latent: Vec<f64>,
}

/// Draw class `c` from the proportions, latent severity `z ~ U[c, c+1)`,
/// informative coordinates `w z + noise`, and distractor coordinates from a
/// standard normal. Groups are contiguous blocks of `group_size` samples.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let w = config.projection();
    let mut rng = seed::keyed_rng(config.seed, "synth-samples", &[]);
    let noise = Normal::new(0.0, config.noise_scale.max(f64::MIN_POSITIVE)).expect("valid scale");
    let cumulative: Vec<f64> = config
        .class_proportions
        .iter()
        .scan(0.0, |acc, &p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let width = (config.n.to_string().len()).max(4);
    let mut samples = Vec::with_capacity(config.n);
    let mut latent = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let u: f64 = rng.random();
        let class = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(config.num_classes - 1);
        let z = class as f64 + rng.random::<f64>();
        let mut features = Vec::with_capacity(config.feature_dim);
        for &wk in &w {
            let eps = if config.noise_scale > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            features.push(wk * z + eps);
        }
        for _ in config.informative_dim..config.feature_dim {
            features.push(StandardNormal.sample(&mut rng));
        }
        samples.push(Sample {
            name: format!("s{i:0width$}"),
            features,
            label: Some(class as u32),
            group: format!("g{:0width$}", i / config.group_size),
        });
        latent.push(z);
    }
    Ok(SynthData {
        dataset: Dataset::new(samples)?,
        latent,
    })
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<SampleId>,
    pub val: Vec<SampleId>,
    pub test: Vec<SampleId>,
}

/// Partition whole groups into train/val/test, greedily giving each
/// shuffled group to the split furthest below its target sample count.
pub fn split_groupwise(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(f > 0.0)) || (total - 1.0).abs() > 0.01 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be positive and sum to 1")));
    }
    let fractions = fractions.map(|f| f / total);

    let mut groups: Vec<(&str, Vec<SampleId>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for id in dataset.ids() {
        let g = dataset.sample(id).group.as_str();
        let slot = *index.entry(g).or_insert_with(|| {
            groups.push((g, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(id);
    }
    if groups.len() < 3 {
        return Err(Error::Config(format!("need at least 3 groups to split, found {}", groups.len())));
    }
    groups.sort_by(|a, b| a.0.cmp(b.0));
    groups.shuffle(&mut seed::keyed_rng(seed, "split", &[]));

    let n = dataset.len() as f64;
    let targets = fractions.map(|f| f * n);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut counts = [0.0f64; 3];
    for (gi, (_, members)) in groups.iter().enumerate() {
        let k = (0..3)
            .max_by(|&a, &b| {
                let (da, db) = (targets[a] - counts[a], targets[b] - counts[b]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        parts[k].push(gi);
        counts[k] += members.len() as f64;
    }
    // Every split gets at least one group.
    for k in 0..3 {
        if parts[k].is_empty() {
            let donor = (0..3).max_by_key(|&d| parts[d].len()).unwrap();
            let smallest = parts[donor]
                .iter()
                .enumerate()
                .min_by_key(|(_, &g)| groups[g].1.len())
                .map(|(pos, _)| pos)
                .unwrap();
            let g = parts[donor].remove(smallest);
            parts[k].push(g);
        }
    }
    let collect = |part: &[usize]| {
        let mut ids: Vec<SampleId> = part.iter().flat_map(|&g| groups[g].1.iter().copied()).collect();
        ids.sort();
        ids
    };
    Ok(Split {
        train: collect(&parts[0]),
        val: collect(&parts[1]),
        test: collect(&parts[2]),
    })
}

/// Ground truth `C` for a pair: 1 if the left item is more severe, 0.5 if
/// equally severe, 0 otherwise.
pub fn oracle_relative(pair: (SampleId, SampleId), dataset: &Dataset) -> Result<RelativeLabel> {
    let label = |id: SampleId| {
        dataset
            .get(id)
            .ok_or_else(|| Error::Oracle(format!("unknown sample {id}")))?
            .label
            .ok_or_else(|| Error::Oracle(format!("sample {} has no label", dataset.sample(id).name)))
    };
    let (a, b) = (label(pair.0)?, label(pair.1)?);
    Ok(match a.cmp(&b) {
        std::cmp::Ordering::Greater => RelativeLabel::LeftMore,
        std::cmp::Ordering::Equal => RelativeLabel::Equal,
        std::cmp::Ordering::Less => RelativeLabel::RightMore,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AbsoluteAnswer {
    pub label: u32,
    /// The image was already annotated; no additional cost.
    pub cache_hit: bool,
}

/// Where annotations come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Sim,
    Human,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Sim => "sim",
            Source::Human => "human",
        })
    }
}

/// Something that can answer relative and absolute annotation queries.
pub trait Annotator {
    fn relative(&mut self, pair: &RelativePair) -> Result<RelativeLabel>;
    fn absolute(&mut self, id: SampleId) -> Result<AbsoluteAnswer>;
    fn source(&self) -> Source;
}

/// Annotator backed by the dataset's ground-truth labels. A nonzero
/// `flip_probability` replaces the true answer with a uniformly chosen
/// different one.
#[derive(Debug)]
pub struct SimulatedOracle<'a> {
    dataset: &'a Dataset,
    flip_probability: f64,
    rng: seed::Rng,
    absolute_seen: HashSet<SampleId>,
}

impl<'a> SimulatedOracle<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        SimulatedOracle {
            dataset,
            flip_probability: 0.0,
            rng: seed::rng(0),
            absolute_seen: HashSet::new(),
        }
    }

    pub fn with_noise(mut self, flip_probability: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&flip_probability) {
            return Err(Error::Config(format!("flip probability {flip_probability} outside [0, 1]")));
        }
        self.flip_probability = flip_probability;
        self.rng = seed::keyed_rng(seed, "oracle-noise", &[]);
        Ok(self)
    }

    /// Unique images annotated with absolute labels so far.
    pub fn absolute_count(&self) -> usize {
        self.absolute_seen.len()
    }
}

impl Annotator for SimulatedOracle<'_> {
    fn relative(&mut self, pair: &RelativePair) -> Result<RelativeLabel> {
        let truth = oracle_relative((pair.left, pair.right), self.dataset)?;
        if self.flip_probability > 0.0 && self.rng.random::<f64>() < self.flip_probability {
            let others: Vec<RelativeLabel> = RelativeLabel::ALL.into_iter().filter(|&l| l != truth).collect();
            return Ok(others[self.rng.random_range(0..others.len())]);
        }
        Ok(truth)
    }

    fn absolute(&mut self, id: SampleId) -> Result<AbsoluteAnswer> {
        let sample = self
            .dataset
            .get(id)
            .ok_or_else(|| Error::Oracle(format!("unknown sample {id}")))?;
        let label = sample
            .label
            .ok_or_else(|| Error::Oracle(format!("sample {} has no label", sample.name)))?;
        let cache_hit = !self.absolute_seen.insert(id);
        Ok(AbsoluteAnswer { label, cache_hit })
    }

    fn source(&self) -> Source {
        Source::Sim
    }
}
