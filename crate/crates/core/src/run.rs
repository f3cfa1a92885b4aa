//! Run directory layout and file formats.
//!
//! ```text
//! config.json           full run configuration
//! split.json            train/val/test membership by sample id
//! pairs.csv             id_i,id_j,label,round,source
//! selections.csv        round,id,variance
//! rounds.jsonl          one RoundRecord per line
//! params-round-<k>.bin  parameter snapshot after round k
//! ```

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active::{RoundRecord, Settings, SplitIds};
use crate::data::{Dataset, SampleId, Source, SynthConfig};
use crate::error::{Error, Result};
use crate::nn::NetworkParams;
use crate::ranker::{LabeledPair, RelativeLabel, RelativePair};

pub const CONFIG_FILE: &str = "config.json";
pub const SPLIT_FILE: &str = "split.json";
pub const PAIRS_FILE: &str = "pairs.csv";
pub const SELECTIONS_FILE: &str = "selections.csv";
pub const ROUNDS_FILE: &str = "rounds.jsonl";

const PARAMS_MAGIC: &[u8; 8] = b"BRNKPRM\0";
const PARAMS_VERSION: u32 = 1;

/// Everything needed to reproduce a run; the `config.json` schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// JSON-lines dataset; when absent the dataset is generated from `synth`.
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    pub split_fractions: [f64; 3],
    #[serde(flatten)]
    pub settings: Settings,
    /// Probability that the simulated annotator answers wrongly.
    pub flip_probability: f64,
    pub run_id: String,
    pub port: u16,
    /// Directory with the annotator UI bundle served at `/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            synth: SynthConfig::default(),
            split_fractions: [0.6, 0.2, 0.2],
            settings: Settings {
                overall_test_repeats: 1,
                ..Settings::default()
            },
            flip_probability: 0.0,
            run_id: "run".into(),
            port: 8080,
            ui_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Set the master seed of every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.settings.loop_config.seed = seed;
        self.settings.train.seed = seed;
    }

    /// Load or generate the dataset and split it by group.
    pub fn materialize(&self) -> Result<(Dataset, SplitIds)> {
        let dataset = match &self.dataset {
            Some(path) => crate::data::load_dataset(path)?,
            None => crate::data::synth_generate(&self.synth)?.dataset,
        };
        let split = crate::data::split_groupwise(&dataset, self.split_fractions, self.settings.loop_config.seed)?;
        Ok((dataset, split.into()))
    }
}

/// Writer for a run directory. Files are created fresh and appended to as
/// the loop progresses, so an aborted run leaves its history on disk.
#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

fn label_text(label: RelativeLabel) -> &'static str {
    match label {
        RelativeLabel::RightMore => "0",
        RelativeLabel::Equal => "0.5",
        RelativeLabel::LeftMore => "1",
    }
}

impl RunDir {
    pub fn create(path: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let dir = RunDir { path: path.to_path_buf() };
        dir.write_file(CONFIG_FILE, &(serde_json::to_string_pretty(config)? + "\n"))?;
        dir.write_file(PAIRS_FILE, "id_i,id_j,label,round,source\n")?;
        dir.write_file(SELECTIONS_FILE, "round,id,variance\n")?;
        dir.write_file(ROUNDS_FILE, "")?;
        Ok(dir)
    }

    /// Open an existing run directory for reading.
    pub fn open(path: &Path) -> Result<Self> {
        if !path.join(CONFIG_FILE).is_file() {
            return Err(Error::Config(format!("{} is not a run directory", path.display())));
        }
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_file(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.path.join(name);
        fs::write(&p, contents).map_err(|e| Error::io(p, e))
    }

    fn append(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.path.join(name);
        let mut f = OpenOptions::new().append(true).create(true).open(&p).map_err(|e| Error::io(&p, e))?;
        f.write_all(contents.as_bytes()).map_err(|e| Error::io(&p, e))
    }

    fn csv_rows(rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for row in rows {
            w.write_record(&row).map_err(|e| Error::Validation(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_split(&self, dataset: &Dataset, split: &SplitIds) -> Result<()> {
        let names = |ids: &[SampleId]| ids.iter().map(|&id| dataset.sample(id).name.clone()).collect::<Vec<_>>();
        let doc = serde_json::json!({
            "train": names(&split.train),
            "val": names(&split.val),
            "test": names(&split.test),
        });
        self.write_file(SPLIT_FILE, &(serde_json::to_string(&doc)? + "\n"))
    }

    pub fn append_pairs(&self, dataset: &Dataset, pairs: &[LabeledPair]) -> Result<()> {
        let rows = pairs.iter().map(|p| {
            vec![
                dataset.sample(p.pair.left).name.clone(),
                dataset.sample(p.pair.right).name.clone(),
                label_text(p.label).to_string(),
                p.round.to_string(),
                p.source.to_string(),
            ]
        });
        self.append(PAIRS_FILE, &Self::csv_rows(rows)?)
    }

    pub fn append_selections(
        &self,
        dataset: &Dataset,
        round: usize,
        ids: &[SampleId],
        variances: Option<&HashMap<SampleId, f64>>,
    ) -> Result<()> {
        let rows = ids.iter().map(|id| {
            let variance = variances
                .and_then(|v| v.get(id))
                .map(|v| format!("{v:e}"))
                .unwrap_or_default();
            vec![round.to_string(), dataset.sample(*id).name.clone(), variance]
        });
        self.append(SELECTIONS_FILE, &Self::csv_rows(rows)?)
    }

    pub fn append_round(&self, record: &RoundRecord) -> Result<()> {
        self.append(ROUNDS_FILE, &(serde_json::to_string(record)? + "\n"))
    }

    pub fn params_path(&self, round: usize) -> PathBuf {
        self.path.join(format!("params-round-{round}.bin"))
    }

    pub fn write_params(&self, round: usize, params: &NetworkParams) -> Result<()> {
        let p = self.params_path(round);
        fs::write(&p, encode_params(params)).map_err(|e| Error::io(p, e))
    }

    pub fn read_params(&self, round: usize) -> Result<NetworkParams> {
        let p = self.params_path(round);
        decode_params(&fs::read(&p).map_err(|e| Error::io(&p, e))?)
    }

    /// Highest round with a parameter snapshot.
    pub fn last_params_round(&self) -> Option<usize> {
        fs::read_dir(&self.path)
            .ok()?
            .filter_map(|e| {
                let name = e.ok()?.file_name().into_string().ok()?;
                name.strip_prefix("params-round-")?.strip_suffix(".bin")?.parse().ok()
            })
            .max()
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        RunConfig::load(&self.path.join(CONFIG_FILE))
    }

    pub fn read_split(&self, dataset: &Dataset) -> Result<SplitIds> {
        #[derive(Deserialize)]
        struct Names {
            train: Vec<String>,
            val: Vec<String>,
            test: Vec<String>,
        }
        let p = self.path.join(SPLIT_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let names: Names = serde_json::from_str(&text)?;
        let resolve = |v: Vec<String>| {
            v.into_iter()
                .map(|n| dataset.lookup(&n).ok_or_else(|| Error::Schema(format!("split names unknown sample {n}"))))
                .collect::<Result<Vec<_>>>()
        };
        Ok(SplitIds { train: resolve(names.train)?, val: resolve(names.val)?, test: resolve(names.test)? })
    }

    pub fn read_rounds(&self) -> Result<Vec<RoundRecord>> {
        let p = self.path.join(ROUNDS_FILE);
        let file = File::open(&p).map_err(|e| Error::io(&p, e))?;
        let mut out = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&p, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: n + 1, message: e.to_string() })?);
        }
        Ok(out)
    }

    pub fn read_pairs(&self, dataset: &Dataset) -> Result<Vec<LabeledPair>> {
        let p = self.path.join(PAIRS_FILE);
        let mut reader = csv::Reader::from_path(&p).map_err(|e| Error::Validation(e.to_string()))?;
        let mut out = Vec::new();
        for (n, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::Parse { line: n + 2, message: e.to_string() })?;
            let field = |k: usize| row.get(k).ok_or_else(|| Error::Parse { line: n + 2, message: "missing column".into() });
            let id = |name: &str| {
                dataset
                    .lookup(name)
                    .ok_or_else(|| Error::Schema(format!("pairs.csv names unknown sample {name}")))
            };
            let label: f64 = field(2)?.parse().map_err(|_| Error::Parse { line: n + 2, message: "bad label".into() })?;
            let round = field(3)?.parse().map_err(|_| Error::Parse { line: n + 2, message: "bad round".into() })?;
            let source = match field(4)? {
                "sim" => Source::Sim,
                "human" => Source::Human,
                other => return Err(Error::Parse { line: n + 2, message: format!("bad source {other}") }),
            };
            out.push(LabeledPair {
                pair: RelativePair::new(id(field(0)?)?, id(field(1)?)?)?,
                label: RelativeLabel::try_from(label)?,
                round,
                source,
            });
        }
        Ok(out)
    }
}

/// Versioned little-endian binary snapshot of the network parameters.
pub fn encode_params(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * params.num_parameters());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layer_sizes.len() as u32).to_le_bytes());
    for &n in &params.layer_sizes {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(&params.dropout_rate.to_le_bytes());
    out.extend_from_slice(&params.weight_decay.to_le_bytes());
    for (w, b) in params.weights.iter().zip(&params.biases) {
        for v in w.iter().chain(b) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<NetworkParams> {
    let bad = |m: &str| Error::Schema(format!("parameter snapshot: {m}"));
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(8)? != PARAMS_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != PARAMS_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = u32_at(take(4)?) as usize;
    if n > 1024 {
        return Err(bad("implausible layer count"));
    }
    let layer_sizes = (0..n).map(|_| take(4).map(|b| u32_at(b) as usize)).collect::<Result<Vec<_>>>()?;
    let dropout_rate = f64_at(take(8)?);
    let weight_decay = f64_at(take(8)?);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in layer_sizes.windows(2) {
        let w = (0..pair[0] * pair[1]).map(|_| take(8).map(f64_at)).collect::<Result<Vec<_>>>()?;
        let b = (0..pair[1]).map(|_| take(8).map(f64_at)).collect::<Result<Vec<_>>>()?;
        weights.push(w);
        biases.push(b);
    }
    if !cursor.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let params = NetworkParams { layer_sizes, weights, biases, dropout_rate, weight_decay };
    params.validate()?;
    Ok(params)
}
