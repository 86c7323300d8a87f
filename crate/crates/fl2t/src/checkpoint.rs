//! On-disk artifacts: adapter and full-state checkpoints, metrics and
//! sample CSVs, and the run manifest.
//!
//! Everything is JSON or CSV so artifacts stay human-diffable and
//! language-neutral. Matrices serialize as nested row lists with
//! shortest-round-trip float formatting, so two bitwise-identical runs
//! produce byte-identical files. All writes go through a temp file and a
//! rename, so readers never observe a half-written artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{ConceptEmbeddingBank, DecoderParams, FusionMlp, ProxyBank};
use crate::diffusion::{ConsolidationState, TokenTable};
use crate::error::{Fl2tError, Result};
use crate::lora::{AdapterSet, LoraAdapter};
use crate::numerics::Matrix;
use crate::pipeline::{ExperimentConfig, MetricsRow};
use crate::regularizers::SharedSubspace;

/// Version stamped into every emitted JSON artifact. Readers accept any
/// minor revision of the same major.
pub const SCHEMA_VERSION: &str = "1.0";

fn check_schema_version(version: &str, what: &str) -> Result<()> {
    let major = version.split('.').next().unwrap_or("");
    let supported = SCHEMA_VERSION.split('.').next().unwrap_or("");
    if major != supported {
        return Err(Fl2tError::Domain(format!(
            "{what} has schema version {version}, but this build reads major {supported} only"
        )));
    }
    Ok(())
}

/// Write bytes via a temp file in the target directory, then rename into
/// place. Parent directories are created as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Fl2tError::Domain(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialize `value` as pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Parse a JSON file written by [`write_json`].
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// One concept's adapters in checkpoint form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub schema_version: String,
    pub concept_id: usize,
    pub rank: usize,
    pub layers: Vec<AdapterLayerRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdapterLayerRecord {
    pub layer_index: usize,
    #[serde(rename = "A")]
    pub a: Matrix,
    #[serde(rename = "B")]
    pub b: Matrix,
}

impl AdapterCheckpoint {
    pub fn from_set(set: &AdapterSet) -> AdapterCheckpoint {
        AdapterCheckpoint {
            schema_version: SCHEMA_VERSION.to_string(),
            concept_id: set.concept_id,
            rank: set.layers.first().map(|l| l.rank()).unwrap_or(0),
            layers: set
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| AdapterLayerRecord {
                    layer_index: i,
                    a: l.a.clone(),
                    b: l.b.clone(),
                })
                .collect(),
        }
    }

    pub fn into_set(self) -> Result<AdapterSet> {
        check_schema_version(&self.schema_version, "adapter checkpoint")?;
        if self.layers.is_empty() {
            return Err(Fl2tError::Domain(format!(
                "adapter checkpoint for concept {} has no layers",
                self.concept_id
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, record) in self.layers.into_iter().enumerate() {
            if record.layer_index != i {
                return Err(Fl2tError::Domain(format!(
                    "adapter checkpoint layer {i} is labeled {}",
                    record.layer_index
                )));
            }
            if record.a.cols() != self.rank || record.b.rows() != self.rank {
                return Err(Fl2tError::Domain(format!(
                    "layer {i} factors have inner dimensions {}x{} but the checkpoint says rank {}",
                    record.a.cols(),
                    record.b.rows(),
                    self.rank
                )));
            }
            layers.push(LoraAdapter {
                a: record.a,
                b: record.b,
            });
        }
        Ok(AdapterSet {
            concept_id: self.concept_id,
            layers,
        })
    }
}

/// The token table in checkpoint form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenTableRecord {
    pub context_count: usize,
    pub rows: Matrix,
}

impl TokenTableRecord {
    pub fn from_table(table: &TokenTable) -> TokenTableRecord {
        TokenTableRecord {
            context_count: table.context_count,
            rows: table.matrix.clone(),
        }
    }

    pub fn into_table(self) -> Result<TokenTable> {
        if self.context_count > self.rows.rows() {
            return Err(Fl2tError::Domain(format!(
                "token table claims {} context tokens but holds {} rows",
                self.context_count,
                self.rows.rows()
            )));
        }
        Ok(TokenTable {
            matrix: self.rows,
            context_count: self.context_count,
        })
    }
}

/// Everything step 1 produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Step1Checkpoint {
    pub schema_version: String,
    pub adapters: Vec<AdapterCheckpoint>,
    pub token_table: TokenTableRecord,
}

impl Step1Checkpoint {
    pub fn new(adapters: &[AdapterSet], table: &TokenTable) -> Step1Checkpoint {
        Step1Checkpoint {
            schema_version: SCHEMA_VERSION.to_string(),
            adapters: adapters.iter().map(AdapterCheckpoint::from_set).collect(),
            token_table: TokenTableRecord::from_table(table),
        }
    }

    pub fn restore(self) -> Result<(Vec<AdapterSet>, TokenTable)> {
        check_schema_version(&self.schema_version, "step-1 checkpoint")?;
        let adapters = self
            .adapters
            .into_iter()
            .map(AdapterCheckpoint::into_set)
            .collect::<Result<Vec<_>>>()?;
        Ok((adapters, self.token_table.into_table()?))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Step1Checkpoint> {
        read_json(path)
    }
}

/// Everything consolidation produces: adapters in the shared adapter
/// schema plus decoder, fusion, proxy, and subspace sections, along with
/// the token table and the frozen concept-embedding bank.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateCheckpoint {
    pub schema_version: String,
    pub adapters: Vec<AdapterCheckpoint>,
    pub subspace: SharedSubspace,
    pub decoder: DecoderParams,
    pub fusion: FusionMlp,
    pub proxies: Matrix,
    pub bank: Matrix,
    pub token_table: TokenTableRecord,
}

impl StateCheckpoint {
    pub fn new(
        state: &ConsolidationState,
        table: &TokenTable,
        bank: &ConceptEmbeddingBank,
    ) -> StateCheckpoint {
        StateCheckpoint {
            schema_version: SCHEMA_VERSION.to_string(),
            adapters: state.adapters.iter().map(AdapterCheckpoint::from_set).collect(),
            subspace: state.subspace.clone(),
            decoder: state.decoder.clone(),
            fusion: state.fusion.clone(),
            proxies: state.proxies.matrix.clone(),
            bank: bank.matrix().clone(),
            token_table: TokenTableRecord::from_table(table),
        }
    }

    pub fn restore(self) -> Result<(ConsolidationState, TokenTable, ConceptEmbeddingBank)> {
        check_schema_version(&self.schema_version, "state checkpoint")?;
        let adapters = self
            .adapters
            .into_iter()
            .map(AdapterCheckpoint::into_set)
            .collect::<Result<Vec<_>>>()?;
        let state = ConsolidationState {
            adapters,
            subspace: self.subspace,
            decoder: self.decoder,
            fusion: self.fusion,
            proxies: ProxyBank {
                matrix: self.proxies,
            },
        };
        let bank = ConceptEmbeddingBank::new(self.bank)?;
        Ok((state, self.token_table.into_table()?, bank))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<StateCheckpoint> {
        read_json(path)
    }
}

/// Identifies a run: what was executed, under which seed, against which
/// exact configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: String,
    pub command: String,
    pub master_seed: u64,
    /// SHA-256 of the canonical JSON form of the config.
    pub config_hash: String,
    pub package_version: String,
}

/// Hex SHA-256 digest of the config's canonical JSON form.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let digest = Sha256::digest(config.canonical_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> RunManifest {
        RunManifest {
            schema_version: SCHEMA_VERSION.to_string(),
            command: command.to_string(),
            master_seed: config.master_seed,
            config_hash: config_hash(config),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Shortest-round-trip decimal form, the same convention JSON uses.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Metrics CSV: one row per (order position, concept).
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(
        "order_id,concept_id,ia_analog,ims_analog,loss_before,loss_after,forgetting\n",
    );
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.order_position,
            row.concept_id,
            fmt_f64(row.identity_alignment),
            fmt_f64(row.identity_mean_similarity),
            fmt_f64(row.loss_before),
            fmt_f64(row.loss_after),
            fmt_f64(row.forgetting),
        ));
    }
    write_atomic(path, text.as_bytes())
}

/// Parse a metrics CSV written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Fl2tError::Domain("metrics CSV is empty".into()))?;
    let expected = "order_id,concept_id,ia_analog,ims_analog,loss_before,loss_after,forgetting";
    if header != expected {
        return Err(Fl2tError::Domain(format!(
            "metrics CSV header is {header:?}, expected {expected:?}"
        )));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Fl2tError::Domain(format!(
                "metrics CSV line {} has {} fields, expected 7",
                n + 2,
                fields.len()
            )));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Fl2tError::Domain(format!("metrics CSV line {}: {e}", n + 2)))
        };
        let parse_f64 = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Fl2tError::Domain(format!("metrics CSV line {}: {e}", n + 2)))
        };
        rows.push(MetricsRow {
            order_position: parse_usize(fields[0])?,
            concept_id: parse_usize(fields[1])?,
            identity_alignment: parse_f64(fields[2])?,
            identity_mean_similarity: parse_f64(fields[3])?,
            loss_before: parse_f64(fields[4])?,
            loss_after: parse_f64(fields[5])?,
            forgetting: parse_f64(fields[6])?,
        });
    }
    Ok(rows)
}

/// Generated-sample CSV: one row per sample with its concept and prompt
/// token ids followed by the coordinates.
pub fn write_samples_csv(
    path: &Path,
    concept_id: usize,
    prompt_id: usize,
    samples: &Matrix,
) -> Result<()> {
    let mut text = String::from("concept_id,prompt_id");
    for d in 0..samples.cols() {
        text.push_str(&format!(",x{d}"));
    }
    text.push('\n');
    for r in 0..samples.rows() {
        text.push_str(&format!("{concept_id},{prompt_id}"));
        for v in samples.row(r) {
            text.push(',');
            text.push_str(&fmt_f64(*v));
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// One randomized drift trial for the trial-summary CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTrialRow {
    pub trial_id: usize,
    /// Drift of the plain unit-coefficient aggregate.
    pub norm_joint: f64,
    /// Drift after the damping construction.
    pub norm_reduced: f64,
    pub reduced: bool,
}

/// Trial-summary CSV for drift analysis.
pub fn write_drift_csv(path: &Path, rows: &[DriftTrialRow]) -> Result<()> {
    let mut text = String::from("trial_id,norm_joint,norm_reduced,reduced\n");
    for row in rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            row.trial_id,
            fmt_f64(row.norm_joint),
            fmt_f64(row.norm_reduced),
            row.reduced,
        ));
    }
    write_atomic(path, text.as_bytes())
}
