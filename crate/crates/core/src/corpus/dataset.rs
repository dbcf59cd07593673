use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::{Label, SampleRecord};
use crate::error::{Error, Result};

/// Embedding widths shared by every record of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub text: usize,
    pub visual: usize,
    /// Width of `hv`, when records carry it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hv: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub id: usize,
    pub name: String,
    pub role: DomainRole,
    /// JSON-lines file, relative to the manifest's directory.
    pub records: PathBuf,
}

/// On-disk description of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub dims: Dims,
    pub domains: Vec<DomainEntry>,
    /// Target ids already moved into the labeled pool.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labeled_target: Vec<String>,
}

/// Hidden store of target labels. Every reveal is counted so tests can
/// audit that nothing outside annotation reads it.
#[derive(Debug, Default)]
pub struct Oracle {
    labels: BTreeMap<String, Label>,
    reveals: AtomicUsize,
}

impl Clone for Oracle {
    fn clone(&self) -> Self {
        Oracle {
            labels: self.labels.clone(),
            reveals: AtomicUsize::new(self.reveals()),
        }
    }
}

impl PartialEq for Oracle {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels
    }
}

impl Oracle {
    pub fn reveals(&self) -> usize {
        self.reveals.load(Ordering::SeqCst)
    }

    pub fn holds(&self, id: &str) -> bool {
        self.labels.contains_key(id)
    }

    pub(super) fn reveal(&mut self, id: &str) -> Option<Label> {
        let label = self.labels.remove(id)?;
        self.reveals.fetch_add(1, Ordering::SeqCst);
        Some(label)
    }
}

/// Held-out target samples with labels, for evaluation only.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSplit {
    pub records: Vec<SampleRecord>,
}

impl TestSplit {
    pub fn ids(&self) -> HashSet<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }
}

/// `M` fully labeled source domains plus a target domain split into an
/// unlabeled pool (`T_u`) and an actively labeled pool (`T_l`).
///
/// Source domains carry ids `0..M`; the target domain is `M`. Target labels
/// live in the [`Oracle`] until annotated, so records in `T_u` never expose
/// a label.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSet {
    pub name: String,
    pub dims: Dims,
    domain_names: Vec<String>,
    sources: Vec<Vec<SampleRecord>>,
    unlabeled: Vec<SampleRecord>,
    labeled: Vec<SampleRecord>,
    oracle: Oracle,
}

impl DomainSet {
    /// Validates and indexes the records. Target labels are moved into the
    /// oracle store.
    pub fn new(
        name: impl Into<String>,
        dims: Dims,
        domain_names: Vec<String>,
        sources: Vec<Vec<SampleRecord>>,
        target: Vec<SampleRecord>,
    ) -> Result<Self> {
        let m = sources.len();
        if m == 0 {
            return Err(Error::InvalidInput("at least one source domain is required".into()));
        }
        if domain_names.len() != m + 1 {
            return Err(Error::dim("domain names", m + 1, domain_names.len()));
        }
        let mut seen = HashSet::new();
        let mut check = |r: &SampleRecord, domain: usize| -> Result<()> {
            r.validate(dims.text, dims.visual, dims.hv)?;
            if r.domain_id != domain {
                return Err(Error::Record {
                    id: r.id.clone(),
                    reason: format!("domain_id {} but listed under domain {domain}", r.domain_id),
                });
            }
            if !seen.insert(r.id.clone()) {
                return Err(Error::Record {
                    id: r.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
            Ok(())
        };
        for (d, records) in sources.iter().enumerate() {
            for r in records {
                check(r, d)?;
                if r.label.is_none() {
                    return Err(Error::Record {
                        id: r.id.clone(),
                        reason: "source records must be labeled".into(),
                    });
                }
            }
        }
        let mut oracle = Oracle::default();
        let mut unlabeled = Vec::with_capacity(target.len());
        for mut r in target {
            check(&r, m)?;
            if let Some(label) = r.label.take() {
                oracle.labels.insert(r.id.clone(), label);
            }
            unlabeled.push(r);
        }
        Ok(DomainSet {
            name: name.into(),
            dims,
            domain_names,
            sources,
            unlabeled,
            labeled: Vec::new(),
            oracle,
        })
    }

    /// Number of source domains `M`.
    pub fn source_count(&self) -> usize {
        self.sources.len()
    }

    /// Domain label of the target domain (`M`).
    pub fn target_domain(&self) -> usize {
        self.sources.len()
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn source(&self, i: usize) -> &[SampleRecord] {
        &self.sources[i]
    }

    pub fn sources(&self) -> impl Iterator<Item = &SampleRecord> {
        self.sources.iter().flatten()
    }

    /// `T_u`. Labels are always `None` here.
    pub fn unlabeled(&self) -> &[SampleRecord] {
        &self.unlabeled
    }

    /// `T_l`, with labels revealed by annotation.
    pub fn labeled(&self) -> &[SampleRecord] {
        &self.labeled
    }

    pub fn n_tu(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn n_tl(&self) -> usize {
        self.labeled.len()
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub(super) fn oracle_mut(&mut self) -> &mut Oracle {
        &mut self.oracle
    }

    pub(super) fn pools_mut(&mut self) -> (&mut Vec<SampleRecord>, &mut Vec<SampleRecord>) {
        (&mut self.unlabeled, &mut self.labeled)
    }

    /// Moves `fraction` of the unlabeled target pool (rounded half up) into a
    /// held-out evaluation split. Their labels leave the oracle with them.
    pub fn split_test(&mut self, fraction: f64, seed: u64) -> Result<TestSplit> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidConfig(format!("test fraction {fraction} outside [0, 1)")));
        }
        let n = self.unlabeled.len();
        let n_test = (fraction * n as f64 + 1e-9).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut chosen = order[..n_test].to_vec();
        chosen.sort_unstable();
        let mut records = Vec::with_capacity(n_test);
        for &i in chosen.iter().rev() {
            let mut r = self.unlabeled.remove(i);
            r.label = self.oracle.labels.remove(&r.id);
            if r.label.is_none() {
                return Err(Error::Record {
                    id: r.id,
                    reason: "test split needs a ground-truth label".into(),
                });
            }
            records.push(r);
        }
        records.reverse();
        Ok(TestSplit { records })
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));

        let mut entries = manifest.domains.clone();
        entries.sort_by_key(|d| d.id);
        let targets: Vec<_> = entries.iter().filter(|d| d.role == DomainRole::Target).collect();
        if targets.len() != 1 {
            return Err(Error::InvalidInput(format!(
                "manifest must list exactly one target domain, found {}",
                targets.len()
            )));
        }
        let m = entries.len() - 1;
        for (i, d) in entries.iter().enumerate() {
            let expected_role = if i == m { DomainRole::Target } else { DomainRole::Source };
            if d.id != i || d.role != expected_role {
                return Err(Error::InvalidInput(format!(
                    "domain ids must be 0..{m} for sources and {m} for the target; got `{}` as {} ({:?})",
                    d.name, d.id, d.role
                )));
            }
        }
        let mut sources = Vec::with_capacity(m);
        let mut target = Vec::new();
        for d in &entries {
            let records = read_jsonl(&base.join(&d.records))?;
            if d.role == DomainRole::Source {
                sources.push(records);
            } else {
                target = records;
            }
        }
        let names = entries.iter().map(|d| d.name.clone()).collect();
        let mut ds = DomainSet::new(manifest.name, manifest.dims, names, sources, target)?;
        for id in &manifest.labeled_target {
            let pos = ds.unlabeled.iter().position(|r| &r.id == id).ok_or_else(|| Error::Record {
                id: id.clone(),
                reason: "listed as labeled but not in the target domain".into(),
            })?;
            let mut r = ds.unlabeled.remove(pos);
            r.label = ds.oracle.labels.remove(id);
            if r.label.is_none() {
                return Err(Error::Record {
                    id: id.clone(),
                    reason: "labeled target record has no label".into(),
                });
            }
            ds.labeled.push(r);
        }
        Ok(ds)
    }

    /// Writes `manifest.json` plus one JSON-lines file per domain into `dir`
    /// and returns the manifest path. Hidden target labels are written to the
    /// target file so the dataset can be reloaded with its oracle intact.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut domains = Vec::new();
        for (i, records) in self.sources.iter().enumerate() {
            let file = PathBuf::from(format!("domain_{i}.jsonl"));
            write_jsonl(&dir.join(&file), records.iter())?;
            domains.push(DomainEntry {
                id: i,
                name: self.domain_names[i].clone(),
                role: DomainRole::Source,
                records: file,
            });
        }
        let m = self.sources.len();
        let file = PathBuf::from(format!("domain_{m}.jsonl"));
        let target: Vec<SampleRecord> = self
            .unlabeled
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.label = self.oracle.labels.get(&r.id).copied();
                r
            })
            .chain(self.labeled.iter().cloned())
            .collect();
        write_jsonl(&dir.join(&file), target.iter())?;
        domains.push(DomainEntry {
            id: m,
            name: self.domain_names[m].clone(),
            role: DomainRole::Target,
            records: file,
        });
        let manifest = Manifest {
            name: self.name.clone(),
            dims: self.dims,
            domains,
            labeled_target: self.labeled.iter().map(|r| r.id.clone()).collect(),
        };
        let path = dir.join("manifest.json");
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(SampleRecord::from_json_line(&line)?);
    }
    Ok(out)
}

fn write_jsonl<'a>(path: &Path, records: impl Iterator<Item = &'a SampleRecord>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
