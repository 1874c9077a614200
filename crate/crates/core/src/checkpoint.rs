//! CRIU-like incremental checkpointing on top of a tracker, with a restore
//! oracle and an on-disk image layout.
//!
//! Image directory layout:
//!
//! ```text
//! <dir>/manifest.json      sequence_no, mode, parent, pages, mapped, sha256
//! <dir>/pages/<gva>.bin    one file per dumped page (hex page number)
//! ```
//!
//! `sha256` covers the page files in manifest order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::addr::{AddrError, AddressSpace, Gva, Pid};
use crate::cost::Calibration;
use crate::sim::machine::{run_single, Vm, VmConfig};
use crate::size::ByteSize;
use crate::tracker::{Exploit, ExploitCtx, Technique, TrackerConfig};
use crate::workload::missed_pages_workload;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointMode {
    Full,
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointImage {
    pub sequence_no: u64,
    pub mode: CheckpointMode,
    pub parent: Option<u64>,
    pub pages: BTreeMap<Gva, Vec<u8>>,
    /// Pages mapped at dump time; restore drops anything else.
    pub mapped: BTreeSet<Gva>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("incremental checkpoint without a full baseline")]
    NoBaseline,
    #[error("broken chain: {0}")]
    BrokenChain(String),
    #[error("image {path}: {msg}")]
    Corrupt { path: String, msg: String },
    #[error(transparent)]
    Addr(#[from] AddrError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dumps `pid`. Full mode copies every mapped page, incremental mode the
/// pages of `dirty` that are still mapped.
pub fn checkpoint(
    mem: &AddressSpace,
    pid: Pid,
    dirty: &BTreeSet<Gva>,
    mode: CheckpointMode,
    parent: Option<&CheckpointImage>,
) -> Result<CheckpointImage, CheckpointError> {
    let mapped = mem.mapped_pages(pid)?;
    let read = |g: &Gva| (*g, mem.read_page(pid, *g).map(<[u8]>::to_vec).unwrap_or_default());
    let (pages, parent_no, seq) = match mode {
        CheckpointMode::Full => (
            mapped.iter().map(read).collect(),
            None,
            parent.map_or(0, |p| p.sequence_no + 1),
        ),
        CheckpointMode::Incremental => {
            let p = parent.ok_or(CheckpointError::NoBaseline)?;
            (
                dirty.iter().filter(|g| mapped.contains(g)).map(read).collect(),
                Some(p.sequence_no),
                p.sequence_no + 1,
            )
        }
    };
    Ok(CheckpointImage {
        sequence_no: seq,
        mode,
        parent: parent_no,
        pages,
        mapped,
    })
}

/// Dump time of `pages` pages, µs.
pub fn dump_cost_us(cal: &Calibration, pages: usize) -> f64 {
    cal.dump_base_ms * 1000.0 + cal.dump_page_us * pages as f64
}

/// Checkpointer plugged into the exploitation phase: a full dump at launch,
/// then one incremental dump per collection.
#[derive(Debug, Default)]
pub struct Checkpointer {
    pub images: Vec<CheckpointImage>,
    /// Memory of the tracked process at each dump (only when `keep_oracle`).
    pub oracle: Vec<BTreeMap<Gva, Vec<u8>>>,
    pub keep_oracle: bool,
}

impl Checkpointer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also snapshot the true memory at every dump, for restore checks.
    pub fn with_oracle() -> Self {
        Checkpointer {
            keep_oracle: true,
            ..Self::default()
        }
    }

    pub fn last_oracle(&self) -> Option<&BTreeMap<Gva, Vec<u8>>> {
        self.oracle.last()
    }

    fn dump(&mut self, ctx: &ExploitCtx<'_>, mode: CheckpointMode) -> f64 {
        let parent = self.images.last();
        let mode = if parent.is_none() { CheckpointMode::Full } else { mode };
        let img = checkpoint(ctx.mem, ctx.pid, ctx.dirty, mode, parent).expect("tracked process exists");
        let cost = dump_cost_us(ctx.cal, img.pages.len());
        if self.keep_oracle {
            self.oracle
                .push(ctx.mem.snapshot(ctx.pid).expect("tracked process exists"));
        }
        self.images.push(img);
        cost
    }
}

impl Exploit for Checkpointer {
    fn on_launch(&mut self, ctx: ExploitCtx<'_>) -> f64 {
        self.dump(&ctx, CheckpointMode::Full)
    }

    fn exploit(&mut self, ctx: ExploitCtx<'_>) -> f64 {
        self.dump(&ctx, CheckpointMode::Incremental)
    }

    fn as_any(&self) -> &dyn std::any::Any {
        self
    }
}

/// Rebuilds memory from a full image followed by incrementals.
pub fn restore(chain: &[CheckpointImage]) -> Result<BTreeMap<Gva, Vec<u8>>, CheckpointError> {
    let first = chain
        .first()
        .ok_or_else(|| CheckpointError::BrokenChain("empty chain".into()))?;
    if first.mode != CheckpointMode::Full {
        return Err(CheckpointError::BrokenChain(format!(
            "image {} is incremental but starts the chain",
            first.sequence_no
        )));
    }
    let mut mem = first.pages.clone();
    for w in chain.windows(2) {
        let (prev, img) = (&w[0], &w[1]);
        if img.parent != Some(prev.sequence_no) {
            return Err(CheckpointError::BrokenChain(format!(
                "image {} has parent {:?}, expected {}",
                img.sequence_no, img.parent, prev.sequence_no
            )));
        }
        if img.mode == CheckpointMode::Full {
            mem.clear();
        }
        mem.extend(img.pages.iter().map(|(g, p)| (*g, p.clone())));
    }
    let last = chain.last().expect("non-empty");
    mem.retain(|g, _| last.mapped.contains(g));
    Ok(mem)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Consistent,
    /// Pages whose restored contents differ from the oracle (or are absent
    /// on one side).
    Inconsistent(BTreeSet<Gva>),
}

pub fn restore_verify(chain: &[CheckpointImage], oracle: &BTreeMap<Gva, Vec<u8>>) -> Result<Verdict, CheckpointError> {
    let restored = restore(chain)?;
    let keys: BTreeSet<Gva> = restored.keys().chain(oracle.keys()).copied().collect();
    let bad: BTreeSet<Gva> = keys.into_iter().filter(|g| restored.get(g) != oracle.get(g)).collect();
    Ok(if bad.is_empty() {
        Verdict::Consistent
    } else {
        Verdict::Inconsistent(bad)
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    sequence_no: u64,
    mode: CheckpointMode,
    parent: Option<u64>,
    pages: Vec<u64>,
    mapped: Vec<u64>,
    sha256: String,
}

fn page_file(g: Gva) -> String {
    format!("{:x}.bin", g.0)
}

impl CheckpointImage {
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.pages.values() {
            h.update(p);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        let pages_dir = dir.join("pages");
        fs::create_dir_all(&pages_dir)?;
        for (g, p) in &self.pages {
            fs::write(pages_dir.join(page_file(*g)), p)?;
        }
        let m = Manifest {
            sequence_no: self.sequence_no,
            mode: self.mode,
            parent: self.parent,
            pages: self.pages.keys().map(|g| g.0).collect(),
            mapped: self.mapped.iter().map(|g| g.0).collect(),
            sha256: self.digest(),
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<CheckpointImage, CheckpointError> {
        let corrupt = |msg: String| CheckpointError::Corrupt {
            path: dir.display().to_string(),
            msg,
        };
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
        let mut pages = BTreeMap::new();
        for g in &m.pages {
            let g = Gva(*g);
            pages.insert(g, fs::read(dir.join("pages").join(page_file(g)))?);
        }
        let img = CheckpointImage {
            sequence_no: m.sequence_no,
            mode: m.mode,
            parent: m.parent,
            pages,
            mapped: m.mapped.into_iter().map(Gva).collect(),
        };
        if img.digest() != m.sha256 {
            return Err(corrupt("sha256 mismatch".into()));
        }
        Ok(img)
    }
}

/// Saves a chain as `<dir>/<sequence_no>/`.
pub fn save_chain(chain: &[CheckpointImage], dir: &Path) -> Result<(), CheckpointError> {
    for img in chain {
        img.save(&dir.join(img.sequence_no.to_string()))?;
    }
    Ok(())
}

pub fn load_chain(dir: &Path) -> Result<Vec<CheckpointImage>, CheckpointError> {
    let mut seqs: Vec<u64> = fs::read_dir(dir)?
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
        .collect();
    seqs.sort_unstable();
    seqs.iter()
        .map(|s| CheckpointImage::load(&dir.join(s.to_string())))
        .collect()
}

/// Missed-address experiment settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MissedPagesConfig {
    pub technique: Technique,
    /// Length of the monitoring interval, µs (stretched if writing the
    /// working set takes longer).
    pub interval_us: f64,
    /// Page relocations per second.
    pub churn_rate: f64,
    pub seed: u64,
}

/// Relocation rate picked so the smallest working set loses most of its
/// addresses and the largest almost none.
pub const DEFAULT_CHURN_RATE: f64 = 17_800.0;

impl Default for MissedPagesConfig {
    fn default() -> Self {
        MissedPagesConfig {
            technique: Technique::Spml,
            interval_us: 20_000.0,
            churn_rate: DEFAULT_CHURN_RATE,
            seed: 1,
        }
    }
}

/// Proportion of the written working set whose addresses were lost, per
/// working-set size.
pub fn missed_pages_experiment(
    sizes: &[ByteSize],
    cfg: &MissedPagesConfig,
    cal: &Arc<Calibration>,
) -> Vec<(ByteSize, f64)> {
    sizes
        .iter()
        .map(|&ws| {
            let w = missed_pages_workload(ws, cfg.interval_us, cfg.churn_rate, cal.write_us, cfg.seed);
            let mut tc = TrackerConfig::new(cfg.technique);
            tc.collection_interval_us = f64::INFINITY;
            let mut vm = Vm::new(0, VmConfig::new(ws), Some(tc), Arc::clone(cal), Arc::new(w));
            let r = run_single(&mut vm, f64::INFINITY);
            let truth: usize = r.intervals.iter().map(|i| i.truth.len()).sum();
            let missed: usize = r.intervals.iter().map(|i| i.missed.len()).sum();
            let p = if truth == 0 { 0.0 } else { missed as f64 / truth as f64 };
            (ws, p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::machine::TRACKED_PID;

    fn mem_with(pages: &[u64]) -> AddressSpace {
        let mut m = AddressSpace::new(true);
        m.add_process(TRACKED_PID);
        for p in pages {
            m.map(TRACKED_PID, Gva(*p)).unwrap();
        }
        m
    }

    #[test]
    fn incremental_needs_baseline() {
        let m = mem_with(&[1, 2]);
        let e = checkpoint(&m, TRACKED_PID, &BTreeSet::new(), CheckpointMode::Incremental, None);
        assert!(matches!(e, Err(CheckpointError::NoBaseline)));
    }

    #[test]
    fn chain_restores_and_detects_a_skipped_page() {
        let mut m = mem_with(&[1, 2, 3]);
        let full = checkpoint(&m, TRACKED_PID, &BTreeSet::new(), CheckpointMode::Full, None).unwrap();
        m.commit_write(TRACKED_PID, Gva(1), 7).unwrap();
        m.commit_write(TRACKED_PID, Gva(2), 8).unwrap();
        let dirty: BTreeSet<Gva> = [Gva(1)].into();
        let inc = checkpoint(&m, TRACKED_PID, &dirty, CheckpointMode::Incremental, Some(&full)).unwrap();
        assert_eq!(inc.pages.len(), 1);
        assert_eq!(inc.parent, Some(0));
        let oracle = m.snapshot(TRACKED_PID).unwrap();
        let chain = vec![full.clone(), inc];
        assert_eq!(
            restore_verify(&chain, &oracle).unwrap(),
            Verdict::Inconsistent([Gva(2)].into())
        );
        assert_eq!(
            restore_verify(&[full], &mem_with(&[1, 2, 3]).snapshot(TRACKED_PID).unwrap()).unwrap(),
            Verdict::Consistent
        );
    }

    #[test]
    fn chain_must_start_full_and_link() {
        let m = mem_with(&[1]);
        let full = checkpoint(&m, TRACKED_PID, &BTreeSet::new(), CheckpointMode::Full, None).unwrap();
        let mut inc = checkpoint(
            &m,
            TRACKED_PID,
            &BTreeSet::new(),
            CheckpointMode::Incremental,
            Some(&full),
        )
        .unwrap();
        assert!(matches!(restore(&[inc.clone()]), Err(CheckpointError::BrokenChain(_))));
        inc.parent = Some(9);
        assert!(matches!(restore(&[full, inc]), Err(CheckpointError::BrokenChain(_))));
        assert!(restore(&[]).is_err());
    }

    #[test]
    fn image_survives_disk_and_detects_tampering() {
        let mut m = mem_with(&[4, 5]);
        m.commit_write(TRACKED_PID, Gva(5), 42).unwrap();
        let img = checkpoint(&m, TRACKED_PID, &BTreeSet::new(), CheckpointMode::Full, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_chain(std::slice::from_ref(&img), dir.path()).unwrap();
        assert_eq!(load_chain(dir.path()).unwrap(), vec![img]);
        fs::write(dir.path().join("0/pages/5.bin"), [0u8; 8]).unwrap();
        assert!(matches!(load_chain(dir.path()), Err(CheckpointError::Corrupt { .. })));
    }

    #[test]
    fn dump_cost_is_affine_in_pages() {
        let cal = Calibration::default();
        let a = dump_cost_us(&cal, 0);
        let b = dump_cost_us(&cal, 1000);
        assert_eq!(a, cal.dump_base_ms * 1000.0);
        assert!((b - a - 1000.0 * cal.dump_page_us).abs() < 1e-6);
    }

    #[test]
    fn no_churn_no_misses() {
        let cal = Arc::new(Calibration::default());
        let cfg = MissedPagesConfig {
            churn_rate: 0.0,
            ..Default::default()
        };
        for (_, p) in missed_pages_experiment(&[ByteSize::mb(1), ByteSize::mb(4)], &cfg, &cal) {
            assert_eq!(p, 0.0);
        }
    }
}
