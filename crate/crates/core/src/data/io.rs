//! Dataset files.
//!
//! One file per split. The first line is a header,
//!
//! ```text
//! # lad-dataset v1 split=<train|validation|eval> classes=<C>
//! ```
//!
//! followed by one tab-separated record per sample:
//!
//! ```text
//! <id> \t <space-separated token ids> \t <gold label> \t <comma-separated distribution, 6 decimals | ->
//! ```
//!
//! Validation and eval records must carry a distribution. A directory holding
//! the three split files also holds `manifest.json` with the generating
//! config and each file's sha256.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Corpus, CorpusConfig, GeneratedCorpus, Sample, Split, SplitKind};
use crate::error::{Error, Result};
use crate::metrics::argmax;

const MAGIC: &str = "# lad-dataset v1";
pub const MANIFEST_FILE: &str = "manifest.json";
const SIMPLEX_TOLERANCE: f64 = 1e-5;

fn encode(split: &Split) -> String {
    let mut out = format!("{MAGIC} split={} classes={}\n", split.kind.name(), split.num_classes);
    for s in &split.samples {
        let tokens: Vec<String> = s.tokens.iter().map(u32::to_string).collect();
        let dist = match &s.gold {
            Some(g) => g.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","),
            None => "-".to_string(),
        };
        let _ = writeln!(out, "{}\t{}\t{}\t{}", s.id, tokens.join(" "), s.label, dist);
    }
    out
}

pub(super) fn split_checksum(split: &Split) -> String {
    hex::encode(Sha256::digest(encode(split).as_bytes()))
}

pub fn write_split(split: &Split, path: &Path) -> Result<()> {
    fs::write(path, encode(split)).map_err(|e| Error::io(path, e))
}

fn parse_header(path: &Path, line: &str) -> Result<(SplitKind, usize)> {
    let err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        reason,
    };
    let rest = line
        .strip_prefix(MAGIC)
        .ok_or_else(|| err(format!("expected header starting with `{MAGIC}`")))?;
    let (mut kind, mut classes) = (None, None);
    for field in rest.split_whitespace() {
        match field.split_once('=') {
            Some(("split", v)) => kind = SplitKind::parse(v),
            Some(("classes", v)) => classes = v.parse::<usize>().ok(),
            _ => return Err(err(format!("unknown header field `{field}`"))),
        }
    }
    match (kind, classes) {
        (Some(k), Some(c)) if c >= 2 => Ok((k, c)),
        _ => Err(err("header needs split=<train|validation|eval> and classes=<n ≥ 2>".into())),
    }
}

fn parse_record(line: &str, kind: SplitKind, classes: usize) -> std::result::Result<Sample, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 tab-separated fields, found {}", fields.len()));
    }
    let id = fields[0].parse::<u64>().map_err(|e| format!("field `id`: {e}"))?;
    let tokens = fields[1]
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|e| format!("field `tokens`: `{t}`: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if tokens.is_empty() {
        return Err("field `tokens`: empty sequence".into());
    }
    let label = fields[2].parse::<usize>().map_err(|e| format!("field `label`: {e}"))?;
    if label >= classes {
        return Err(format!("field `label`: {label} outside {classes} classes"));
    }
    let gold = if fields[3] == "-" {
        if kind.requires_distribution() {
            return Err(format!("field `gold_distribution`: required on the {} split", kind.name()));
        }
        None
    } else {
        let dist = fields[3]
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| format!("field `gold_distribution`: `{v}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if dist.len() != classes {
            return Err(format!(
                "field `gold_distribution`: {} entries for {classes} classes",
                dist.len()
            ));
        }
        if dist.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err("field `gold_distribution`: entries must lie in [0, 1]".into());
        }
        let sum: f64 = dist.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(format!("field `gold_distribution`: sums to {sum:.6}, not 1"));
        }
        if argmax(&dist) != label {
            return Err(format!(
                "field `label`: {label} is not the argmax {} of the gold distribution",
                argmax(&dist)
            ));
        }
        Some(dist)
    };
    Ok(Sample { id, tokens, label, gold })
}

pub fn read_split(path: &Path) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        reason: "empty file".into(),
    })?;
    let (kind, num_classes) = parse_header(path, header)?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let sample = parse_record(line, kind, num_classes).map_err(|reason| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            reason,
        })?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::Format(format!("{}: no records", path.display())));
    }
    Ok(Split {
        kind,
        num_classes,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub samples: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: CorpusConfig,
    pub splits: BTreeMap<String, ManifestEntry>,
    /// Ids of samples generated from two-class mixtures.
    pub ambiguous_ids: Vec<u64>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Writes the three split files and the manifest into `dir`, creating it if needed.
pub fn write_corpus(generated: &GeneratedCorpus, config: &CorpusConfig, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut splits = BTreeMap::new();
    for kind in SplitKind::ALL {
        let split = generated.corpus.split(kind);
        let file = kind.file_name();
        write_split(split, &dir.join(&file))?;
        splits.insert(
            kind.name().to_string(),
            ManifestEntry {
                file,
                samples: split.len(),
                sha256: split.checksum(),
            },
        );
    }
    let manifest = Manifest {
        format: MAGIC.trim_start_matches("# ").to_string(),
        seed: config.seed,
        config: config.clone(),
        splits,
        ambiguous_ids: generated.ambiguous_ids.iter().copied().collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads the three splits from `dir`. When a manifest is present every
/// split's checksum is verified against it.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = if dir.join(MANIFEST_FILE).exists() {
        Some(Manifest::read(dir)?)
    } else {
        None
    };
    let load = |kind: SplitKind| -> Result<Split> {
        let path: PathBuf = dir.join(kind.file_name());
        let split = read_split(&path)?;
        if split.kind != kind {
            return Err(Error::Format(format!(
                "{}: header says split={}, expected {}",
                path.display(),
                split.kind.name(),
                kind.name()
            )));
        }
        if let Some(entry) = manifest.as_ref().and_then(|m| m.splits.get(kind.name())) {
            let sum = split.checksum();
            if sum != entry.sha256 {
                return Err(Error::Format(format!(
                    "{}: checksum {sum} does not match manifest {}",
                    path.display(),
                    entry.sha256
                )));
            }
        }
        Ok(split)
    };
    let corpus = Corpus {
        train: load(SplitKind::Train)?,
        validation: load(SplitKind::Validation)?,
        eval: load(SplitKind::Eval)?,
    };
    let c = corpus.train.num_classes;
    if corpus.validation.num_classes != c || corpus.eval.num_classes != c {
        return Err(Error::Format(format!("{}: splits disagree on class count", dir.display())));
    }
    let mut seen = std::collections::HashSet::new();
    for kind in SplitKind::ALL {
        for s in &corpus.split(kind).samples {
            if !seen.insert(s.id) {
                return Err(Error::Format(format!("{}: id {} appears twice", dir.display(), s.id)));
            }
        }
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;

    fn tiny() -> CorpusConfig {
        CorpusConfig {
            train_size: 40,
            validation_size: 10,
            eval_size: 10,
            seed: 3,
            ..CorpusConfig::default()
        }
    }

    fn write_text(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("x.tsv");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn corpus_round_trip() {
        let cfg = tiny();
        let g = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_corpus(&g, &cfg, dir.path()).unwrap();
        assert_eq!(m.splits.len(), 3);
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back, g.corpus);
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
    }

    #[test]
    fn missing_eval_distribution_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(dir.path(), "# lad-dataset v1 split=eval classes=3\n0\t1 2 3\t0\t-\n");
        match read_split(&p) {
            Err(Error::Parse { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("gold_distribution"), "{reason}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_simplex_distribution_names_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(
            dir.path(),
            "# lad-dataset v1 split=validation classes=3\n0\t1 2\t0\t0.9,0.05,0.05\n1\t4\t0\t0.5,0.2,0.1\n",
        );
        match read_split(&p) {
            Err(Error::Parse { line, reason, .. }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("gold_distribution") && reason.contains("0.800000"), "{reason}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_text(
            dir.path(),
            "# lad-dataset v1 split=train classes=2\n0\t1 2\t1\t-\n1\t1 x\t0\t-\n",
        );
        let e = read_split(&p).unwrap_err();
        assert!(e.to_string().contains(":3:"), "{e}");
        let p = write_text(dir.path(), "not a header\n");
        assert!(matches!(read_split(&p), Err(Error::Parse { line: 1, .. })));
        let p = write_text(dir.path(), "# lad-dataset v1 split=train classes=2\n0\t1\t0\n");
        assert!(read_split(&p).is_err());
        let p = write_text(
            dir.path(),
            "# lad-dataset v1 split=eval classes=2\n0\t1\t1\t0.700000,0.300000\n",
        );
        assert!(read_split(&p).unwrap_err().to_string().contains("argmax"));
    }

    #[test]
    fn tampered_split_fails_checksum() {
        let cfg = tiny();
        let g = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&g, &cfg, dir.path()).unwrap();
        let mut eval = g.corpus.eval.clone();
        eval.samples[0].tokens[0] += 1;
        write_split(&eval, &dir.path().join("eval.tsv")).unwrap();
        assert!(read_corpus(dir.path()).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn identical_seed_gives_identical_bytes() {
        let cfg = tiny();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_corpus(&generate_corpus(&cfg).unwrap(), &cfg, a.path()).unwrap();
        write_corpus(&generate_corpus(&cfg).unwrap(), &cfg, b.path()).unwrap();
        for f in ["train.tsv", "validation.tsv", "eval.tsv", MANIFEST_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
