//! Method runs and the artifacts they leave behind.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |------|----------|
//! | `config.toml` | the config file exactly as given (the resolved config when none was given) |
//! | `resolved_config.toml` | every value after defaults and command-line overrides |
//! | `losses.csv` | `phase,epoch,loss,source_loss` per training epoch |
//! | `entropy_profile.csv` | LAD methods: mean validation entropy per probe after each warm-up epoch |
//! | `source_selection.txt` | LAD methods: chosen source layer and warm-up length |
//! | `ambiguous_ids.txt` | LAD methods: training ids of the ambiguous set, one per line |
//! | `level_of_ambiguity.csv` | LAD methods: `id,la,ambiguous` for every training sample |
//! | `checkpoints/` | `warmup.ckpt`, `lad.ckpt`, `rc.ckpt` for LAD methods, `model.ckpt` otherwise |
//! | `report.txt`, `report.csv` | metrics of the final model on the eval split |

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;

use crate::baselines::{fit_temperature, train_ldl, train_ls, train_ord};
use crate::config::RunConfig;
use crate::data::{Corpus, Split};
use crate::distill::{run_pipeline, PipelineOutput, LAD_RC_TAG, LAD_TAG};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalMode, MetricsReport};
use crate::model::{read_checkpoint, write_checkpoint, LayeredModel};
use crate::train::{stream_rng, Stream};

pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Ord,
    Ls,
    Mc,
    Ts,
    Ldl,
    Lad,
    LadRc,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ord,
        Method::Ls,
        Method::Mc,
        Method::Ts,
        Method::Ldl,
        Method::Lad,
        Method::LadRc,
    ];

    /// Name used on the command line.
    pub fn name(self) -> &'static str {
        match self {
            Method::Ord => "ord",
            Method::Ls => "ls",
            Method::Mc => "mc",
            Method::Ts => "ts",
            Method::Ldl => "ldl",
            Method::Lad => "lad",
            Method::LadRc => "lad-rc",
        }
    }

    /// Name used in reports and tables.
    pub fn tag(self) -> &'static str {
        match self {
            Method::Ord => "ORD",
            Method::Ls => "LS",
            Method::Mc => "MC",
            Method::Ts => "TS",
            Method::Ldl => "LDL",
            Method::Lad => LAD_TAG,
            Method::LadRc => LAD_RC_TAG,
        }
    }

    pub fn from_tag(tag: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.tag() == tag)
    }

    pub fn uses_pipeline(self) -> bool {
        matches!(self, Method::Lad | Method::LadRc)
    }

    /// Checkpoint holding the model that produced the report.
    pub fn final_checkpoint(self) -> &'static str {
        match self {
            Method::Lad => "lad.ckpt",
            Method::LadRc => "rc.ckpt",
            _ => "model.ckpt",
        }
    }

    pub fn valid_names() -> String {
        Method::ALL.map(Method::name).join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method `{s}`; valid methods: {}", Method::valid_names())))
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// What a finished run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub report: MetricsReport,
    pub model: LayeredModel,
    /// Present for LAD methods.
    pub pipeline: Option<PipelineOutput>,
}

/// Trains `method` on `corpus` and writes the run directory `out`.
///
/// `config_text` is the config file as given, echoed verbatim.
pub fn train_method(
    method: Method,
    cfg: &RunConfig,
    config_text: Option<&str>,
    corpus: &Corpus,
    out: &Path,
) -> Result<RunOutcome> {
    cfg.validate()?;
    for split in [&corpus.train, &corpus.validation, &corpus.eval] {
        cfg.check_split(split)?;
    }
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let resolved = cfg.to_toml()?;
    write(&out.join("config.toml"), config_text.unwrap_or(&resolved))?;
    write(&out.join("resolved_config.toml"), &resolved)?;

    let seed = cfg.seed;
    let encoder = cfg.encoder();
    let mut losses = String::from("phase,epoch,loss,source_loss\n");
    info!("training {method} with seed {seed}");

    let (report, model, pipeline) = if method.uses_pipeline() {
        let out_p = run_pipeline(
            corpus,
            &encoder,
            &cfg.training,
            &cfg.warmup,
            &cfg.distill,
            method == Method::LadRc,
            seed,
            &mut (),
        )?;
        write_pipeline_artifacts(&out_p, cfg, corpus, out, &mut losses)?;
        (out_p.final_report().clone(), out_p.final_model().clone(), Some(out_p))
    } else {
        let mut model = LayeredModel::new(encoder)?;
        let mut rng = stream_rng(seed, Stream::Baseline);
        let epoch_losses = match method {
            Method::Ls => train_ls(&mut model, &corpus.train, &cfg.training, cfg.baselines.label_smoothing, &mut rng)?,
            Method::Ldl => train_ldl(&mut model, &corpus.train, &cfg.training, &mut rng)?,
            _ => train_ord(&mut model, &corpus.train, &cfg.training, &mut rng)?,
        };
        for (e, l) in epoch_losses.iter().enumerate() {
            let _ = writeln!(losses, "train,{},{l:?},", e + 1);
        }
        write_checkpoint(&model, method.tag(), &ckpt_dir.join(method.final_checkpoint()))?;
        let (mode, temperature) = match method {
            Method::Mc => (
                EvalMode::MonteCarlo {
                    passes: cfg.baselines.mc_passes,
                    seed,
                },
                None,
            ),
            Method::Ts => {
                let fit = fit_temperature(&model, &corpus.validation, &cfg.baselines.temperature_grid)?;
                info!("fitted temperature {} (validation KL {:.4})", fit.temperature, fit.kl);
                (EvalMode::Temperature(fit.temperature), Some(fit.temperature))
            }
            _ => (EvalMode::Deterministic, None),
        };
        let metrics = evaluate(&model, &corpus.eval, mode)?;
        let mut report = MetricsReport::new(method.tag(), seed, &corpus.eval, metrics);
        report.temperature = temperature;
        if method == Method::Mc {
            report.mc_passes = Some(cfg.baselines.mc_passes);
        }
        (report, model, None)
    };

    write(&out.join("losses.csv"), losses)?;
    report.write(&out.join(REPORT_FILE))?;
    write(
        &out.join(REPORT_CSV_FILE),
        format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()),
    )?;
    Ok(RunOutcome {
        dir: out.to_path_buf(),
        report,
        model,
        pipeline,
    })
}

fn write_pipeline_artifacts(
    p: &PipelineOutput,
    cfg: &RunConfig,
    corpus: &Corpus,
    out: &Path,
    losses: &mut String,
) -> Result<()> {
    let ckpt = out.join(CHECKPOINT_DIR);
    write_checkpoint(&p.warmup_model, "warmup", &ckpt.join("warmup.ckpt"))?;
    write_checkpoint(&p.lad_model, LAD_TAG, &ckpt.join("lad.ckpt"))?;
    if let Some(rc) = &p.rc_model {
        write_checkpoint(rc, LAD_RC_TAG, &ckpt.join("rc.ckpt"))?;
    }

    let w = &p.warmup;
    let layers = cfg.model.num_layers;
    let mut profile = String::from("epoch");
    for l in 1..=layers {
        let _ = write!(profile, ",layer_{l}");
    }
    profile.push_str(",selected\n");
    for (e, (row, sel)) in w.profile.epochs.iter().zip(&w.profile.selections).enumerate() {
        let _ = write!(profile, "{}", e + 1);
        for h in row {
            let _ = write!(profile, ",{h:?}");
        }
        let _ = writeln!(profile, ",{sel}");
    }
    write(&out.join("entropy_profile.csv"), profile)?;

    let s = &w.selection;
    write(
        &out.join("source_selection.txt"),
        format!(
            "source_layer={}\nwarmup_epochs={}\nstabilized={}\nnum_layers={layers}\n",
            s.source_idx, s.epochs, s.stabilized
        ),
    )?;

    let a = &w.ambiguity;
    let mut ids = format!(
        "# {} of {} training samples, sorted by id\n",
        a.ambiguous.len(),
        corpus.train.len()
    );
    for id in &a.ambiguous {
        let _ = writeln!(ids, "{id}");
    }
    write(&out.join("ambiguous_ids.txt"), ids)?;
    let mut la = String::from("id,la,ambiguous\n");
    for (id, score) in &a.la {
        let _ = writeln!(la, "{id},{score:?},{}", u8::from(a.ambiguous.contains(id)));
    }
    write(&out.join("level_of_ambiguity.csv"), la)?;

    for (e, l) in w.epoch_losses.iter().enumerate() {
        let _ = writeln!(losses, "warmup,{},{l:?},", e + 1);
    }
    for (e, l) in p.lad.epoch_losses.iter().enumerate() {
        let _ = writeln!(losses, "lad,{},{:?},{:?}", e + 1, l.main, l.source);
    }
    if let Some(r) = &p.recalibration {
        let _ = writeln!(losses, "recalibration,1,{:?},", r.mean_loss);
    }
    Ok(())
}

/// Re-scores a finished run's final model on `eval`, in the mode the run used.
pub fn evaluate_run(run_dir: &Path, eval: &Split) -> Result<MetricsReport> {
    let prior = MetricsReport::read(&run_dir.join(REPORT_FILE))?;
    let method = Method::from_tag(&prior.method)
        .ok_or_else(|| Error::Format(format!("{}: unknown method `{}`", run_dir.display(), prior.method)))?;
    let ckpt = read_checkpoint(&run_dir.join(CHECKPOINT_DIR).join(method.final_checkpoint()))?;
    let mode = match (method, prior.temperature, prior.mc_passes) {
        (Method::Ts, Some(t), _) => EvalMode::Temperature(t),
        (Method::Mc, _, Some(passes)) => EvalMode::MonteCarlo {
            passes,
            seed: prior.seed,
        },
        (Method::Ts | Method::Mc, _, _) => {
            return Err(Error::Format(format!(
                "{}: report lacks the evaluation settings of {}",
                run_dir.display(),
                method.tag()
            )))
        }
        _ => EvalMode::Deterministic,
    };
    let metrics = evaluate(&ckpt.model, eval, mode)?;
    let mut report = MetricsReport::new(method.tag(), prior.seed, eval, metrics);
    report.temperature = prior.temperature;
    report.mc_passes = prior.mc_passes;
    report.source_layer = prior.source_layer;
    Ok(report)
}

/// One table row: a method's metrics averaged over its runs.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub runs: usize,
    pub jsd: f64,
    pub kl: f64,
    pub accuracy: f64,
    pub diff: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub eval_checksum: String,
    pub rows: Vec<ComparisonRow>,
}

const COLUMNS: [(&str, bool); 4] = [("JSD", false), ("KL", false), ("Acc", true), ("Diff", false)];

impl ComparisonRow {
    fn values(&self) -> [f64; 4] {
        [self.jsd, self.kl, self.accuracy, self.diff]
    }
}

impl Comparison {
    /// Groups reports by method, averaging seeds. Every report must come
    /// from the same eval split.
    pub fn from_reports(reports: &[(PathBuf, MetricsReport)]) -> Result<Self> {
        let (first_path, first) = reports
            .first()
            .ok_or_else(|| Error::Invalid("no reports to compare".into()))?;
        if let Some((p, r)) = reports.iter().find(|(_, r)| r.eval_checksum != first.eval_checksum) {
            return Err(Error::Invalid(format!(
                "eval splits differ: {} was scored on {}, {} on {}",
                first_path.display(),
                first.eval_checksum,
                p.display(),
                r.eval_checksum
            )));
        }
        let mut order: Vec<&str> = Vec::new();
        for (_, r) in reports {
            if !order.contains(&r.method.as_str()) {
                order.push(&r.method);
            }
        }
        // Known methods in table order, anything else after them.
        order.sort_by_key(|m| Method::from_tag(m).map_or(usize::MAX, |k| k as usize));
        let rows = order
            .into_iter()
            .map(|m| {
                let rs: Vec<&MetricsReport> = reports.iter().map(|(_, r)| r).filter(|r| r.method == m).collect();
                let n = rs.len() as f64;
                let mean = |f: fn(&MetricsReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                ComparisonRow {
                    method: m.to_string(),
                    runs: rs.len(),
                    jsd: mean(|r| r.metrics.jsd),
                    kl: mean(|r| r.metrics.kl),
                    accuracy: mean(|r| r.metrics.accuracy),
                    diff: mean(|r| r.metrics.diff),
                }
            })
            .collect();
        Ok(Comparison {
            eval_checksum: first.eval_checksum.clone(),
            rows,
        })
    }

    /// Reads `report.txt` from every run directory.
    pub fn from_run_dirs(dirs: &[PathBuf]) -> Result<Self> {
        let reports = dirs
            .iter()
            .map(|d| MetricsReport::read(&d.join(REPORT_FILE)).map(|r| (d.clone(), r)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_reports(&reports)
    }

    /// `best[c]`: whether each row holds the best value of column `c`.
    pub fn best(&self) -> [Vec<bool>; 4] {
        std::array::from_fn(|c| {
            let higher = COLUMNS[c].1;
            let vals: Vec<f64> = self.rows.iter().map(|r| r.values()[c]).collect();
            let best = if higher {
                vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            } else {
                vals.iter().copied().fold(f64::INFINITY, f64::min)
            };
            vals.iter().map(|&v| v == best).collect()
        })
    }

    /// Aligned table; `*` marks the best entry of each column.
    pub fn to_text(&self) -> String {
        let best = self.best();
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("Method".len());
        let mut s = format!("{:<width$}  {:>4}", "Method", "Runs");
        for (name, _) in COLUMNS {
            let _ = write!(s, "  {name:>8} ");
        }
        s.push('\n');
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{:<width$}  {:>4}", r.method, r.runs);
            for (c, v) in r.values().iter().enumerate() {
                let mark = if best[c][i] { '*' } else { ' ' };
                let _ = write!(s, "  {v:>8.4}{mark}");
            }
            s.push('\n');
        }
        let _ = writeln!(s, "* best in column; eval split {}", self.eval_checksum);
        s
    }

    pub fn to_csv(&self) -> String {
        let best = self.best();
        let mut s = String::from("method,runs,jsd,kl,accuracy,diff,best_jsd,best_kl,best_accuracy,best_diff\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{},{},{:?},{:?},{:?},{:?}", r.method, r.runs, r.jsd, r.kl, r.accuracy, r.diff);
            for col in &best {
                let _ = write!(s, ",{}", u8::from(col[i]));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::Metrics;

    fn report(method: &str, checksum: &str, jsd: f64, kl: f64, acc: f64, diff: f64) -> (PathBuf, MetricsReport) {
        let r = MetricsReport {
            method: method.into(),
            seed: 1,
            eval_checksum: checksum.into(),
            temperature: None,
            mc_passes: None,
            source_layer: None,
            metrics: Metrics {
                samples: 10,
                kl,
                jsd,
                accuracy: acc,
                diff,
                mispredicted: 1,
                mean_entropy: 0.5,
            },
        };
        (PathBuf::from(method), r)
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(Method::from_tag(m.tag()), Some(m));
        }
        let e = "bert".parse::<Method>().unwrap_err().to_string();
        assert!(e.contains("lad-rc") && e.contains("ldl"), "{e}");
    }

    #[test]
    fn mismatched_eval_splits_are_rejected() {
        let reports = [report("ORD", "aa", 0.2, 0.5, 0.8, 0.4), report("LAD", "bb", 0.1, 0.3, 0.8, 0.3)];
        let e = Comparison::from_reports(&reports).unwrap_err();
        assert!(e.to_string().contains("eval splits differ"), "{e}");
    }

    #[test]
    fn single_run_gives_single_row() {
        let c = Comparison::from_reports(&[report("ORD", "aa", 0.2, 0.5, 0.8, 0.4)]).unwrap();
        assert_eq!(c.rows.len(), 1);
        assert!(c.best().iter().all(|col| col == &[true]));
    }

    #[test]
    fn markers_land_on_best_entries_and_seeds_average() {
        let reports = [
            report("LAD + RC", "aa", 0.1875, 0.30, 0.85, 0.30),
            report("ORD", "aa", 0.25, 0.50, 0.90, 0.40),
            report("ORD", "aa", 0.125, 0.70, 0.875, 0.60),
            report("TS", "aa", 0.2, 0.40, 0.88, 0.35),
        ];
        let c = Comparison::from_reports(&reports).unwrap();
        let methods: Vec<&str> = c.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(methods, ["ORD", "TS", "LAD + RC"]);
        let ord = &c.rows[0];
        assert_eq!(ord.runs, 2);
        assert!((ord.jsd - 0.1875).abs() < 1e-12 && (ord.kl - 0.6).abs() < 1e-12);
        let best = c.best();
        // JSD ties between ORD (mean 0.1875) and LAD + RC
        assert_eq!(best[0], [true, false, true]);
        assert_eq!(best[1], [false, false, true]);
        assert_eq!(best[2], [true, false, false]);
        let text = c.to_text();
        let lad_line = text.lines().find(|l| l.starts_with("LAD + RC")).unwrap();
        assert!(lad_line.contains("0.3000*"), "{text}");
        let csv = c.to_csv();
        assert!(csv.lines().nth(3).unwrap().ends_with(",1,1,0,1"), "{csv}");
    }
}
