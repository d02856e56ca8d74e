//! Command implementations behind the `ncl` binary.
//!
//! Every command writes its artifacts into a staging directory next to the
//! requested output and renames it into place only after everything
//! succeeded, so a failed run never leaves partial output behind.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::FilterQuality;
use crate::fusion::{masked_objective, nce_per_sample, SoftLabelVector};
use crate::model::Model;
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, OpKind};
use crate::synth::{read_dataset, write_dataset, Dataset, DatasetSpec, TripletSample};
use crate::train::{
    run_ablation, run_training_with, AblationRow, MetricsRecord, RunResult, TrainConfig, Variant,
};

/// Flat JSON run configuration: every [`DatasetSpec`] and [`TrainConfig`]
/// field at the top level, plus optional `dataset_path` and `out_dir`.
///
/// A single `seed` key seeds both generation and training. Unknown keys are
/// rejected; missing keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub dataset_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

fn field_names<T: serde::Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m.into_iter().map(|(k, _)| k).collect(),
        _ => Vec::new(),
    }
}

fn path_field(v: Value, key: &str) -> Result<PathBuf> {
    match v {
        Value::String(s) => Ok(PathBuf::from(s)),
        other => Err(Error::Config(format!(
            "`{key}` must be a string, got {other}"
        ))),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(entries) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let dataset_keys = field_names(&DatasetSpec::default());
        let train_keys = field_names(&TrainConfig::default());
        let (mut dataset, mut train) = (Map::new(), Map::new());
        let mut cfg = RunConfig::default();
        for (key, v) in entries {
            let in_dataset = dataset_keys.contains(&key);
            let in_train = train_keys.contains(&key);
            match key.as_str() {
                "dataset_path" => cfg.dataset_path = Some(path_field(v, &key)?),
                "out_dir" => cfg.out_dir = Some(path_field(v, &key)?),
                _ if in_dataset || in_train => {
                    if in_dataset {
                        dataset.insert(key.clone(), v.clone());
                    }
                    if in_train {
                        train.insert(key, v);
                    }
                }
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
        }
        cfg.dataset = serde_json::from_value(Value::Object(dataset))
            .map_err(|e| Error::Config(format!("dataset settings: {e}")))?;
        cfg.train = serde_json::from_value(Value::Object(train))
            .map_err(|e| Error::Config(format!("training settings: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.validate()
    }

    /// Pretty flat JSON that [`RunConfig::from_json`] reads back.
    pub fn to_json(&self) -> String {
        let mut map = Map::new();
        for v in [
            serde_json::to_value(&self.dataset),
            serde_json::to_value(&self.train),
        ] {
            if let Ok(Value::Object(m)) = v {
                map.extend(m);
            }
        }
        // Both halves carry `seed`; the training seed wins the merge.
        map.insert("seed".into(), self.train.seed.into());
        if let Some(p) = &self.dataset_path {
            map.insert("dataset_path".into(), p.display().to_string().into());
        }
        if let Some(p) = &self.out_dir {
            map.insert("out_dir".into(), p.display().to_string().into());
        }
        serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
    }

    pub fn set_variant(&mut self, variant: Variant) {
        (self.train.enable_wcb, self.train.enable_nfb) = variant.flags();
    }
}

/// A sibling directory that replaces `target` on [`Staging::commit`] and is
/// deleted if dropped uncommitted.
struct Staging {
    dir: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl Staging {
    fn begin(target: &Path) -> Result<Self> {
        let name = target.file_name().ok_or_else(|| {
            Error::Config(format!(
                "output path {} has no final component",
                target.display()
            ))
        })?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let dir = parent.join(format!(
            ".{}.partial-{}",
            name.to_string_lossy(),
            std::process::id()
        ));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            target: target.to_path_buf(),
            committed: false,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).map_err(|e| Error::io(p, e))
    }

    fn commit(mut self) -> Result<()> {
        if self.target.is_dir() {
            fs::remove_dir_all(&self.target).map_err(|e| Error::io(&self.target, e))?;
        } else if self.target.exists() {
            return Err(Error::io(
                &self.target,
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "output exists and is not a directory",
                ),
            ));
        }
        fs::rename(&self.dir, &self.target).map_err(|e| Error::io(&self.target, e))?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn pct(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * n as f64 / total as f64
    }
}

/// Generates the dataset described by `cfg` and writes it to `path`.
pub fn cmd_generate(cfg: &RunConfig, path: &Path, out: &mut dyn Write) -> Result<Dataset> {
    cfg.dataset.validate()?;
    let dataset = Dataset::generate(&cfg.dataset)?;
    write_dataset(&dataset, path)?;
    let s = &dataset.spec;
    let train = dataset.train();
    let [clean, mis, par] = Dataset::histogram(train);
    let n = train.len();
    say(
        out,
        &format!(
            "dataset: N={} C={} d={} n={} m={} seed={}\nsplit: train {} / holdout {}\n\
             truth (train split): clean {clean} ({:.1}%), mismatched {mis} ({:.1}%), partial {par} ({:.1}%)\n\
             wrote {}",
            s.count,
            s.num_concepts,
            s.dim,
            s.text_tokens,
            s.image_patches,
            s.seed,
            n,
            dataset.holdout().len(),
            pct(clean, n),
            pct(mis, n),
            pct(par, n),
            path.display()
        ),
    )?;
    Ok(dataset)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn quality_fields(q: Option<FilterQuality>) -> String {
    format!(
        "{},{},{}",
        opt(q.map(|q| q.precision)),
        opt(q.map(|q| q.recall)),
        opt(q.map(|q| q.f1))
    )
}

pub const SUMMARY_HEADER: &str =
    "epoch,variant,train_loss,label1_fraction,recall_at_1,recall_at_10,recall_at_50,precision,recall,f1";

/// One row per epoch with fixed six-decimal formatting.
pub fn summary_csv(records: &[MetricsRecord]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.epoch,
            r.variant,
            r.train_loss,
            r.label1_fraction,
            r.recall_at_1,
            r.recall_at_10,
            r.recall_at_50,
            quality_fields(r.filter)
        );
    }
    s
}

pub const FILTER_HEADER: &str =
    "epoch,view,mu0,mu1,sigma0,sigma1,pi0,active,s_m,s_u,s_p,precision,recall,f1";

pub fn filter_csv(run: &RunResult) -> String {
    let mut s = format!("{FILTER_HEADER}\n");
    for f in &run.filter_reports {
        for v in &f.views {
            let g = v.gmm;
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{},{}",
                f.epoch,
                v.view.as_str(),
                g.means[0],
                g.means[1],
                g.variances[0].sqrt(),
                g.variances[1].sqrt(),
                g.weights[0],
                v.active,
                f.s_m,
                f.s_u,
                f.s_p,
                quality_fields(f.quality)
            );
        }
    }
    s
}

fn epoch_line(r: &MetricsRecord) -> String {
    let filter = match (r.filter_active, r.filter) {
        (false, _) => "filter off".to_string(),
        (true, Some(q)) => format!(
            "filter P {:.3} R {:.3} F1 {:.3}",
            q.precision, q.recall, q.f1
        ),
        (true, None) => "filter on".to_string(),
    };
    format!(
        "epoch {:3} loss {:.4} label1 {:.3} R@1 {:.3} R@10 {:.3} R@50 {:.3} {filter}",
        r.epoch, r.train_loss, r.label1_fraction, r.recall_at_1, r.recall_at_10, r.recall_at_50
    )
}

/// Trains on the dataset at `dataset_path` and writes the run directory
/// `out_dir`: `config.json`, `run.log`, `metrics.jsonl`, `summary.csv`,
/// `weights.nclw` and, with filtering enabled, `filter_report.csv`.
pub fn cmd_train(
    cfg: &RunConfig,
    dataset_path: &Path,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<RunResult> {
    cfg.train.validate()?;
    let dataset = read_dataset(dataset_path)?;
    let stage = Staging::begin(out_dir)?;
    let tc = &cfg.train;

    let mut log = vec![
        format!("variant {}", tc.variant()),
        format!(
            "dataset {} (N={}, train {}, holdout {})",
            dataset_path.display(),
            dataset.samples.len(),
            dataset.train().len(),
            dataset.holdout().len()
        ),
    ];
    if !tc.enable_nfb {
        log.push("filter disabled".into());
    }
    for line in &log {
        say(out, line)?;
    }
    let mut progress: Result<()> = Ok(());
    let run = run_training_with(&dataset, tc, |o| {
        let line = epoch_line(&o.metrics);
        if progress.is_ok() {
            progress = say(out, &line);
        }
        log.push(line);
    })?;
    progress?;

    let mut jsonl = String::new();
    for r in &run.records {
        jsonl.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        jsonl.push('\n');
    }
    let f = run.final_recalls;
    log.push(format!(
        "final R@1 {:.4} R@10 {:.4} R@50 {:.4}",
        f.r1, f.r10, f.r50
    ));

    stage.write("config.json", &cfg.to_json())?;
    stage.write("metrics.jsonl", &jsonl)?;
    stage.write("summary.csv", &summary_csv(&run.records))?;
    if tc.enable_nfb {
        stage.write("filter_report.csv", &filter_csv(&run))?;
    }
    run.model.save(&stage.path("weights.nclw"))?;
    stage.write("run.log", &(log.join("\n") + "\n"))?;
    stage.commit()?;
    say(out, &format!("wrote {}", out_dir.display()))?;
    Ok(run)
}

pub const ABLATION_HEADER: &str = "variant,R@1,R@10,R@50,Avg";

/// Recalls in percent with two decimals.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let x = r.recalls;
        let _ = writeln!(
            s,
            "{},{:.2},{:.2},{:.2},{:.2}",
            r.variant,
            100.0 * x.r1,
            100.0 * x.r10,
            100.0 * x.r50,
            100.0 * x.average()
        );
    }
    s
}

/// Trains all four variants and writes `out_dir/ablation.csv`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    dataset_path: &Path,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    cfg.train.validate()?;
    let dataset = read_dataset(dataset_path)?;
    let stage = Staging::begin(out_dir)?;
    let rows = run_ablation(&dataset, &cfg.train)?;
    let csv = ablation_csv(&rows);
    stage.write("config.json", &cfg.to_json())?;
    stage.write("ablation.csv", &csv)?;
    stage.commit()?;
    say(out, csv.trim_end())?;
    say(out, &format!("wrote {}", out_dir.display()))?;
    Ok(rows)
}

/// Batch size and width of the full-pipeline gradient check.
pub const GRADCHECK_BATCH: usize = 4;
pub const GRADCHECK_DIM: usize = 8;

/// Finite-difference check of compensation, fusion and the label-masked
/// contrastive objective on a tiny random batch.
pub fn pipeline_grad_check(seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport> {
    let spec = DatasetSpec {
        num_concepts: 4,
        dim: GRADCHECK_DIM,
        text_tokens: 3,
        image_patches: 4,
        count: GRADCHECK_BATCH,
        mismatch_rate: 0.0,
        holdout_fraction: 0.0,
        seed,
        ..Default::default()
    };
    let dataset = Dataset::generate(&spec)?;
    let samples: Vec<&TripletSample> = dataset.samples.iter().collect();
    let model = Model::init(GRADCHECK_DIM, seed);
    // One masked sample so the label path is exercised.
    let labels = SoftLabelVector(vec![true, true, false, true]);
    let tau = TrainConfig::default().tau;
    let opts = GradCheckOptions {
        fault,
        ..Default::default()
    };
    grad_check(&model.store, &opts, |tape, store| {
        let fwd = Model::forward_with(store, tape, &samples, true)?;
        let l = nce_per_sample(tape, fwd.query, fwd.target, tau)?;
        let lw = match fwd.wcb {
            Some((q, t)) => Some(nce_per_sample(tape, q, t, tau)?),
            None => None,
        };
        masked_objective(tape, l, lw, &labels)
    })
}

/// Runs [`pipeline_grad_check`] and prints the report.
pub fn cmd_gradcheck(
    seed: u64,
    fault: Option<OpKind>,
    out: &mut dyn Write,
) -> Result<GradCheckReport> {
    let report = pipeline_grad_check(seed, fault)?;
    say(
        out,
        &format!(
            "gradient check: B={GRADCHECK_BATCH} d={GRADCHECK_DIM}, {} parameter matrices",
            report.params.len()
        ),
    )?;
    for (group, (name, err)) in report.worst_by_group() {
        say(
            out,
            &format!("  group {:<5} worst {err:.3e} ({name})", group.as_str()),
        )?;
    }
    say(
        out,
        &format!(
            "max relative error {:.3e} (tolerance 1e-5)",
            report.max_rel_error
        ),
    )?;
    say(
        out,
        &format!("max absolute error {:.3e}", report.max_abs_error),
    )?;
    if let Some(op) = report.offending_op {
        say(out, &format!("offending op: {}", op.name()))?;
    }
    say(out, if report.passed { "PASS" } else { "FAIL" })?;
    Ok(report)
}

/// Prints a completed run or ablation directory.
pub fn cmd_report(dir: &Path, out: &mut dyn Write) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
        ));
    }
    let read = |name: &str| -> Result<Option<String>> {
        let p = dir.join(name);
        match fs::read_to_string(&p) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(p, e)),
        }
    };
    say(out, &format!("run directory {}", dir.display()))?;
    let mut found = false;
    if let Some(cfg) = read("config.json")? {
        let cfg = RunConfig::from_json(&cfg)?;
        let t = &cfg.train;
        say(
            out,
            &format!(
                "variant {} | epochs {} | batch {} | seed {} | warm-up {}",
                t.variant(),
                t.epochs,
                t.batch_size,
                t.seed,
                t.warmup_epochs
            ),
        )?;
    }
    if let Some(summary) = read("summary.csv")? {
        found = true;
        let rows: Vec<&str> = summary.lines().skip(1).collect();
        say(out, &format!("epochs recorded: {}", rows.len()))?;
        if let Some(last) = rows.last() {
            let f: Vec<&str> = last.split(',').collect();
            if f.len() >= 10 {
                say(
                    out,
                    &format!(
                        "final epoch {}: loss {} R@1 {} R@10 {} R@50 {}",
                        f[0], f[2], f[4], f[5], f[6]
                    ),
                )?;
                if !f[9].is_empty() {
                    say(
                        out,
                        &format!(
                            "noise detection: precision {} recall {} F1 {}",
                            f[7], f[8], f[9]
                        ),
                    )?;
                }
            }
        }
    }
    match read("filter_report.csv")? {
        Some(report) => say(
            out,
            &format!(
                "filter report rows: {}",
                report.lines().count().saturating_sub(1)
            ),
        )?,
        None if found => say(out, "filter disabled")?,
        None => {}
    }
    if let Some(table) = read("ablation.csv")? {
        found = true;
        say(out, table.trim_end())?;
    }
    if !found {
        return Err(Error::Config(format!(
            "{} holds neither summary.csv nor ablation.csv",
            dir.display()
        )));
    }
    Ok(())
}
