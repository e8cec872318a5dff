//! Declarative experiments: a config naming scale, seeds and methods, the
//! driver that runs every (method, seed) pair, and the report builder.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{federation_plan, generate_federation, load_federation, Federation, Scale};
use crate::dp::DpConfig;
use crate::error::{Error, Result};
use crate::fl::{run_method, Method, RunInputs, RunOutput, TrainConfig};
use crate::metrics::{
    aggregate_seeds, emit_curves_svg, read_history_csv, results_table, write_history_csv,
    write_summary, Curve, ExperimentHistory,
};
use crate::mia::{prepare_attack, MiaTracker};
use crate::model::{save_checkpoint, ModelConfig};

/// Config echo written next to the run artifacts.
pub const CONFIG_FILE: &str = "experiment.toml";
pub const REPORT_FILE: &str = "report.txt";
pub const DICE_SVG: &str = "dice_curves.svg";
pub const AUC_SVG: &str = "mia_auc_curves.svg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: Scale,
    /// Slice height and width; defaults to the scale's size.
    pub image_size: [usize; 2],
    /// Seed of the generated federation (shared by all runs).
    pub data_seed: u64,
    /// Pre-built dataset manifest; generated in memory when absent.
    pub manifest: Option<PathBuf>,
    /// Initialization / shuffling / noise seeds, one run per seed.
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
    /// Attack evaluation every this many rounds; 0 disables tracking.
    pub mia_cadence: usize,
    /// Members (and non-members) in the attack panel.
    pub mia_panel: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dp: DpConfig,
}

impl ExperimentConfig {
    pub fn for_scale(scale: Scale) -> Self {
        let (h, w) = scale.default_size();
        let (model, train, panel) = match scale {
            Scale::Desk => (ModelConfig::desk(), TrainConfig::desk(), 100),
            Scale::Paper => (ModelConfig::paper(), TrainConfig::paper(), 500),
        };
        Self {
            scale,
            image_size: [h, w],
            data_seed: 7,
            manifest: None,
            seeds: vec![1, 2, 3],
            methods: Method::ALL.to_vec(),
            out_dir: PathBuf::from("runs"),
            mia_cadence: 1,
            mia_panel: panel,
            model,
            train,
            dp: DpConfig::default(),
        }
    }

    pub fn desk() -> Self {
        Self::for_scale(Scale::Desk)
    }

    pub fn paper() -> Self {
        Self::for_scale(Scale::Paper)
    }

    /// Parses TOML text whose fields override the defaults of the scale it
    /// names (desk when absent). Unknown keys are rejected by name.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        Self::from_table(file)
    }

    /// Like [`ExperimentConfig::from_toml`] on an already-parsed table.
    pub fn from_table(file: toml::Table) -> Result<Self> {
        let scale = match file.get("scale") {
            Some(v) => v
                .as_str()
                .ok_or_else(|| Error::Config("scale must be a string".into()))?
                .parse()?,
            None => Scale::Desk,
        };
        let mut merged = toml::Table::try_from(Self::for_scale(scale))
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, file);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies `over` on top of `base` key by key, recursing into tables.
    pub fn merge_tables(base: &mut toml::Table, over: toml::Table) {
        merge(base, over)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("methods lists {m} twice")));
            }
        }
        let [h, w] = self.image_size;
        if h < 4 || w < 4 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size must be multiples of 4, got {h}x{w}"
            )));
        }
        if self.mia_cadence > 0 && self.mia_panel == 0 {
            return Err(Error::Config("mia_panel must be > 0 when tracking".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.dp.validate()
    }

    /// Loads the configured manifest or generates the federation.
    pub fn federation(&self) -> Result<Federation> {
        match &self.manifest {
            Some(path) => Ok(load_federation(path)?.1),
            None => {
                let [h, w] = self.image_size;
                generate_federation(self.data_seed, &federation_plan(self.scale, (h, w)))
            }
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Config echo for one run's summary file.
#[derive(Serialize)]
struct RunEcho<'a> {
    method: Method,
    seed: u64,
    experiment: &'a ExperimentConfig,
}

pub fn run_stem(method: Method, seed: u64) -> String {
    format!("{}_seed{seed}", method.name())
}

/// Runs every configured (method, seed) pair on `federation` in memory.
/// One shadow model and attack per seed serve all methods of that seed.
pub fn run_all(
    cfg: &ExperimentConfig,
    federation: &Federation,
    mut on_run: impl FnMut(Method, u64, &RunOutput) -> Result<()>,
) -> Result<Vec<ExperimentHistory>> {
    cfg.validate()?;
    let mut histories = Vec::new();
    for &seed in &cfg.seeds {
        let tracker = if cfg.mia_cadence > 0 {
            let attack = prepare_attack(federation, cfg.model, &cfg.train, seed)?;
            Some(MiaTracker::new(
                attack,
                &federation.clients,
                cfg.mia_panel,
                seed,
                cfg.mia_cadence,
            ))
        } else {
            None
        };
        for &method in &cfg.methods {
            let out = run_method(
                method,
                RunInputs {
                    federation,
                    model: cfg.model,
                    train: &cfg.train,
                    dp: &cfg.dp,
                    seed,
                    mia: tracker.as_ref(),
                },
            )?;
            on_run(method, seed, &out)?;
            histories.push(out.history);
        }
    }
    Ok(histories)
}

/// Runs the experiment and writes per-run CSV, summary and checkpoint plus
/// the aggregate report into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentHistory>> {
    cfg.validate()?;
    let federation = cfg.federation()?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo_path = out.join(CONFIG_FILE);
    std::fs::write(&echo_path, cfg.to_toml()?).map_err(|e| Error::io(&echo_path, e))?;
    let histories = run_all(cfg, &federation, |method, seed, run| {
        let stem = run_stem(method, seed);
        write_history_csv(&run.history, &out.join(format!("{stem}.csv")))?;
        let echo = RunEcho {
            method,
            seed,
            experiment: cfg,
        };
        write_summary(&echo, &run.history, &out.join(format!("{stem}.summary.toml")))?;
        save_checkpoint(&run.model, &out.join(format!("{stem}.fobp")))
    })?;
    write_report(&histories, &cfg.methods, out)?;
    Ok(histories)
}

/// Groups histories by method in `order` (methods not listed follow in
/// canonical order).
fn grouped<'a>(histories: &'a [ExperimentHistory], order: &[Method]) -> Vec<(Method, Vec<&'a ExperimentHistory>)> {
    let mut methods: Vec<Method> = order.to_vec();
    for m in Method::ALL {
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    methods
        .into_iter()
        .map(|m| (m, histories.iter().filter(|h| h.method == m).collect::<Vec<_>>()))
        .filter(|(_, hs)| !hs.is_empty())
        .collect()
}

/// Seed-mean series of `metric` per round.
fn mean_curve(hs: &[&ExperimentHistory], metric: impl Fn(&ExperimentHistory) -> Vec<(usize, f64)>) -> Vec<(f64, f64)> {
    let mut by_round: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for h in hs {
        for (r, v) in metric(h) {
            let e = by_round.entry(r).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    by_round
        .into_iter()
        .map(|(r, (s, n))| (r as f64, s / n as f64))
        .collect()
}

/// Table-I-style text plus Dice and attack-AUC curve charts.
pub fn write_report(histories: &[ExperimentHistory], order: &[Method], out: &Path) -> Result<String> {
    let groups = grouped(histories, order);
    let rows = groups
        .iter()
        .map(|(_, hs)| aggregate_seeds(&hs.iter().map(|h| (*h).clone()).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let table = results_table(&rows);
    let path = out.join(REPORT_FILE);
    std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    let dice: Vec<Curve> = groups
        .iter()
        .map(|(m, hs)| Curve {
            label: m.name().into(),
            points: mean_curve(hs, |h| h.records.iter().map(|r| (r.round, r.dice)).collect()),
        })
        .collect();
    emit_curves_svg(&dice, "Segmentation Dice vs. rounds", "round", "mean Dice", &out.join(DICE_SVG))?;
    let auc: Vec<Curve> = groups
        .iter()
        .map(|(m, hs)| Curve {
            label: m.name().into(),
            points: mean_curve(hs, ExperimentHistory::auc_series),
        })
        .filter(|c| !c.points.is_empty())
        .collect();
    emit_curves_svg(&auc, "Membership-inference AUC vs. rounds", "round", "attack AUC", &out.join(AUC_SVG))?;
    Ok(table)
}

/// Reads every `<method>_seed<seed>.csv` in `dir` (with the DP epsilon
/// from the matching summary) and writes the report into `out`. Method
/// order follows the directory's config echo when present.
pub fn report_from_dir(dir: &Path, out: &Path) -> Result<String> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut histories = Vec::new();
    for path in files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((method, seed)) = stem.rsplit_once("_seed") else {
            continue;
        };
        let (Ok(method), Ok(seed)) = (method.parse::<Method>(), seed.parse::<u64>()) else {
            continue;
        };
        let mut h = ExperimentHistory::new(method, seed);
        h.records = read_history_csv(&path)?;
        let summary = path.with_extension("summary.toml");
        if let Ok(text) = std::fs::read_to_string(&summary) {
            let table: toml::Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", summary.display())))?;
            let result = table.get("result");
            h.epsilon = result.and_then(|r| r.get("epsilon")).and_then(|e| e.as_float());
            h.failure = result
                .and_then(|r| r.get("failure"))
                .and_then(|f| f.as_str())
                .map(str::to_owned);
        }
        histories.push(h);
    }
    if histories.is_empty() {
        return Err(Error::Usage(format!("no run histories in {}", dir.display())));
    }
    let order = match std::fs::read_to_string(dir.join(CONFIG_FILE)) {
        Ok(text) => ExperimentConfig::from_toml(&text)?.methods,
        Err(_) => Vec::new(),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_report(&histories, &order, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        for cfg in [ExperimentConfig::desk(), ExperimentConfig::paper()] {
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn partial_file_overrides_scale_defaults() {
        let cfg = ExperimentConfig::from_toml("seeds = [4]\n[train]\nrounds = 5\n").unwrap();
        assert_eq!(cfg.seeds, vec![4]);
        assert_eq!(cfg.train.rounds, 5);
        assert_eq!(cfg.train.lr, TrainConfig::desk().lr);
        let cfg = ExperimentConfig::from_toml("scale = \"paper\"").unwrap();
        assert_eq!(cfg.model, ModelConfig::paper());
    }

    #[test]
    fn invalid_fields_are_named() {
        let e = ExperimentConfig::from_toml("[train]\nbatchsize = 3\n").unwrap_err();
        assert!(e.to_string().contains("batchsize"), "{e}");
        let e = ExperimentConfig::from_toml("seeds = [1, 1]").unwrap_err();
        assert!(e.to_string().contains("seeds"), "{e}");
        let e = ExperimentConfig::from_toml("methods = [\"fedsgd\"]").unwrap_err();
        assert!(e.to_string().contains("fedsgd"), "{e}");
        assert!(ExperimentConfig::from_toml("seeds = []").is_err());
    }
}
