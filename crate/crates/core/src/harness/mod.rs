//! Training, evaluation, tracing and ablation runs behind the CLI.

pub mod eval;
pub mod trace;
pub mod train;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::data::{Dataset, DetailLevel};
use crate::embedder::{Model, ModeFlags};
use crate::error::{Error, Result};

pub use eval::{evaluate, evaluate_with, Protocol, RetrievalReport};
pub use trace::{trace_record, TraceReport};
pub use train::{train, StopReason};

/// Crate version plus `git describe` of the tree it was built from.
pub fn build_fingerprint() -> String {
    format!(
        "hiermatch {} ({})",
        env!("CARGO_PKG_VERSION"),
        env!("HIERMATCH_GIT_DESCRIBE")
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    Full,
    NoCoattn,
    NoHierarchy,
    Explicit,
    /// The full model queried with `coarse` sketches.
    Coarse,
    /// The full model queried with `coarse++` sketches.
    CoarsePlusPlus,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::Full,
        AblationMode::NoCoattn,
        AblationMode::NoHierarchy,
        AblationMode::Explicit,
        AblationMode::Coarse,
        AblationMode::CoarsePlusPlus,
    ];

    pub fn flags(self) -> ModeFlags {
        let mut f = ModeFlags::default();
        match self {
            AblationMode::NoCoattn => f.no_coattn = true,
            AblationMode::NoHierarchy => f.no_hierarchy = true,
            AblationMode::Explicit => f.explicit_hierarchy = true,
            _ => {}
        }
        f
    }

    pub fn query_variant(self) -> DetailLevel {
        match self {
            AblationMode::Coarse => DetailLevel::Coarse,
            AblationMode::CoarsePlusPlus => DetailLevel::CoarsePlusPlus,
            _ => DetailLevel::Full,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Full => "full",
            AblationMode::NoCoattn => "no_coattn",
            AblationMode::NoHierarchy => "no_hierarchy",
            AblationMode::Explicit => "explicit",
            AblationMode::Coarse => "coarse",
            AblationMode::CoarsePlusPlus => "coarse++",
        })
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mode: AblationMode,
    /// One report per seed, or the first failure.
    pub outcome: std::result::Result<Vec<RetrievalReport>, String>,
}

impl AblationRow {
    fn mean(&self, f: impl Fn(&RetrievalReport) -> f64) -> Option<f64> {
        let reports = self.outcome.as_ref().ok()?;
        Some(reports.iter().map(f).sum::<f64>() / reports.len() as f64)
    }

    pub fn mean_acc_at_1(&self) -> Option<f64> {
        self.mean(|r| r.acc_at_1)
    }

    pub fn mean_acc_at_10(&self) -> Option<f64> {
        self.mean(|r| r.acc_at_10)
    }
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    pub build: String,
}

impl AblationTable {
    pub fn row(&self, mode: AblationMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!(
            "config  {}\nbuild   {}\nseeds   {}\n\n{:<14} {:>8} {:>8}  status\n",
            self.config.fingerprint(),
            self.build,
            seeds.join(","),
            "mode",
            "acc@1",
            "acc@10"
        );
        for r in &self.rows {
            let (a1, a10, status) = match (&r.outcome, r.mean_acc_at_1(), r.mean_acc_at_10()) {
                (Ok(_), Some(a1), Some(a10)) => (format!("{a1:.4}"), format!("{a10:.4}"), "ok".to_string()),
                (Err(e), _, _) => ("-".into(), "-".into(), format!("FAILED: {e}")),
                _ => ("-".into(), "-".into(), "FAILED".into()),
            };
            out.push_str(&format!("{:<14} {:>8} {:>8}  {}\n", r.mode.to_string(), a1, a10, status));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,acc_at_1,acc_at_10,seeds,status,config,build\n");
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        for r in &self.rows {
            let num = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
            let status = match &r.outcome {
                Ok(_) => "ok".to_string(),
                Err(e) => format!("\"FAILED: {}\"", e.replace('"', "'")),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.mode,
                num(r.mean_acc_at_1()),
                num(r.mean_acc_at_10()),
                seeds.join(" "),
                status,
                self.config.fingerprint(),
                self.build
            ));
        }
        out
    }
}

/// Trains one model per distinct mode flag set and seed, then evaluates
/// every requested row. The mode flags and seed of `base` are overridden
/// per row; a failing row is recorded and the others still run.
pub fn ablate(
    base: &RunConfig,
    ds: &Dataset,
    modes: &[AblationMode],
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> AblationTable {
    let mut models: HashMap<(ModeFlags, u64), std::result::Result<Model, String>> = HashMap::new();
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut reports = Vec::with_capacity(seeds.len());
        let mut failure = None;
        for &seed in seeds {
            let mut run = base.clone();
            run.seed = seed;
            run.model.modes = mode.flags();
            let model = models.entry((mode.flags(), seed)).or_insert_with(|| {
                progress(&format!("training {mode} seed {seed}"));
                train(&run, ds, None, false, |_, _| {})
                    .map(|(state, _)| state.model)
                    .map_err(|e| e.to_string())
            });
            let report = match model {
                Ok(m) => evaluate(m, ds, mode.query_variant()).map_err(|e| e.to_string()),
                Err(e) => Err(e.clone()),
            };
            match report {
                Ok(mut r) => {
                    r.config_fingerprint = run.fingerprint();
                    reports.push(r);
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        rows.push(AblationRow {
            mode,
            outcome: match failure {
                Some(e) => Err(e),
                None => Ok(reports),
            },
        });
    }
    AblationTable {
        rows,
        seeds: seeds.to_vec(),
        config: base.clone(),
        build: build_fingerprint(),
    }
}
