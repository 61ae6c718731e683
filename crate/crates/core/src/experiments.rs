//! Named experiment recipes and the end-to-end runner.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::composers::{AnswerLenPolicy, ComposeRule};
use crate::coperset::{build_dataset, Dataset, Split, SplitCounts, SplitPolicy, TaskConfig};
use crate::evalkit::{emit_category_bar, emit_heatmap, emit_loss_curves, evaluate, CategoryReport, EvalReport};
use crate::seqmodel::{Checkpoint, ModelConfig, PeKind, Transformer};
use crate::trainer::{train, Metrics, RunLog, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileName {
    CoperDefault,
    CoperDense,
    SinglePeriod,
    SinglePeriodScaled,
    Circconv,
    Addsub,
    Sine,
}

impl ProfileName {
    pub const ALL: [ProfileName; 7] = [
        ProfileName::CoperDefault,
        ProfileName::CoperDense,
        ProfileName::SinglePeriod,
        ProfileName::SinglePeriodScaled,
        ProfileName::Circconv,
        ProfileName::Addsub,
        ProfileName::Sine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProfileName::CoperDefault => "coper-default",
            ProfileName::CoperDense => "coper-dense",
            ProfileName::SinglePeriod => "single-period",
            ProfileName::SinglePeriodScaled => "single-period-scaled",
            ProfileName::Circconv => "circconv",
            ProfileName::Addsub => "addsub",
            ProfileName::Sine => "sine",
        }
    }

    pub fn rule(self) -> ComposeRule {
        match self {
            ProfileName::CoperDefault | ProfileName::CoperDense => ComposeRule::ModAdd,
            ProfileName::SinglePeriod => ComposeRule::SinglePeriod,
            ProfileName::SinglePeriodScaled => ComposeRule::ScaledSingle,
            ProfileName::Circconv => ComposeRule::CircConv,
            ProfileName::Addsub => ComposeRule::AddSubAlt,
            ProfileName::Sine => ComposeRule::Sine,
        }
    }
}

impl fmt::Display for ProfileName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProfileName::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ProfileName::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown profile {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

/// Everything one run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentProfile {
    pub name: ProfileName,
    pub scale: Scale,
    pub task: TaskConfig,
    pub counts: SplitCounts,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Test samples decoded per split at the end of a run.
    pub eval_limit: Option<usize>,
}

/// Desk optimizer settings shared by the continuation tasks. Six runs fit
/// in fifteen minutes on one core.
fn desk_continuation_train() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        learning_rate: 1e-3,
        weight_decay: 0.5,
        epochs: 24,
        eval_every: 8,
        ..TrainConfig::desk()
    }
}

impl ExperimentProfile {
    pub fn resolve(name: ProfileName, scale: Scale) -> Self {
        let rule = name.rule();
        let policy = match (name, scale) {
            (ProfileName::SinglePeriod | ProfileName::SinglePeriodScaled, _) => SplitPolicy::single_period(),
            (ProfileName::CoperDense, _) => SplitPolicy::dense(),
            (_, Scale::Desk) => SplitPolicy::desk(),
            (_, Scale::Paper) => SplitPolicy::paper_default(),
        };
        let answer_len_policy = match scale {
            Scale::Desk => AnswerLenPolicy::Capped { max_len: 40 },
            Scale::Paper => AnswerLenPolicy::FullLcm,
        };
        let task = TaskConfig::new(rule, policy, answer_len_policy);
        let hollow = |n| if rule == ComposeRule::Sine { 0 } else { n };
        let continuation = matches!(name, ProfileName::SinglePeriod | ProfileName::SinglePeriodScaled);
        let pe = PeKind::Rope;
        match scale {
            Scale::Desk => {
                let (counts, train) = if continuation {
                    (SplitCounts::new(2000, 200, 200, 200), desk_continuation_train())
                } else if rule == ComposeRule::Sine {
                    (
                        SplitCounts::new(4000, 200, 0, 200),
                        TrainConfig {
                            epochs: 60,
                            eval_every: 10,
                            learning_rate: 1e-3,
                            ..TrainConfig::desk()
                        },
                    )
                } else {
                    (
                        SplitCounts::new(8000, 200, 200, 200),
                        TrainConfig {
                            epochs: 4,
                            eval_every: 2,
                            learning_rate: 2e-3,
                            ..TrainConfig::desk()
                        },
                    )
                };
                Self {
                    name,
                    scale,
                    task,
                    counts,
                    model: ModelConfig::desk(pe),
                    train,
                    eval_limit: Some(200),
                }
            }
            Scale::Paper => {
                let (counts, epochs) = if continuation {
                    (SplitCounts::new(10000, 1000, 1000, 1000), 100)
                } else {
                    (SplitCounts::new(50000, 1000, hollow(1000), 1000), 450)
                };
                Self {
                    name,
                    scale,
                    task,
                    counts,
                    model: ModelConfig::paper(pe),
                    train: TrainConfig {
                        epochs,
                        ..TrainConfig::paper()
                    },
                    eval_limit: None,
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.task.rule != self.name.rule() {
            return Err(Error::Config(format!(
                "profile {} expects rule {}, found {}",
                self.name,
                self.name.rule(),
                self.task.rule
            )));
        }
        SplitPolicy::new(
            self.task.policy.train_lo,
            self.task.policy.train_hi,
            self.task.policy.total_lo,
            self.task.policy.total_hi,
            self.task.policy.hollow.iter().copied(),
        )?;
        self.model.validate()?;
        self.train.validate()
    }
}

/// Summary written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub profile: ProfileName,
    pub scale: Scale,
    pub seed: u64,
    pub pe: PeKind,
    pub category: CategoryReport,
    /// Mean absolute error of decoded sine answers per split.
    pub mean_abs_error: BTreeMap<Split, f64>,
}

impl RunSummary {
    pub fn metrics(&self) -> Metrics {
        let mut m = Metrics::new();
        let c = &self.category;
        for (k, v) in [
            ("id_loss", c.id_loss),
            ("ood_loss", c.ood_loss),
            ("id_accuracy", c.id_accuracy),
            ("hollow_accuracy", c.hollow_accuracy),
            ("extrapolation_accuracy", c.extrapolation_accuracy),
            ("average", Some(c.average)),
        ] {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        }
        for (s, e) in &self.mean_abs_error {
            m.insert(format!("mae_{}", s.name().to_lowercase()), *e);
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dataset: Dataset,
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    pub report: EvalReport,
    pub summary: RunSummary,
}

/// Unreadable sine answers score the width of the sine range.
pub const UNREADABLE_SINE_ERROR: f64 = 2.0;

/// Builds the dataset, trains, evaluates and, with `out`, writes every
/// artifact under it.
pub fn run_experiment(profile: &ExperimentProfile, seed: u64, out: Option<&Path>) -> Result<RunArtifacts> {
    profile.validate()?;
    let dataset = build_dataset(&profile.task, profile.counts, seed)?;
    let mut model = Transformer::<f32>::new(ModelConfig {
        init_seed: seed,
        ..profile.model.clone()
    })?;
    let cfg = TrainConfig {
        seed,
        ..profile.train.clone()
    };
    let outcome = train(&mut model, &dataset, &cfg)?;
    let report = evaluate(&outcome.checkpoint, &dataset, profile.eval_limit)?;
    let mean_abs_error = if profile.task.rule == ComposeRule::Sine {
        Split::TEST
            .into_iter()
            .filter_map(|s| report.mean_abs_error(s, UNREADABLE_SINE_ERROR).map(|e| (s, e)))
            .collect()
    } else {
        BTreeMap::new()
    };
    let summary = RunSummary {
        profile: profile.name,
        scale: profile.scale,
        seed,
        pe: profile.model.pe_kind,
        category: report.category,
        mean_abs_error,
    };
    if let Some(dir) = out {
        write_artifacts(dir, profile, &dataset, &outcome.checkpoint, &outcome.log, &report, &summary)?;
    }
    Ok(RunArtifacts {
        dataset,
        checkpoint: outcome.checkpoint,
        log: outcome.log,
        report,
        summary,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn write_artifacts(
    dir: &Path,
    profile: &ExperimentProfile,
    dataset: &Dataset,
    checkpoint: &Checkpoint,
    log: &RunLog,
    report: &EvalReport,
    summary: &RunSummary,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("profile.json"), profile)?;
    dataset.write(&dir.join("dataset"))?;
    checkpoint.save(&dir.join("checkpoint"))?;
    log.write(dir)?;
    let title = format!("{} ({})", profile.name, profile.model.pe_kind);
    emit_heatmap(&report.grid, dir, "heatmap", &title)?;
    emit_category_bar(&[(title.clone(), report.category)], dir, "categories", &title)?;
    emit_loss_curves(log, dir, "curves", &title)?;
    write_json(&dir.join("eval.json"), report)?;
    write_json(&dir.join("summary.json"), summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_profile_resolves() {
        for name in ProfileName::ALL {
            for scale in [Scale::Desk, Scale::Paper] {
                let p = ExperimentProfile::resolve(name, scale);
                p.validate().unwrap();
                assert_eq!(p.task.rule, name.rule());
                assert_eq!(name.name().parse::<ProfileName>().unwrap(), name);
            }
        }
        assert!("coper".parse::<ProfileName>().is_err());
    }

    #[test]
    fn paper_scale_uses_the_published_hyperparameters() {
        let p = ExperimentProfile::resolve(ProfileName::CoperDefault, Scale::Paper);
        assert_eq!(p.train.batch_size, 32);
        assert_eq!(p.train.learning_rate, 1e-5);
        assert_eq!(p.train.weight_decay, 0.01);
        assert_eq!(p.train.epochs, 450);
        assert_eq!(p.counts, SplitCounts::new(50000, 1000, 1000, 1000));
        assert_eq!(p.task.policy, SplitPolicy::paper_default());
    }

    #[test]
    fn tiny_run_writes_artifacts() {
        let mut p = ExperimentProfile::resolve(ProfileName::SinglePeriod, Scale::Desk);
        p.counts = SplitCounts::new(16, 4, 4, 4);
        p.model = ModelConfig {
            max_seq_len: 64,
            ..ModelConfig::tiny(PeKind::Rope)
        };
        p.train.epochs = 2;
        p.train.eval_every = 1;
        let dir = tempfile::tempdir().unwrap();
        let a = run_experiment(&p, 3, Some(dir.path())).unwrap();
        assert_eq!(a.log.records.len(), 2);
        for f in [
            "profile.json",
            "summary.json",
            "runlog.csv",
            "heatmap.csv",
            "heatmap.svg",
            "categories.csv",
            "curves.svg",
            "dataset/manifest.json",
            "checkpoint/checkpoint.json",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let b = run_experiment(&p, 3, None).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.checkpoint, b.checkpoint);
    }
}
