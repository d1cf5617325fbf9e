//! Train-then-evaluate runs and ablation sweeps.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::config::RunSettings;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::relation::FusionType;
use crate::train::{self, Evaluation, TrainingReport};

#[derive(Debug)]
pub struct RunOutcome {
    pub model: Segmenter,
    pub report: TrainingReport,
    pub evaluation: Evaluation,
}

/// Builds the model, trains it on the training split and evaluates it on
/// the held-out split.
pub fn run(settings: &RunSettings) -> Result<RunOutcome> {
    settings.validate()?;
    let (train_set, eval_set) = settings.datasets()?;
    let mut model = Segmenter::new(settings.model.clone())?;
    let report = train::train(&mut model, &train_set, &settings.train)?;
    let evaluation = train::evaluate(&model, &eval_set, settings.band)?;
    Ok(RunOutcome {
        model,
        report,
        evaluation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Theta,
    Ratio,
    Fusion,
    Components,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theta" => Ok(Self::Theta),
            "ratio" => Ok(Self::Ratio),
            "fusion" => Ok(Self::Fusion),
            "components" => Ok(Self::Components),
            other => Err(Error::Config(format!(
                "unknown ablation axis `{other}` (theta, ratio, fusion, components)"
            ))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Theta => "theta",
            Self::Ratio => "ratio",
            Self::Fusion => "fusion",
            Self::Components => "components",
        })
    }
}

/// Threshold multiples of the mean relation value.
pub const THETA_GRID: [(&str, f64); 5] = [
    ("2v", 2.0),
    ("v", 1.0),
    ("v/2", 0.5),
    ("v/4", 0.25),
    ("v/8", 0.125),
];
pub const RATIO_GRID: [usize; 5] = [2, 4, 8, 16, 32];

/// Labelled settings of one sweep. Everything but the swept axis (and the
/// channel count of the ratio sweep, rounded up so every ratio divides it)
/// is taken from `base`, seed included.
pub fn sweep(axis: Axis, base: &RunSettings) -> Vec<(String, RunSettings)> {
    let with = |f: &dyn Fn(&mut RunSettings)| {
        let mut s = base.clone();
        f(&mut s);
        s
    };
    match axis {
        Axis::Theta => THETA_GRID
            .iter()
            .map(|&(label, c)| (label.to_string(), with(&|s| s.model.theta_coefficient = c)))
            .collect(),
        Axis::Ratio => {
            let max = RATIO_GRID[RATIO_GRID.len() - 1];
            let channels = base.model.channels.div_ceil(max) * max;
            RATIO_GRID
                .iter()
                .map(|&r| {
                    let s = with(&|s| {
                        s.model.channels = channels;
                        s.model.r_gr = r;
                        s.model.r_lr = r;
                        s.model.r_ba = r;
                    });
                    (format!("r={r}"), s)
                })
                .collect()
        }
        Axis::Fusion => FusionType::ALL
            .iter()
            .map(|&f| (f.to_string(), with(&|s| s.model.fusion = f)))
            .collect(),
        Axis::Components => [
            ("baseline", false, false),
            ("+GT", true, false),
            ("+BA", false, true),
            ("+GT+BA", true, true),
        ]
        .iter()
        .map(|&(label, gt, ba)| {
            let s = with(&|s| {
                s.model.enable_gt = gt;
                s.model.enable_ba = ba;
            });
            (label.to_string(), s)
        })
        .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: Axis,
    pub setting: String,
    pub miou: f64,
    pub boundary_band_acc: Option<f64>,
    pub params: usize,
}

pub fn run_ablation(axis: Axis, base: &RunSettings) -> Result<Vec<AblationRow>> {
    sweep(axis, base)
        .into_iter()
        .map(|(setting, s)| {
            let out = run(&s)?;
            Ok(AblationRow {
                axis,
                setting,
                miou: out.evaluation.miou.miou,
                boundary_band_acc: out.evaluation.boundary_band_accuracy,
                params: out.model.num_params(),
            })
        })
        .collect()
}

/// Header `axis,setting,miou,boundary_band_acc,params`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("axis,setting,miou,boundary_band_acc,params\n");
    for r in rows {
        let band = r
            .boundary_band_acc
            .map_or_else(|| "nan".to_string(), |v| v.to_string());
        writeln!(
            out,
            "{},{},{},{},{}",
            r.axis, r.setting, r.miou, band, r.params
        )
        .unwrap();
    }
    out
}
