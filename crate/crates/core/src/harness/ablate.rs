//! Ablation sweeps sharing one seed and one dataset.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PcanError, Result};
use crate::harness::config::{RunConfig, Switches};
use crate::harness::train::{train, Datasets};
use crate::metrics::{align, pct, EvalReport};
use crate::pam::PriorSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Components,
    PriorType,
    KBoxes,
    GGroups,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [AblationAxis::Components, AblationAxis::PriorType, AblationAxis::KBoxes, AblationAxis::GGroups];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Components => "components",
            AblationAxis::PriorType => "prior_type",
            AblationAxis::KBoxes => "k_boxes",
            AblationAxis::GGroups => "g_groups",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = PcanError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| PcanError::Config(format!("unknown ablation axis `{s}` (components, prior_type, k_boxes, g_groups)")))
    }
}

/// The configurations of one sweep, labelled as they appear in the report.
pub fn variants(base: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    let with = |s: Switches| RunConfig { switches: s, ..base.clone() };
    let full = Switches { use_clum: true, use_pam: true, use_contrastive_loss: true, ..base.switches };
    let baseline = Switches { use_clum: false, ..full };
    match axis {
        AblationAxis::Components => vec![
            ("Baseline".into(), with(baseline)),
            ("CLUM w/o PAM & CL".into(), with(Switches { use_pam: false, use_contrastive_loss: false, ..full })),
            ("CLUM w/o PAM".into(), with(Switches { use_pam: false, ..full })),
            ("CLUM w/o CL".into(), with(Switches { use_contrastive_loss: false, ..full })),
            ("Full Model".into(), with(full)),
        ],
        AblationAxis::PriorType => {
            let mut rows = vec![("none".to_string(), with(baseline))];
            for src in PriorSource::ALL {
                let label = match src {
                    PriorSource::GtUnconstrainedRandom => "GT",
                    PriorSource::GtConditionalRandom => "GT + C.R.",
                    PriorSource::GtOracleDetector => "GT + detector",
                    PriorSource::GtOracleConditional => "GT + detector + C.R.",
                };
                rows.push((label.to_string(), with(Switches { prior_source: src, ..full })));
            }
            rows
        }
        AblationAxis::KBoxes => [2usize, 4, 6, 8]
            .into_iter()
            .map(|k| {
                let mut c = with(full);
                c.pam.k_neg = k - 1;
                c.model.queries = c.model.queries.max(k);
                (format!("boxes {k}"), c)
            })
            .collect(),
        AblationAxis::GGroups => [1usize, 2, 3, 4]
            .into_iter()
            .map(|g| {
                let mut c = with(full);
                c.pam.groups = g;
                (format!("groups {g}"), c)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub switches: Switches,
    pub k_boxes: usize,
    pub groups: usize,
    pub config_hash: String,
    pub report: EvalReport,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub seed: u64,
    pub epochs: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Method | Pr@0.5 | Pr@0.7 | Pr@0.9 | oIoU, percentages.
    pub fn to_table(&self) -> String {
        let mut rows = vec![vec!["Method".to_string(), "Pr@0.5".into(), "Pr@0.7".into(), "Pr@0.9".into(), "oIoU".into()]];
        for r in &self.rows {
            let p = |t| r.report.precision_value(t).map(pct).unwrap_or_else(|| "-".into());
            rows.push(vec![r.label.clone(), p(0.5), p(0.7), p(0.9), pct(r.report.oiou)]);
        }
        let body = align(&rows);
        // left-align the method column for readability
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
        let body: String = body
            .lines()
            .map(|l| {
                let (head, tail) = l.split_at(w.min(l.len()));
                format!("{:<w$}{tail}\n", head.trim_start())
            })
            .collect();
        format!("ablation: {} (seed {}, {} epochs)\n{body}", self.axis, self.seed, self.epochs)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn ablate(base: &RunConfig, data: &Datasets, axis: AblationAxis) -> Result<AblationReport> {
    ablate_with_progress(base, data, axis, |_| {})
}

pub fn ablate_with_progress(base: &RunConfig, data: &Datasets, axis: AblationAxis, mut progress: impl FnMut(&AblationRow)) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (label, cfg) in variants(base, axis) {
        let out = train(&cfg, data)?;
        let row = AblationRow {
            label,
            switches: cfg.switches,
            k_boxes: cfg.pam.group_size(),
            groups: cfg.pam.groups,
            config_hash: cfg.hash(),
            report: out.final_eval().clone(),
            aborted: out.aborted,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(AblationReport { axis, seed: base.seed, epochs: base.epochs, rows })
}
