//! Per-family residue selection: rank residue losses (or their excess over a
//! frozen reference model) and keep the top fraction for the objective.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ResidueLossSet, SelectionMasks};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Largest current-minus-reference loss.
    Excess,
    LossLarge,
    LossSmall,
    Full,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Full,
        StrategyKind::LossLarge,
        StrategyKind::LossSmall,
        StrategyKind::Excess,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Excess => "excess",
            StrategyKind::LossLarge => "loss-large",
            StrategyKind::LossSmall => "loss-small",
            StrategyKind::Full => "full",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {:?}", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStrategy {
    pub kind: StrategyKind,
    pub rho: f64,
}

impl SelectionStrategy {
    pub fn new(kind: StrategyKind, rho: f64) -> Result<Self> {
        let s = Self { kind, rho };
        s.validate()?;
        Ok(s)
    }

    pub fn full() -> Self {
        Self {
            kind: StrategyKind::Full,
            rho: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rho {} outside (0, 1]",
                self.rho
            )));
        }
        if self.kind == StrategyKind::Full && self.rho != 1.0 {
            return Err(Error::InvalidArgument(
                "strategy full requires rho = 1".into(),
            ));
        }
        Ok(())
    }

    pub fn needs_reference(&self) -> bool {
        self.kind == StrategyKind::Excess
    }
}

/// `max(1, ⌊n·rho⌋)`.
pub fn selected_count(n: usize, rho: f64) -> usize {
    ((n as f64 * rho).floor() as usize).clamp(1, n.max(1))
}

/// Boolean mask over `values`. Ranking is by value (descending for excess and
/// loss-large, ascending for loss-small); equal values go to the lower index.
pub fn select(values: &[f64], strategy: &SelectionStrategy) -> Vec<bool> {
    let n = values.len();
    if strategy.kind == StrategyKind::Full || strategy.rho >= 1.0 {
        return vec![true; n];
    }
    let k = selected_count(n, strategy.rho);
    let mut order: Vec<usize> = (0..n).collect();
    match strategy.kind {
        StrategyKind::LossSmall => {
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
        }
        _ => order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b))),
    }
    let mut mask = vec![false; n];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

/// Current minus reference, per family.
#[derive(Clone, Debug, PartialEq)]
pub struct ExcessLossSet {
    pub a2g: Vec<f64>,
    pub g2a: Vec<f64>,
    pub physical: Vec<f64>,
}

pub fn excess_losses(
    current: &ResidueLossSet,
    reference: &ResidueLossSet,
) -> Result<ExcessLossSet> {
    if current.len() != reference.len()
        || current.physical.len() != reference.physical.len()
        || current.index != reference.index
    {
        return Err(Error::Shape(format!(
            "current has {} residues, reference {}",
            current.len(),
            reference.len()
        )));
    }
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
    Ok(ExcessLossSet {
        a2g: diff(&current.a2g, &reference.a2g),
        g2a: diff(&current.g2a, &reference.g2a),
        physical: diff(&current.physical, &reference.physical),
    })
}

/// Masks for one step. `reference` is required for the excess strategy.
pub fn selection_masks(
    strategy: &SelectionStrategy,
    current: &ResidueLossSet,
    reference: Option<&ResidueLossSet>,
) -> Result<SelectionMasks> {
    strategy.validate()?;
    match strategy.kind {
        StrategyKind::Full => Ok(SelectionMasks::all(current.len())),
        StrategyKind::Excess => {
            let reference = reference.ok_or_else(|| {
                Error::InvalidArgument("excess selection needs reference losses".into())
            })?;
            let d = excess_losses(current, reference)?;
            Ok(SelectionMasks {
                a2g: select(&d.a2g, strategy),
                g2a: select(&d.g2a, strategy),
                physical: select(&d.physical, strategy),
            })
        }
        StrategyKind::LossLarge | StrategyKind::LossSmall => Ok(SelectionMasks {
            a2g: select(&current.a2g, strategy),
            g2a: select(&current.g2a, strategy),
            physical: select(&current.physical, strategy),
        }),
    }
}

/// CSV log of every selection decision.
pub struct AuditWriter {
    out: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl AuditWriter {
    pub const HEADER: &'static str = "step,family,flat_index,current,reference,excess,selected";

    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        writeln!(out, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out,
            path: path.to_path_buf(),
        })
    }

    /// Opens an existing log for appending (after a resume).
    pub fn append(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Self::create(path);
        }
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn record(
        &mut self,
        step: usize,
        current: &ResidueLossSet,
        reference: Option<&ResidueLossSet>,
        masks: &SelectionMasks,
    ) -> Result<()> {
        let fams = current.families();
        let chosen = [&masks.a2g, &masks.g2a, &masks.physical];
        for (f, (name, cur)) in fams.iter().enumerate() {
            let refv = reference.map(|r| r.families()[f].1);
            for (i, &c) in cur.iter().enumerate() {
                let (r, d) = match refv {
                    Some(rv) => (format!("{}", rv[i]), format!("{}", c - rv[i])),
                    None => (String::new(), String::new()),
                };
                writeln!(
                    self.out,
                    "{},{},{},{},{},{},{}",
                    step, name, i, c, r, d, chosen[f][i] as u8
                )
                .map_err(|e| Error::io(&self.path, e))?;
            }
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
