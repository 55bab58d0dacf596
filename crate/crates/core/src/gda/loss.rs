use std::io::Write;

use rand::Rng;

use super::distribution::{GroupDistribution, GroupedPredictions};
use super::sinkhorn::{sinkhorn_cost, SinkhornConfig, SinkhornResult};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FairnessMode {
    /// One present group, drawn uniformly per batch.
    SingleGroup,
    /// Average over every present group.
    AllGroups,
}

impl std::str::FromStr for FairnessMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_group" => Ok(FairnessMode::SingleGroup),
            "all_groups" => Ok(FairnessMode::AllGroups),
            other => bail!(Config, "unknown fairness mode {other:?}"),
        }
    }
}

impl std::fmt::Display for FairnessMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FairnessMode::SingleGroup => "single_group",
            FairnessMode::AllGroups => "all_groups",
        })
    }
}

/// One solved cell: group distribution vs. the global distribution of its class.
#[derive(Clone, Debug)]
pub struct CellTerm {
    pub src_members: Vec<usize>,
    pub dst_members: Vec<usize>,
    pub solution: SinkhornResult,
}

#[derive(Clone, Debug)]
pub struct GroupTerm {
    pub group: u32,
    pub real: Option<CellTerm>,
    pub fake: Option<CellTerm>,
}

impl GroupTerm {
    /// Real cost plus fake cost, missing cells dropped.
    pub fn bracket(&self) -> f64 {
        let mut total = 0.0;
        for c in [&self.real, &self.fake].into_iter().flatten() {
            total += c.solution.cost;
        }
        total
    }

    pub fn converged(&self) -> bool {
        [&self.real, &self.fake]
            .into_iter()
            .flatten()
            .all(|c| c.solution.converged)
    }
}

/// Solved transport problems behind one fairness-loss evaluation.
#[derive(Clone, Debug)]
pub struct FairnessPlan {
    pub terms: Vec<GroupTerm>,
    /// No eligible group was present; the loss is zero.
    pub skipped: bool,
}

impl FairnessPlan {
    /// `(1/|groups|) Σ_a [cost_real(a) + cost_fake(a)]`.
    pub fn value(&self) -> f64 {
        if self.terms.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for t in &self.terms {
            total += t.bracket();
        }
        total * (1.0 / self.terms.len() as f64)
    }

    /// Record the loss on `g` with every plan held fixed. `probs` is the
    /// batch's fake-probability vector. Returns `None` when skipped.
    pub fn record(&self, g: &mut Graph, probs: Var) -> Result<Option<Var>> {
        if self.terms.is_empty() {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for t in &self.terms {
            let mut bracket: Option<Var> = None;
            for c in [&t.real, &t.fake].into_iter().flatten() {
                let v = g.transport_cost(probs, &c.src_members, probs, &c.dst_members, &c.solution.plan)?;
                bracket = Some(match bracket {
                    None => v,
                    Some(acc) => g.add(acc, v)?,
                });
            }
            let Some(bracket) = bracket else { continue };
            total = Some(match total {
                None => bracket,
                Some(acc) => g.add(acc, bracket)?,
            });
        }
        match total {
            None => Ok(None),
            Some(t) => Ok(Some(g.scale(t, 1.0 / self.terms.len() as f64)?)),
        }
    }
}

fn solve_cell(cell: &Option<GroupDistribution>, global: &Option<GroupDistribution>, cfg: &SinkhornConfig) -> Result<Option<CellTerm>> {
    match (cell, global) {
        (Some(c), Some(gl)) => Ok(Some(CellTerm {
            src_members: c.members.clone(),
            dst_members: gl.members.clone(),
            solution: sinkhorn_cost(&c.dist, &gl.dist, cfg)?,
        })),
        _ => Ok(None),
    }
}

/// Solve the transport problems for a batch's grouped predictions.
///
/// Groups whose cells are all absent (or whose class has no global
/// distribution) are not eligible. In single-group mode one eligible group
/// is drawn from `rng`; with none eligible the plan is marked skipped.
pub fn fairness_loss(
    groups: &GroupedPredictions,
    cfg: &SinkhornConfig,
    mode: FairnessMode,
    rng: &mut impl Rng,
) -> Result<FairnessPlan> {
    let eligible: Vec<u32> = groups
        .groups
        .iter()
        .filter(|(_, c)| {
            (c.real.is_some() && groups.global_real.is_some()) || (c.fake.is_some() && groups.global_fake.is_some())
        })
        .map(|(&g, _)| g)
        .collect();
    if eligible.is_empty() {
        return Ok(FairnessPlan {
            terms: Vec::new(),
            skipped: true,
        });
    }
    let chosen = match mode {
        FairnessMode::AllGroups => eligible,
        FairnessMode::SingleGroup => vec![eligible[rng.random_range(0..eligible.len())]],
    };
    let mut terms = Vec::with_capacity(chosen.len());
    for g in chosen {
        let cells = &groups.groups[&g];
        terms.push(GroupTerm {
            group: g,
            real: solve_cell(&cells.real, &groups.global_real, cfg)?,
            fake: solve_cell(&cells.fake, &groups.global_fake, cfg)?,
        });
    }
    Ok(FairnessPlan { terms, skipped: false })
}

/// Classification loss, fairness loss and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub cls: f64,
    pub fair: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `total = cls + lambda · fair`.
pub fn total_loss(cls: f64, fair: f64, lambda: f64) -> Result<LossBundle> {
    if !(lambda >= 0.0) {
        bail!(Config, "fairness weight must be nonnegative, got {lambda}");
    }
    Ok(LossBundle {
        cls,
        fair,
        lambda,
        total: cls + fair * lambda,
    })
}

/// One row of the per-batch fairness trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub group: u32,
    pub cost_real: Option<f64>,
    pub cost_fake: Option<f64>,
    pub converged: bool,
}

impl TraceRow {
    pub fn from_plan(step: usize, plan: &FairnessPlan) -> Vec<TraceRow> {
        plan.terms
            .iter()
            .map(|t| TraceRow {
                step,
                group: t.group,
                cost_real: t.real.as_ref().map(|c| c.solution.cost),
                cost_fake: t.fake.as_ref().map(|c| c.solution.cost),
                converged: t.converged(),
            })
            .collect()
    }
}

/// CSV columns `step,group_id,cost_real,cost_fake,converged_flag`; absent
/// cells are empty fields.
pub fn write_trace(rows: &[TraceRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "group_id", "cost_real", "cost_fake", "converged_flag"])?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.step.to_string(),
            r.group.to_string(),
            fmt(r.cost_real),
            fmt(r.cost_fake),
            u8::from(r.converged).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
