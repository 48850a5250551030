//! Deviation-aware choice of a contiguous late-stage skip window.

use serde::{Deserialize, Serialize};

use crate::backends::Stream;
use crate::calibration::{CalibrationTable, TableColumns};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowParams {
    /// Number of extrapolated (model-free) steps.
    pub n_skip: usize,
    /// Penalty on the cosine spread across prompts.
    pub lambda: f64,
    /// Penalty on the norm-ratio spread across prompts.
    pub gamma: f64,
    pub tau_cos: Option<f64>,
    pub t_upper: Option<usize>,
    /// Force a model call after this many consecutive skips; `None` never refreshes.
    pub k_refresh: Option<usize>,
    /// Leading steps (from `t = T`) that are never skipped.
    pub warmup_steps: usize,
    pub stream: Stream,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self {
            n_skip: 8,
            lambda: 1.0,
            gamma: 1.0,
            tau_cos: None,
            t_upper: None,
            k_refresh: None,
            warmup_steps: 2,
            stream: Stream::Guided,
        }
    }
}

impl WindowParams {
    /// Length of the window span once refresh points are inserted.
    pub fn span_len(&self) -> usize {
        match self.k_refresh {
            Some(k) if self.n_skip > 0 => self.n_skip + (self.n_skip - 1) / k,
            _ => self.n_skip,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_skip == 0 {
            return Err(Error::Parameter("n_skip must be positive".into()));
        }
        if self.k_refresh == Some(0) {
            return Err(Error::Parameter("k_refresh must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Parameter("lambda and gamma must be nonnegative".into()));
        }
        if let Some(tau) = self.tau_cos {
            if !(-1.0..=1.0).contains(&tau) {
                return Err(Error::Parameter(format!("tau_cos {tau} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

/// Highest timestep that may be skipped: two full steps must precede any extrapolation.
pub fn max_skippable(steps: usize, warmup_steps: usize) -> usize {
    steps.saturating_sub(warmup_steps.max(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Auto,
    Manual,
}

/// Timesteps whose model call is replaced by extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipPlan {
    #[serde(rename = "T")]
    pub steps: usize,
    pub stream: Stream,
    /// Inclusive `[t_lo, t_hi]` span of the window, absent for an empty plan.
    pub window: Option<(usize, usize)>,
    /// Skipped timesteps, descending.
    pub skip_set: Vec<usize>,
    /// Forced model calls inside the window, descending.
    pub refresh_points: Vec<usize>,
    pub provenance: Provenance,
    pub score: Option<f64>,
}

impl SkipPlan {
    pub fn empty(steps: usize) -> Self {
        Self {
            steps,
            stream: Stream::Guided,
            window: None,
            skip_set: Vec::new(),
            refresh_points: Vec::new(),
            provenance: Provenance::Manual,
            score: None,
        }
    }

    fn from_span(
        steps: usize,
        stream: Stream,
        t_lo: usize,
        t_hi: usize,
        k_refresh: Option<usize>,
        provenance: Provenance,
        score: Option<f64>,
    ) -> Self {
        let mut skip_set = Vec::new();
        let mut refresh_points = Vec::new();
        for (i, t) in (t_lo..=t_hi).rev().enumerate() {
            match k_refresh {
                Some(k) if (i + 1) % (k + 1) == 0 => refresh_points.push(t),
                _ => skip_set.push(t),
            }
        }
        Self {
            steps,
            stream,
            window: Some((t_lo, t_hi)),
            skip_set,
            refresh_points,
            provenance,
            score,
        }
    }

    /// Explicit `[t_lo, t_hi]` window.
    pub fn manual(steps: usize, t_lo: usize, t_hi: usize, k_refresh: Option<usize>, stream: Stream) -> Result<Self> {
        if t_lo == 0 || t_lo > t_hi {
            return Err(Error::PlanInvalid(format!(
                "window [{t_lo}, {t_hi}] is empty or includes t = 0"
            )));
        }
        if t_hi > max_skippable(steps, 2) {
            return Err(Error::PlanInvalid(format!(
                "window top {t_hi} exceeds T - 2 = {}",
                max_skippable(steps, 2)
            )));
        }
        if k_refresh == Some(0) {
            return Err(Error::PlanInvalid("k_refresh must be positive".into()));
        }
        Ok(Self::from_span(
            steps,
            stream,
            t_lo,
            t_hi,
            k_refresh,
            Provenance::Manual,
            None,
        ))
    }

    pub fn skips(&self, t: usize) -> bool {
        self.skip_set.contains(&t)
    }

    pub fn is_refresh(&self, t: usize) -> bool {
        self.refresh_points.contains(&t)
    }

    pub fn n_skip(&self) -> usize {
        self.skip_set.len()
    }

    pub fn top(&self) -> Option<usize> {
        self.window.map(|(_, hi)| hi)
    }

    pub fn check_against(&self, steps: usize) -> Result<()> {
        if self.steps != steps {
            return Err(Error::PlanInvalid(format!(
                "plan is for T = {}, sampler has T = {steps}",
                self.steps
            )));
        }
        if let Some(&t) = self.skip_set.iter().find(|&&t| t == 0 || t > max_skippable(steps, 2)) {
            return Err(Error::PlanInvalid(format!(
                "cannot skip t = {t}: fewer than two prior deltas"
            )));
        }
        Ok(())
    }
}

/// Score of one feasible window span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub t_lo: usize,
    pub t_hi: usize,
    pub mean_c_cos: f64,
    pub mean_s_cos: f64,
    pub mean_s_ratio: f64,
    pub score: f64,
}

#[derive(Clone, Copy)]
struct Filters {
    upper: bool,
    tau: bool,
}

fn feasible_windows(cols: &TableColumns, p: &WindowParams, f: Filters) -> Vec<WindowScore> {
    let steps = cols.steps();
    let len = p.span_len();
    let top = max_skippable(steps, p.warmup_steps);
    let top = match (f.upper, p.t_upper) {
        (true, Some(u)) => top.min(u),
        _ => top,
    };
    let usable = |t: usize| -> Option<(f64, f64, f64)> {
        let c = cols.c_cos.get(t).copied().flatten()?;
        let sc = cols.s_cos.get(t).copied().flatten()?;
        let sr = cols.s_ratio.get(t).copied().flatten()?;
        cols.c_ratio.get(t).copied().flatten()?;
        if f.tau && p.tau_cos.is_some_and(|tau| c < tau) {
            return None;
        }
        Some((c, sc, sr))
    };
    if len == 0 || top < len {
        return Vec::new();
    }
    let mut out = Vec::new();
    'outer: for t_lo in 1..=top + 1 - len {
        let t_hi = t_lo + len - 1;
        let (mut sc, mut ss, mut sr) = (0.0, 0.0, 0.0);
        for t in t_lo..=t_hi {
            let Some((c, s1, s2)) = usable(t) else { continue 'outer };
            sc += c;
            ss += s1;
            sr += s2;
        }
        let n = len as f64;
        let (mc, ms, mr) = (sc / n, ss / n, sr / n);
        out.push(WindowScore {
            t_lo,
            t_hi,
            mean_c_cos: mc,
            mean_s_cos: ms,
            mean_s_ratio: mr,
            score: mc - p.lambda * ms - p.gamma * mr,
        });
    }
    out
}

/// Every feasible window with its score, ordered by `t_lo`.
pub fn window_scores(cols: &TableColumns, p: &WindowParams) -> Result<Vec<WindowScore>> {
    p.validate()?;
    Ok(feasible_windows(cols, p, Filters { upper: true, tau: true }))
}

/// Highest-scoring feasible window over raw columns; ties go to the smaller `t`.
pub fn select_window_columns(cols: &TableColumns, p: &WindowParams) -> Result<SkipPlan> {
    let scores = window_scores(cols, p)?;
    let mut best: Option<&WindowScore> = None;
    for w in &scores {
        if best.is_none_or(|b| w.score > b.score) {
            best = Some(w);
        }
    }
    let Some(best) = best else {
        return Err(infeasibility(cols, p));
    };
    Ok(SkipPlan::from_span(
        cols.steps(),
        p.stream,
        best.t_lo,
        best.t_hi,
        p.k_refresh,
        Provenance::Auto,
        Some(best.score),
    ))
}

pub fn select_window(table: &CalibrationTable, p: &WindowParams) -> Result<SkipPlan> {
    let stream = table
        .stream(p.stream)
        .ok_or_else(|| Error::Parameter(format!("table has no {} stream", p.stream)))?;
    select_window_columns(&stream.columns(), p)
}

fn infeasibility(cols: &TableColumns, p: &WindowParams) -> Error {
    let steps = cols.steps();
    let len = p.span_len();
    let top = max_skippable(steps, p.warmup_steps);
    if top < len {
        return Error::Infeasible {
            constraint: "warmup_steps",
            detail: format!("a span of {len} steps does not fit below t = {top}"),
        };
    }
    let has = |f| !feasible_windows(cols, p, f).is_empty();
    if !has(Filters {
        upper: false,
        tau: false,
    }) {
        return Error::Infeasible {
            constraint: "valid_entries",
            detail: format!("no {len} consecutive timesteps have complete calibration entries"),
        };
    }
    let upper_ok = has(Filters {
        upper: true,
        tau: false,
    });
    let tau_ok = has(Filters {
        upper: false,
        tau: true,
    });
    let max_cos = cols.c_cos.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let (constraint, detail) = match (upper_ok, tau_ok) {
        (false, true) => (
            "t_upper",
            format!("t_upper = {:?} leaves no room for {len} steps", p.t_upper),
        ),
        (true, false) => (
            "tau_cos",
            format!("tau_cos = {:?} but max mean cosine is {max_cos}", p.tau_cos),
        ),
        (false, false) => ("tau_cos+t_upper", "each constraint alone is infeasible".to_string()),
        (true, true) => (
            "tau_cos+t_upper",
            "constraints are individually satisfiable but not jointly".to_string(),
        ),
    };
    Error::Infeasible { constraint, detail }
}
