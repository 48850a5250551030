//! Exhaustive window enumeration and random table generation for selection tests.

use taocache::calibration::TableColumns;
use taocache::rng::{CounterRng, Domain};
use taocache::{Stream, WindowParams};

/// Best `(t_lo, t_hi)` by brute force over every start position, or `None`.
pub fn brute_force(cols: &TableColumns, p: &WindowParams) -> Option<(usize, usize)> {
    let steps = cols.c_cos.len() + 1;
    let mut span = p.n_skip;
    if let Some(k) = p.k_refresh {
        // count refresh slots by walking down from the top of the span
        let (mut skips, mut len) = (0, 0);
        while skips < p.n_skip {
            len += 1;
            if len % (k + 1) != 0 {
                skips += 1;
            }
        }
        span = len;
    }
    let mut limit = steps as i64 - p.warmup_steps.max(2) as i64;
    if let Some(u) = p.t_upper {
        limit = limit.min(u as i64);
    }
    let mut best: Option<(f64, usize)> = None;
    for t_lo in 1..steps {
        let t_hi = t_lo + span - 1;
        if t_hi as i64 > limit {
            break;
        }
        let mut cells = Vec::new();
        for t in t_lo..=t_hi {
            match (cols.c_cos[t], cols.s_cos[t], cols.c_ratio[t], cols.s_ratio[t]) {
                (Some(c), Some(sc), Some(_), Some(sr)) if p.tau_cos.is_none_or(|tau| c >= tau) => {
                    cells.push((c, sc, sr))
                }
                _ => break,
            }
        }
        if cells.len() != span {
            continue;
        }
        let n = span as f64;
        let mean = |f: fn(&(f64, f64, f64)) -> f64| cells.iter().map(f).fold(0.0, |a, b| a + b) / n;
        let score = mean(|c| c.0) - p.lambda * mean(|c| c.1) - p.gamma * mean(|c| c.2);
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, t_lo));
        }
    }
    best.map(|(_, lo)| (lo, lo + span - 1))
}

/// Random table and parameters; even cases use dyadic values so exact ties occur.
pub fn random_case(case: u64) -> (TableColumns, WindowParams) {
    let rng = CounterRng::new(case, Domain::Fixture, 99);
    let mut k = 0u64;
    let mut u = || {
        k += 1;
        rng.uniform(k)
    };
    let steps = 4 + (u() * 197.0) as usize;
    let dyadic = case.is_multiple_of(2);
    let draw = |lo: f64, hi: f64, u: &mut dyn FnMut() -> f64| {
        let v = lo + (hi - lo) * u();
        if dyadic {
            (v * 2.0).round() / 2.0
        } else {
            v
        }
    };
    let absent_rate = [0.0, 0.05, 0.3][case as usize % 3];
    let mut cols = TableColumns {
        c_cos: vec![None; steps - 1],
        s_cos: vec![None; steps - 1],
        c_ratio: vec![None; steps - 1],
        s_ratio: vec![None; steps - 1],
    };
    for t in 1..steps.saturating_sub(1) {
        if u() < absent_rate {
            continue;
        }
        cols.c_cos[t] = Some(draw(-1.0, 1.0, &mut u));
        cols.c_ratio[t] = Some(draw(0.2, 3.0, &mut u));
        if u() < absent_rate / 2.0 {
            continue;
        }
        cols.s_cos[t] = Some(draw(0.0, 1.0, &mut u));
        cols.s_ratio[t] = Some(draw(0.0, 1.0, &mut u));
    }
    let max_span = steps.saturating_sub(2).clamp(1, 24);
    let p = WindowParams {
        n_skip: 1 + (u() * max_span as f64) as usize % max_span,
        lambda: draw(0.0, 2.0, &mut u),
        gamma: draw(0.0, 2.0, &mut u),
        tau_cos: (u() < 0.3).then(|| draw(-1.0, 0.5, &mut u)),
        t_upper: (u() < 0.3).then(|| steps / 4 + (u() * steps as f64) as usize),
        k_refresh: (u() < 0.3).then(|| 1 + (u() * 4.0) as usize),
        warmup_steps: (u() * 5.0) as usize,
        stream: Stream::Guided,
    };
    (cols, p)
}
