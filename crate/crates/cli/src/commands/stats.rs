use std::path::Path;

use anyhow::Context;
use taocache::tensor::{delta, delta_stats};
use taocache::trace::read_trace_file;
use taocache::{Latent, NoisePred, Stream, Trace};

use crate::output::{cell, OutputDir};

pub const STATS_FILE: &str = "stats.csv";

/// Per-step statistics of one stream of one trace, indexed by `t`.
struct Curves {
    cos: Vec<Option<f64>>,
    ratio: Vec<Option<f64>>,
    /// `‖x_t − x_{t+1}‖₁ / ‖x_{t+1}‖₁`.
    input_rel_l1: Vec<Option<f64>>,
    /// Same measure on the noise predictions.
    output_rel_l1: Vec<Option<f64>>,
    /// Cosine between consecutive residuals `ε_t − x_t`.
    residual_cos: Vec<Option<f64>>,
}

fn rel_l1(curr: &Latent, prev: &Latent) -> taocache::Result<Option<f64>> {
    let denom = prev.norm_l1();
    (denom > 0.0)
        .then(|| curr.sub(prev).map(|d| d.norm_l1() / denom))
        .transpose()
}

fn cosine(a: &Latent, b: &Latent) -> taocache::Result<Option<f64>> {
    let n = a.norm_l2() * b.norm_l2();
    (n > 0.0)
        .then(|| a.dot(b).map(|d| (d / n).clamp(-1.0, 1.0)))
        .transpose()
}

fn curves(trace: &Trace, stream: Stream, with_latents: bool) -> taocache::Result<Curves> {
    let steps = trace.meta.steps as usize;
    let shape = trace.meta.shape.clone();
    let mut eps: Vec<Option<NoisePred>> = vec![None; steps + 1];
    let mut xs: Vec<Option<Latent>> = vec![None; steps + 1];
    for r in trace.records.iter().filter(|r| r.stream == stream) {
        eps[r.t as usize] = Some(NoisePred::from_f32(shape.clone(), &r.eps)?);
        if let Some(x) = &r.latent {
            xs[r.t as usize] = Some(Latent::from_f32(shape.clone(), x)?);
        }
    }
    let mut c = Curves {
        cos: vec![None; steps],
        ratio: vec![None; steps],
        input_rel_l1: vec![None; steps],
        output_rel_l1: vec![None; steps],
        residual_cos: vec![None; steps],
    };
    let at = |v: &[Option<Latent>], t: usize| v[t].clone().ok_or(taocache::Error::TraceIncomplete { t, stream });
    for t in 1..steps {
        let (e0, e1) = (at(&eps, t)?, at(&eps, t + 1)?);
        let d0 = delta(&e0, &e1)?;
        if t + 2 <= steps {
            let s = delta_stats(&d0, &delta(&e1, &at(&eps, t + 2)?)?)?;
            c.cos[t] = s.cos();
            c.ratio[t] = s.ratio();
        }
        if with_latents {
            let (x0, x1) = (at(&xs, t)?, at(&xs, t + 1)?);
            c.input_rel_l1[t] = rel_l1(&x0, &x1)?;
            c.output_rel_l1[t] = rel_l1(&e0, &e1)?;
            c.residual_cos[t] = cosine(&e0.sub(&x0)?, &e1.sub(&x1)?)?;
        }
    }
    Ok(c)
}

pub fn run(traces: &[impl AsRef<Path>], out: &OutputDir) -> anyhow::Result<()> {
    let mut loaded = Vec::with_capacity(traces.len());
    for path in traces {
        let path = path.as_ref();
        let trace = read_trace_file(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace").to_string();
        loaded.push((name, trace));
    }
    let with_latents = loaded.iter().all(|(_, t)| t.has_latents());
    if !with_latents {
        eprintln!("warning: some traces carry no latents; residual columns omitted");
    }

    let mut w = out.csv(STATS_FILE)?;
    let mut header = vec!["trace", "stream", "t", "cos", "ratio"];
    if with_latents {
        header.extend(["input_rel_l1", "output_rel_l1", "residual_cos"]);
    }
    w.write_record(&header)?;
    for (name, trace) in &loaded {
        for stream in trace.meta.streams() {
            let c = curves(trace, stream, with_latents).with_context(|| format!("trace {name}, stream {stream}"))?;
            for t in 1..trace.meta.steps as usize {
                let mut row = vec![
                    name.clone(),
                    stream.as_str().into(),
                    t.to_string(),
                    cell(c.cos[t]),
                    cell(c.ratio[t]),
                ];
                if with_latents {
                    row.extend([
                        cell(c.input_rel_l1[t]),
                        cell(c.output_rel_l1[t]),
                        cell(c.residual_cos[t]),
                    ]);
                }
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    eprintln!(
        "wrote statistics for {} traces to {}",
        loaded.len(),
        out.path(STATS_FILE).display()
    );
    Ok(())
}
