//! Inference timing and closed-loop error comparisons.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{episodic_mae, oracle_episode, random_policy, Episode, TransitionModel};
use crate::env::{GridModel, ResetMode};
use crate::error::{Error, Result};
use crate::grid::{Action, GridState, NetworkSpec};
use crate::pinn::Surrogate;
use crate::rl::Policy;

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n: usize,
    /// Seconds per transition, one sample per call.
    pub oracle_samples: Vec<f64>,
    pub surrogate_samples: Vec<f64>,
    pub oracle_median_s: f64,
    pub surrogate_median_s: f64,
    /// Oracle median over surrogate median.
    pub speedup: f64,
    pub batch: BatchTiming,
}

/// Per-transition cost when stepping `size` transitions per call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchTiming {
    pub size: usize,
    pub oracle_s: f64,
    pub surrogate_s: f64,
    pub speedup: f64,
}

impl BenchReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from("sample,oracle_s,surrogate_s\n");
        for (i, (o, s)) in self.oracle_samples.iter().zip(&self.surrogate_samples).enumerate() {
            out.push_str(&format!("{i},{o},{s}\n"));
        }
        write_text(path.as_ref(), &out)
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let b = &self.batch;
        let out = format!(
            "mode,n,oracle_s,surrogate_s,speedup\nsingle,{},{},{},{}\nbatch{},{},{},{},{}\n",
            self.n,
            self.oracle_median_s,
            self.surrogate_median_s,
            self.speedup,
            b.size,
            self.n,
            b.oracle_s,
            b.surrogate_s,
            b.speedup
        );
        write_text(path.as_ref(), &out)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Random reachable `(state, action)` pairs for timing.
fn timing_pairs(spec: &NetworkSpec, model: &GridModel, n: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
    let (lo, hi) = spec.action_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Array2::zeros((n, spec.state_dim()));
    let mut a = Array2::zeros((n, spec.action_dim()));
    for i in 0..n {
        s.row_mut(i)
            .assign(&Array1::from(model.reset(ResetMode::UniformRandom, rng.random()).encode()));
        for j in 0..lo.len() {
            a[(i, j)] = rng.random_range(lo[j]..=hi[j]);
        }
    }
    (s, a)
}

/// Times `n` single transitions on the oracle and on the surrogate over the
/// same inputs, after a warm-up pass. Only the step call is inside the clock.
pub fn bench_inference(spec: Arc<NetworkSpec>, surrogate: &Surrogate, n: usize, seed: u64) -> Result<BenchReport> {
    if n == 0 {
        return Err(Error::invariant("n", "must be at least 1"));
    }
    let model = GridModel::new(spec.clone());
    let (s, a) = timing_pairs(&spec, &model, n, seed);
    let decoded: Vec<(GridState, Action)> = (0..n)
        .map(|i| {
            Ok((
                GridState::decode(&spec, &s.row(i).to_vec())?,
                Action::decode(&spec, &a.row(i).to_vec())?,
            ))
        })
        .collect::<Result<_>>()?;
    let warm = n.min(50);
    for (st, ac) in &decoded[..warm] {
        model.step(st, ac)?;
        surrogate.step(st, ac)?;
    }
    let mut oracle_samples = Vec::with_capacity(n);
    let mut surrogate_samples = Vec::with_capacity(n);
    for (st, ac) in &decoded {
        let t = Instant::now();
        let r = model.step(st, ac)?;
        oracle_samples.push(t.elapsed().as_secs_f64());
        std::hint::black_box(r);
        let t = Instant::now();
        let r = surrogate.step(st, ac)?;
        surrogate_samples.push(t.elapsed().as_secs_f64());
        std::hint::black_box(r);
    }
    let batch = bench_batch(&model, surrogate, s.view(), a.view(), &decoded, 100)?;
    let (om, sm) = (median(&oracle_samples), median(&surrogate_samples));
    Ok(BenchReport {
        n,
        oracle_samples,
        surrogate_samples,
        oracle_median_s: om,
        surrogate_median_s: sm,
        speedup: om / sm,
        batch,
    })
}

fn bench_batch(
    model: &GridModel,
    surrogate: &Surrogate,
    s: ArrayView2<f64>,
    a: ArrayView2<f64>,
    decoded: &[(GridState, Action)],
    size: usize,
) -> Result<BatchTiming> {
    let size = size.min(s.nrows());
    let chunks = s.nrows() / size;
    let (mut o, mut g) = (Vec::with_capacity(chunks), Vec::with_capacity(chunks));
    for c in 0..chunks {
        let r = c * size..(c + 1) * size;
        let t = Instant::now();
        for (st, ac) in &decoded[r.clone()] {
            std::hint::black_box(model.step(st, ac)?);
        }
        o.push(t.elapsed().as_secs_f64() / size as f64);
        let (sb, ab) = (s.slice(ndarray::s![r.clone(), ..]), a.slice(ndarray::s![r, ..]));
        let t = Instant::now();
        std::hint::black_box(surrogate.step_batch(sb, ab)?);
        g.push(t.elapsed().as_secs_f64() / size as f64);
    }
    let (om, gm) = (median(&o), median(&g));
    Ok(BatchTiming {
        size,
        oracle_s: om,
        surrogate_s: gm,
        speedup: om / gm,
    })
}

// ---------------------------------------------------------------------------
// Closed-loop comparison

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Random,
    Expert,
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyKind::Random => "random",
            PolicyKind::Expert => "expert",
        })
    }
}

/// Per-step episodic MAE of one model under one driving policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodicRow {
    /// e.g. `pinn`, `linear-agent`, `mlp-generative`.
    pub model: String,
    pub policy: PolicyKind,
    pub per_step: Vec<f64>,
    pub mean: f64,
}

/// Oracle episodes driven by the uniform-random policy and by a trained
/// (deterministic) expert, each `len` steps without a collapse.
pub fn comparison_episodes(spec: &NetworkSpec, expert: &Policy, len: usize, seed: u64) -> Result<[(PolicyKind, Episode); 2]> {
    let random = oracle_episode(spec, len, seed, 200, &mut random_policy(spec))?;
    let mut act = |s: &[f64], _: &mut ChaCha8Rng| -> Vec<f64> {
        let row = ArrayView2::from_shape((1, s.len()), s).expect("state row");
        expert.act_deterministic(row).expect("policy dims").row(0).to_vec()
    };
    let expert_ep = oracle_episode(spec, len, seed.wrapping_add(1), 200, &mut act)?;
    Ok([(PolicyKind::Random, random), (PolicyKind::Expert, expert_ep)])
}

/// Episodic MAE of every named model on every episode.
pub fn episodic_comparison(
    spec: &NetworkSpec,
    models: &[(String, &dyn TransitionModel)],
    episodes: &[(PolicyKind, Episode)],
) -> Result<Vec<EpisodicRow>> {
    let mut rows = Vec::new();
    for (kind, ep) in episodes {
        for (name, m) in models {
            let e = episodic_mae(spec, *m, ep)?;
            rows.push(EpisodicRow {
                model: name.clone(),
                policy: *kind,
                per_step: e.per_step,
                mean: e.mean,
            });
        }
    }
    Ok(rows)
}

/// Long-format series: one line per (model, policy, step).
pub fn write_episodic_csv(path: impl AsRef<Path>, rows: &[EpisodicRow]) -> Result<()> {
    let mut out = String::from("model,policy,step,mae\n");
    for r in rows {
        for (t, v) in r.per_step.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", r.model, r.policy, t + 1, v));
        }
    }
    write_text(path.as_ref(), &out)
}
