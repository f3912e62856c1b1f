//! Linear visual/audio projections trained with a bidirectional contrastive
//! loss.
//!
//! For a batch of pairs `(x_i, y_i)` the projected, L2-normalised vectors
//! are `c_i = W_v^T x_i / |.|` and `t_i = W_a^T y_i / |.|`, with scaled
//! similarities `s_ij = c_i . t_j / tau`. The loss is
//!
//! ```text
//! L = -Σ_i log( e^{s_ii} / (Σ_j e^{s_ij} + Σ_k e^{s_ki}) )
//! ```
//!
//! The positive pair appears in both denominator sums, so every term is at
//! least `ln 2` and a one-pair batch has loss exactly `ln 2`.

use std::fs;
use std::io::{BufRead, Read};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::index::EmbeddingVector;

pub const PARAMS_MAGIC: [u8; 8] = *b"VCTXPRJ\0";
pub const PARAMS_VERSION: u32 = 1;
/// Default projection width.
pub const DEFAULT_D_OUT: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("temperature must be > 0, got {0}")]
    Temperature(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("need at least 2 pairs to train, got {0}")]
    TooFewPairs(usize),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("bad params file: {0}")]
    Format(String),
    #[error("paired embeddings line {line}: {message}")]
    Pairs { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major `d_in x d_out` projection matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    d_in: usize,
    d_out: usize,
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
}

impl ProjectionParams {
    pub fn new(d_in: usize, d_out: usize, visual: Vec<f64>, audio: Vec<f64>) -> Result<Self, AlignError> {
        for m in [&visual, &audio] {
            if m.len() != d_in * d_out {
                return Err(AlignError::Dimension { expected: d_in * d_out, found: m.len() });
            }
        }
        Ok(Self { d_in, d_out, visual, audio })
    }

    /// Gaussian init with standard deviation `1 / sqrt(d_in)`.
    pub fn random(d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
        };
        let visual = draw(d_in * d_out);
        let audio = draw(d_in * d_out);
        Self { d_in, d_out, visual, audio }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn project_visual(&self, e: &EmbeddingVector) -> EmbeddingVector {
        self.project(&self.visual, e)
    }

    pub fn project_audio(&self, e: &EmbeddingVector) -> EmbeddingVector {
        self.project(&self.audio, e)
    }

    fn project(&self, w: &[f64], e: &EmbeddingVector) -> EmbeddingVector {
        let x: Vec<f64> = e.as_slice().iter().map(|v| f64::from(*v)).collect();
        EmbeddingVector::from_f64(&matvec_t(w, self.d_in, self.d_out, &x))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity((self.visual.len() + self.audio.len()) * 8);
        for v in self.visual.iter().chain(&self.audio) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut out = Vec::with_capacity(payload.len() + 24);
        out.extend_from_slice(&PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_in as u32).to_le_bytes());
        out.extend_from_slice(&(self.d_out as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AlignError> {
        if bytes.len() < 24 || bytes[..8] != PARAMS_MAGIC {
            return Err(AlignError::Format("missing header".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(8);
        if version != PARAMS_VERSION {
            return Err(AlignError::Format(format!("version {version}, expected {PARAMS_VERSION}")));
        }
        let (d_in, d_out) = (word(12) as usize, word(16) as usize);
        let n = d_in * d_out;
        if bytes.len() != 20 + 16 * n + 4 {
            return Err(AlignError::Format("length does not match dimensions".into()));
        }
        let payload = &bytes[20..20 + 16 * n];
        if crc32fast::hash(payload) != word(20 + 16 * n) {
            return Err(AlignError::Format("checksum mismatch".into()));
        }
        let vals: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(d_in, d_out, vals[..n].to_vec(), vals[n..].to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AlignError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AlignError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// `W^T x` for row-major `W` of shape `d_in x d_out`.
fn matvec_t(w: &[f64], d_in: usize, d_out: usize, x: &[f64]) -> Vec<f64> {
    let mut u = vec![0.0; d_out];
    for (n, xn) in x.iter().enumerate().take(d_in) {
        if *xn == 0.0 {
            continue;
        }
        let row = &w[n * d_out..(n + 1) * d_out];
        for (um, wm) in u.iter_mut().zip(row) {
            *um += wm * xn;
        }
    }
    u
}

/// Corresponding (visual, audio) input embeddings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignBatch {
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AlignBatch {
    pub fn new(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Gradients with the same layout as [`ProjectionParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
}

struct Projected {
    dirs: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn project_all(w: &[f64], d_in: usize, d_out: usize, xs: impl Iterator<Item = Vec<f64>>) -> Projected {
    let mut dirs = Vec::new();
    let mut norms = Vec::new();
    for x in xs {
        let mut u = matvec_t(w, d_in, d_out, &x);
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        u.iter_mut().for_each(|v| *v /= n);
        dirs.push(u);
        norms.push(n);
    }
    Projected { dirs, norms }
}

fn check_batch(batch: &AlignBatch, params: &ProjectionParams, tau: f64) -> Result<(), AlignError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(AlignError::Temperature(tau));
    }
    if batch.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    for (x, y) in &batch.pairs {
        for v in [x, y] {
            if v.len() != params.d_in {
                return Err(AlignError::Dimension { expected: params.d_in, found: v.len() });
            }
        }
    }
    Ok(())
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss only (no gradients).
pub fn contrastive_loss_value(batch: &AlignBatch, params: &ProjectionParams, tau: f64) -> Result<f64, AlignError> {
    check_batch(batch, params, tau)?;
    let (d_in, d_out) = (params.d_in, params.d_out);
    let c = project_all(&params.visual, d_in, d_out, batch.pairs.iter().map(|p| p.0.clone()));
    let t = project_all(&params.audio, d_in, d_out, batch.pairs.iter().map(|p| p.1.clone()));
    let s = similarity(&c.dirs, &t.dirs, tau);
    Ok(loss_from_sims(&s).0)
}

fn similarity(c: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    c.iter()
        .map(|ci| t.iter().map(|tj| ci.iter().zip(tj).map(|(a, b)| a * b).sum::<f64>() / tau).collect())
        .collect()
}

/// Returns the loss and the per-anchor log partition functions.
fn loss_from_sims(s: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let b = s.len();
    let mut log_z = Vec::with_capacity(b);
    let mut loss = 0.0;
    for i in 0..b {
        let lz = log_sum_exp((0..b).map(|j| s[i][j]).chain((0..b).map(|k| s[k][i])));
        loss += lz - s[i][i];
        log_z.push(lz);
    }
    (loss, log_z)
}

/// Loss and analytic gradients with respect to both projection matrices.
pub fn contrastive_loss(batch: &AlignBatch, params: &ProjectionParams, tau: f64) -> Result<(f64, Gradients), AlignError> {
    check_batch(batch, params, tau)?;
    let (d_in, d_out) = (params.d_in, params.d_out);
    let b = batch.len();
    let c = project_all(&params.visual, d_in, d_out, batch.pairs.iter().map(|p| p.0.clone()));
    let t = project_all(&params.audio, d_in, d_out, batch.pairs.iter().map(|p| p.1.clone()));
    let s = similarity(&c.dirs, &t.dirs, tau);
    let (loss, log_z) = loss_from_sims(&s);

    // dL/ds_ab: s_ab sits in anchor a's row sum and anchor b's column sum.
    let mut g = vec![vec![0.0; b]; b];
    for a in 0..b {
        for bb in 0..b {
            let diag = if a == bb { 1.0 } else { 0.0 };
            g[a][bb] = (s[a][bb] - log_z[a]).exp() + (s[a][bb] - log_z[bb]).exp() - diag;
        }
    }

    let mut grad_v = vec![0.0; d_in * d_out];
    let mut grad_a = vec![0.0; d_in * d_out];
    for a in 0..b {
        let mut dc = vec![0.0; d_out];
        let mut dt = vec![0.0; d_out];
        for o in 0..b {
            for m in 0..d_out {
                dc[m] += g[a][o] * t.dirs[o][m] / tau;
                dt[m] += g[o][a] * c.dirs[o][m] / tau;
            }
        }
        let du = through_norm(&c.dirs[a], c.norms[a], &dc);
        let dv = through_norm(&t.dirs[a], t.norms[a], &dt);
        outer_acc(&mut grad_v, &batch.pairs[a].0, &du);
        outer_acc(&mut grad_a, &batch.pairs[a].1, &dv);
    }
    Ok((loss, Gradients { visual: grad_v, audio: grad_a }))
}

/// Backpropagates through `c = u / |u|`.
fn through_norm(dir: &[f64], norm: f64, dc: &[f64]) -> Vec<f64> {
    let proj: f64 = dir.iter().zip(dc).map(|(a, b)| a * b).sum();
    dir.iter().zip(dc).map(|(d, g)| (g - d * proj) / norm).collect()
}

fn outer_acc(grad: &mut [f64], x: &[f64], du: &[f64]) {
    let d_out = du.len();
    for (n, xn) in x.iter().enumerate() {
        if *xn == 0.0 {
            continue;
        }
        let row = &mut grad[n * d_out..(n + 1) * d_out];
        for (r, d) in row.iter_mut().zip(du) {
            *r += xn * d;
        }
    }
}

/// Summary of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over parameters of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

/// Magnitude below which gradient components are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Central finite differences over every parameter versus the analytic
/// gradient.
pub fn grad_check(params: &ProjectionParams, batch: &AlignBatch, tau: f64, epsilon: f64) -> Result<GradCheckReport, AlignError> {
    let (_, grads) = contrastive_loss(batch, params, tau)?;
    let mut p = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, max_abs_analytic: 0.0, max_abs_numeric: 0.0 };
    for which in 0..2 {
        let n = p.d_in * p.d_out;
        for i in 0..n {
            let original = if which == 0 { p.visual[i] } else { p.audio[i] };
            let set = |p: &mut ProjectionParams, v: f64| {
                if which == 0 {
                    p.visual[i] = v;
                } else {
                    p.audio[i] = v;
                }
            };
            set(&mut p, original + epsilon);
            let plus = contrastive_loss_value(batch, &p, tau)?;
            set(&mut p, original - epsilon);
            let minus = contrastive_loss_value(batch, &p, tau)?;
            set(&mut p, original);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let analytic = if which == 0 { grads.visual[i] } else { grads.audio[i] };
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_abs_analytic = report.max_abs_analytic.max(analytic.abs());
            report.max_abs_numeric = report.max_abs_numeric.max(numeric.abs());
        }
    }
    Ok(report)
}

/// SGD schedule; the learning rate at step `t` (1-based) is
/// `base_eta / sqrt(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub base_eta: f64,
    pub steps: usize,
    pub tau: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { base_eta: 0.1, steps: 2000, tau: 0.05, batch_size: 8, seed: 0 }
    }
}

impl TrainSchedule {
    pub fn learning_rate(&self, step: usize) -> f64 {
        self.base_eta / (step.max(1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ProjectionParams,
    /// Minibatch loss before each update.
    pub losses: Vec<f64>,
    /// Minibatch size used for every step.
    pub batch_size: usize,
}

/// Plain SGD over minibatches drawn without replacement from `pairs`.
pub fn train_alignment(
    pairs: &[(Vec<f64>, Vec<f64>)],
    init: ProjectionParams,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome, AlignError> {
    if pairs.len() < 2 {
        return Err(AlignError::TooFewPairs(pairs.len()));
    }
    if !(schedule.tau > 0.0) {
        return Err(AlignError::Temperature(schedule.tau));
    }
    let bs = schedule.batch_size.clamp(1, pairs.len());
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut params = init;
    let mut losses = Vec::with_capacity(schedule.steps);
    for step in 1..=schedule.steps {
        let picks = sample(&mut rng, pairs.len(), bs);
        let batch = AlignBatch::new(picks.iter().map(|i| pairs[i].clone()).collect());
        let (loss, g) = contrastive_loss(&batch, &params, schedule.tau)?;
        if !loss.is_finite() || g.visual.iter().chain(&g.audio).any(|v| !v.is_finite()) {
            return Err(AlignError::Diverged { step, loss });
        }
        let eta = schedule.learning_rate(step);
        params.visual.iter_mut().zip(&g.visual).for_each(|(w, d)| *w -= eta * d);
        params.audio.iter_mut().zip(&g.audio).for_each(|(w, d)| *w -= eta * d);
        losses.push(loss);
    }
    Ok(TrainOutcome { params, losses, batch_size: bs })
}

/// Mean cosine of matching and of non-matching projected pairs.
pub fn alignment_margin(params: &ProjectionParams, pairs: &[(Vec<f64>, Vec<f64>)]) -> (f64, f64) {
    let (d_in, d_out) = (params.d_in, params.d_out);
    let c = project_all(&params.visual, d_in, d_out, pairs.iter().map(|p| p.0.clone()));
    let t = project_all(&params.audio, d_in, d_out, pairs.iter().map(|p| p.1.clone()));
    let s = similarity(&c.dirs, &t.dirs, 1.0);
    let n = pairs.len();
    let pos = (0..n).map(|i| s[i][i]).sum::<f64>() / n as f64;
    let neg_count = n * n - n;
    let neg = if neg_count == 0 {
        0.0
    } else {
        (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| s[i][j])
            .sum::<f64>()
            / neg_count as f64
    };
    (pos, neg)
}

/// Least-squares slope of `ln(loss_t - floor)` against `ln t` over
/// `t in [from, to]` (1-based). Points at or below the floor are skipped.
pub fn loglog_slope(losses: &[f64], floor: f64, from: usize, to: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = (from.max(1)..=to.min(losses.len()))
        .filter_map(|t| {
            let gap = losses[t - 1] - floor;
            (gap > 0.0).then(|| ((t as f64).ln(), gap.ln()))
        })
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Deserialize)]
struct PairRecord {
    visual: Vec<f64>,
    audio: Vec<f64>,
}

/// Reads `{"visual": [...], "audio": [...]}` lines.
pub fn read_pairs<R: BufRead>(reader: R) -> Result<Vec<(Vec<f64>, Vec<f64>)>, AlignError> {
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)
            .map_err(|e| AlignError::Pairs { line: i + 1, message: e.to_string() })?;
        let d = *dim.get_or_insert(rec.visual.len());
        if rec.visual.len() != d || rec.audio.len() != d {
            return Err(AlignError::Pairs { line: i + 1, message: format!("expected dimension {d}") });
        }
        out.push((rec.visual, rec.audio));
    }
    Ok(out)
}

/// Synthetic task: unit Gaussian visual vectors and audio vectors that are
/// a fixed random rotation of them.
pub fn rotation_pairs(n: usize, dim: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = random_orthogonal(dim, &mut rng);
    (0..n)
        .map(|_| {
            let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= nx);
            let y: Vec<f64> = (0..dim)
                .map(|r| (0..dim).map(|c| rot[r * dim + c] * x[c]).sum())
                .collect();
            (x, y)
        })
        .collect()
}

/// Gram-Schmidt on a Gaussian matrix; row-major.
fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            rows.push(v);
        }
    }
    rows.into_iter().flatten().collect()
}
