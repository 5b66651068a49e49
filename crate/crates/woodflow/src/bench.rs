//! Wall-clock benchmark harness for the invertible layer kinds.
//!
//! Each case times three phases of one layer at batch size 1: the training
//! path split into `forward_logdet` (taped forward plus log-determinant) and
//! `backward` (gradient of a scalar loss through that graph), and the
//! sampling path `inverse`. A dense-matrix layer — full c×c channel and n×n
//! spatial matrices, with an O(n³) factorization for its log-determinant and
//! inverse — serves as the super-linear baseline the structured layers are
//! compared against.

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::layers::{Conv1x1, MeWoodbury, Woodbury};
use crate::linalg;
use crate::rng::{self, STREAM_INIT};
use crate::tensor::Tensor;
use crate::Real;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// All parameters of every benchmarked layer derive from this seed, so a
/// repeated case times exactly the same computation.
const BENCH_SEED: u64 = 0xB3AC;

/// The dense baseline materializes several n×n buffers (the matrix, its LU
/// copy, the inverse built during backward, the gradient). Cases estimated
/// beyond this budget are skipped rather than risking the allocator.
const DENSE_MEM_BUDGET: u128 = 2 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Woodbury,
    MeWoodbury,
    Conv1x1,
    Dense,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Woodbury => "woodbury",
            LayerKind::MeWoodbury => "me_woodbury",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::Dense => "dense",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<LayerKind> {
        match s {
            "woodbury" => Ok(LayerKind::Woodbury),
            "me_woodbury" => Ok(LayerKind::MeWoodbury),
            "conv1x1" => Ok(LayerKind::Conv1x1),
            "dense" => Ok(LayerKind::Dense),
            other => Err(Error::Config(format!(
                "unknown layer kind {other:?}; expected woodbury, me_woodbury, \
                 conv1x1, or dense"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    ForwardLogdet,
    Backward,
    Inverse,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::ForwardLogdet, Phase::Backward, Phase::Inverse];

    pub fn name(self) -> &'static str {
        match self {
            Phase::ForwardLogdet => "forward_logdet",
            Phase::Backward => "backward",
            Phase::Inverse => "inverse",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchCase {
    pub layer: LayerKind,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Low-rank width; ignored by conv1x1 and dense.
    pub d: usize,
    pub reps: usize,
    pub warmup: usize,
    /// Recorded for provenance; the harness itself runs sequentially.
    pub threads: usize,
}

impl BenchCase {
    pub fn new(layer: LayerKind, c: usize, h: usize, w: usize, d: usize) -> BenchCase {
        BenchCase {
            layer,
            c,
            h,
            w,
            d,
            reps: 50,
            warmup: 5,
            threads: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.c == 0 || self.h == 0 || self.w == 0 || self.d == 0 {
            return Err(Error::Config(format!(
                "case {}x{}x{} d={} has a zero extent",
                self.c, self.h, self.w, self.d
            )));
        }
        if self.reps < 10 {
            return Err(Error::Config(format!(
                "need at least 10 repetitions, got {}",
                self.reps
            )));
        }
        if self.warmup < 3 {
            return Err(Error::Config(format!(
                "need at least 3 warmup repetitions, got {}",
                self.warmup
            )));
        }
        Ok(())
    }
}

impl fmt::Display for BenchCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} c={} {}x{} d={}",
            self.layer.name(),
            self.c,
            self.h,
            self.w,
            self.d
        )
    }
}

/// Seconds per op at the 10th/50th/90th percentile of the timed repetitions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
}

#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub case: BenchCase,
    pub forward_logdet: Stats,
    pub backward: Stats,
    pub inverse: Stats,
}

impl BenchRecord {
    pub fn stats(&self, phase: Phase) -> Stats {
        match phase {
            Phase::ForwardLogdet => self.forward_logdet,
            Phase::Backward => self.backward,
            Phase::Inverse => self.inverse,
        }
    }
}

#[derive(Debug, Default)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    /// Cases that were not run, with the reason.
    pub skipped: Vec<(BenchCase, String)>,
}

/// Run every case sequentially. Cases come back in input order; dense cases
/// whose memory estimate exceeds the budget are skipped and flagged.
pub fn run_bench(cases: &[BenchCase]) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for (index, case) in cases.iter().enumerate() {
        case.validate()?;
        if case.layer == LayerKind::Dense {
            let need = dense_mem_bytes(case.c, case.h * case.w);
            if need > DENSE_MEM_BUDGET {
                report.skipped.push((
                    case.clone(),
                    format!(
                        "dense baseline would need ~{} MiB of matrix memory \
                         (budget {} MiB)",
                        need >> 20,
                        DENSE_MEM_BUDGET >> 20
                    ),
                ));
                continue;
            }
        }
        let built = build_case(case, index as u64)?;
        report.records.push(bench_case(case, &built)?);
    }
    Ok(report)
}

fn dense_mem_bytes(c: usize, n: usize) -> u128 {
    4 * 8 * ((n as u128) * (n as u128) + (c as u128) * (c as u128))
}

/// CSV with one row per (case, phase), in case order then phase order.
pub fn csv_string(records: &[BenchRecord]) -> String {
    let mut out = String::from("layer,c,h,w,d,phase,median_s,p10_s,p90_s\n");
    for r in records {
        for phase in Phase::ALL {
            let s = r.stats(phase);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.9},{:.9},{:.9}",
                r.case.layer.name(),
                r.case.c,
                r.case.h,
                r.case.w,
                r.case.d,
                phase.name(),
                s.median_s,
                s.p10_s,
                s.p90_s
            );
        }
    }
    out
}

pub fn emit_csv(records: &[BenchRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, csv_string(records)).map_err(Error::Io)
}

enum Target {
    Woodbury(Woodbury),
    MeWoodbury(MeWoodbury),
    Conv1x1(Conv1x1),
    Dense(DenseLayer),
}

struct BuiltCase {
    store: ParamStore,
    target: Target,
    x: Tensor,
}

impl BuiltCase {
    fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        match &self.target {
            Target::Woodbury(l) => l.forward(&self.store, tape, x),
            Target::MeWoodbury(l) => l.forward(&self.store, tape, x),
            Target::Conv1x1(l) => l.forward(&self.store, tape, x),
            Target::Dense(l) => l.forward(&self.store, tape, x),
        }
    }

    fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        match &self.target {
            Target::Woodbury(l) => l.inverse(&self.store, y),
            Target::MeWoodbury(l) => l.inverse(&self.store, y),
            Target::Conv1x1(l) => l.inverse(&self.store, y),
            Target::Dense(l) => l.inverse(&self.store, y),
        }
    }
}

fn build_case(case: &BenchCase, index: u64) -> Result<BuiltCase> {
    let mut rng = rng::stream(BENCH_SEED, STREAM_INIT, index);
    let mut store = ParamStore::new();
    let (c, h, w, d) = (case.c, case.h, case.w, case.d);
    let target = match case.layer {
        LayerKind::Woodbury => Target::Woodbury(Woodbury::new(
            &mut store,
            &mut rng,
            "bench.woodbury",
            c,
            h,
            w,
            d.min(c),
            d.min(h * w),
        )?),
        LayerKind::MeWoodbury => Target::MeWoodbury(MeWoodbury::new(
            &mut store,
            &mut rng,
            "bench.me_woodbury",
            c,
            h,
            w,
            d.min(c),
            d.min(h),
            d.min(w),
        )?),
        LayerKind::Conv1x1 => Target::Conv1x1(Conv1x1::new(&mut store, &mut rng, "bench.conv1x1", c)),
        LayerKind::Dense => Target::Dense(DenseLayer::new(&mut store, c, h, w)),
    };

    // Move every parameter off its init point (V matrices start at zero;
    // timing the all-zero fast case would flatter the structured layers).
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let mut t = store.get(id).clone();
        for v in t.data_mut() {
            *v += noise.sample(&mut rng) as Real;
        }
        store.set(id, t)?;
    }

    let unit = Normal::new(0.0, 1.0).expect("valid std");
    let data = (0..c * h * w).map(|_| unit.sample(&mut rng) as Real).collect();
    let x = Tensor::new(vec![1, c, h, w], data)?;
    Ok(BuiltCase { store, target, x })
}

fn bench_case(case: &BenchCase, built: &BuiltCase) -> Result<BenchRecord> {
    let forward_logdet = time_reps(case, || {
        let mut tape = Tape::new();
        let x = tape.leaf(built.x.clone());
        built.forward(&mut tape, x).map(|_| ())
    })?;

    // Backward is timed over a fixed forward graph; the gradient itself is
    // recomputed from scratch on every repetition.
    let mut tape = Tape::new();
    let x = tape.leaf(built.x.clone());
    let (y, ld) = built.forward(&mut tape, x)?;
    let sum_y = tape.sum(y, &[0, 1, 2, 3])?;
    let sum_ld = tape.sum(ld, &[0])?;
    let loss = tape.add(sum_y, sum_ld)?;
    let backward = time_reps(case, || tape.backward(loss).map(|_| ()))?;

    let y_value = tape.value(y).clone();
    let inverse = time_reps(case, || built.inverse(&y_value).map(|_| ()))?;

    Ok(BenchRecord {
        case: case.clone(),
        forward_logdet,
        backward,
        inverse,
    })
}

fn time_reps(case: &BenchCase, mut op: impl FnMut() -> Result<()>) -> Result<Stats> {
    for _ in 0..case.warmup {
        op()?;
    }
    let mut times = Vec::with_capacity(case.reps);
    for _ in 0..case.reps {
        let start = Instant::now();
        op()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(Stats {
        median_s: quantile(&times, 0.5),
        p10_s: quantile(&times, 0.1),
        p90_s: quantile(&times, 0.9),
    })
}

/// Nearest-rank quantile: element at round(q * (len - 1)) of the sorted
/// sample.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

/// The naive alternative to the structured layers: the channel and spatial
/// transforms as explicit dense matrices. Forward cost is dominated by the
/// O(n³) log-determinant, backward by the O(n³) inverse-transpose, and
/// inverse by a fresh O(n³) factorization plus solves.
struct DenseLayer {
    w_c: ParamId,
    w_s: ParamId,
    c: usize,
    h: usize,
    w: usize,
}

impl DenseLayer {
    fn new(store: &mut ParamStore, c: usize, h: usize, w: usize) -> DenseLayer {
        let n = h * w;
        let w_c = store.register("bench.dense.w_c", Tensor::eye(c));
        let w_s = store.register("bench.dense.w_s", Tensor::eye(n));
        DenseLayer { w_c, w_s, c, h, w }
    }

    /// y = W_c · X · W_s on the (c, n) view; per-sample logdet is
    /// n·log|det W_c| + c·log|det W_s|.
    fn forward(&self, store: &ParamStore, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        let (c, h, w) = (self.c, self.h, self.w);
        let n = h * w;
        if tape.value(x).shape() != [1, c, h, w] {
            return Err(Error::Shape(format!(
                "dense baseline times single samples; expected [1, {c}, {h}, {w}], got {:?}",
                tape.value(x).shape()
            )));
        }
        let w_c = tape.param(store, self.w_c);
        let w_s = tape.param(store, self.w_s);
        let xm = tape.reshape(x, &[c, n])?;
        let channel_mixed = tape.matmul(w_c, xm)?;
        let spatial_mixed = tape.matmul(channel_mixed, w_s)?;
        let y = tape.reshape(spatial_mixed, &[1, c, h, w])?;

        let (ld_c, sign_c) = tape.slogdet(w_c)?;
        let (ld_s, sign_s) = tape.slogdet(w_s)?;
        if sign_c == 0 || sign_s == 0 {
            return Err(Error::Singular {
                context: "dense baseline matrix".into(),
            });
        }
        let ld_c = tape.scale(ld_c, n as Real)?;
        let ld_s = tape.scale(ld_s, c as Real)?;
        let ld = tape.add(ld_c, ld_s)?;
        let ld = tape.broadcast(ld, &[1])?;
        Ok((y, ld))
    }

    /// X = W_c⁻¹ · Y · W_s⁻¹ with fresh factorizations per call (nothing is
    /// cached, matching a sampler that materializes the inverse on demand).
    fn inverse(&self, store: &ParamStore, y: &Tensor) -> Result<Tensor> {
        let (c, h, w) = (self.c, self.h, self.w);
        let n = h * w;
        if y.shape() != [1, c, h, w] {
            return Err(Error::Shape(format!(
                "dense baseline inverts single samples; expected [1, {c}, {h}, {w}], got {:?}",
                y.shape()
            )));
        }
        let singular = || Error::Singular {
            context: "dense baseline matrix".into(),
        };

        // Right factor: Z = Y · W_s⁻¹, solved as W_sᵀ Zᵀ = Yᵀ.
        let mut wst = linalg::transpose(store.get(self.w_s).data(), n, n);
        let f_s = linalg::lu_factor_inplace(&mut wst, n);
        if f_s.sign == 0 {
            return Err(singular());
        }
        let mut yt = linalg::transpose(y.data(), c, n);
        linalg::lu_solve_rows(&wst, &f_s.piv, n, &mut yt, c)?;
        let mut z = linalg::transpose(&yt, n, c);

        // Left factor: W_c X = Z.
        let mut wc = store.get(self.w_c).data().to_vec();
        let f_c = linalg::lu_factor_inplace(&mut wc, c);
        if f_c.sign == 0 {
            return Err(singular());
        }
        linalg::lu_solve_rows(&wc, &f_c.piv, c, &mut z, n)?;
        Tensor::new(vec![1, c, h, w], z)
    }
}
