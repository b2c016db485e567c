//! Attention scaling benchmark: wall time and peak allocation of each
//! mechanism across token counts, and the fitted log-log slope.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unetrpp_tensor::{no_grad, Tensor};

use crate::epa::{
    channel_attention, channel_attention_flops, spatial_attention, spatial_attention_flops, standard_attention,
    standard_attention_flops,
};
use crate::error::{Error, Result};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// Global allocator wrapper recording live and peak heap bytes. Register
/// it with `#[global_allocator]` in a binary to enable peak measurement.
pub struct TrackingAlloc;

unsafe impl GlobalAlloc for TrackingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

/// Measures the peak of live heap bytes above the starting level while
/// `f` runs. Returns 0 unless [`TrackingAlloc`] is the global allocator.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (out, PEAK.load(Ordering::Relaxed).saturating_sub(base))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mechanism {
    EpaSpatial,
    EpaChannel,
    Standard,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::EpaSpatial, Mechanism::EpaChannel, Mechanism::Standard];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::EpaSpatial => "epa_spatial",
            Mechanism::EpaChannel => "epa_channel",
            Mechanism::Standard => "standard",
        }
    }

    pub fn analytic_flops(self, n: usize, p: usize, c: usize, h: usize) -> u64 {
        match self {
            Mechanism::EpaSpatial => spatial_attention_flops(n, p, c),
            Mechanism::EpaChannel => channel_attention_flops(n, c, h),
            Mechanism::Standard => standard_attention_flops(n, c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub mechanism: Mechanism,
    pub n: usize,
    pub p: usize,
    pub c: usize,
    pub h: usize,
    pub analytic_flops: u64,
    /// Median over trials.
    pub wall_ns: u64,
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub p: usize,
    pub c: usize,
    pub heads: usize,
    pub trials: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns.len() < 4 {
            return Err(Error::Config(format!("need at least 4 token counts for a fit, got {}", self.ns.len())));
        }
        if self.ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("token counts must be strictly ascending".into()));
        }
        if self.trials < 5 {
            return Err(Error::Config(format!("need at least 5 trials, got {}", self.trials)));
        }
        if self.p == 0 || self.p > self.ns[0] {
            return Err(Error::Config(format!("p = {} must lie in 1..={}", self.p, self.ns[0])));
        }
        if self.heads == 0 || !self.c.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("C = {} not divisible by {} heads", self.c, self.heads)));
        }
        Ok(())
    }
}

struct Inputs {
    q: Tensor<f32>,
    k: Tensor<f32>,
    v: Tensor<f32>,
    k_proj: Tensor<f32>,
    v_proj: Tensor<f32>,
}

fn inputs(rng: &mut ChaCha8Rng, n: usize, p: usize, c: usize) -> Inputs {
    let mut t = |shape: &[usize], s: f32| Tensor::from_fn(shape, |_| rng.random_range(-s..s));
    let proj_scale = 1.0 / (n as f32).sqrt();
    Inputs {
        q: t(&[n, c], 1.0),
        k: t(&[n, c], 1.0),
        v: t(&[n, c], 1.0),
        k_proj: t(&[p, n], proj_scale),
        v_proj: t(&[p, n], proj_scale),
    }
}

fn run_once(m: Mechanism, x: &Inputs, h: usize) -> Result<Tensor<f32>> {
    match m {
        Mechanism::EpaSpatial => spatial_attention(&x.q, &x.k, &x.v, &x.k_proj, &x.v_proj, h),
        Mechanism::EpaChannel => channel_attention(&x.q, &x.k, &x.v, h),
        Mechanism::Standard => standard_attention(&x.q, &x.k, &x.v, h),
    }
}

/// Shortest timed trial; faster calls are repeated inside one trial.
const MIN_TRIAL_NS: u128 = 20_000_000;

struct Case {
    n: usize,
    x: Inputs,
    reps: u32,
    peak_bytes: usize,
    times: Vec<u64>,
}

/// Benchmarks one mechanism across `cfg.ns`. Each size gets an untimed
/// warm-up (which also records peak allocation); timed trials then go
/// round-robin over the sizes so slow drift in machine speed hits every
/// size alike. The recorded time is the median per-call time of the trials.
fn bench_mechanism(m: Mechanism, cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    let _guard = no_grad();
    let mut cases = Vec::with_capacity(cfg.ns.len());
    for &n in &cfg.ns {
        let x = inputs(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ n as u64), n, cfg.p, cfg.c);
        let start = Instant::now();
        let (out, peak_bytes) = measure_peak(|| run_once(m, &x, cfg.heads));
        let warm = start.elapsed().as_nanos().max(1);
        drop(out?);
        let reps = (MIN_TRIAL_NS / warm).clamp(1, 1000) as u32;
        cases.push(Case { n, x, reps, peak_bytes, times: Vec::with_capacity(cfg.trials) });
    }
    for _ in 0..cfg.trials {
        for case in &mut cases {
            let start = Instant::now();
            for _ in 0..case.reps {
                drop(run_once(m, &case.x, cfg.heads)?);
            }
            case.times.push((start.elapsed().as_nanos() / u128::from(case.reps)) as u64);
        }
    }
    Ok(cases
        .into_iter()
        .map(|mut case| {
            case.times.sort_unstable();
            BenchRecord {
                mechanism: m,
                n: case.n,
                p: cfg.p,
                c: cfg.c,
                h: cfg.heads,
                analytic_flops: m.analytic_flops(case.n, cfg.p, cfg.c, cfg.heads),
                wall_ns: case.times[case.times.len() / 2].max(1),
                peak_bytes: case.peak_bytes,
            }
        })
        .collect())
}

pub fn run(
    cfg: &BenchConfig,
    mechanisms: &[Mechanism],
    mut on_record: impl FnMut(&BenchRecord),
) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &m in mechanisms {
        for rec in bench_mechanism(m, cfg)? {
            on_record(&rec);
            out.push(rec);
        }
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Config("slope fit needs at least two points".into()));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Config("slope fit needs positive values".into()));
    }
    let m = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("slope fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Fitted wall-time exponent per mechanism present in `records`.
pub fn fit_slopes(records: &[BenchRecord]) -> Result<Vec<(Mechanism, f64)>> {
    let mut out = Vec::new();
    for m in Mechanism::ALL {
        let pts: Vec<(f64, f64)> =
            records.iter().filter(|r| r.mechanism == m).map(|r| (r.n as f64, r.wall_ns as f64)).collect();
        if !pts.is_empty() {
            out.push((m, loglog_slope(&pts)?));
        }
    }
    Ok(out)
}
