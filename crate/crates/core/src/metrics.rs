//! Evaluation metrics and desk-scale simulations of the theory behind the
//! align cache: retention-ratio consistency and the local density constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::caches::CacheKind;
use crate::error::{Error, Result};
use crate::inference::{Engine, EngineConfig};
use crate::io::run::run_engine;
use crate::io::synth::{synth_in_memory, SynthSpec};
use crate::math::{euclidean, mean_rows};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactnessReport {
    /// Mean distance to the class center; `None` for classes with < 2 samples.
    pub per_class_mean_distance: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// Sample-weighted mean distance over classes with ≥ 2 samples.
    pub grand_mean_distance: f64,
    /// `1 / grand_mean_distance`; `+∞` when every sample sits on its center.
    pub compactness: f64,
}

/// Compactness of labeled features: the inverse of the average Euclidean
/// distance between each sample and its (unnormalized) class mean.
pub fn compactness(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<CompactnessReport> {
    if features.len() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    let dim = features.first().map(Vec::len).unwrap_or(0);
    let mut by_class: Vec<Vec<&[f64]>> = vec![Vec::new(); classes];
    for (f, &l) in features.iter().zip(labels) {
        if l >= classes {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        if f.len() != dim {
            return Err(Error::invalid("features differ in dimension"));
        }
        by_class[l].push(f);
    }
    let mut per_class = vec![None; classes];
    let mut total = 0.0;
    let mut n = 0usize;
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            continue;
        }
        let center = mean_rows(members.iter().copied(), dim).expect("non-empty");
        let dists: f64 = members.iter().map(|f| euclidean(f, &center)).sum();
        per_class[c] = Some(dists / members.len() as f64);
        total += dists;
        n += members.len();
    }
    if n == 0 {
        return Err(Error::invalid("no class has at least two samples"));
    }
    let grand = total / n as f64;
    Ok(CompactnessReport {
        per_class_mean_distance: per_class,
        counts: by_class.iter().map(Vec::len).collect(),
        grand_mean_distance: grand,
        compactness: if grand > 0.0 { 1.0 / grand } else { f64::INFINITY },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonResult {
    pub r: f64,
    /// Two-sided p-value from the t statistic with `n − 2` degrees of freedom.
    pub p: f64,
    pub t: f64,
    pub n: usize,
}

/// `t = r·√((n−2)/(1−r²))`.
pub fn pearson_t(r: f64, n: usize) -> f64 {
    let df = n as f64 - 2.0;
    if r.abs() >= 1.0 {
        return f64::INFINITY.copysign(r);
    }
    r * (df / (1.0 - r * r)).sqrt()
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<PearsonResult> {
    if xs.len() != ys.len() {
        return Err(Error::invalid("pearson: length mismatch"));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::invalid("pearson needs at least 3 pairs"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("pearson: non-finite input"));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson: zero variance"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let t = pearson_t(r, n);
    let p = if t.is_infinite() {
        0.0
    } else {
        let dist = StudentsT::new(0.0, 1.0, (n - 2) as f64)
            .map_err(|e| Error::invalid(format!("t distribution: {e}")))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(PearsonResult { r, p, t, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetentionReport {
    pub n_t: u64,
    pub k_t: u64,
    pub n_a: u64,
    pub k_a: u64,
    pub ratio_t: f64,
    pub ratio_a: f64,
    pub gap: f64,
}

/// Simulate `n_t` i.i.d. samples, each passing the entropy filter with
/// probability `accept_prob` and falling in the alignment region with
/// probability `align_region_prob`. With `dependent = false` the two events
/// are independent; with `dependent = true` a sample is accepted iff it is
/// in the region. Reports the retention ratios `k_t/n_t` (all samples) and
/// `k_a/n_a` (samples in the region).
pub fn retention_ratio_sim(
    n_t: u64,
    accept_prob: f64,
    align_region_prob: f64,
    dependent: bool,
    seed: u64,
) -> Result<RetentionReport> {
    if !(0.0..=1.0).contains(&accept_prob) || !(0.0 < align_region_prob && align_region_prob <= 1.0) {
        return Err(Error::invalid("retention: probabilities out of range"));
    }
    if n_t == 0 {
        return Err(Error::invalid("retention: n_t must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut k_t, mut n_a, mut k_a) = (0u64, 0u64, 0u64);
    for _ in 0..n_t {
        let in_region = rng.random_bool(align_region_prob);
        let accepted = if dependent { in_region } else { rng.random_bool(accept_prob) };
        k_t += u64::from(accepted);
        if in_region {
            n_a += 1;
            k_a += u64::from(accepted);
        }
    }
    let ratio_t = k_t as f64 / n_t as f64;
    let ratio_a = if n_a > 0 { k_a as f64 / n_a as f64 } else { f64::NAN };
    Ok(RetentionReport {
        n_t,
        k_t,
        n_a,
        k_a,
        ratio_t,
        ratio_a,
        gap: (ratio_t - ratio_a).abs(),
    })
}

/// Isotropic 2-D Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture2d {
    /// `(weight, mean, standard deviation)`; weights are normalized on use.
    pub components: Vec<(f64, [f64; 2], f64)>,
}

impl Mixture2d {
    /// Two unit-variance components, the first at the origin.
    pub fn standard() -> Self {
        Self {
            components: vec![(0.6, [0.0, 0.0], 1.0), (0.4, [3.0, 1.0], 1.0)],
        }
    }

    fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.0).sum()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let total = self.total_weight();
        let mut u = rng.random_range(0.0..total);
        let mut comp = &self.components[self.components.len() - 1];
        for c in &self.components {
            if u < c.0 {
                comp = c;
                break;
            }
            u -= c.0;
        }
        let normal = Normal::new(0.0, comp.2).expect("positive sd");
        [comp.1[0] + normal.sample(rng), comp.1[1] + normal.sample(rng)]
    }

    pub fn density(&self, x: [f64; 2]) -> f64 {
        let total = self.total_weight();
        self.components
            .iter()
            .map(|(w, m, s)| {
                let dx = x[0] - m[0];
                let dy = x[1] - m[1];
                w / total * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp() / (2.0 * std::f64::consts::PI * s * s)
            })
            .sum()
    }

    /// `P(‖x − center‖ ≤ radius)` by composite Simpson quadrature in polar
    /// coordinates around `center`.
    pub fn disk_probability(&self, center: [f64; 2], radius: f64) -> f64 {
        if radius.is_infinite() {
            return 1.0;
        }
        let nr = 400; // even
        let nt = 256;
        let hr = radius / nr as f64;
        let ht = 2.0 * std::f64::consts::PI / nt as f64;
        let mut total = 0.0;
        for i in 0..=nr {
            let rho = i as f64 * hr;
            let wr = if i == 0 || i == nr {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            // Periodic trapezoid in angle.
            let ring: f64 = (0..nt)
                .map(|j| {
                    let th = j as f64 * ht;
                    self.density([center[0] + rho * th.cos(), center[1] + rho * th.sin()])
                })
                .sum::<f64>()
                * ht;
            total += wr * ring * rho;
        }
        total * hr / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityConfig {
    pub mixture: Mixture2d,
    /// Class anchor `μ_c`.
    pub center: [f64; 2],
    /// Alignment radius; `f64::INFINITY` keeps every sample.
    pub d0: f64,
    pub samples: usize,
    pub ball_radius: f64,
    pub balls: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub c_t_hat: f64,
    pub c_a_hat: f64,
    pub ratio: f64,
    /// Monte-Carlo estimate of the region probability.
    pub region_prob_mc: f64,
    /// Quadrature value of the region probability.
    pub region_prob_quadrature: f64,
    /// True when every sample fell in the region (`p_a = p_t`).
    pub equality_case: bool,
}

/// Estimate the local density constants of the target distribution `p_t`
/// and of the aligned distribution `p_a = p_t(· | ‖x − μ‖ ≤ d0)`.
///
/// Draws `samples` points from the mixture, keeps those in the region as
/// the `p_a` population, and places `balls` balls of radius `ball_radius`
/// fully inside the region (centers drawn from the `p_a` population so the
/// balls sit where mass is). Each constant is the minimum over balls of
/// `mass(ball) / area(ball)`.
pub fn density_constants_sim(cfg: &DensityConfig) -> Result<DensityReport> {
    if cfg.samples == 0 || cfg.balls == 0 || !(cfg.ball_radius > 0.0) || !(cfg.d0 > 0.0) {
        return Err(Error::invalid("density: bad configuration"));
    }
    if cfg.d0.is_finite() && cfg.d0 <= cfg.ball_radius {
        return Err(Error::invalid("density: ball does not fit inside the region"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let points: Vec<[f64; 2]> = (0..cfg.samples).map(|_| cfg.mixture.sample(&mut rng)).collect();
    let dist = |p: &[f64; 2], q: &[f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
    let in_region: Vec<[f64; 2]> = points.iter().copied().filter(|p| dist(p, &cfg.center) <= cfg.d0).collect();
    if in_region.is_empty() {
        return Err(Error::invalid("density: region holds no samples"));
    }
    let n_t = points.len() as f64;
    let n_a = in_region.len() as f64;
    let equality = in_region.len() == points.len();
    let area = std::f64::consts::PI * cfg.ball_radius * cfg.ball_radius;

    // Ball centers: region members whose ball stays inside the region.
    let eligible: Vec<[f64; 2]> = in_region
        .iter()
        .copied()
        .filter(|p| !cfg.d0.is_finite() || dist(p, &cfg.center) <= cfg.d0 - cfg.ball_radius)
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid("density: no ball fits inside the region"));
    }
    let mut c_t = f64::INFINITY;
    let mut c_a = f64::INFINITY;
    for _ in 0..cfg.balls {
        let x0 = eligible[rng.random_range(0..eligible.len())];
        let count_t = points.iter().filter(|p| dist(p, &x0) <= cfg.ball_radius).count() as f64;
        let count_a = in_region.iter().filter(|p| dist(p, &x0) <= cfg.ball_radius).count() as f64;
        c_t = c_t.min(count_t / n_t / area);
        c_a = c_a.min(count_a / n_a / area);
    }
    Ok(DensityReport {
        c_t_hat: c_t,
        c_a_hat: c_a,
        ratio: c_a / c_t,
        region_prob_mc: n_a / n_t,
        region_prob_quadrature: cfg.mixture.disk_probability(cfg.center, cfg.d0),
        equality_case: equality,
    })
}

/// Radius around `center` containing the `q`-quantile of mixture samples.
pub fn quantile_radius(mixture: &Mixture2d, center: [f64; 2], q: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r: Vec<f64> = (0..samples)
        .map(|_| {
            let p = mixture.sample(&mut rng);
            ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt()
        })
        .collect();
    r.sort_by(f64::total_cmp);
    let idx = ((q * samples as f64) as usize).min(samples - 1);
    r[idx]
}

/// Top-1 accuracy of `preds` against `labels`, ignoring unlabeled entries.
pub fn accuracy(preds: &[usize], labels: &[Option<usize>]) -> Option<f64> {
    let mut hit = 0usize;
    let mut n = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        if let Some(l) = l {
            n += 1;
            hit += usize::from(p == l);
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// One synthetic dataset of the Fig. 2 style sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Point {
    pub name: String,
    pub spread: f64,
    /// Compactness of the test stream's original views under true labels.
    pub compactness: f64,
    /// Compactness of the cached (entropy and align) features under their
    /// pseudo-labels at the end of the stream; `None` if no class holds two.
    pub cached_compactness: Option<f64>,
    pub zero_shot_accuracy: f64,
    pub mcp_accuracy: f64,
    /// `mcp_accuracy − zero_shot_accuracy`, in percentage points.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub points: Vec<Fig2Point>,
    /// Correlation between test-stream compactness and gain.
    pub pearson: Option<PearsonResult>,
    /// Correlation between cached-sample compactness and gain.
    pub pearson_cached: Option<PearsonResult>,
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,spread,compactness,cached_compactness,zero_shot,mcp,gain\n");
        for p in &self.points {
            let cached = p.cached_compactness.map(|c| c.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.name, p.spread, p.compactness, cached, p.zero_shot_accuracy, p.mcp_accuracy, p.gain
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig2Config {
    pub datasets: Vec<SynthSpec>,
    pub engine: EngineConfig,
}

impl Fig2Config {
    /// Eight datasets that differ only in intra-class spread (and seed).
    pub fn spread_sweep(seed: u64) -> Self {
        let spreads = [1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0];
        Self {
            datasets: spreads
                .iter()
                .enumerate()
                .map(|(i, &spread)| SynthSpec {
                    spread,
                    samples: 400,
                    views: 1,
                    seed: seed.wrapping_add(i as u64),
                    ..SynthSpec::default()
                })
                .collect(),
            engine: EngineConfig::default(),
        }
    }
}

fn fig2_point(spec: &SynthSpec, engine_cfg: &EngineConfig) -> Result<Fig2Point> {
    if spec.classes < 2 || spec.samples < 200 {
        return Err(Error::invalid("each dataset needs >= 2 classes and >= 200 samples"));
    }
    let (header, records) = synth_in_memory(spec)?;
    let feats: Vec<Vec<f64>> = records.iter().map(|r| r.views.row(0).to_vec()).collect();
    let labels: Vec<usize> = records
        .iter()
        .map(|r| r.label.ok_or_else(|| Error::invalid("fig2 needs labeled streams")))
        .collect::<Result<_>>()?;
    let comp = compactness(&feats, &labels, spec.classes)?.compactness;

    let mut engine = Engine::from_prompts(&header.prompts, engine_cfg.clone())?;
    let summary = run_engine(&mut engine, records.into_iter().map(Ok), None).into_result()?;
    let bank = engine.bank();
    let mut cached_feats = Vec::new();
    let mut cached_labels = Vec::new();
    for kind in [CacheKind::Entropy, CacheKind::Align] {
        for cache in bank.kind_caches(kind) {
            for slot in cache.slots() {
                cached_feats.push(slot.feature.clone());
                cached_labels.push(slot.pseudo_label);
            }
        }
    }
    let cached = compactness(&cached_feats, &cached_labels, spec.classes).ok().map(|r| r.compactness);
    let zs = summary.zero_shot_accuracy.expect("labeled");
    let mcp = summary.accuracy.expect("labeled");
    Ok(Fig2Point {
        name: format!("spread_{}", spec.spread),
        spread: spec.spread,
        compactness: comp,
        cached_compactness: cached,
        zero_shot_accuracy: zs,
        mcp_accuracy: mcp,
        gain: mcp - zs,
    })
}

/// Run zero-shot and MCP on every dataset and correlate compactness with
/// the accuracy gain. Datasets run in parallel when the `parallel` feature
/// is on; points keep the input order.
pub fn fig2_experiment(cfg: &Fig2Config) -> Result<CorrelationReport> {
    #[cfg(feature = "parallel")]
    let points: Result<Vec<Fig2Point>> = {
        use rayon::prelude::*;
        cfg.datasets.par_iter().map(|d| fig2_point(d, &cfg.engine)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let points: Result<Vec<Fig2Point>> = cfg.datasets.iter().map(|d| fig2_point(d, &cfg.engine)).collect();
    let points = points?;
    let gains: Vec<f64> = points.iter().map(|p| p.gain).collect();
    let comps: Vec<f64> = points.iter().map(|p| p.compactness).collect();
    let pearson_test = pearson(&comps, &gains).ok();
    let cached: Option<Vec<f64>> = points.iter().map(|p| p.cached_compactness).collect();
    let pearson_cached = cached.and_then(|c| pearson(&c, &gains).ok());
    Ok(CorrelationReport {
        points,
        pearson: pearson_test,
        pearson_cached,
    })
}
