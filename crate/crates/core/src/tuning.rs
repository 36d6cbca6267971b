//! Residual tuning: the entropy, alignment and contrast losses, their
//! analytic gradients with respect to the residual matrices, the AdamW
//! update and a central-difference gradient checker.
//!
//! A [`TuningProblem`] freezes everything about one sample that does not
//! depend on the residuals (views, cache retrieval terms, negative terms,
//! per-class negative means). [`TuningProblem::evaluate`] then maps a pair
//! of residual matrices to the total loss and its gradient. The set of
//! views kept by the entropy loss is recomputed on every evaluation but
//! treated as constant when differentiating.

use crate::clock::Stopwatch;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    confident_views, normalize_term, normalize_term_backward, retrieve_adaptive,
    Engine, FusionNorm,
};
use crate::math::{dot, entropy_unchecked, l2_normalize, norm, softmax_unchecked, HyperParams, Matrix};

/// Switches for the two auxiliary losses; the entropy loss is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub align: bool,
    pub contrast: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            align: true,
            contrast: true,
        }
    }
}

impl LossToggles {
    /// None, align only, contrast only, both.
    pub const ALL: [LossToggles; 4] = [
        LossToggles {
            align: false,
            contrast: false,
        },
        LossToggles {
            align: true,
            contrast: false,
        },
        LossToggles {
            align: false,
            contrast: true,
        },
        LossToggles {
            align: true,
            contrast: true,
        },
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub entropy: f64,
    pub align: f64,
    pub contrast: f64,
    pub total: f64,
    pub contrast_clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: LossBreakdown,
    pub grad_text: Matrix,
    pub grad_visual: Matrix,
    /// Views kept by the entropy loss.
    pub selected: Vec<usize>,
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub entropy: f64,
    pub align: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningProblem {
    pub text: Matrix,
    pub visual: Matrix,
    pub valid_visual: Vec<bool>,
    /// `N × d` unit view features, row 0 the original view.
    pub views: Matrix,
    /// Per-view `f·f_rᵀ`.
    pub cache_terms: Vec<Vec<f64>>,
    /// Per-view `A(f·Q_nᵀ)·L_n`.
    pub negative_terms: Vec<Vec<f64>>,
    pub negative_means: Vec<Option<Vec<f64>>>,
    pub fusion_weights: [f64; 3],
    pub norm: FusionNorm,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    pub eps: f64,
    pub weights: LossWeights,
}

impl TuningProblem {
    pub fn from_engine(engine: &Engine, views: &Matrix) -> Result<Self> {
        let cfg = engine.config();
        let hp = &cfg.hp;
        let bank = engine.bank();
        let state = engine.state();
        if views.cols() != state.dim() || views.rows() == 0 {
            return Err(Error::invalid("tuning views have the wrong shape"));
        }
        let neg = bank.negative_matrices(hp.p_mask);
        let mut cache_terms = Vec::with_capacity(views.rows());
        let mut negative_terms = Vec::with_capacity(views.rows());
        for f in views.iter_rows() {
            let f_r = retrieve_adaptive(f, bank, hp);
            cache_terms.push(f_r.mat_vec(f));
            let mut n = vec![0.0; state.classes()];
            for (i, q) in neg.features.iter_rows().enumerate() {
                let a = hp.affinity(dot(f, q).clamp(-1.0, 1.0));
                for (nc, l) in n.iter_mut().zip(neg.labels.row(i)) {
                    *nc += a * l;
                }
            }
            negative_terms.push(n);
        }
        Ok(Self {
            text: state.text.clone(),
            visual: state.visual.clone(),
            valid_visual: state.valid_visual.clone(),
            views: views.clone(),
            cache_terms,
            negative_terms,
            negative_means: bank.negative_means(),
            fusion_weights: cfg.terms.weights(hp),
            norm: cfg.norm,
            alpha: hp.alpha,
            beta: hp.beta,
            rho: hp.rho_delta,
            eps: hp.eps,
            weights: LossWeights {
                entropy: 1.0,
                align: if cfg.losses.align { hp.lambda } else { 0.0 },
                contrast: if cfg.losses.contrast { hp.gamma } else { 0.0 },
            },
        })
    }

    pub fn classes(&self) -> usize {
        self.text.rows()
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    fn affinity(&self, x: f64) -> f64 {
        self.alpha * (-self.beta * (1.0 - x)).exp()
    }

    /// Refined prototypes for the given residuals, with the pre-normalization
    /// norms needed by the backward pass.
    fn refine(&self, r_t: &Matrix, r_v: &Matrix) -> Result<Refined> {
        let (c, d) = (self.classes(), self.dim());
        let mut t = Matrix::zeros(c, d);
        let mut v = Matrix::zeros(c, d);
        let mut t_norm = vec![1.0; c];
        let mut v_norm = vec![1.0; c];
        for k in 0..c {
            let sum: Vec<f64> = self.text.row(k).iter().zip(r_t.row(k)).map(|(a, b)| a + b).collect();
            t_norm[k] = norm(&sum);
            t.row_mut(k).copy_from_slice(&l2_normalize(&sum)?);
            if self.valid_visual[k] {
                let sum: Vec<f64> = self.visual.row(k).iter().zip(r_v.row(k)).map(|(a, b)| a + b).collect();
                v_norm[k] = norm(&sum);
                v.row_mut(k).copy_from_slice(&l2_normalize(&sum)?);
            }
        }
        Ok(Refined { t, v, t_norm, v_norm })
    }

    fn view_forward(&self, n: usize, refined: &Refined) -> ViewForward {
        let f = self.views.row(n);
        let c = self.classes();
        let text_term = refined.t.mat_vec(f);
        let mut vis_aff = vec![0.0; c];
        let mut visual_term = vec![0.0; c];
        for k in 0..c {
            if self.valid_visual[k] {
                vis_aff[k] = self.affinity(dot(f, refined.v.row(k)).clamp(-1.0, 1.0));
                visual_term[k] = vis_aff[k];
            }
            visual_term[k] -= self.negative_terms[n][k];
        }
        let zt = normalize_term(&text_term, self.norm);
        let zp = normalize_term(&visual_term, self.norm);
        let zr = normalize_term(&self.cache_terms[n], self.norm);
        let [a1, a2, a3] = self.fusion_weights;
        let fused: Vec<f64> = (0..c).map(|k| a1 * zt[k] + a2 * zp[k] + a3 * zr[k]).collect();
        let probs = softmax_unchecked(&fused, 1.0);
        ViewForward {
            text_term,
            zt,
            visual_term,
            zp,
            vis_aff,
            probs,
        }
    }

    /// Loss only.
    pub fn loss(&self, r_t: &Matrix, r_v: &Matrix) -> Result<LossBreakdown> {
        Ok(self.evaluate_inner(r_t, r_v, false)?.loss)
    }

    /// Views the entropy loss keeps at these residuals.
    pub fn selection(&self, r_t: &Matrix, r_v: &Matrix) -> Result<Vec<usize>> {
        let refined = self.refine(r_t, r_v)?;
        let probs: Vec<Vec<f64>> = (0..self.views.rows())
            .map(|n| self.view_forward(n, &refined).probs)
            .collect();
        Ok(confident_views(&probs, self.rho))
    }

    /// Loss and analytic gradient with respect to both residual matrices.
    pub fn evaluate(&self, r_t: &Matrix, r_v: &Matrix) -> Result<Evaluation> {
        self.evaluate_inner(r_t, r_v, true)
    }

    fn evaluate_inner(&self, r_t: &Matrix, r_v: &Matrix, with_grad: bool) -> Result<Evaluation> {
        let (c, d) = (self.classes(), self.dim());
        if r_t.rows() != c || r_t.cols() != d || r_v.rows() != c || r_v.cols() != d {
            return Err(Error::invalid("residual shape mismatch"));
        }
        let refined = self.refine(r_t, r_v)?;
        // Gradients w.r.t. the refined prototypes T', V'.
        let mut g_t = Matrix::zeros(c, d);
        let mut g_v = Matrix::zeros(c, d);
        let mut loss = LossBreakdown::default();

        // Entropy of the mean prediction over the most confident views.
        let forwards: Vec<ViewForward> = (0..self.views.rows()).map(|n| self.view_forward(n, &refined)).collect();
        let probs: Vec<Vec<f64>> = forwards.iter().map(|v| v.probs.clone()).collect();
        let selected = confident_views(&probs, self.rho);
        let k = selected.len() as f64;
        let mut mean = vec![0.0; c];
        for &n in &selected {
            for (m, p) in mean.iter_mut().zip(&probs[n]) {
                *m += p / k;
            }
        }
        loss.entropy = entropy_unchecked(&mean);
        if with_grad && self.weights.entropy != 0.0 {
            let g_mean: Vec<f64> = mean
                .iter()
                .map(|&m| -self.weights.entropy * (m.max(f64::MIN_POSITIVE).ln() + 1.0))
                .collect();
            let [a1, a2, _] = self.fusion_weights;
            for &n in &selected {
                let fw = &forwards[n];
                let f = self.views.row(n);
                let g_p: Vec<f64> = g_mean.iter().map(|g| g / k).collect();
                let gp_dot = dot(&g_p, &fw.probs);
                let g_fused: Vec<f64> = fw.probs.iter().zip(&g_p).map(|(p, g)| p * (g - gp_dot)).collect();
                if a1 != 0.0 {
                    let g_zt: Vec<f64> = g_fused.iter().map(|g| a1 * g).collect();
                    let g_text = normalize_term_backward(&fw.text_term, &fw.zt, &g_zt, self.norm);
                    for kk in 0..c {
                        for (gt, x) in g_t.row_mut(kk).iter_mut().zip(f) {
                            *gt += g_text[kk] * x;
                        }
                    }
                }
                if a2 != 0.0 {
                    let g_zp: Vec<f64> = g_fused.iter().map(|g| a2 * g).collect();
                    let g_vis = normalize_term_backward(&fw.visual_term, &fw.zp, &g_zp, self.norm);
                    for kk in 0..c {
                        if !self.valid_visual[kk] {
                            continue;
                        }
                        let s = g_vis[kk] * self.beta * fw.vis_aff[kk];
                        for (gv, x) in g_v.row_mut(kk).iter_mut().zip(f) {
                            *gv += s * x;
                        }
                    }
                }
            }
        }

        let valid: Vec<usize> = (0..c).filter(|&k| self.valid_visual[k]).collect();
        if self.weights.align != 0.0 && !valid.is_empty() {
            let (l, g_m) = align_loss_and_grad(&refined.t, &refined.v, &valid);
            loss.align = l;
            if with_grad {
                let w = self.weights.align;
                for (a, &ca) in valid.iter().enumerate() {
                    for (b, &cb) in valid.iter().enumerate() {
                        let g = w * g_m[a][b];
                        if g == 0.0 {
                            continue;
                        }
                        for i in 0..d {
                            let gt = g_t.get(ca, i) + g * refined.v.get(cb, i);
                            g_t.set(ca, i, gt);
                            let gv = g_v.get(cb, i) + g * refined.t.get(ca, i);
                            g_v.set(cb, i, gv);
                        }
                    }
                }
            }
        }

        if self.weights.contrast != 0.0 {
            let pairs: Vec<(usize, Vec<f64>)> = valid
                .iter()
                .filter_map(|&k| {
                    self.negative_means[k]
                        .as_ref()
                        .and_then(|m| l2_normalize(m).ok())
                        .map(|m| (k, m))
                })
                .collect();
            if !pairs.is_empty() {
                let cnt = pairs.len() as f64;
                let cosines: Vec<f64> = pairs
                    .iter()
                    .map(|(k, m)| dot(refined.v.row(*k), m).clamp(-1.0, 1.0))
                    .collect();
                let mean_cos = cosines.iter().sum::<f64>() / cnt;
                let raw = 1.0 - mean_cos + self.eps;
                let clamped = raw <= self.eps || !raw.is_finite();
                let arg = if clamped { self.eps } else { raw };
                loss.contrast = -arg.ln();
                loss.contrast_clamped = clamped;
                if with_grad && !clamped {
                    let scale = self.weights.contrast / (arg * cnt);
                    for ((k, m), cs) in pairs.iter().zip(&cosines) {
                        let v = refined.v.row(*k).to_vec();
                        for i in 0..d {
                            let gv = g_v.get(*k, i) + scale * (m[i] - cs * v[i]);
                            g_v.set(*k, i, gv);
                        }
                    }
                }
            }
        }

        loss.total = self.weights.entropy * loss.entropy
            + self.weights.align * loss.align
            + self.weights.contrast * loss.contrast;

        let (grad_text, grad_visual) = if with_grad {
            (
                normalize_backward(&refined.t, &refined.t_norm, &g_t, None),
                normalize_backward(&refined.v, &refined.v_norm, &g_v, Some(&self.valid_visual)),
            )
        } else {
            (Matrix::zeros(c, d), Matrix::zeros(c, d))
        };
        Ok(Evaluation {
            loss,
            grad_text,
            grad_visual,
            selected,
        })
    }
}

struct Refined {
    t: Matrix,
    v: Matrix,
    t_norm: Vec<f64>,
    v_norm: Vec<f64>,
}

struct ViewForward {
    text_term: Vec<f64>,
    zt: Vec<f64>,
    visual_term: Vec<f64>,
    zp: Vec<f64>,
    vis_aff: Vec<f64>,
    probs: Vec<f64>,
}

/// Backprop through `u ↦ u/‖u‖`: `(g − y(y·g)) / ‖u‖` per row.
fn normalize_backward(unit: &Matrix, norms: &[f64], g: &Matrix, valid: Option<&[bool]>) -> Matrix {
    let mut out = Matrix::zeros(unit.rows(), unit.cols());
    for k in 0..unit.rows() {
        if let Some(v) = valid {
            if !v[k] {
                continue;
            }
        }
        let y = unit.row(k);
        let gy = dot(g.row(k), y);
        for (o, (gi, yi)) in out.row_mut(k).iter_mut().zip(g.row(k).iter().zip(y)) {
            *o = (gi - yi * gy) / norms[k];
        }
    }
    out
}

/// Symmetric two-direction InfoNCE over the classes in `idx` at temperature
/// 1. Returns the loss and `∂L/∂M` for `M = T'V'ᵀ` restricted to `idx`.
fn align_loss_and_grad(t: &Matrix, v: &Matrix, idx: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let n = idx.len();
    let m: Vec<Vec<f64>> = idx
        .iter()
        .map(|&a| idx.iter().map(|&b| dot(t.row(a), v.row(b))).collect())
        .collect();
    let row_sm: Vec<Vec<f64>> = m.iter().map(|r| softmax_unchecked(r, 1.0)).collect();
    let col_sm_t: Vec<Vec<f64>> = (0..n)
        .map(|b| softmax_unchecked(&(0..n).map(|a| m[a][b]).collect::<Vec<_>>(), 1.0))
        .collect();
    let mut loss = 0.0;
    for a in 0..n {
        loss -= row_sm[a][a].ln() + col_sm_t[a][a].ln();
    }
    loss /= n as f64;
    let mut g = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let eye = if a == b { 1.0 } else { 0.0 };
            g[a][b] = (row_sm[a][b] - eye + col_sm_t[b][a] - eye) / n as f64;
        }
    }
    (loss, g)
}

/// Entropy loss on a fixed set of view probabilities: entropy of the mean
/// of the `max(1, ⌊ρN⌋)` most confident views.
pub fn loss_entropy(view_probs: &[Vec<f64>], rho: f64) -> f64 {
    let sel = confident_views(view_probs, rho);
    let c = view_probs[0].len();
    let mut mean = vec![0.0; c];
    for &n in &sel {
        for (m, p) in mean.iter_mut().zip(&view_probs[n]) {
            *m += p / sel.len() as f64;
        }
    }
    entropy_unchecked(&mean)
}

/// Alignment loss over the classes with a visual prototype; 0 if none.
pub fn loss_align(t_prime: &Matrix, v_prime: &Matrix, valid: &[bool]) -> f64 {
    let idx: Vec<usize> = (0..valid.len()).filter(|&k| valid[k]).collect();
    if idx.is_empty() {
        return 0.0;
    }
    align_loss_and_grad(t_prime, v_prime, &idx).0
}

/// Contrast loss `−ln(1 − mean_c cos(v'_c, v̄_c^neg) + ε)` over classes with
/// both a visual prototype and negatives. Returns `(loss, clamped)`; the
/// loss is 0 when no class qualifies.
pub fn loss_contrast(
    v_prime: &Matrix,
    valid: &[bool],
    negative_means: &[Option<Vec<f64>>],
    eps: f64,
) -> Result<(f64, bool)> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..valid.len() {
        if let (true, Some(m)) = (valid[k], negative_means[k].as_ref()) {
            sum += crate::math::cosine(v_prime.row(k), m)?;
            count += 1;
        }
    }
    if count == 0 {
        return Ok((0.0, false));
    }
    let raw = 1.0 - sum / count as f64 + eps;
    if raw <= eps || !raw.is_finite() {
        return Ok((-eps.ln(), true));
    }
    Ok((-raw.ln(), false))
}

/// Adam with decoupled weight decay over the two residual matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m_t: Matrix,
    v_t: Matrix,
    m_v: Matrix,
    v_v: Matrix,
}

impl AdamW {
    pub fn new(classes: usize, dim: usize, hp: &HyperParams) -> Self {
        Self {
            lr: hp.lr,
            beta1: hp.adam_beta1,
            beta2: hp.adam_beta2,
            eps: hp.adam_eps,
            weight_decay: hp.weight_decay,
            step: 0,
            m_t: Matrix::zeros(classes, dim),
            v_t: Matrix::zeros(classes, dim),
            m_v: Matrix::zeros(classes, dim),
            v_v: Matrix::zeros(classes, dim),
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        for m in [&mut self.m_t, &mut self.v_t, &mut self.m_v, &mut self.v_v] {
            m.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// One update. Returns false (and leaves everything untouched) when a
    /// gradient entry is not finite.
    pub fn step(&mut self, r_t: &mut Matrix, r_v: &mut Matrix, g_t: &Matrix, g_v: &Matrix) -> bool {
        let finite = g_t.as_slice().iter().chain(g_v.as_slice()).all(|g| g.is_finite());
        if !finite {
            return false;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] *= 1.0 - lr * wd;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        update(r_t.as_mut_slice(), g_t.as_slice(), self.m_t.as_mut_slice(), self.v_t.as_mut_slice());
        update(r_v.as_mut_slice(), g_v.as_slice(), self.m_v.as_mut_slice(), self.v_v.as_mut_slice());
        true
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub max_rel_entropy: f64,
    pub max_rel_align: f64,
    pub max_rel_contrast: f64,
    pub max_rel_total: f64,
    /// Draws rejected because the view selection was not locally stable.
    pub resampled: usize,
    pub seconds: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.max_rel_entropy
            .max(self.max_rel_align)
            .max(self.max_rel_contrast)
            .max(self.max_rel_total)
    }

    pub fn passed(&self) -> bool {
        self.max_rel() < self.tolerance
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// A random problem with every term active: all classes except possibly
/// one have a visual prototype, roughly half carry negatives.
pub fn random_problem(rng: &mut ChaCha8Rng, classes: usize, dim: usize, views: usize) -> TuningProblem {
    let text = Matrix::from_rows(&(0..classes).map(|_| random_unit(rng, dim)).collect::<Vec<_>>(), dim)
        .expect("shape");
    let mut valid: Vec<bool> = (0..classes).map(|_| rng.random_bool(0.85)).collect();
    valid[0] = true;
    if classes > 1 {
        valid[1] = true;
    }
    let mut visual = Matrix::zeros(classes, dim);
    for k in 0..classes {
        if valid[k] {
            visual.row_mut(k).copy_from_slice(&random_unit(rng, dim));
        }
    }
    let view_rows: Vec<Vec<f64>> = (0..views).map(|_| random_unit(rng, dim)).collect();
    let cache_terms = (0..views)
        .map(|_| (0..classes).map(|_| rng.random_range(0.0..2.0)).collect())
        .collect();
    let negative_terms = (0..views)
        .map(|_| (0..classes).map(|_| rng.random_range(0.0..0.5)).collect())
        .collect();
    let mut negative_means: Vec<Option<Vec<f64>>> = (0..classes)
        .map(|_| {
            if rng.random_bool(0.5) {
                Some(random_unit(rng, dim).iter().map(|x| x * 0.7).collect())
            } else {
                None
            }
        })
        .collect();
    negative_means[0] = Some(random_unit(rng, dim));
    TuningProblem {
        text,
        visual,
        valid_visual: valid,
        views: Matrix::from_rows(&view_rows, dim).expect("shape"),
        cache_terms,
        negative_terms,
        negative_means,
        fusion_weights: [1.0, 1.0, 1.0],
        norm: FusionNorm::Standardize,
        alpha: 1.0,
        beta: 5.5,
        rho: 0.1,
        eps: 1e-6,
        weights: LossWeights {
            entropy: 1.0,
            align: 0.5,
            contrast: 0.2,
        },
    }
}

/// Max relative error between the analytic gradient and central
/// differences over every residual entry.
pub fn check_problem(problem: &TuningProblem, r_t: &Matrix, r_v: &Matrix, h: f64, floor: f64) -> Result<f64> {
    let eval = problem.evaluate(r_t, r_v)?;
    let mut worst: f64 = 0.0;
    for which in 0..2 {
        let (base, grad) = if which == 0 {
            (r_t, &eval.grad_text)
        } else {
            (r_v, &eval.grad_visual)
        };
        for idx in 0..base.as_slice().len() {
            let mut plus = base.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = base.clone();
            minus.as_mut_slice()[idx] -= h;
            let (lp, lm) = if which == 0 {
                (problem.loss(&plus, r_v)?.total, problem.loss(&minus, r_v)?.total)
            } else {
                (problem.loss(r_t, &plus)?.total, problem.loss(r_t, &minus)?.total)
            };
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(relative_error(grad.as_slice()[idx], numeric, floor));
        }
    }
    Ok(worst)
}

fn selection_stable(problem: &TuningProblem, r_t: &Matrix, r_v: &Matrix, h: f64) -> Result<bool> {
    let base = problem.selection(r_t, r_v)?;
    for which in 0..2 {
        let m = if which == 0 { r_t } else { r_v };
        for idx in 0..m.as_slice().len() {
            for sign in [-1.0, 1.0] {
                let mut p = m.clone();
                p.as_mut_slice()[idx] += sign * h;
                let sel = if which == 0 {
                    problem.selection(&p, r_v)?
                } else {
                    problem.selection(r_t, &p)?
                };
                if sel != base {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Compare analytic and central-difference gradients on random problems
/// cycling through `C ∈ {2,3,5}`, `d ∈ {4,8,16}`, `N ∈ {1,4,8}`. Each loss
/// term is checked on its own and then the weighted total.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let start = Stopwatch::start();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sizes_c = [2usize, 3, 5];
    let sizes_d = [4usize, 8, 16];
    let sizes_n = [1usize, 4, 8];
    let mut report = GradcheckReport {
        instances: cfg.instances,
        max_rel_entropy: 0.0,
        max_rel_align: 0.0,
        max_rel_contrast: 0.0,
        max_rel_total: 0.0,
        resampled: 0,
        seconds: 0.0,
        tolerance: cfg.tolerance,
    };
    for i in 0..cfg.instances {
        let (c, d, n) = (sizes_c[i % 3], sizes_d[(i / 3) % 3], sizes_n[(i / 9) % 3]);
        let (problem, r_t, r_v) = loop {
            let p = random_problem(&mut rng, c, d, n);
            let r_t = random_matrix(&mut rng, c, d, 0.05);
            let r_v = random_matrix(&mut rng, c, d, 0.05);
            if selection_stable(&p, &r_t, &r_v, cfg.step)? && !p.loss(&r_t, &r_v)?.contrast_clamped {
                break (p, r_t, r_v);
            }
            report.resampled += 1;
        };
        let only = |e: f64, a: f64, k: f64| {
            let mut p = problem.clone();
            p.weights = LossWeights {
                entropy: e,
                align: a,
                contrast: k,
            };
            p
        };
        let e = check_problem(&only(1.0, 0.0, 0.0), &r_t, &r_v, cfg.step, cfg.floor)?;
        let a = check_problem(&only(0.0, 1.0, 0.0), &r_t, &r_v, cfg.step, cfg.floor)?;
        let k = check_problem(&only(0.0, 0.0, 1.0), &r_t, &r_v, cfg.step, cfg.floor)?;
        let t = check_problem(&problem, &r_t, &r_v, cfg.step, cfg.floor)?;
        report.max_rel_entropy = report.max_rel_entropy.max(e);
        report.max_rel_align = report.max_rel_align.max(a);
        report.max_rel_contrast = report.max_rel_contrast.max(k);
        report.max_rel_total = report.max_rel_total.max(t);
    }
    report.seconds = start.seconds();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal(c: usize, d: usize) -> Matrix {
        let mut m = Matrix::zeros(c, d);
        for k in 0..c {
            m.set(k, k, 1.0);
        }
        m
    }

    #[test]
    fn entropy_loss_examples() {
        let p = vec![vec![0.7, 0.2, 0.1]];
        assert!((loss_entropy(&p, 0.1) - entropy_unchecked(&p[0])).abs() < 1e-15);
        let same = vec![vec![0.6, 0.4]; 8];
        assert!((loss_entropy(&same, 0.1) - entropy_unchecked(&same[0])).abs() < 1e-15);
        let many: Vec<Vec<f64>> = (0..32).map(|i| vec![0.5 + 0.01 * i as f64, 0.5 - 0.01 * i as f64]).collect();
        assert_eq!(confident_views(&many, 0.1).len(), 3);
    }

    #[test]
    fn align_loss_examples() {
        let t = orthonormal(1, 3);
        assert_eq!(loss_align(&t, &t, &[true]), 0.0);
        let t = orthonormal(2, 4);
        let e = std::f64::consts::E;
        let closed = -2.0 * (e / (e + 1.0)).ln();
        let l = loss_align(&t, &t, &[true, true]);
        assert!((l - closed).abs() < 1e-15);
        assert!((l - 0.6265233750364456).abs() < 1e-12);
        assert_eq!(loss_align(&t, &t, &[false, false]), 0.0);
    }

    #[test]
    fn align_loss_matches_naive_double_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Matrix::from_rows(&(0..4).map(|_| random_unit(&mut rng, 8)).collect::<Vec<_>>(), 8).unwrap();
        let v = Matrix::from_rows(&(0..4).map(|_| random_unit(&mut rng, 8)).collect::<Vec<_>>(), 8).unwrap();
        let mut naive = 0.0;
        for c in 0..4 {
            let mut den_r = 0.0;
            let mut den_c = 0.0;
            for j in 0..4 {
                let mut tv = 0.0;
                let mut vt = 0.0;
                for i in 0..8 {
                    tv += t.get(c, i) * v.get(j, i);
                    vt += t.get(j, i) * v.get(c, i);
                }
                den_r += tv.exp();
                den_c += vt.exp();
            }
            let mut cc = 0.0;
            for i in 0..8 {
                cc += t.get(c, i) * v.get(c, i);
            }
            naive += -(cc.exp() / den_r).ln() - (cc.exp() / den_c).ln();
        }
        naive /= 4.0;
        assert!((loss_align(&t, &v, &[true; 4]) - naive).abs() < 1e-10);
    }

    #[test]
    fn align_gradient_symmetric_two_class_case() {
        // At T' = V' = I (2×2) the gradient of L w.r.t. M is
        // (1/2)·2·(softmax − I), i.e. diag −1/(e+1), off-diagonal 1/(e+1).
        let t = orthonormal(2, 2);
        let (_, g) = align_loss_and_grad(&t, &t, &[0, 1]);
        let e = std::f64::consts::E;
        assert!((g[0][0] + 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((g[1][1] + 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((g[0][1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((g[1][0] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn contrast_loss_examples() {
        let v = orthonormal(2, 3);
        let none = vec![None, None];
        assert_eq!(loss_contrast(&v, &[true, true], &none, 1e-6).unwrap(), (0.0, false));

        let perp = vec![Some(vec![0.0, 0.0, 1.0]), Some(vec![0.0, 0.0, 2.0])];
        let (l, clamped) = loss_contrast(&v, &[true, true], &perp, 1e-6).unwrap();
        assert!(!clamped);
        assert!((l + (1.0f64 + 1e-6).ln()).abs() < 1e-18);
        assert!((l + 1e-6).abs() < 1e-12);

        let same = vec![Some(vec![1.0, 0.0, 0.0]), Some(vec![0.0, 3.0, 0.0])];
        let (l, clamped) = loss_contrast(&v, &[true, true], &same, 1e-6).unwrap();
        assert!(clamped);
        assert_eq!(l, -(1e-6f64).ln());
    }

    #[test]
    fn adamw_examples() {
        let hp = HyperParams::default();
        let mut opt = AdamW::new(1, 2, &hp);
        let mut rt = Matrix::from_vec(1, 2, vec![0.3, -0.2]).unwrap();
        let mut rv = Matrix::zeros(1, 2);
        let zero = Matrix::zeros(1, 2);
        assert!(opt.step(&mut rt, &mut rv, &zero, &zero));
        assert_eq!(rt.as_slice(), &[0.3, -0.2]);

        let mut opt = AdamW::new(1, 2, &HyperParams { lr: 0.0, ..hp.clone() });
        let g = Matrix::from_vec(1, 2, vec![5.0, -1.0]).unwrap();
        opt.step(&mut rt, &mut rv, &g, &g);
        assert_eq!(rt.as_slice(), &[0.3, -0.2]);

        // First step: m̂ = g, v̂ = g², update = lr·g/(|g|+eps).
        let mut opt = AdamW::new(1, 2, &hp);
        let mut rt = Matrix::zeros(1, 2);
        let mut rv = Matrix::zeros(1, 2);
        let g = Matrix::from_vec(1, 2, vec![0.5, -2.0]).unwrap();
        opt.step(&mut rt, &mut rv, &g, &g);
        let expect0 = -1e-4 * 0.5 / (0.5 + 1e-8);
        let expect1 = 1e-4 * 2.0 / (2.0 + 1e-8);
        assert!((rt.get(0, 0) - expect0).abs() < 1e-18);
        assert!((rt.get(0, 1) - expect1).abs() < 1e-18);

        // Second step with a different gradient, hand-evaluated.
        let g2 = Matrix::from_vec(1, 2, vec![-1.0, 1.0]).unwrap();
        opt.step(&mut rt, &mut rv, &g2, &g2);
        let m = 0.9 * (0.1 * 0.5) + 0.1 * -1.0;
        let v = 0.999 * (0.001 * 0.25) + 0.001 * 1.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64 * 0.999);
        let expect = expect0 - 1e-4 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((rt.get(0, 0) - expect).abs() < 1e-15);

        let bad = Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        let before = rt.clone();
        assert!(!opt.step(&mut rt, &mut rv, &bad, &g));
        assert_eq!(rt, before);
    }

    #[test]
    fn one_hot_identical_views_are_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut p = random_problem(&mut rng, 3, 4, 4);
        p.weights = LossWeights {
            entropy: 1.0,
            align: 0.0,
            contrast: 0.0,
        };
        // Make every view the same and its fused prediction saturated.
        let f = p.views.row(0).to_vec();
        for n in 0..4 {
            p.views.row_mut(n).copy_from_slice(&f);
            p.cache_terms[n] = vec![1000.0, 0.0, 0.0];
        }
        p.fusion_weights = [1.0, 1.0, 40.0];
        let z = Matrix::zeros(3, 4);
        let e = p.evaluate(&z, &z).unwrap();
        assert!(e.loss.entropy < 1e-12);
        assert!(e.grad_text.as_slice().iter().chain(e.grad_visual.as_slice()).all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn small_gradcheck_passes() {
        let report = gradcheck(&GradcheckConfig {
            instances: 9,
            seed: 3,
            ..GradcheckConfig::default()
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn gradients_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_problem(&mut rng, 3, 8, 4);
        let r = random_matrix(&mut rng, 3, 8, 0.05);
        let a = p.evaluate(&r, &r).unwrap();
        let b = p.evaluate(&r, &r).unwrap();
        assert_eq!(a, b);
    }
}
