//! Prediction path: adaptive cache retrieval, the negative-calibrated
//! visual prototype score, three-term fusion and the per-sample [`Engine`].

use serde::{Deserialize, Serialize};

use crate::caches::{zero_shot, Admission, CacheBank, CacheKind, CacheToggles, Routing};
use crate::error::{Error, Result};
use crate::math::{argmax, dot, entropy_unchecked, softmax_unchecked, HyperParams, Matrix, ProbVector};
use crate::prototypes::PrototypeState;
use crate::tuning::{AdamW, LossToggles, TuningProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Mcp,
    McpPlusPlus,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcp" => Ok(Mode::Mcp),
            "mcp++" | "mcppp" | "mcp_plus_plus" => Ok(Mode::McpPlusPlus),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Mcp => "mcp",
            Mode::McpPlusPlus => "mcp++",
        }
    }
}

/// How each fusion term is rescaled across the class axis before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FusionNorm {
    /// Zero mean, unit (population) variance; constant terms become zeros.
    #[default]
    Standardize,
    /// Divide by the L2 norm; zero terms stay zero.
    L2,
    /// Per-term softmax at temperature 1.
    Softmax,
}

impl FusionNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standardize" | "zscore" => Ok(FusionNorm::Standardize),
            "l2" => Ok(FusionNorm::L2),
            "softmax" => Ok(FusionNorm::Softmax),
            other => Err(Error::Config(format!("unknown normalization `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionNorm::Standardize => "standardize",
            FusionNorm::L2 => "l2",
            FusionNorm::Softmax => "softmax",
        }
    }
}

/// Variance below which a standardized term is treated as constant.
const MIN_VARIANCE: f64 = 1e-24;

pub fn normalize_term(x: &[f64], norm: FusionNorm) -> Vec<f64> {
    match norm {
        FusionNorm::Standardize => {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var <= MIN_VARIANCE {
                return vec![0.0; x.len()];
            }
            let sd = var.sqrt();
            x.iter().map(|v| (v - mean) / sd).collect()
        }
        FusionNorm::L2 => {
            let n = crate::math::norm(x);
            if n <= crate::math::MIN_NORM {
                return vec![0.0; x.len()];
            }
            x.iter().map(|v| v / n).collect()
        }
        FusionNorm::Softmax => softmax_unchecked(x, 1.0),
    }
}

/// Vector-Jacobian product of [`normalize_term`]: given `x`, its output `z`
/// and upstream `g = ∂L/∂z`, returns `∂L/∂x`.
pub(crate) fn normalize_term_backward(x: &[f64], z: &[f64], g: &[f64], norm: FusionNorm) -> Vec<f64> {
    let n = x.len() as f64;
    match norm {
        FusionNorm::Standardize => {
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if var <= MIN_VARIANCE {
                return vec![0.0; x.len()];
            }
            let sd = var.sqrt();
            let g_mean = g.iter().sum::<f64>() / n;
            let gz_mean = g.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / n;
            g.iter()
                .zip(z)
                .map(|(gi, zi)| (gi - g_mean - zi * gz_mean) / sd)
                .collect()
        }
        FusionNorm::L2 => {
            let nx = crate::math::norm(x);
            if nx <= crate::math::MIN_NORM {
                return vec![0.0; x.len()];
            }
            let gz = dot(g, z);
            g.iter().zip(z).map(|(gi, zi)| (gi - zi * gz) / nx).collect()
        }
        FusionNorm::Softmax => {
            let gz = dot(g, z);
            g.iter().zip(z).map(|(gi, zi)| zi * (gi - gz)).collect()
        }
    }
}

/// Switches for the three fusion terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermToggles {
    pub text: bool,
    pub visual: bool,
    pub cache: bool,
}

impl Default for TermToggles {
    fn default() -> Self {
        Self {
            text: true,
            visual: true,
            cache: true,
        }
    }
}

impl TermToggles {
    pub const TEXT_ONLY: TermToggles = TermToggles {
        text: true,
        visual: false,
        cache: false,
    };

    /// Effective `[α1, α2, α3]`.
    pub fn weights(&self, hp: &HyperParams) -> [f64; 3] {
        [
            if self.text { hp.alpha1 } else { 0.0 },
            if self.visual { hp.alpha2 } else { 0.0 },
            if self.cache { hp.alpha3 } else { 0.0 },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsBreakdown {
    /// `f·T'ᵀ`.
    pub text_term: Vec<f64>,
    /// Negative-calibrated visual prototype score.
    pub visual_neg_term: Vec<f64>,
    /// `f·f_rᵀ`.
    pub cache_term: Vec<f64>,
    pub fused: Vec<f64>,
    pub probs: ProbVector,
    pub pred: usize,
}

/// `f_r^c = Σ_i A(cos(f, f_ci))·f_ci` over the entropy and align slots of
/// class `c`; zero rows for empty classes.
pub fn retrieve_adaptive(feature: &[f64], bank: &CacheBank, hp: &HyperParams) -> Matrix {
    let d = bank.dim();
    let mut out = Matrix::zeros(bank.classes(), d);
    for c in 0..bank.classes() {
        let row = out.row_mut(c);
        for s in bank.positive_features(c) {
            let a = hp.affinity(dot(feature, s).clamp(-1.0, 1.0));
            for (r, x) in row.iter_mut().zip(s) {
                *r += a * x;
            }
        }
    }
    out
}

/// `L_p`: identity over classes with rows of classes lacking a visual
/// prototype zeroed.
pub fn positive_label_matrix(valid_visual: &[bool]) -> Matrix {
    let c = valid_visual.len();
    let mut m = Matrix::zeros(c, c);
    for (i, &v) in valid_visual.iter().enumerate() {
        if v {
            m.set(i, i, 1.0);
        }
    }
    m
}

/// `P = A(f·V'ᵀ)·L_p − A(f·Q_nᵀ)·L_n`, with `A` applied elementwise.
pub fn visual_negative_score(
    feature: &[f64],
    visual: &Matrix,
    l_p: &Matrix,
    q_n: &Matrix,
    l_n: &Matrix,
    hp: &HyperParams,
) -> Result<Vec<f64>> {
    let d = feature.len();
    let classes = l_p.cols();
    if visual.cols() != d || l_p.rows() != visual.rows() {
        return Err(Error::invalid("visual score: prototype/L_p shape mismatch"));
    }
    if q_n.rows() != l_n.rows() || (q_n.rows() > 0 && q_n.cols() != d) || l_n.cols() != classes {
        return Err(Error::invalid("visual score: negative cache shape mismatch"));
    }
    let mut p = vec![0.0; classes];
    for (k, v) in visual.iter_rows().enumerate() {
        let a = hp.affinity(dot(feature, v).clamp(-1.0, 1.0));
        for (pc, l) in p.iter_mut().zip(l_p.row(k)) {
            *pc += a * l;
        }
    }
    for (i, q) in q_n.iter_rows().enumerate() {
        let a = hp.affinity(dot(feature, q).clamp(-1.0, 1.0));
        for (pc, l) in p.iter_mut().zip(l_n.row(i)) {
            *pc -= a * l;
        }
    }
    Ok(p)
}

/// Combine three raw term vectors: each is normalized across classes, then
/// `fused = α1·t + α2·p + α3·r` and `probs = softmax(fused, 1)`.
pub fn fuse_terms(
    text_term: Vec<f64>,
    visual_neg_term: Vec<f64>,
    cache_term: Vec<f64>,
    weights: [f64; 3],
    norm: FusionNorm,
) -> LogitsBreakdown {
    let zt = normalize_term(&text_term, norm);
    let zp = normalize_term(&visual_neg_term, norm);
    let zr = normalize_term(&cache_term, norm);
    let fused: Vec<f64> = (0..zt.len())
        .map(|c| weights[0] * zt[c] + weights[1] * zp[c] + weights[2] * zr[c])
        .collect();
    let probs = ProbVector::new(softmax_unchecked(&fused, 1.0)).expect("softmax output is a distribution");
    let pred = argmax(&fused);
    LogitsBreakdown {
        text_term,
        visual_neg_term,
        cache_term,
        fused,
        probs,
        pred,
    }
}

/// Fused logits for one feature given refined text prototypes, the visual
/// score `P` and the retrieval matrix `f_r`.
pub fn fuse_logits(
    feature: &[f64],
    text: &Matrix,
    visual_neg: &[f64],
    f_r: &Matrix,
    weights: [f64; 3],
    norm: FusionNorm,
) -> Result<LogitsBreakdown> {
    if text.cols() != feature.len() || f_r.cols() != feature.len() {
        return Err(Error::invalid("fuse: dimension mismatch"));
    }
    if text.rows() != visual_neg.len() || f_r.rows() != visual_neg.len() {
        return Err(Error::invalid("fuse: class count mismatch"));
    }
    Ok(fuse_terms(
        text.mat_vec(feature),
        visual_neg.to_vec(),
        f_r.mat_vec(feature),
        weights,
        norm,
    ))
}

/// Which views the final prediction averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InferViews {
    #[default]
    Original,
    /// Average fused probabilities of the most confident `rho_delta` share of views.
    Confident,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub hp: HyperParams,
    pub mode: Mode,
    pub caches: CacheToggles,
    pub terms: TermToggles,
    pub losses: LossToggles,
    pub norm: FusionNorm,
    pub persist_residuals: bool,
    pub infer_views: InferViews,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            mode: Mode::Mcp,
            caches: CacheToggles::default(),
            terms: TermToggles::default(),
            losses: LossToggles::default(),
            norm: FusionNorm::Standardize,
            persist_residuals: false,
            infer_views: InferViews::Original,
        }
    }
}

/// Routing summary of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RouteSummary {
    pub entropy_stored: bool,
    pub align_stored: bool,
    pub reflected: bool,
    pub negative_stored: bool,
    pub reconsidered: bool,
    pub discarded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WarningCounters {
    /// Contrast-loss log argument clamped to `eps`.
    pub contrast_clamps: u64,
    /// Optimizer steps skipped on a non-finite gradient.
    pub skipped_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub breakdown: LogitsBreakdown,
    pub zero_shot_pred: usize,
    pub zero_shot_entropy: f64,
    pub route: RouteSummary,
    /// Total tuning loss before the step (MCP++ only).
    pub loss: Option<f64>,
}

/// Stateful per-stream driver. One engine owns one cache bank; samples
/// must be fed in stream order.
#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    state: PrototypeState,
    bank: CacheBank,
    optimizer: AdamW,
    warnings: WarningCounters,
    processed: u64,
}

impl Engine {
    pub fn new(text: Matrix, cfg: EngineConfig) -> Result<Self> {
        cfg.hp.validate()?;
        if text.rows() == 0 || text.cols() == 0 {
            return Err(Error::invalid("empty text prototype matrix"));
        }
        let (c, d) = (text.rows(), text.cols());
        let bank = CacheBank::new(c, d, &cfg.hp, cfg.caches);
        let state = PrototypeState::new(text, cfg.hp.w);
        let optimizer = AdamW::new(c, d, &cfg.hp);
        Ok(Self {
            cfg,
            state,
            bank,
            optimizer,
            warnings: WarningCounters::default(),
            processed: 0,
        })
    }

    /// Build from per-class prompt embeddings.
    pub fn from_prompts(prompts: &[Vec<Vec<f64>>], cfg: EngineConfig) -> Result<Self> {
        Self::new(crate::prototypes::text_prototypes(prompts)?, cfg)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &CacheBank {
        &self.bank
    }

    pub fn state(&self) -> &PrototypeState {
        &self.state
    }

    pub fn warnings(&self) -> WarningCounters {
        self.warnings
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    /// Restore a bank and residuals (from a snapshot). Prototypes are rebuilt.
    pub fn restore(&mut self, bank: CacheBank, residual_text: Matrix, residual_visual: Matrix) -> Result<()> {
        if bank.classes() != self.state.classes() || bank.dim() != self.state.dim() {
            return Err(Error::invalid("snapshot shape does not match the engine"));
        }
        self.bank = bank;
        self.state.residual_text = residual_text;
        self.state.residual_visual = residual_visual;
        self.state.rebuild(&self.bank, self.cfg.hp.w);
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.state.classes()
    }

    pub fn dim(&self) -> usize {
        self.state.dim()
    }

    /// Zero-shot prediction for one feature, without touching any state.
    pub fn zero_shot(&self, feature: &[f64]) -> Result<(ProbVector, f64)> {
        zero_shot(feature, &self.state.text, self.cfg.hp.tau)
    }

    /// Update the caches with `feature` in the order entropy cache,
    /// reflection (negative cache or entropy reconsideration), align cache.
    pub fn update_caches(&mut self, feature: &[f64]) -> Result<RouteSummary> {
        let hp = &self.cfg.hp;
        let (probs, h) = zero_shot(feature, &self.state.text, hp.tau)?;
        let gate = hp.e_gate_frac * (self.classes() as f64).ln();
        let mut route = RouteSummary::default();

        let mut reflect = h > gate;
        if !reflect {
            let d = self.bank.entropy_cache_update(feature, &probs)?;
            route.entropy_stored = d.stored();
            reflect = d == Admission::Rejected;
        }
        if reflect {
            route.reflected = true;
            let (cal, h_prime) = self.bank.reflect(feature, &self.state.text, hp)?;
            match self.bank.negative_cache_update(feature, &cal, h_prime, hp)? {
                Routing::Negative(a) => route.negative_stored = a.stored(),
                Routing::Reconsider => {
                    route.reconsidered = true;
                    let a = self.bank.entropy_admit(feature, &cal, h_prime)?;
                    route.entropy_stored |= a.stored();
                }
                Routing::Discard => route.discarded = true,
            }
        }
        let center = self.state.centers.row(probs.argmax()).to_vec();
        route.align_stored = self.bank.align_cache_update(feature, &probs, &center)?.stored();
        self.state.rebuild(&self.bank, hp.w);
        Ok(route)
    }

    /// Fused prediction for `feature` using the current caches and refined
    /// prototypes, without changing any state.
    pub fn classify(&self, feature: &[f64]) -> Result<LogitsBreakdown> {
        let (t_prime, v_prime) = self.state.refined()?;
        self.classify_with(feature, &t_prime, &v_prime)
    }

    fn classify_with(&self, feature: &[f64], t_prime: &Matrix, v_prime: &Matrix) -> Result<LogitsBreakdown> {
        if feature.len() != self.dim() {
            return Err(Error::invalid(format!(
                "feature has dimension {}, engine expects {}",
                feature.len(),
                self.dim()
            )));
        }
        let hp = &self.cfg.hp;
        let neg = self.bank.negative_matrices(hp.p_mask);
        let l_p = positive_label_matrix(&self.state.valid_visual);
        let p = visual_negative_score(feature, v_prime, &l_p, &neg.features, &neg.labels, hp)?;
        let f_r = retrieve_adaptive(feature, &self.bank, hp);
        fuse_logits(feature, t_prime, &p, &f_r, self.cfg.terms.weights(hp), self.cfg.norm)
    }

    /// One residual tuning step on the given views. Returns the loss before
    /// the step.
    pub fn tune(&mut self, views: &Matrix) -> Result<f64> {
        if !self.cfg.persist_residuals {
            self.state.reset_residuals();
            self.optimizer.reset();
        }
        let problem = TuningProblem::from_engine(self, views)?;
        let eval = problem.evaluate(&self.state.residual_text, &self.state.residual_visual)?;
        self.warnings.contrast_clamps += u64::from(eval.loss.contrast_clamped);
        let stepped = self.optimizer.step(
            &mut self.state.residual_text,
            &mut self.state.residual_visual,
            &eval.grad_text,
            &eval.grad_visual,
        );
        if !stepped {
            self.warnings.skipped_steps += 1;
        }
        Ok(eval.loss.total)
    }

    /// Process one sample (`views` row 0 is the original view): zero-shot
    /// scoring, cache routing, prototype rebuild, optional residual step,
    /// then fusion on the post-update state.
    pub fn predict(&mut self, views: &Matrix) -> Result<Prediction> {
        if views.rows() == 0 {
            return Err(Error::invalid("sample has no views"));
        }
        if views.cols() != self.dim() {
            return Err(Error::invalid(format!(
                "sample has dimension {}, engine expects {}",
                views.cols(),
                self.dim()
            )));
        }
        let original = views.row(0);
        let (zs_probs, zs_h) = self.zero_shot(original)?;
        let route = self.update_caches(original)?;
        let loss = match self.cfg.mode {
            Mode::Mcp => None,
            Mode::McpPlusPlus => Some(self.tune(views)?),
        };
        let (t_prime, v_prime) = self.state.refined()?;
        let mut breakdown = self.classify_with(original, &t_prime, &v_prime)?;
        if self.cfg.infer_views == InferViews::Confident && views.rows() > 1 {
            let per_view = views
                .iter_rows()
                .map(|v| self.classify_with(v, &t_prime, &v_prime).map(|b| b.probs.into_inner()))
                .collect::<Result<Vec<_>>>()?;
            let avg = confident_average(&per_view, self.cfg.hp.rho_delta);
            breakdown.pred = argmax(&avg);
            breakdown.probs = ProbVector::new(avg)?;
        }
        self.processed += 1;
        Ok(Prediction {
            breakdown,
            zero_shot_pred: zs_probs.argmax(),
            zero_shot_entropy: zs_h,
            route,
            loss,
        })
    }
}

/// Indices of the `max(1, ⌊ρN⌋)` lowest-entropy rows, ties by index.
pub fn confident_views(probs: &[Vec<f64>], rho: f64) -> Vec<usize> {
    let n = probs.len();
    let k = ((rho * n as f64) + 1e-9).floor().max(1.0) as usize;
    let mut idx: Vec<(f64, usize)> = probs.iter().map(|p| entropy_unchecked(p)).zip(0..n).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut sel: Vec<usize> = idx.into_iter().take(k.min(n)).map(|(_, i)| i).collect();
    sel.sort_unstable();
    sel
}

fn confident_average(probs: &[Vec<f64>], rho: f64) -> Vec<f64> {
    let sel = confident_views(probs, rho);
    let c = probs[0].len();
    let mut avg = vec![0.0; c];
    for &i in &sel {
        for (a, p) in avg.iter_mut().zip(&probs[i]) {
            *a += p / sel.len() as f64;
        }
    }
    avg
}

/// Occupancy per cache kind, `[entropy, align, negative]`.
pub fn occupancy(bank: &CacheBank) -> [usize; 3] {
    [
        bank.occupancy(CacheKind::Entropy),
        bank.occupancy(CacheKind::Align),
        bank.occupancy(CacheKind::Negative),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::l2_normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&v).unwrap()
    }

    fn random_text(rng: &mut ChaCha8Rng, c: usize, d: usize) -> Matrix {
        Matrix::from_rows(&(0..c).map(|_| unit(rng, d)).collect::<Vec<_>>(), d).unwrap()
    }

    #[test]
    fn retrieval_examples() {
        let hp = HyperParams {
            alpha: 1.7,
            ..HyperParams::default()
        };
        let mut bank = CacheBank::new(3, 2, &hp, CacheToggles::default());
        let f = [0.6, 0.8];
        let fr = retrieve_adaptive(&f, &bank, &hp);
        assert!(fr.is_zero());
        bank.entropy_cache_update(&f, &ProbVector::new(vec![0.1, 0.8, 0.1]).unwrap())
            .unwrap();
        let fr = retrieve_adaptive(&f, &bank, &hp);
        assert!((fr.get(1, 0) - 1.7 * 0.6).abs() < 1e-15);
        assert!((fr.get(1, 1) - 1.7 * 0.8).abs() < 1e-15);
        assert!(fr.row(0).iter().chain(fr.row(2)).all(|&x| x == 0.0));
    }

    #[test]
    fn visual_score_examples() {
        let hp = HyperParams::default();
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap();
        let lp = positive_label_matrix(&[true, true]);
        let empty_q = Matrix::zeros(0, 2);
        let empty_l = Matrix::zeros(0, 2);
        let p = visual_negative_score(&[1.0, 0.0], &v, &lp, &empty_q, &empty_l, &hp).unwrap();
        assert_eq!(p[0], hp.alpha);
        assert!((p[1] - hp.affinity(0.0)).abs() < 1e-15);

        let lp = positive_label_matrix(&[true, false]);
        let p = visual_negative_score(&[1.0, 0.0], &v, &lp, &empty_q, &empty_l, &hp).unwrap();
        assert_eq!(p[1], 0.0);

        let bad = Matrix::zeros(3, 3);
        assert!(visual_negative_score(&[1.0, 0.0], &v, &bad, &empty_q, &empty_l, &hp).is_err());
    }

    #[test]
    fn text_only_fusion_keeps_zero_shot_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, d) = (6, 10);
        let text = random_text(&mut rng, c, d);
        let f_r = Matrix::zeros(c, d);
        for _ in 0..50 {
            let f = unit(&mut rng, d);
            let p: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = fuse_logits(&f, &text, &p, &f_r, [1.0, 0.0, 0.0], FusionNorm::Standardize).unwrap();
            assert_eq!(b.pred, argmax(&text.mat_vec(&f)));
            assert!(b.cache_term.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn standardize_backward_matches_finite_differences() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let g = [0.5, -0.1, 0.25, 1.0];
        for norm in [FusionNorm::Standardize, FusionNorm::L2, FusionNorm::Softmax] {
            let z = normalize_term(&x, norm);
            let an = normalize_term_backward(&x, &z, &g, norm);
            for i in 0..x.len() {
                let h = 1e-6;
                let mut xp = x;
                xp[i] += h;
                let mut xm = x;
                xm[i] -= h;
                let fp = dot(&normalize_term(&xp, norm), &g);
                let fm = dot(&normalize_term(&xm, norm), &g);
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - an[i]).abs() < 1e-8, "{norm:?} {i}: {fd} vs {}", an[i]);
            }
        }
    }

    #[test]
    fn confident_view_selection() {
        let probs: Vec<Vec<f64>> = (0..32)
            .map(|i| {
                let p = 0.5 + 0.015 * i as f64;
                vec![p, 1.0 - p]
            })
            .collect();
        assert_eq!(confident_views(&probs, 0.1), vec![29, 30, 31]);
        assert_eq!(confident_views(&probs[..4], 0.1), vec![3]);
        assert_eq!(confident_views(&probs[..1], 0.1), vec![0]);
    }

    #[test]
    fn cold_start_first_prediction_is_zero_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, d) = (4, 8);
        let text = random_text(&mut rng, c, d);
        let mut engine = Engine::new(text, EngineConfig::default()).unwrap();
        let f = unit(&mut rng, d);
        let views = Matrix::from_rows(&[f.clone()], d).unwrap();
        let pred = engine.predict(&views).unwrap();
        assert_eq!(pred.breakdown.pred, pred.zero_shot_pred);
    }

    #[test]
    fn rejects_wrong_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let text = random_text(&mut rng, 3, 4);
        let mut engine = Engine::new(text, EngineConfig::default()).unwrap();
        assert!(engine.predict(&Matrix::zeros(1, 5)).is_err());
        assert!(engine.predict(&Matrix::zeros(0, 4)).is_err());
    }

    proptest! {
        #[test]
        fn normalization_preserves_argmax(x in prop::collection::vec(-10.0f64..10.0, 2..12)) {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            prop_assume!(x.iter().any(|v| (v - mean).abs() > 1e-6));
            let z = normalize_term(&x, FusionNorm::Standardize);
            prop_assert_eq!(argmax(&z), argmax(&x));
            let s = normalize_term(&x, FusionNorm::Softmax);
            prop_assert_eq!(argmax(&s), argmax(&x));
        }
    }
}
