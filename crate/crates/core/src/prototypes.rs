//! Textual and visual class prototypes, prototype centers and residuals.

use serde::{Deserialize, Serialize};

use crate::caches::CacheBank;
use crate::error::{Error, Result};
use crate::math::{l2_normalize, mean_rows, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeState {
    /// `C × d` unit text prototypes.
    pub text: Matrix,
    /// `C × d` unit visual prototypes; zero rows where `valid_visual` is false.
    pub visual: Matrix,
    pub valid_visual: Vec<bool>,
    pub residual_text: Matrix,
    pub residual_visual: Matrix,
    /// `C × d` prototype centers.
    pub centers: Matrix,
}

impl PrototypeState {
    /// Fresh state with no visual evidence and zero residuals.
    pub fn new(text: Matrix, w: f64) -> Self {
        let (c, d) = (text.rows(), text.cols());
        let visual = Matrix::zeros(c, d);
        let valid = vec![false; c];
        let centers = prototype_center(&text, &visual, &valid, w);
        Self {
            text,
            visual,
            valid_visual: valid,
            residual_text: Matrix::zeros(c, d),
            residual_visual: Matrix::zeros(c, d),
            centers,
        }
    }

    pub fn classes(&self) -> usize {
        self.text.rows()
    }

    pub fn dim(&self) -> usize {
        self.text.cols()
    }

    /// Recompute visual prototypes and centers from the bank. Residuals are
    /// left untouched.
    pub fn rebuild(&mut self, bank: &CacheBank, w: f64) {
        let (visual, valid) = visual_prototypes(bank);
        self.centers = prototype_center(&self.text, &visual, &valid, w);
        self.visual = visual;
        self.valid_visual = valid;
    }

    pub fn reset_residuals(&mut self) {
        let (c, d) = (self.classes(), self.dim());
        self.residual_text = Matrix::zeros(c, d);
        self.residual_visual = Matrix::zeros(c, d);
    }

    pub fn refined(&self) -> Result<(Matrix, Matrix)> {
        apply_residuals(self)
    }
}

/// `t̄_c = normalize(mean of class c's prompt embeddings)`.
pub fn text_prototypes(prompts: &[Vec<Vec<f64>>]) -> Result<Matrix> {
    let dim = prompts
        .iter()
        .flat_map(|c| c.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::invalid("no prompt embeddings"))?;
    let mut out = Matrix::zeros(prompts.len(), dim);
    for (c, class_prompts) in prompts.iter().enumerate() {
        if class_prompts.is_empty() {
            return Err(Error::invalid(format!("class {c} has no prompt embeddings")));
        }
        if class_prompts.iter().any(|p| p.len() != dim) {
            return Err(Error::invalid(format!("class {c} has a prompt of the wrong dimension")));
        }
        let mean = mean_rows(class_prompts.iter().map(Vec::as_slice), dim).expect("non-empty");
        let unit = l2_normalize(&mean)
            .map_err(|_| Error::degenerate(format!("prompt mean of class {c} is zero")))?;
        out.row_mut(c).copy_from_slice(&unit);
    }
    Ok(out)
}

/// Pooled mean of each class's entropy and align slots, normalized.
pub fn visual_prototypes(bank: &CacheBank) -> (Matrix, Vec<bool>) {
    let (c, d) = (bank.classes(), bank.dim());
    let mut out = Matrix::zeros(c, d);
    let mut valid = vec![false; c];
    for class in 0..c {
        if let Some(mean) = mean_rows(bank.positive_features(class), d) {
            // Cached features can cancel out exactly only in contrived
            // inputs; such a class is treated as having no visual evidence.
            if let Ok(unit) = l2_normalize(&mean) {
                out.row_mut(class).copy_from_slice(&unit);
                valid[class] = true;
            }
        }
    }
    (out, valid)
}

/// `μ_c = normalize(w·v̄_c + (1−w)·t̄_c)` for classes with visual evidence,
/// `t̄_c` otherwise.
pub fn prototype_center(text: &Matrix, visual: &Matrix, valid: &[bool], w: f64) -> Matrix {
    let mut out = text.clone();
    for c in 0..text.rows() {
        if !valid[c] {
            continue;
        }
        let mix: Vec<f64> = visual
            .row(c)
            .iter()
            .zip(text.row(c))
            .map(|(v, t)| w * v + (1.0 - w) * t)
            .collect();
        // Antipodal text and visual prototypes at w = 0.5 have no direction;
        // fall back to the text prototype.
        if let Ok(unit) = l2_normalize(&mix) {
            out.row_mut(c).copy_from_slice(&unit);
        }
    }
    out
}

/// Refined prototypes `normalize(t̄_c + R_t[c])`, `normalize(v̄_c + R_v[c])`.
/// Rows with a zero residual are copied unchanged; invalid visual rows stay zero.
pub fn apply_residuals(state: &PrototypeState) -> Result<(Matrix, Matrix)> {
    let text = refine(&state.text, &state.residual_text, None)?;
    let visual = refine(&state.visual, &state.residual_visual, Some(&state.valid_visual))?;
    Ok((text, visual))
}

fn refine(base: &Matrix, residual: &Matrix, valid: Option<&[bool]>) -> Result<Matrix> {
    let mut out = base.clone();
    for c in 0..base.rows() {
        if let Some(v) = valid {
            if !v[c] {
                continue;
            }
        }
        let r = residual.row(c);
        if r.iter().all(|&x| x == 0.0) {
            continue;
        }
        let sum: Vec<f64> = base.row(c).iter().zip(r).map(|(b, r)| b + r).collect();
        let unit = l2_normalize(&sum)
            .map_err(|_| Error::degenerate(format!("prototype {c} plus residual is zero")))?;
        out.row_mut(c).copy_from_slice(&unit);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caches::CacheToggles;
    use crate::math::{norm, HyperParams, ProbVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&v).unwrap()
    }

    #[test]
    fn text_single_prompt_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prompts: Vec<Vec<Vec<f64>>> = (0..3).map(|_| vec![unit(&mut rng, 5)]).collect();
        let t = text_prototypes(&prompts).unwrap();
        for c in 0..3 {
            assert_eq!(t.row(c), prompts[c][0].as_slice());
        }
    }

    #[test]
    fn text_antipodal_prompts_are_degenerate() {
        let prompts = vec![vec![vec![1.0, 0.0], vec![-1.0, 0.0]]];
        assert!(matches!(text_prototypes(&prompts), Err(Error::DegenerateInput(_))));
        assert!(matches!(text_prototypes(&[vec![vec![1.0]], vec![]]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn text_matches_naive_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 9;
        let prompts: Vec<Vec<Vec<f64>>> = vec![(0..7).map(|_| unit(&mut rng, d)).collect()];
        let t = text_prototypes(&prompts).unwrap();
        let mut acc = vec![0.0; d];
        for p in &prompts[0] {
            for i in 0..d {
                acc[i] += p[i];
            }
        }
        let n: f64 = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        for i in 0..d {
            assert!((t.get(0, i) - acc[i] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn visual_prototypes_pool_both_caches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hp = HyperParams::default();
        let d = 6;
        let mut bank = CacheBank::new(2, d, &hp, CacheToggles::default());
        let (v, valid) = visual_prototypes(&bank);
        assert_eq!(valid, vec![false, false]);
        assert!(v.is_zero());

        let p = ProbVector::new(vec![0.9, 0.1]).unwrap();
        let first = unit(&mut rng, d);
        bank.entropy_cache_update(&first, &p).unwrap();
        let (v, valid) = visual_prototypes(&bank);
        assert_eq!(valid, vec![true, false]);
        for i in 0..d {
            assert!((v.get(0, i) - first[i]).abs() < 1e-15);
        }

        let mut feats = vec![first];
        for _ in 0..4 {
            let f = unit(&mut rng, d);
            bank.entropy_cache_update(&f, &p).unwrap();
            feats.push(f);
        }
        for _ in 0..5 {
            let f = unit(&mut rng, d);
            bank.align_cache_update(&f, &p, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
            feats.push(f);
        }
        let (v, _) = visual_prototypes(&bank);
        let mut acc = vec![0.0; d];
        for f in &feats {
            for i in 0..d {
                acc[i] += f[i] / 10.0;
            }
        }
        let n = norm(&acc);
        for i in 0..d {
            assert!((v.get(0, i) - acc[i] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn center_endpoints() {
        let t = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], 2).unwrap();
        let v = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]], 2).unwrap();
        let valid = [true, false];
        let mu1 = prototype_center(&t, &v, &valid, 1.0);
        assert_eq!(mu1.row(0), &[0.0, 1.0]);
        assert_eq!(mu1.row(1), t.row(1));
        let mu0 = prototype_center(&t, &v, &valid, 0.0);
        assert_eq!(mu0, t);
        let mu = prototype_center(&t, &v, &valid, 0.8);
        let s = (0.8f64 * 0.8 + 0.2 * 0.2).sqrt();
        assert!((mu.get(0, 0) - 0.2 / s).abs() < 1e-15);
        assert!((mu.get(0, 1) - 0.8 / s).abs() < 1e-15);
    }

    #[test]
    fn residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 5;
        let t = Matrix::from_rows(&(0..3).map(|_| unit(&mut rng, d)).collect::<Vec<_>>(), d).unwrap();
        let mut s = PrototypeState::new(t.clone(), 0.8);
        s.visual = Matrix::from_rows(&(0..3).map(|_| unit(&mut rng, d)).collect::<Vec<_>>(), d).unwrap();
        s.valid_visual = vec![true, true, false];
        s.visual.row_mut(2).fill(0.0);
        let (tp, vp) = s.refined().unwrap();
        assert_eq!(tp, s.text);
        assert_eq!(vp, s.visual);

        // Collinear residual: doubling then renormalizing gives the same row.
        s.residual_text.row_mut(0).copy_from_slice(t.row(0));
        let (tp, _) = s.refined().unwrap();
        for i in 0..d {
            assert!((tp.get(0, i) - t.get(0, i)).abs() < 1e-15);
        }

        for c in 0..3 {
            for i in 0..d {
                s.residual_text.set(c, i, rng.random_range(-0.05..0.05));
                s.residual_visual.set(c, i, rng.random_range(-0.05..0.05));
            }
        }
        let (tp, vp) = s.refined().unwrap();
        for c in 0..3 {
            let naive_t: Vec<f64> = (0..d).map(|i| s.text.get(c, i) + s.residual_text.get(c, i)).collect();
            let nt = naive_t.iter().map(|x| x * x).sum::<f64>().sqrt();
            for i in 0..d {
                assert!((tp.get(c, i) - naive_t[i] / nt).abs() < 1e-12);
            }
            if s.valid_visual[c] {
                let naive_v: Vec<f64> =
                    (0..d).map(|i| s.visual.get(c, i) + s.residual_visual.get(c, i)).collect();
                let nv = naive_v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for i in 0..d {
                    assert!((vp.get(c, i) - naive_v[i] / nv).abs() < 1e-12);
                }
                assert!((norm(vp.row(c)) - 1.0).abs() < 1e-12);
            } else {
                assert!(vp.row(c).iter().all(|&x| x == 0.0));
            }
        }

        s.residual_text.row_mut(1).iter_mut().zip(t.row(1)).for_each(|(r, x)| *r = -x);
        assert!(matches!(s.refined(), Err(Error::DegenerateInput(_))));
    }
}
