//! Deterministic synthetic embedding streams.
//!
//! Class means are unit vectors with a minimum pairwise angle. A sample is
//! `normalize(mean + spread·g)`, each extra view is
//! `normalize(sample + noise·g)`, and the class text embedding is
//! `normalize(mean + shift·s_c)` where `s_c` is a fixed random unit
//! direction per class. The `shift` term plays the role of the gap between
//! the image and text embedding spaces. Gaussian draws `g` have per-coordinate
//! standard deviation `1/√d`, so `spread` and `noise` are on the scale of
//! the unit sphere regardless of `d`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::{SampleRecord, StreamHeader};
use crate::error::{Error, Result};
use crate::math::{dot, l2_normalize, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    /// Minimum angle between class means, in degrees.
    pub min_angle_deg: f64,
    pub spread: f64,
    pub noise: f64,
    pub shift: f64,
    pub samples: usize,
    pub views: usize,
    pub prompts_per_class: usize,
    /// Jitter of individual prompt embeddings around the class text embedding.
    pub prompt_noise: f64,
    /// Fraction of records written without a label.
    pub unlabeled_frac: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            dim: 64,
            min_angle_deg: 60.0,
            spread: 1.0,
            noise: 0.3,
            shift: 3.0,
            samples: 1000,
            views: 32,
            prompts_per_class: 3,
            prompt_noise: 0.1,
            unlabeled_frac: 0.0,
            seed: 0,
        }
    }
}

const PACKING_ATTEMPTS: usize = 10_000;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 || self.dim < 1 || self.views < 1 || self.prompts_per_class < 1 {
            return Err(Error::invalid("synth: classes, dim, views and prompts must be >= 1"));
        }
        for (name, v) in [
            ("spread", self.spread),
            ("noise", self.noise),
            ("shift", self.shift),
            ("prompt_noise", self.prompt_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("synth: {name} must be a finite value >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.unlabeled_frac) {
            return Err(Error::invalid("synth: unlabeled_frac must be in [0, 1]"));
        }
        if !(0.0..=180.0).contains(&self.min_angle_deg) {
            return Err(Error::invalid("synth: min_angle_deg must be in [0, 180]"));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let s = 1.0 / (d as f64).sqrt();
    (0..d).map(|_| StandardNormal.sample(rng)).map(|g: f64| g * s).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        if let Ok(v) = l2_normalize(&gaussian(rng, d)) {
            return v;
        }
    }
}

fn perturb(rng: &mut ChaCha8Rng, base: &[f64], scale: f64) -> Vec<f64> {
    if scale == 0.0 {
        return base.to_vec();
    }
    let g = gaussian(rng, base.len());
    let v: Vec<f64> = base.iter().zip(&g).map(|(b, e)| b + scale * e).collect();
    l2_normalize(&v).unwrap_or_else(|_| base.to_vec())
}

/// Class means on the unit sphere with pairwise angle at least `min_angle`.
pub fn class_means(rng: &mut ChaCha8Rng, classes: usize, dim: usize, min_angle_deg: f64) -> Result<Vec<Vec<f64>>> {
    let max_cos = min_angle_deg.to_radians().cos();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while means.len() < classes {
        attempts += 1;
        if attempts > PACKING_ATTEMPTS * classes {
            return Err(Error::invalid(format!(
                "cannot place {classes} class means in d = {dim} with pairwise angle >= {min_angle_deg} degrees"
            )));
        }
        let cand = random_unit(rng, dim);
        if means.iter().all(|m| dot(m, &cand) <= max_cos) {
            means.push(cand);
        }
    }
    Ok(means)
}

/// Generator state; yields records lazily so arbitrarily long streams run
/// in constant memory.
pub struct SynthStream {
    spec: SynthSpec,
    rng: ChaCha8Rng,
    means: Vec<Vec<f64>>,
    header: StreamHeader,
    emitted: usize,
}

impl SynthStream {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let means = class_means(&mut rng, spec.classes, spec.dim, spec.min_angle_deg)?;
        let mut prompts = Vec::with_capacity(spec.classes);
        for mean in &means {
            let dir = random_unit(&mut rng, spec.dim);
            let text: Vec<f64> = mean.iter().zip(&dir).map(|(m, s)| m + spec.shift * s).collect();
            let text = l2_normalize(&text).unwrap_or_else(|_| mean.clone());
            let list: Vec<Vec<f64>> = (0..spec.prompts_per_class)
                .map(|_| perturb(&mut rng, &text, spec.prompt_noise))
                .collect();
            prompts.push(list);
        }
        let header = StreamHeader {
            dim: spec.dim,
            class_names: (0..spec.classes).map(|c| format!("class_{c:02}")).collect(),
            prompts,
        };
        Ok(Self {
            spec: spec.clone(),
            rng,
            means,
            header,
            emitted: 0,
        })
    }

    pub fn header(&self) -> &StreamHeader {
        &self.header
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    fn make_record(&mut self) -> SampleRecord {
        let label = self.rng.random_range(0..self.spec.classes);
        let hide = self.spec.unlabeled_frac > 0.0 && self.rng.random_bool(self.spec.unlabeled_frac);
        let sample = perturb(&mut self.rng, &self.means[label], self.spec.spread);
        let mut data = Vec::with_capacity(self.spec.views * self.spec.dim);
        data.extend_from_slice(&sample);
        for _ in 1..self.spec.views {
            data.extend(perturb(&mut self.rng, &sample, self.spec.noise));
        }
        SampleRecord {
            label: (!hide).then_some(label),
            views: Matrix::from_vec(self.spec.views, self.spec.dim, data).expect("shape"),
        }
    }
}

impl Iterator for SynthStream {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.emitted >= self.spec.samples {
            return None;
        }
        self.emitted += 1;
        Some(Ok(self.make_record()))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.spec.samples - self.emitted;
        (left, Some(left))
    }
}

/// Generate a stream and write it to `path`.
pub fn synth_stream(spec: &SynthSpec, path: impl AsRef<std::path::Path>) -> Result<u64> {
    let stream = SynthStream::new(spec)?;
    let header = stream.header().clone();
    super::format::write_stream(path, &header, stream)
}

/// Generate a stream fully in memory.
pub fn synth_in_memory(spec: &SynthSpec) -> Result<(StreamHeader, Vec<SampleRecord>)> {
    let stream = SynthStream::new(spec)?;
    let header = stream.header().clone();
    let records = stream.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caches::zero_shot;
    use crate::io::format::StreamWriter;
    use crate::prototypes::text_prototypes;

    fn zero_shot_accuracy(spec: &SynthSpec) -> f64 {
        let (h, recs) = synth_in_memory(spec).unwrap();
        let text = text_prototypes(&h.prompts).unwrap();
        let hits = recs
            .iter()
            .filter(|r| zero_shot(r.views.row(0), &text, 0.01).unwrap().0.argmax() == r.label.unwrap())
            .count();
        hits as f64 / recs.len() as f64
    }

    #[test]
    fn separable_limit_is_perfect() {
        let spec = SynthSpec {
            spread: 0.0,
            noise: 0.0,
            shift: 0.0,
            prompt_noise: 0.0,
            samples: 200,
            views: 2,
            ..SynthSpec::default()
        };
        assert_eq!(zero_shot_accuracy(&spec), 1.0);
    }

    #[test]
    fn zero_shot_accuracy_non_increasing_in_shift() {
        let accs: Vec<f64> = [0.0, 1.0, 2.0, 3.0]
            .iter()
            .map(|&shift| {
                zero_shot_accuracy(&SynthSpec {
                    shift,
                    samples: 400,
                    views: 1,
                    ..SynthSpec::default()
                })
            })
            .collect();
        for w in accs.windows(2) {
            assert!(w[1] <= w[0], "{accs:?}");
        }
        assert!(accs[3] < accs[0]);
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let spec = SynthSpec {
            samples: 30,
            views: 3,
            dim: 16,
            classes: 4,
            unlabeled_frac: 0.2,
            ..SynthSpec::default()
        };
        let encode = || {
            let s = SynthStream::new(&spec).unwrap();
            let mut w = StreamWriter::new(Vec::new(), &s.header().clone()).unwrap();
            for r in s {
                w.write_record(&r.unwrap()).unwrap();
            }
            w.finish().unwrap()
        };
        assert_eq!(encode(), encode());
    }

    #[test]
    fn infeasible_packing_is_rejected() {
        let spec = SynthSpec {
            classes: 5,
            dim: 2,
            min_angle_deg: 120.0,
            ..SynthSpec::default()
        };
        assert!(matches!(SynthStream::new(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn means_respect_min_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let means = class_means(&mut rng, 10, 16, 70.0).unwrap();
        let max_cos = 70f64.to_radians().cos();
        for i in 0..10 {
            for j in 0..i {
                assert!(dot(&means[i], &means[j]) <= max_cos);
            }
        }
    }
}
