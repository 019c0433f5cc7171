//! Synthetic two-discipline data with a controlled cross-discipline link.
//!
//! Each student has a latent ability vector per discipline with
//! `a_t = ρ·a_s + sqrt(1 − ρ²)·ε`, where `ε` is an independent draw from the
//! same distribution as `a_s`, so `corr(a_s, a_t) = ρ` coordinatewise.
//! Abilities come from a mixture of planted clusters. Each concept loads on
//! one ability dimension plus a shared general component; a response is
//! `Bernoulli(sigmoid(a · w_q − b_q))`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Discipline, Interaction};
use crate::autograd::logistic;
use crate::error::{AcktError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_students: usize,
    /// Questions per discipline.
    pub n_questions: usize,
    /// Concepts per discipline.
    pub n_concepts: usize,
    pub ability_dim: usize,
    /// Correlation ρ between source and target abilities.
    pub cross_corr: f64,
    /// Fraction of students with target-discipline records.
    pub overlap_frac: f64,
    /// Interactions per student per discipline.
    pub seq_len: usize,
    /// Planted ability clusters; 0 draws abilities from one Gaussian.
    pub n_clusters: usize,
    pub center_sd: f64,
    pub within_sd: f64,
    pub difficulty_sd: f64,
    pub general_loading: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_students: 2000,
            n_questions: 100,
            n_concepts: 10,
            ability_dim: 4,
            cross_corr: 0.9,
            overlap_frac: 0.8,
            seq_len: 40,
            n_clusters: 3,
            center_sd: 1.0,
            within_sd: 0.5,
            difficulty_sd: 0.3,
            general_loading: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_students", self.n_students),
            ("n_questions", self.n_questions),
            ("n_concepts", self.n_concepts),
            ("ability_dim", self.ability_dim),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(AcktError::Config(format!("synth.{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.cross_corr) {
            return Err(AcktError::Config(format!("synth.cross_corr must be in [0,1], got {}", self.cross_corr)));
        }
        if !(0.0..=1.0).contains(&self.overlap_frac) {
            return Err(AcktError::Config(format!(
                "synth.overlap_frac must be in [0,1], got {}",
                self.overlap_frac
            )));
        }
        for (name, v) in [
            ("center_sd", self.center_sd),
            ("within_sd", self.within_sd),
            ("difficulty_sd", self.difficulty_sd),
            ("general_loading", self.general_loading),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AcktError::Config(format!("synth.{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Latent variables behind a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTruth {
    pub source_ability: Vec<Vec<f64>>,
    pub target_ability: Vec<Vec<f64>>,
    /// Planted cluster of each student's source ability (0 when unclustered).
    pub cluster: Vec<usize>,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    generate_synthetic_with_truth(cfg).map(|(d, _)| d)
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_vec<R: Rng>(rng: &mut R, dim: usize, sd: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| sd * std_normal(rng))
        .collect::<Vec<f64>>()
}

fn planted_centers<R: Rng>(rng: &mut R, cfg: &SynthConfig) -> Vec<Vec<f64>> {
    if cfg.n_clusters == 0 {
        return vec![vec![0.0; cfg.ability_dim]];
    }
    // Rejection keeps planted clusters well apart relative to their spread.
    let min_sep = 4.0 * cfg.within_sd;
    let mut best: Vec<Vec<f64>> = Vec::new();
    let mut best_gap = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let centers: Vec<Vec<f64>> = (0..cfg.n_clusters)
            .map(|_| normal_vec(rng, cfg.ability_dim, cfg.center_sd))
            .collect();
        let mut gap = f64::INFINITY;
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                let d: f64 = centers[i].iter().zip(&centers[j]).map(|(a, b)| (a - b).powi(2)).sum();
                gap = gap.min(d.sqrt());
            }
        }
        if gap > best_gap {
            best_gap = gap;
            best = centers;
        }
        if best_gap >= min_sep {
            break;
        }
    }
    best
}

struct Item {
    concept: usize,
    weights: Vec<f64>,
    difficulty: f64,
}

fn items<R: Rng>(rng: &mut R, cfg: &SynthConfig, mean_ability: &[f64]) -> Vec<Item> {
    let dim = cfg.ability_dim;
    let loadings: Vec<Vec<f64>> = (0..cfg.n_concepts)
        .map(|c| {
            let mut l = vec![cfg.general_loading; dim];
            l[c % dim] += 1.0;
            l
        })
        .collect();
    (0..cfg.n_questions)
        .map(|_| {
            let concept = rng.gen_range(0..cfg.n_concepts);
            let slope = rng.gen_range(0.75..1.25);
            let weights: Vec<f64> = loadings[concept].iter().map(|l| l * slope).collect();
            // Centered on the population mean so responses stay balanced.
            let center: f64 = weights.iter().zip(mean_ability).map(|(w, a)| w * a).sum();
            let difficulty = center + cfg.difficulty_sd * std_normal(rng);
            Item {
                concept,
                weights,
                difficulty,
            }
        })
        .collect()
}

fn discipline<R: Rng>(
    rng: &mut R,
    cfg: &SynthConfig,
    name: &str,
    items: &[Item],
    students: impl Iterator<Item = (usize, Vec<f64>)>,
) -> Discipline {
    let mut d = Discipline::new(name);
    for q in 0..cfg.n_questions {
        d.questions.intern(&format!("{name}-q{q}"));
    }
    for c in 0..cfg.n_concepts {
        d.concepts.intern(&format!("{name}-c{c}"));
    }
    for (s, ability) in students {
        let seq = (0..cfg.seq_len)
            .map(|_| {
                let q = rng.gen_range(0..items.len());
                let item = &items[q];
                let logit: f64 = item.weights.iter().zip(&ability).map(|(w, a)| w * a).sum::<f64>() - item.difficulty;
                Interaction {
                    question: q,
                    concept: item.concept,
                    response: u8::from(rng.gen::<f64>() < logistic(logit)),
                }
            })
            .collect();
        d.sequences.insert(s, seq);
    }
    d
}

pub fn generate_synthetic_with_truth(cfg: &SynthConfig) -> Result<(Dataset, SynthTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = planted_centers(&mut rng, cfg);

    let draw = |rng: &mut ChaCha8Rng| {
        let k = rng.gen_range(0..centers.len());
        let noise = normal_vec(rng, cfg.ability_dim, cfg.within_sd);
        let a: Vec<f64> = centers[k].iter().zip(noise).map(|(c, e)| c + e).collect();
        (k, a)
    };

    let rho = cfg.cross_corr;
    let tail = (1.0 - rho * rho).sqrt();
    let mut truth = SynthTruth {
        source_ability: Vec::with_capacity(cfg.n_students),
        target_ability: Vec::with_capacity(cfg.n_students),
        cluster: Vec::with_capacity(cfg.n_students),
    };
    for _ in 0..cfg.n_students {
        let (k, a_s) = draw(&mut rng);
        let (_, eps) = draw(&mut rng);
        let a_t = a_s.iter().zip(&eps).map(|(a, e)| rho * a + tail * e).collect();
        truth.cluster.push(k);
        truth.source_ability.push(a_s);
        truth.target_ability.push(a_t);
    }

    let mean = |abilities: &[Vec<f64>]| {
        let mut m = vec![0.0; cfg.ability_dim];
        for a in abilities {
            m.iter_mut().zip(a).for_each(|(m, a)| *m += a / abilities.len() as f64);
        }
        m
    };
    let source_items = items(&mut rng, cfg, &mean(&truth.source_ability));
    let target_items = items(&mut rng, cfg, &mean(&truth.target_ability));

    let mut both: Vec<usize> = (0..cfg.n_students).collect();
    both.shuffle(&mut rng);
    both.truncate((cfg.overlap_frac * cfg.n_students as f64).round() as usize);
    both.sort_unstable();

    let mut dataset = Dataset::default();
    for s in 0..cfg.n_students {
        dataset.students.intern(&format!("s{s:05}"));
    }
    let source = discipline(
        &mut rng,
        cfg,
        "source",
        &source_items,
        (0..cfg.n_students).map(|s| (s, truth.source_ability[s].clone())),
    );
    let target = discipline(
        &mut rng,
        cfg,
        "target",
        &target_items,
        both.iter().map(|&s| (s, truth.target_ability[s].clone())),
    );
    dataset.disciplines = vec![source, target];
    Ok((dataset, truth))
}
