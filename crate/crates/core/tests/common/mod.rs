//! Oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ackt_core::adversarial::{self, PairBatch};
use ackt_core::backbone::{self, GruBackbone, TokenIndex};
use ackt_core::cmoe::CategoryRepr;
use ackt_core::config::{DataSource, ExperimentConfig};
use ackt_core::data::{overlap_training_view, LabeledStudent, SplitFractions, StudentId, SynthConfig};
use ackt_core::params::Bound;
use ackt_core::pipeline::{cross_pair, load_dataset, run_cluster, split_plan};
use ackt_core::transfer::{StudentFeatures, TransferModel};
use ackt_core::{ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-8;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces a non-scalar output to a scalar with fixed random weights.
fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(tape.sum(out));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = randn(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type OpFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn eval_op(inputs: &[Tensor], f: &OpFn<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out)?;
    Ok(tape.value(loss).item())
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every input entry.
pub fn gradcheck(inputs: &[Tensor], f: &OpFn<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        for j in 0..inputs[i].len() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] += FD_STEP;
            let up = eval_op(&shifted, f)?;
            shifted[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval_op(&shifted, f)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

type LossFn<'a> = dyn Fn(&mut Tape, &Bound) -> Result<Var> + 'a;

fn eval_loss(store: &ParamStore, f: &LossFn<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| false);
    let loss = f(&mut tape, &p)?;
    Ok(tape.value(loss).item())
}

/// [`gradcheck`] over every entry of a parameter store.
pub fn param_gradcheck(store: &ParamStore, f: &LossFn<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, |_| true);
    let loss = f(&mut tape, &p)?;
    let grads = p.gradients(&tape.backward(loss)?, |_| true);
    let mut worst: f64 = 0.0;
    let mut shifted = store.clone();
    for (name, t) in store.iter() {
        for j in 0..t.len() {
            let x = t.data()[j];
            shifted.get_mut(name).unwrap().data_mut()[j] = x + FD_STEP;
            let up = eval_loss(&shifted, f)?;
            shifted.get_mut(name).unwrap().data_mut()[j] = x - FD_STEP;
            let down = eval_loss(&shifted, f)?;
            shifted.get_mut(name).unwrap().data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(grads[name].data()[j], numeric));
        }
    }
    Ok(worst)
}

pub type OpCase = (&'static str, fn(u64) -> Result<f64>);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    randn(rng, shape).map(|x| x.abs() + 0.5)
}

/// One finite-difference case per differentiable tape operation.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |s| {
            let mut r = rng(s);
            gradcheck(&[randn(&mut r, &[3, 4]), randn(&mut r, &[4, 2])], &|t, v| t.matmul(v[0], v[1]))
        }),
        ("add", |s| {
            let mut r = rng(s);
            gradcheck(&[randn(&mut r, &[2, 3]), randn(&mut r, &[2, 3])], &|t, v| t.add(v[0], v[1]))
        }),
        ("sub", |s| {
            let mut r = rng(s);
            gradcheck(&[randn(&mut r, &[2, 3]), randn(&mut r, &[2, 3])], &|t, v| t.sub(v[0], v[1]))
        }),
        ("mul", |s| {
            let mut r = rng(s);
            gradcheck(&[randn(&mut r, &[2, 3]), randn(&mut r, &[2, 3])], &|t, v| t.mul(v[0], v[1]))
        }),
        ("scale", |s| gradcheck(&[randn(&mut rng(s), &[5])], &|t, v| Ok(t.scale(v[0], -1.7)))),
        ("add_scalar", |s| gradcheck(&[randn(&mut rng(s), &[5])], &|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        ("one_minus", |s| gradcheck(&[randn(&mut rng(s), &[5])], &|t, v| Ok(t.one_minus(v[0])))),
        ("sigmoid", |s| gradcheck(&[randn(&mut rng(s), &[2, 4])], &|t, v| Ok(t.sigmoid(v[0])))),
        ("tanh", |s| gradcheck(&[randn(&mut rng(s), &[2, 4])], &|t, v| Ok(t.tanh(v[0])))),
        ("relu", |s| gradcheck(&[randn(&mut rng(s), &[2, 4])], &|t, v| Ok(t.relu(v[0])))),
        ("log", |s| gradcheck(&[positive(&mut rng(s), &[6])], &|t, v| Ok(t.log(v[0])))),
        ("softmax", |s| gradcheck(&[randn(&mut rng(s), &[6])], &|t, v| Ok(t.softmax(v[0])))),
        ("softmax_rows", |s| gradcheck(&[randn(&mut rng(s), &[3, 4])], &|t, v| Ok(t.softmax(v[0])))),
        ("concat", |s| {
            let mut r = rng(s);
            gradcheck(&[randn(&mut r, &[3, 2]), randn(&mut r, &[3, 3])], &|t, v| t.concat(&[v[0], v[1]]))
        }),
        ("concat_vectors", |s| {
            let mut r = rng(s);
            gradcheck(&[randn(&mut r, &[2]), randn(&mut r, &[3])], &|t, v| t.concat(&[v[0], v[1]]))
        }),
        ("concat_rows", |s| {
            let mut r = rng(s);
            gradcheck(&[randn(&mut r, &[2, 3]), randn(&mut r, &[1, 3])], &|t, v| t.concat_rows(&[v[0], v[1]]))
        }),
        ("gather_rows", |s| {
            gradcheck(&[randn(&mut rng(s), &[4, 3])], &|t, v| t.gather_rows(v[0], &[2, 0, 2, 3, 2]))
        }),
        ("add_bias", |s| {
            let mut r = rng(s);
            gradcheck(&[randn(&mut r, &[3, 4]), randn(&mut r, &[4])], &|t, v| t.add_bias(v[0], v[1]))
        }),
        ("affine", |s| {
            let mut r = rng(s);
            let inputs = [randn(&mut r, &[3, 4]), randn(&mut r, &[4, 2]), randn(&mut r, &[2])];
            gradcheck(&inputs, &|t, v| t.affine(v[0], v[1], v[2]))
        }),
        ("slice_cols", |s| gradcheck(&[randn(&mut rng(s), &[3, 5])], &|t, v| t.slice_cols(v[0], 1, 3))),
        ("slice_rows", |s| gradcheck(&[randn(&mut rng(s), &[5, 3])], &|t, v| t.slice_rows(v[0], 2, 2))),
        ("scale_rows", |s| {
            let mut r = rng(s);
            gradcheck(&[randn(&mut r, &[3, 4]), randn(&mut r, &[3])], &|t, v| t.scale_rows(v[0], v[1]))
        }),
        ("segment_softmax", |s| {
            gradcheck(&[randn(&mut rng(s), &[7])], &|t, v| t.segment_softmax(v[0], &[0, 3, 4, 7]))
        }),
        ("segment_weighted_sum", |s| {
            let mut r = rng(s);
            gradcheck(&[randn(&mut r, &[6]), randn(&mut r, &[6, 3])], &|t, v| {
                t.segment_weighted_sum(v[0], v[1], &[0, 2, 6])
            })
        }),
        ("sum", |s| gradcheck(&[randn(&mut rng(s), &[2, 3])], &|t, v| Ok(t.sum(v[0])))),
        ("mean", |s| gradcheck(&[randn(&mut rng(s), &[2, 3])], &|t, v| Ok(t.mean(v[0])))),
        ("bce_with_logits", |s| {
            let mut r = rng(s);
            let targets: Vec<f64> = (0..8).map(|_| r.gen_range(0..2) as f64).collect();
            let weights: Vec<f64> = (0..8).map(|i| if i == 3 { 0.0 } else { r.gen_range(0.5..2.0) }).collect();
            let logits = randn(&mut r, &[8]).map(|x| 3.0 * x);
            gradcheck(&[logits], &|t, v| t.bce_with_logits(v[0], &targets, Some(&weights)))
        }),
        ("dropout", |s| {
            gradcheck(&[randn(&mut rng(s), &[4, 5])], &|t, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(s ^ 0xd0);
                t.dropout(v[0], 0.3, &mut mask_rng)
            })
        }),
    ]
}

/// Small synthetic configuration for fast end-to-end fixtures.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let synth = SynthConfig {
        n_students: 60,
        n_questions: 12,
        n_concepts: 4,
        seq_len: 6,
        seed,
        ..SynthConfig::default()
    };
    ExperimentConfig {
        data: DataSource::Synthetic(synth),
        seed,
        dim: 4,
        experts: 3,
        attention_dim: 4,
        n_samples: 2,
        k_max: 3,
        splits: SplitFractions {
            overlap: 0.2,
            ..SplitFractions::default()
        },
        ..ExperimentConfig::default()
    }
}

pub struct TransferFixture {
    pub model: TransferModel,
    pub features: StudentFeatures,
    pub anchors: Vec<LabeledStudent>,
    pub pairs: PairBatch,
    pub lambda: f64,
}

/// Adds N(0, sd^2) noise to every entry, giving a generic check point.
fn jitter(rng: &mut ChaCha8Rng, t: &Tensor, sd: f64) -> Tensor {
    let noise = randn(rng, t.shape());
    let data = t.data().iter().zip(noise.data()).map(|(x, z)| x + sd * z).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

/// Randomly initialised stage-2 model over a tiny synthetic scenario, with
/// a handful of anchors and sampled pairs.
pub fn transfer_fixture(seed: u64) -> Result<TransferFixture> {
    let mut cfg = tiny_config(seed);
    if seed % 2 == 1 {
        cfg.category_repr = CategoryRepr::Learned;
    }
    let ds = load_dataset(&cfg)?;
    let pair = cross_pair(&cfg, &ds)?;
    let plan = split_plan(&cfg, &pair)?;
    let mut r = rng(seed);
    let index = TokenIndex::from_students(pair.source, &plan.pretrain);
    let bb = GruBackbone {
        params: backbone::init_backbone(&mut r, &index, cfg.dim)?,
        index,
    };
    let categories = run_cluster(&cfg, &ds, &bb)?;
    let train = overlap_training_view(&plan, &pair);
    let tcfg = cfg.transfer_config();
    let mut model = TransferModel::init(&mut r, &tcfg, &bb, &categories, &train)?;
    // Spread the target head so gradients are not vanishingly small, and
    // move every entry off exact zeros so no check sits on a ReLU kink.
    for (name, t) in model.params.clone().iter() {
        let scale = if name.starts_with("target.") || name.starts_with("disc.") { 3.0 } else { 1.0 };
        model.params.insert(name, jitter(&mut r, &t.map(|x| x * scale), 0.1));
    }
    let pool = plan.non_overlap_pool();
    let mut students: Vec<StudentId> = train.students.iter().map(|s| s.student).collect();
    students.extend_from_slice(&pool);
    let features = StudentFeatures::build(&bb, pair.source, &categories, &students, tcfg.max_seq_len)?;
    let anchors: Vec<LabeledStudent> = train
        .students
        .iter()
        .take(3)
        .map(|s| LabeledStudent {
            queries: s.queries.iter().take(4).copied().collect(),
            labels: s.labels.iter().take(4).copied().collect(),
            ..s.clone()
        })
        .collect();
    let ids: Vec<StudentId> = anchors.iter().map(|s| s.student).collect();
    let pairs = adversarial::sample_pairs(&ids, &features.categories, &pool, cfg.n_samples, seed)?;
    Ok(TransferFixture {
        model,
        features,
        anchors,
        pairs,
        lambda: 1.0,
    })
}

/// Finite-difference check of the full stage-2 objective
/// `L_cross + lambda * L_dis` over every stage-2 parameter.
pub fn end_to_end_check(seed: u64) -> Result<f64> {
    let fx = transfer_fixture(seed)?;
    let refs: Vec<&LabeledStudent> = fx.anchors.iter().collect();
    param_gradcheck(&fx.model.params, &|tape, p| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
        let b = fx
            .model
            .batch_losses(tape, p, &fx.features, &refs, Some(&fx.pairs), Some((0.2, &mut mask_rng)))?;
        adversarial::total_loss(tape, b.cross, b.dis, fx.lambda)
    })
}

/// Finite-difference check of the pretraining objective over every
/// backbone parameter.
pub fn backbone_check(seed: u64) -> Result<f64> {
    let cfg = tiny_config(seed);
    let ds = load_dataset(&cfg)?;
    let pair = cross_pair(&cfg, &ds)?;
    let plan = split_plan(&cfg, &pair)?;
    let students: Vec<StudentId> = plan.pretrain.iter().copied().take(3).collect();
    let index = TokenIndex::from_students(pair.source, &students);
    let params = backbone::init_backbone(&mut rng(seed), &index, cfg.dim)?;
    let params = {
        let mut r = rng(seed ^ 0x7a);
        let mut p = ParamStore::new();
        for (name, t) in params.iter() {
            p.insert(name, jitter(&mut r, t, 0.3));
        }
        p
    };
    let seqs: Vec<&[ackt_core::data::Interaction]> =
        students.iter().filter_map(|&s| pair.source.sequence(s)).map(|s| &s[..s.len().min(5)]).collect();
    param_gradcheck(&params, &|tape, p| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
        let (logits, targets) =
            backbone::next_response_logits(tape, p, &index, &seqs, Some((0.2, &mut mask_rng)))?.expect("steps");
        tape.bce_with_logits(logits, &targets, None)
    })
}

/// Mean silhouette straight from the definition: for each point the mean
/// distance to its own cluster (excluding itself) against the smallest mean
/// distance to another cluster.
pub fn brute_silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let dist = |i: usize, j: usize| -> f64 {
        points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let clusters: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for &c in clusters.iter().filter(|&&c| c != labels[i]) {
            let members: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
            b = b.min(members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64);
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// AUC by counting every positive/negative pair; ties count one half.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Isotropic Gaussian blobs around `k` centers that are pairwise `1.0`
/// apart; `sigma` is therefore the noise-to-separation ratio.
pub fn planted_blobs(k: usize, per_cluster: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng(seed);
    let dim = k.max(2);
    let mut points = Vec::with_capacity(k * per_cluster);
    let mut labels = Vec::with_capacity(k * per_cluster);
    for c in 0..k {
        for _ in 0..per_cluster {
            let p: Vec<f64> = (0..dim)
                .map(|d| {
                    let center = if d == c { std::f64::consts::FRAC_1_SQRT_2 } else { 0.0 };
                    let z: f64 = StandardNormal.sample(&mut r);
                    center + sigma * z
                })
                .collect();
            points.push(p);
            labels.push(c);
        }
    }
    (points, labels)
}

/// Mean Euclidean distance over the pairs, by state row.
pub fn mean_pair_distance(states: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    let d: f64 = pairs
        .iter()
        .map(|&(a, b)| {
            states.row(a).iter().zip(states.row(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        })
        .sum();
    d / pairs.len() as f64
}

/// Outcome of one generator step against a frozen discriminator.
#[derive(Debug)]
pub struct CohesionStep {
    pub same_before: f64,
    pub same_after: f64,
    pub diff_before: f64,
    pub diff_after: f64,
}

/// Toy alignment fixture: 2-d states on the first axis, category 0 drawn
/// from [-1.5, -0.5] and category 1 from [0.5, 1.5], and a frozen
/// discriminator whose same-category logit is `1 - 2|a_0 - b_0|`. One plain
/// gradient step `states -= lr * grad(lambda * L_dis)` moves only the states.
pub fn cohesion_step(seed: u64, lambda: f64, lr: f64) -> Result<CohesionStep> {
    use ackt_core::adversarial::PairRows;

    let mut r = rng(seed);
    let per = 6;
    let mut rows = Vec::new();
    for c in 0..2 {
        for _ in 0..per {
            let x = if c == 0 { -1.5 } else { 0.5 } + r.gen::<f64>();
            rows.push(vec![x, 0.0]);
        }
    }
    let category = |i: usize| i / per;
    let mut pair_rows = PairRows::default();
    for a in 0..2 * per {
        pair_rows.anchor.push(a);
        for b in 0..2 * per {
            if a == b {
                continue;
            }
            if category(a) == category(b) {
                pair_rows.same.push((a, b));
            } else {
                pair_rows.diff.push((a, b));
            }
        }
    }

    // Hidden unit 0 = relu(a0 - b0), unit 1 = relu(b0 - a0); layer 2 adds
    // them into |a0 - b0|; the logit is 1 - 2|a0 - b0|.
    let mut disc = ParamStore::new();
    disc.insert(
        "disc.l1.w",
        Tensor::matrix(4, 2, vec![1.0, -1.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0])?,
    );
    disc.insert("disc.l1.b", Tensor::vector(vec![0.0, 0.0]));
    disc.insert("disc.l2.w", Tensor::matrix(2, 1, vec![1.0, 1.0])?);
    disc.insert("disc.l2.b", Tensor::vector(vec![0.0]));
    disc.insert("disc.l3.w", Tensor::matrix(1, 1, vec![-2.0])?);
    disc.insert("disc.l3.b", Tensor::vector(vec![1.0]));

    let mut store = disc.clone();
    store.insert("states", Tensor::from_rows(&rows)?);
    let before = store.require("states")?.clone();

    let generator = |n: &str| n == "states";
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, generator);
    let dis = adversarial::dis_loss(&mut tape, &p, p.var("states"), &pair_rows)?;
    let loss = tape.scale(dis, lambda);
    let grads = p.gradients(&tape.backward(loss)?, generator);
    assert_eq!(grads.len(), 1, "only the states may receive a step");
    let step = &grads["states"];
    let data = before.data().iter().zip(step.data()).map(|(x, g)| x - lr * g).collect();
    let after = Tensor::new(before.shape().to_vec(), data)?;

    Ok(CohesionStep {
        same_before: mean_pair_distance(&before, &pair_rows.same),
        same_after: mean_pair_distance(&after, &pair_rows.same),
        diff_before: mean_pair_distance(&before, &pair_rows.diff),
        diff_after: mean_pair_distance(&after, &pair_rows.diff),
    })
}

pub fn by_student<T: Clone>(ids: &[StudentId], values: &[T]) -> BTreeMap<StudentId, T> {
    ids.iter().copied().zip(values.iter().cloned()).collect()
}
