use ackt_core::backbone::{self, TokenIndex};
use ackt_core::cluster::{self, KMeansConfig};
use ackt_core::config::ExperimentConfig;
use ackt_core::data::Interaction;
use ackt_core::metrics;
use ackt_core::pipeline::{cross_pair, load_dataset, split_plan};
use ackt_core::{Tape, Tensor};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul_backward");
    for n in [32usize, 64, 128] {
        let a = random_tensor(&mut rng, n, n);
        let b = random_tensor(&mut rng, n, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let x = tape.param(a.clone());
                let y = tape.param(b.clone());
                let z = tape.matmul(x, y).unwrap();
                let s = tape.sum(z);
                black_box(tape.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn gru(c: &mut Criterion) {
    let cfg = ExperimentConfig::parse_str("synth.n_students = 200\nsynth.seq_len = 50").unwrap();
    let ds = load_dataset(&cfg).unwrap();
    let pair = cross_pair(&cfg, &ds).unwrap();
    let plan = split_plan(&cfg, &pair).unwrap();
    let students: Vec<_> = plan.pretrain.iter().copied().take(32).collect();
    let index = TokenIndex::from_students(pair.source, &students);
    let params = backbone::init_backbone(&mut ChaCha8Rng::seed_from_u64(2), &index, cfg.dim).unwrap();
    let seqs: Vec<&[Interaction]> = students.iter().filter_map(|&s| pair.source.sequence(s)).collect();
    c.bench_function("gru_batch32_len50_train_step", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, |_| true);
            let mut mask = ChaCha8Rng::seed_from_u64(3);
            let (logits, targets) = backbone::next_response_logits(&mut tape, &p, &index, &seqs, Some((0.2, &mut mask)))
                .unwrap()
                .unwrap();
            let loss = tape.bce_with_logits(logits, &targets, None).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn clustering(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let points = random_points(&mut rng, 1000, 32);
    let labels: Vec<usize> = (0..points.len()).map(|i| i % 4).collect();
    c.bench_function("silhouette_n1000_d32", |bench| {
        bench.iter(|| black_box(cluster::silhouette(&points, &labels).unwrap()))
    });
    c.bench_function("minibatch_kmeans_n1000_k4", |bench| {
        bench.iter(|| black_box(cluster::minibatch_kmeans(&points, 4, &KMeansConfig::default()).unwrap()))
    });
}

fn auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<f64> = (0..100_000).map(|_| rng.gen()).collect();
    let labels: Vec<u8> = scores.iter().map(|&s| u8::from(rng.gen::<f64>() < s)).collect();
    c.bench_function("auc_n100000", |bench| bench.iter(|| black_box(metrics::auc(&scores, &labels).unwrap())));
}

criterion_group!(benches, matmul, gru, clustering, auc);
criterion_main!(benches);
