// scratch: per-coordinate ladder diagnostics (plain + Richardson) at a checkpoint
use pedenet::checkpoint::load_checkpoint;
use pedenet::dataset::synthetic::generate_synthetic_class;
use pedenet::numerics::scalar::DType;
use pedenet::train::{sample_batch, ModelState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const LADDER: [f64; 8] = [1e-6, 2e-6, 4e-6, 8e-6, 1.6e-5, 3.2e-5, 6.4e-5, 1.28e-4];

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

// mirror of the shipped selector
fn select_plain(cds: &[f64; 8]) -> (f64, f64) {
    let gap = |k: usize| (cds[k + 1] - cds[k]).abs();
    let noise = median3([gap(0) * LADDER[0], gap(1) * LADDER[1], gap(2) * LADDER[2]]);
    let n = LADDER.len();
    let curve = median3([
        gap(n - 4) / (3.0 * LADDER[n - 4] * LADDER[n - 4]),
        gap(n - 3) / (3.0 * LADDER[n - 3] * LADDER[n - 3]),
        gap(n - 2) / (3.0 * LADDER[n - 2] * LADDER[n - 2]),
    ]);
    let (best, err) = (0..n)
        .map(|k| (k, noise / LADDER[k] + curve * LADDER[k] * LADDER[k]))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    (cds[best], err)
}

// Richardson over factor-2 pairs: error B/h + E h^4
fn select_rich(cds: &[f64; 8]) -> (f64, f64) {
    let rich: Vec<f64> = (0..7).map(|k| (4.0 * cds[k] - cds[k + 1]) / 3.0).collect();
    let gap = |k: usize| (rich[k + 1] - rich[k]).abs();
    let noise = median3([
        2.0 * gap(0) * LADDER[0],
        2.0 * gap(1) * LADDER[1],
        2.0 * gap(2) * LADDER[2],
    ]);
    let e4 = median3([
        gap(3) / (15.0 * LADDER[3].powi(4)),
        gap(4) / (15.0 * LADDER[4].powi(4)),
        gap(5) / (15.0 * LADDER[5].powi(4)),
    ]);
    let (best, err) = (0..7)
        .map(|k| (k, noise / LADDER[k] + e4 * LADDER[k].powi(4)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    (rich[best], err)
}

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: fd_ladder <checkpoint> [per_tensor seed n_train n_test]");
    let per_tensor: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(7);
    let n_train: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let n_test: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);

    let dir = tempfile::tempdir().unwrap();
    let dataset = generate_synthetic_class(dir.path(), "synthetic", seed, n_train, n_test).unwrap();
    let config = TrainConfig {
        dtype: DType::F64,
        batch_den: 4,
        batch_lp_pairs: 4,
        ..TrainConfig::default()
    };
    let mut state = ModelState::<f64>::init(config).unwrap();
    let trained: ModelState<f32> = load_checkpoint(Path::new(&ckpt)).unwrap();
    let as_f64: Vec<Vec<f64>> = trained
        .param_values()
        .iter()
        .map(|t| t.iter().map(|&v| v as f64).collect())
        .collect();
    state.set_params(&as_f64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let batch = sample_batch::<f64>(&dataset, &config, &mut rng).unwrap();

    let params = state.param_values();
    let names: Vec<String> = state.named_params().iter().map(|(n, _)| n.clone()).collect();
    let (_, _, grads) = state.batch_gradients(&batch).unwrap();

    // the checker's coordinate sampling
    let mut crng = ChaCha8Rng::seed_from_u64(203);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for ti in 0..params.len() {
        let len = params[ti].len();
        if len <= per_tensor {
            coords.extend((0..len).map(|i| (ti, i)));
        } else {
            coords.extend((0..per_tensor).map(|_| (ti, crng.gen_range(0..len))));
        }
    }

    let rel = |a: f64, v: f64| (a - v).abs() / (a.abs() + 1e-5);
    let mut work = params.clone();
    let mut fails = [0usize; 4]; // plain, rich, oracle-plain, oracle-rich
    let mut worst = [0.0f64; 4];
    let mut dump = String::from("name,i,analytic,cd0,cd1,cd2,cd3,cd4,cd5,cd6,cd7\n");
    println!(
        "{:<14} {:>8} {:>13} {:>10} {:>10} {:>10} {:>10}",
        "tensor", "coord", "analytic", "plain", "rich", "oplain", "orich"
    );
    for &(ti, i) in &coords {
        let a = grads[ti][i];
        let base = params[ti][i];
        let mut cds = [0.0f64; 8];
        for (k, &h) in LADDER.iter().enumerate() {
            work[ti][i] = base + h;
            state.set_params(&work).unwrap();
            let hi = state.evaluate_batch(&batch).unwrap().total;
            work[ti][i] = base - h;
            state.set_params(&work).unwrap();
            let lo = state.evaluate_batch(&batch).unwrap().total;
            work[ti][i] = base;
            cds[k] = (hi - lo) / (2.0 * h);
        }
        dump.push_str(&format!("{},{},{:.17e}", names[ti], i, a));
        for &cd in &cds {
            dump.push_str(&format!(",{cd:.17e}"));
        }
        dump.push('\n');
        let (plain, _) = select_plain(&cds);
        let (rich, _) = select_rich(&cds);
        let oplain = cds.iter().map(|&v| rel(a, v)).fold(f64::INFINITY, f64::min);
        let orich = (0..7)
            .map(|k| rel(a, (4.0 * cds[k] - cds[k + 1]) / 3.0))
            .fold(f64::INFINITY, f64::min);
        let rels = [rel(a, plain), rel(a, rich), oplain, orich];
        for (j, &r) in rels.iter().enumerate() {
            worst[j] = worst[j].max(r);
            if r >= 1e-5 {
                fails[j] += 1;
            }
        }
        if rels[0] >= 1e-5 || rels[1] >= 1e-5 {
            println!(
                "{:<14} {:>8} {:>13.4e} {:>10.2e} {:>10.2e} {:>10.2e} {:>10.2e}",
                names[ti], i, a, rels[0], rels[1], rels[2], rels[3]
            );
        }
    }
    state.set_params(&params).unwrap();
    println!("coords: {}", coords.len());
    println!(
        "fails  plain {} rich {} oracle-plain {} oracle-rich {}",
        fails[0], fails[1], fails[2], fails[3]
    );
    println!(
        "worst  plain {:.2e} rich {:.2e} oracle-plain {:.2e} oracle-rich {:.2e}",
        worst[0], worst[1], worst[2], worst[3]
    );
    if let Ok(path) = std::env::var("FD_DUMP") {
        std::fs::write(&path, dump).unwrap();
        println!("ladder dump written to {path}");
    }
}
