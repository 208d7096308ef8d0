// scratch: run the adaptive FD checker at a trained checkpoint
use pedenet::checkpoint::load_checkpoint;
use pedenet::dataset::synthetic::generate_synthetic_class;
use pedenet::numerics::scalar::DType;
use pedenet::numerics::gradcheck::finite_difference_check;
use pedenet::train::{sample_batch, ModelState, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: fd_probe <checkpoint> [seed n_train n_test]");
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

    let b = state.evaluate_batch(&batch).unwrap();
    println!("loss at {ckpt}: total={} den={} lp={} reg={}", b.total, b.den, b.lp, b.reg);

    let params = state.param_values();
    let (_, _, grads) = state.batch_gradients(&batch).unwrap();

    for (per_tensor, check_seed) in [(2usize, 203u64), (2, 404), (2, 505), (4, 203)] {
        let mut fun = |values: &[Vec<f64>]| {
            state.set_params(values)?;
            state.evaluate_batch(&batch).map(|bb| bb.total)
        };
        let t0 = std::time::Instant::now();
        let report =
            finite_difference_check(&mut fun, &params, &grads, per_tensor, check_seed).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let verdict = if report.max_rel < 1e-5 { "PASS" } else { "FAIL" };
        println!(
            "per_tensor={per_tensor} seed={check_seed}: max_rel {:.4e} over {} coords in {secs:.1}s  {verdict}",
            report.max_rel, report.checked
        );
    }
}
