//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Pass a substring argument to run only the criteria whose name contains it.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use pdcnn_core::arch::{branch_param_count, build_pdcnn_with, conv_param_counts};
use pdcnn_core::data::{
    all_choices, distinct_patches, gen_synthetic, rotate_augment, split_batches, Dataset, ManifestRecord,
    SyntheticConfig,
};
use pdcnn_core::diag::{convergence_time, filter_variance, FilterVarianceReport};
use pdcnn_core::gradcheck::layer_suite;
use pdcnn_core::layers::softmax_xent;
use pdcnn_core::optim::{sgd_step, sgd_update, train, TrainOptions, TrainState};
use pdcnn_core::search::{greedy_pdcnn_search, ReplayOracle, SearchOptions};
use pdcnn_core::{build_pdcnn, param_count, shape_check, ArchConfig, Network, Rng, SgdConfig, Tensor};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn gradients() -> Check {
    let checks = ok(layer_suite(12, 0xacce))?;
    let mut parts = Vec::new();
    for c in &checks {
        ensure(c.configs >= 10 && c.max_rel_error < 1e-4, || {
            format!("{} max rel err {:e}", c.layer, c.max_rel_error)
        })?;
        parts.push(format!("{} {:.1e}", c.layer, c.max_rel_error));
    }
    Ok(format!("12 configs/op, max rel err: {}", parts.join(", ")))
}

fn search_replay() -> Check {
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/search_replay.csv");
    let mut oracle = ok(ReplayOracle::parse_csv(&ok(fs::read_to_string(fixture))?))?;
    let trace = greedy_pdcnn_search(&[3, 4, 5], &mut oracle, SearchOptions::default()).map_err(|e| e.to_string())?;
    let chosen: Vec<(Vec<usize>, f64)> = trace
        .rounds
        .iter()
        .flat_map(|r| {
            r.candidates
                .iter()
                .filter(|c| c.chosen)
                .map(|c| (c.depths.clone(), c.error))
        })
        .collect();
    let want = vec![(vec![4], 0.08571), (vec![4, 3], 0.082353), (vec![4, 3, 4], 0.079832)];
    ensure(chosen == want, || format!("chosen {chosen:?}"))?;
    ensure(trace.rounds.len() == 4 && trace.rounds[3].stopped, || {
        "search did not stop at round 4".into()
    })?;
    ensure(trace.rounds[3].candidates.iter().all(|c| c.error > 0.079832), || {
        "round 4 has an improvement".into()
    })?;
    Ok("4 -> 4,3 (0.082353) -> 4,3,4 (0.079832), stop at round 4".into())
}

fn convergence_arithmetic() -> Check {
    let rows = [
        (8.32633, 3, 967, 24155),
        (10.78233, 3, 988, 31959),
        (6.26900, 3, 923, 17359),
    ];
    for (t, n, e, want) in rows {
        let got = convergence_time(t, n, e);
        ensure(got.abs_diff(want) <= 1, || {
            format!("({t},{n},{e}) -> {got}, want {want}")
        })?;
    }
    Ok("24155, 31959, 17359".into())
}

fn augmentation_count() -> Check {
    let choices = all_choices(256, 224).len();
    ensure(choices == 2048, || format!("{choices} choices"))?;
    let mut rng = Rng::new(11);
    let image = ok(Tensor::from_vec(
        &[3, 256, 256],
        (0..3 * 256 * 256).map(|_| rng.uniform()).collect(),
    ))?;
    let distinct = ok(distinct_patches(&image, 224))?;
    ensure(distinct == 2048, || format!("{distinct} distinct patches"))?;
    let records = (0..5)
        .map(|i| {
            let img = Tensor::from_vec(&[3, 4, 4], (0..48).map(|j| (i * 48 + j) as f64).collect()).unwrap();
            ManifestRecord::in_memory(img, i % 2, "c")
        })
        .collect();
    let rotated = ok(rotate_augment(&Dataset::new(records)))?;
    ensure(rotated.len() == 20, || {
        format!("rotate_augment(5) -> {}", rotated.len())
    })?;
    Ok("2048 choices, 2048 distinct patches, 5 -> 20 after rotation".into())
}

fn desk_learning() -> Check {
    let dir = ok(tempfile::tempdir())?;
    let data = ok(gen_synthetic(
        &SyntheticConfig::balanced(1000, 64, 0.3, 2024),
        dir.path(),
    ))?;
    let (train_d, test_d) = ok(split_batches(&data, &mut Rng::new(7)))?;
    let (train_set, _) = ok(train_d.load())?;
    let (test_set, _) = ok(test_d.load())?;
    let cfg = ArchConfig::desk();
    let sgd = SgdConfig {
        max_epochs: 30,
        ..SgdConfig::default()
    };
    let run = |depths: &[usize]| {
        let spec = build_pdcnn_with(depths, None, &cfg).map_err(|e| e.to_string())?;
        train(spec, &train_set, &test_set, &sgd, 5, &TrainOptions::default()).map_err(|e| e.to_string())
    };
    let single = run(&[4])?;
    let reached = single
        .curve
        .records
        .iter()
        .find(|r| r.train_error <= 0.05)
        .map(|r| r.epoch);
    let reached = reached.ok_or_else(|| {
        let best = single
            .curve
            .records
            .iter()
            .map(|r| r.train_error)
            .fold(f64::INFINITY, f64::min);
        format!("Arch2 train error never <= 0.05 (best {best:.4})")
    })?;
    let parallel = run(&[4, 3, 4])?;
    let (e1, e3) = (single.best_test_error.unwrap(), parallel.best_test_error.unwrap());
    ensure(e3 <= e1 + 0.02, || {
        format!("[4,3,4] test error {e3:.4} > Arch2 {e1:.4} + 0.02")
    })?;
    Ok(format!(
        "Arch2 train error <= 0.05 at epoch {reached}; test error Arch2 {e1:.4}, [4,3,4] {e3:.4}"
    ))
}

fn loss_arithmetic() -> Check {
    let (loss, grad) = ok(softmax_xent(&Tensor::zeros(&[2]).unwrap(), 0))?;
    let ln2 = std::f64::consts::LN_2;
    ensure((loss - ln2).abs() < 1e-9, || format!("loss {loss}"))?;
    ensure(grad.sum().abs() < 1e-12, || format!("grad sum {}", grad.sum()))?;
    Ok(format!("loss {loss:.12}, grad sum {:e}", grad.sum()))
}

fn optimizer_oracle() -> Check {
    let scalar = |v: f64| Tensor::from_vec(&[1], vec![v]).unwrap();
    let (mut w, mut v, g) = (scalar(1.0), scalar(0.0), scalar(1.0));
    ok(sgd_update(&mut w, &mut v, &g, 0.1, 0.9, 0.0))?;
    ensure(w.data()[0] == 0.9, || format!("step 1: {}", w.data()[0]))?;
    ok(sgd_update(&mut w, &mut v, &g, 0.1, 0.9, 0.0))?;
    ensure(w.data()[0] == 0.71, || format!("step 2: {:?}", w.data()[0]))?;

    let cfg = ArchConfig {
        filters: [2, 3, 3, 2, 2],
        strides: [2, 1, 1, 1, 1],
        input: [3, 32, 32],
        ..ArchConfig::default()
    };
    let net = ok(Network::init(
        ok(build_pdcnn_with(&[3, 4], None, &cfg))?,
        &mut Rng::new(3),
    ))?;
    let sgd = SgdConfig {
        learning_rate: 0.037,
        momentum: 0.0,
        weight_decay: 0.0,
        ..SgdConfig::default()
    };
    let mut rng = Rng::new(4);
    let grads: Vec<Tensor> = net
        .params()
        .iter()
        .map(|p| Tensor::from_vec(p.value.shape(), (0..p.value.len()).map(|_| rng.normal()).collect()).unwrap())
        .collect();
    let before: Vec<Tensor> = net.params().iter().map(|p| p.value.clone()).collect();
    let mut state = TrainState::new(net, Rng::new(0), &sgd);
    ok(sgd_step(&mut state, &grads, &sgd))?;
    let mut n = 0;
    for ((p, w0), g) in state.net.params().iter().zip(&before).zip(&grads) {
        for ((&a, &w), &gi) in p.value.data().iter().zip(w0.data()).zip(g.data()) {
            ensure(a.to_bits() == (w - 0.037 * gi).to_bits(), || {
                format!("{}: {a} != {}", p.name, w - 0.037 * gi)
            })?;
            n += 1;
        }
    }
    Ok(format!("1 -> 0.9 -> 0.71 exact; plain GD bit-exact on {n} parameters"))
}

fn shape_and_params() -> Check {
    let spec = ok(build_pdcnn(&[4]))?;
    let table = ok(shape_check(&spec, [3, 224, 224]))?;
    ensure(table.rows.iter().all(|r| r.shape.iter().all(|&d| d > 0)), || {
        "non-positive extent".into()
    })?;
    let conv1 = conv_param_counts(&spec.branches[0], 3)[0].1;
    ensure(conv1 == 9472, || format!("conv1 params {conv1}"))?;
    for depths in [vec![4, 3], vec![4, 3, 4], vec![4, 3, 4, 4], vec![5, 5]] {
        let p = ok(build_pdcnn(&depths))?;
        let fused = ok(shape_check(&p, [3, 224, 224]))?.fused;
        let branches: usize = p.branches.iter().map(|b| branch_param_count(b, 3)).sum();
        let total = ok(param_count(&p))?;
        ensure(total == branches + 2 * fused + 2, || {
            format!("{depths:?}: {total} != {branches} + head")
        })?;
    }
    let last = &table.rows[table.rows.len() - 1];
    Ok(format!(
        "Arch2 at 224 ends {}x{}x{}, conv1 9472, additive over branches + head",
        last.shape[0], last.shape[1], last.shape[2]
    ))
}

fn determinism() -> Check {
    let exe = env!("CARGO_BIN_EXE_pdcnn");
    let dir = ok(tempfile::tempdir())?;
    let run = |args: &[&str]| -> Result<(), String> {
        let o = ok(Command::new(exe).args(args).output())?;
        ensure(o.status.success(), || {
            format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr))
        })
    };
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    run(&[
        "gendata",
        "--out",
        &p("data"),
        "--n-per-class",
        "16",
        "--size",
        "64",
        "--difficulty",
        "0.3",
        "--seed",
        "9",
    ])?;
    let manifest = p("data/manifest.csv");
    for out in ["a", "b"] {
        let out = p(out);
        run(&[
            "train",
            "--manifest",
            &manifest,
            "--preset",
            "desk",
            "--depths",
            "4,3,4",
            "--epochs",
            "3",
            "--batch-size",
            "8",
            "--seed",
            "21",
            "--out",
            &out,
        ])?;
    }
    let read = |f: &str| fs::read(Path::new(&p(f))).map_err(|e| e.to_string());
    for f in ["curve.csv", "model.bin"] {
        ensure(read(&format!("a/{f}"))? == read(&format!("b/{f}"))?, || {
            format!("{f} differs")
        })?;
    }
    Ok("curve.csv and model.bin byte-identical across two runs".into())
}

fn variance_diagnostic() -> Check {
    let one = |t: Tensor| FilterVarianceReport::from_weights([("b".to_string(), "conv1".to_string(), &t)]);
    let constant = ok(one(Tensor::new(&[4, 3, 2, 2], 0.7).unwrap()))?.entries[0].variance;
    ensure(constant == 0.0, || format!("constant -> {constant}"))?;
    let small = ok(one(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()))?.entries[0].variance;
    ensure(small == 1.25, || format!("{{1,2,3,4}} -> {small}"))?;
    let net = ok(Network::init(ok(build_pdcnn(&[4]))?, &mut Rng::new(17)))?;
    let n = net.first_conv_weights()[0].2.len();
    let v = ok(filter_variance(&net))?.entries[0].variance;
    ensure(n >= 4096 && (0.5e-4..=1.5e-4).contains(&v), || {
        format!("{n} weights, variance {v:e}")
    })?;
    Ok(format!("0, 1.25, Gaussian(0, 0.01) conv1 of {n} weights -> {v:.4e}"))
}

struct Criterion {
    id: u8,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "gradient correctness",
            limit: Some(Duration::from_secs(30)),
            run: gradients,
        },
        Criterion {
            id: 2,
            name: "search fixture replay",
            limit: Some(Duration::from_secs(1)),
            run: search_replay,
        },
        Criterion {
            id: 3,
            name: "convergence-time arithmetic",
            limit: None,
            run: convergence_arithmetic,
        },
        Criterion {
            id: 4,
            name: "augmentation count",
            limit: None,
            run: augmentation_count,
        },
        Criterion {
            id: 5,
            name: "desk-scale learning",
            limit: Some(Duration::from_secs(15 * 60)),
            run: desk_learning,
        },
        Criterion {
            id: 6,
            name: "loss arithmetic",
            limit: None,
            run: loss_arithmetic,
        },
        Criterion {
            id: 7,
            name: "optimizer oracle",
            limit: None,
            run: optimizer_oracle,
        },
        Criterion {
            id: 8,
            name: "shape and parameter arithmetic",
            limit: None,
            run: shape_and_params,
        },
        Criterion {
            id: 9,
            name: "determinism",
            limit: None,
            run: determinism,
        },
        Criterion {
            id: 10,
            name: "variance diagnostic",
            limit: None,
            run: variance_diagnostic,
        },
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = criteria
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.name.contains(f.as_str())));
    let mut failed = 0;
    let mut ran = 0;
    for c in selected {
        ran += 1;
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.1?}, limit {limit:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS criterion {:>2} {}: {detail} [{elapsed:.2?}]", c.id, c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2} {}: {why} [{elapsed:.2?}]", c.id, c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
