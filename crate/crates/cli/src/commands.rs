use std::fs;
use std::path::{Path, PathBuf};

use pdcnn_core::arch::build_pdcnn_with;
use pdcnn_core::data::{gen_synthetic, load_manifest, rotate_augment, split_batches, write_manifest, SyntheticConfig};
use pdcnn_core::diag::{detect_convergence, emit_report, filter_variance, sig6, ConvergenceReport, CsvReport};
use pdcnn_core::optim::{self, EpochRecord, TrainOptions};
use pdcnn_core::search::{greedy_pdcnn_search, EvalOracle, ReplayOracle, SearchTrace, TrainingOracle};
use pdcnn_core::{param_count, Dataset, Network, Rng, Sample, TrainCurve};

use crate::config::{RunConfig, Source};
use crate::{CliError, ConfigArgs, DiagArgs, EvalArgs, GendataArgs, OptimArgs, SearchArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn some<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|x| x.to_string())
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn flag(set: bool) -> Option<String> {
    set.then(|| "true".to_string())
}

fn run_config<'a>(c: &'a ConfigArgs, o: &'a OptimArgs, mut pairs: Vec<(&'a str, Option<String>)>) -> Result<RunConfig> {
    let mut sources = Vec::new();
    if let Some(p) = &c.arch {
        sources.push(Source::file(p)?);
    }
    if let Some(p) = &c.config {
        sources.push(Source::file(p)?);
    }
    pairs.extend([
        ("preset", c.preset.clone()),
        ("seed", some(c.seed)),
        ("epochs", some(o.epochs)),
        ("lr", some(o.lr)),
        ("momentum", some(o.momentum)),
        ("weight_decay", some(o.weight_decay)),
        ("batch_size", some(o.batch_size)),
        ("rotate", flag(o.rotate)),
        ("crop", some(o.crop)),
    ]);
    sources.push(Source::flags(pairs));
    RunConfig::merge(&sources)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required (flag or config key)")))
}

struct Split {
    train: Dataset,
    test: Dataset,
    train_samples: Vec<Sample>,
    test_samples: Vec<Sample>,
}

/// Loads the manifest, optionally rotates, splits 3:1, and sets the network input to the crop.
fn load_split(rc: &mut RunConfig) -> Result<Split> {
    let manifest = required(&rc.manifest, "manifest")?;
    let mut data = load_manifest(manifest)?;
    if rc.rotate {
        data = rotate_augment(&data)?;
    }
    let (train, test) = split_batches(&data, &mut Rng::derive(rc.seed, &[3]))?;
    let (train_samples, size) = train.load()?;
    let (test_samples, _) = test.load()?;
    let crop = rc.crop_for(size);
    rc.arch.input = [rc.arch.input[0], crop, crop];
    Ok(Split {
        train,
        test,
        train_samples,
        test_samples,
    })
}

pub fn gendata(a: GendataArgs) -> Result<()> {
    let cfg = SyntheticConfig::balanced(a.n_per_class, a.size, a.difficulty, a.seed);
    create_dir(&a.out)?;
    let d = gen_synthetic(&cfg, &a.out)?;
    println!("records={}", d.len());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut rc = run_config(
        &a.cfg,
        &a.optim,
        vec![
            ("manifest", path(&a.manifest)),
            ("depths", a.depths.clone()),
            ("variants", a.variants.clone()),
            ("out", path(&a.out)),
            ("wall_clock", flag(a.wall_clock)),
        ],
    )?;
    let out = required(&rc.out, "out")?.clone();
    let depths = required(&rc.depths, "depths")?.clone();
    let split = load_split(&mut rc)?;
    let (train_set, test_set) = (&split.train_samples, &split.test_samples);
    let spec = build_pdcnn_with(&depths, rc.variants.as_deref(), &rc.arch)?;
    let params = param_count(&spec)?;
    let name = spec.to_string();
    eprintln!(
        "{name}: {params} parameters, {} train / {} test",
        train_set.len(),
        test_set.len()
    );

    let epochs = rc.sgd.max_epochs;
    let progress = move |r: &EpochRecord| {
        eprintln!(
            "epoch {}/{epochs} loss={:.5} train_error={:.4} test_error={:.4}",
            r.epoch, r.train_loss, r.train_error, r.test_error
        )
    };
    let opts = TrainOptions {
        wall_clock: rc.wall_clock,
        on_epoch: Some(&progress),
    };
    let outcome = optim::train(spec, train_set, test_set, &rc.sgd, rc.seed, &opts)?;

    create_dir(&out)?;
    outcome.curve.write_csv(&out.join("curve.csv"))?;
    outcome.net.save(&out.join("model.bin"))?;
    if !rc.rotate {
        write_manifest(&out.join("train.csv"), &split.train.records)?;
        write_manifest(&out.join("test.csv"), &split.test.records)?;
    }
    let convergence = detect_convergence(&outcome.curve, rc.window, rc.tol);
    let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
    let report = format!(
        "architecture={name}\ndepths={}\nparam_count={params}\ntrain_size={}\ntest_size={}\nepochs={}\n\
         final_test_error={}\nbest_epoch={}\nbest_test_error={}\nconvergence_epoch={}\n",
        pdcnn_core::kv::join(&depths),
        train_set.len(),
        test_set.len(),
        outcome.curve.len(),
        opt(outcome.curve.records.last().map(|r| format!("{:.6}", r.test_error))),
        opt(some(outcome.best_epoch)),
        opt(outcome.best_test_error.map(|e| format!("{e:.6}"))),
        opt(some(convergence)),
    );
    write(&out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let net = Network::load(&a.model)?;
    let (samples, _) = load_manifest(&a.manifest)?.load()?;
    let error = optim::evaluate(&net, &samples)?;
    println!("error_rate={error:.6}");
    Ok(())
}

fn print_trace(trace: &SearchTrace) {
    for r in &trace.rounds {
        match r.candidates.iter().find(|c| c.chosen) {
            Some(c) => println!(
                "round={} depths={} error={}",
                r.round,
                pdcnn_core::kv::join(&c.depths),
                sig6(c.error)
            ),
            None => println!("round={} stop", r.round),
        }
    }
    println!("winner={}", pdcnn_core::kv::join(&trace.winner));
}

pub fn search(a: SearchArgs) -> Result<()> {
    let mut rc = run_config(
        &a.cfg,
        &a.optim,
        vec![
            ("manifest", path(&a.manifest)),
            ("max_branches", some(a.max_branches)),
            ("candidates", a.candidates.clone()),
            ("min_improvement", some(a.min_improvement)),
            ("out", path(&a.out)),
        ],
    )?;
    let out = rc.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let data;
    let mut oracle: Box<dyn EvalOracle + '_>;
    if let Some(p) = &a.replay {
        let text = fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?;
        oracle = Box::new(ReplayOracle::parse_csv(&text)?);
    } else if rc.manifest.is_some() {
        data = load_split(&mut rc)?;
        oracle = Box::new(TrainingOracle {
            train: &data.train_samples,
            test: &data.test_samples,
            arch: rc.arch.clone(),
            sgd: rc.sgd,
            seed: rc.seed,
        });
    } else {
        return Err(CliError::Usage("search needs --replay FILE or --manifest FILE".into()));
    }
    let result = greedy_pdcnn_search(&rc.candidates, oracle.as_mut(), rc.search);
    create_dir(&out)?;
    let trace_path = out.join("search.csv");
    match result {
        Ok(trace) => {
            write(&trace_path, trace.to_csv())?;
            print_trace(&trace);
            Ok(())
        }
        Err(e) => {
            write(&trace_path, e.partial.to_csv())?;
            print_trace(&e.partial);
            Err(CliError::Runtime(format!(
                "{} (partial trace in {})",
                e.source,
                trace_path.display()
            )))
        }
    }
}

fn parse_time(s: &str) -> Result<(f64, u64, u64)> {
    let bad = || CliError::Usage(format!("--time expects t,n,e (e.g. 8.32633,3,967), got {s:?}"));
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [t, n, e] = parts[..] else { return Err(bad()) };
    let t: f64 = t.parse().map_err(|_| bad())?;
    if !(t >= 0.0 && t.is_finite()) {
        return Err(bad());
    }
    Ok((t, n.parse().map_err(|_| bad())?, e.parse().map_err(|_| bad())?))
}

pub fn diag(a: DiagArgs) -> Result<()> {
    if a.model.is_none() && a.curve.is_none() && a.time.is_none() {
        return Err(CliError::Usage(
            "diag needs at least one of --model, --curve, --time".into(),
        ));
    }
    let time = a.time.as_deref().map(parse_time).transpose()?;
    let defaults = RunConfig::default();
    let window = a.window.unwrap_or(defaults.window);
    let tol = a.tol.unwrap_or(defaults.tol);
    if window == 0 {
        return Err(CliError::Usage("--window must be positive".into()));
    }
    if let Some(dir) = &a.out {
        create_dir(dir)?;
    }
    if let Some(p) = &a.model {
        let report = filter_variance(&Network::load(p)?)?;
        for e in &report.entries {
            println!(
                "variance branch={} layer={} value={}",
                e.branch,
                e.layer,
                sig6(e.variance)
            );
        }
        if let Some(m) = report.mean {
            println!("mean_variance={}", sig6(m));
        }
        if let Some(dir) = &a.out {
            emit_report(&report, &dir.join("filter_variance.csv"))?;
        }
    }
    if let Some(p) = &a.curve {
        let curve = TrainCurve::read_csv(p)?;
        let epoch = detect_convergence(&curve, window, tol);
        let shown = epoch.map_or_else(|| "none".to_string(), |e| e.to_string());
        println!("convergence_epoch={shown}");
        if let Some(dir) = &a.out {
            let csv = format!(
                "window,tol,convergence_epoch\n{window},{},{}\n",
                sig6(tol),
                epoch.map_or(String::new(), |e| e.to_string())
            );
            write(&dir.join("convergence_epoch.csv"), csv)?;
        }
    }
    if let Some((t, n, e)) = time {
        let report = ConvergenceReport::new(t, n, e);
        println!("T={}", report.total);
        if let Some(dir) = &a.out {
            write(&dir.join("convergence_time.csv"), report.to_csv())?;
        }
    }
    Ok(())
}
