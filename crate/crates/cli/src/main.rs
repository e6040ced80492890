mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pico_core::checkpoint::Checkpoint;
use pico_core::data::{self, DatasetConfig, ManifestRow, Split};
use pico_core::eval::{self, ActiveOutcome};
use pico_core::kernels;
use pico_core::model::{Model, ModelConfig};
use pico_core::policy::{PolicyConfig, Strategy};
use pico_core::sim::{Observation, SimConfig, Simulator};
use pico_core::train::{self, SceneViews, TrainConfig};
use pico_core::{gradcheck, rng};

use config::Settings;

#[derive(Parser)]
#[command(name = "pico", version, about = "Canonicalization pipeline for visual anomaly detection")]
struct Cli {
    /// Master seed for every random stream [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key=value configuration file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: per command]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the simulator dataset
    Gen(GenArgs),
    /// Train a model on the normal training split
    Train(TrainArgs),
    /// Score a split and write metrics
    Eval(EvalArgs),
    /// Run the active pose loop on the hard cases
    Active(ActiveArgs),
    /// Time linear against quadratic attention
    Bench(BenchArgs),
    /// Check analytic gradients of every layer against finite differences
    Gradcheck,
}

#[derive(Args)]
struct GenArgs {
    /// Normal training scenes [default: 200]
    #[arg(long)]
    train_normal: Option<usize>,
    /// Normal test scenes [default: 50]
    #[arg(long)]
    test_normal: Option<usize>,
    /// Defective test scenes [default: 50]
    #[arg(long)]
    test_defect: Option<usize>,
    /// Hard cases for the active loop [default: 50]
    #[arg(long)]
    hard: Option<usize>,
    /// Image side in pixels [default: 32]
    #[arg(long)]
    size: Option<usize>,
    /// Number of discrete poses [default: 12]
    #[arg(long)]
    poses: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory [default: data]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training epochs [default: 200]
    #[arg(long)]
    epochs: Option<usize>,
    /// Scenes per batch [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Final learning rate [default: 0.00001]
    #[arg(long)]
    lr_end: Option<f64>,
    /// Decoupled weight decay [default: 0.0001]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Weight of the latent invariance loss [default: 0.1]
    #[arg(long)]
    alpha_dir: Option<f64>,
    /// Ablation variant a, b, c or d; sets the invariance weight and the attention type [default: d]
    #[arg(long)]
    ablation: Option<String>,
    /// Illumination conditions rendered per training scene [default: 4]
    #[arg(long)]
    views: Option<usize>,
    /// Epochs of illumination-estimator pretraining [default: 20]
    #[arg(long)]
    photo_epochs: Option<usize>,
    /// Std of the Gaussian perturbation of encoder features during training [default: 0]
    #[arg(long)]
    latent_noise: Option<f32>,
    /// Std of the Gaussian perturbation of normalized input images during training [default: 0.05]
    #[arg(long)]
    input_noise: Option<f32>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory [default: data]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file [default: <out>/model.pico]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split to score: test, train or hard [default: test]
    #[arg(long)]
    split: Option<String>,
    /// Write one PGM anomaly map per case [default: false]
    #[arg(long)]
    dump_maps: bool,
}

#[derive(Args)]
struct ActiveArgs {
    /// Dataset directory [default: data]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file [default: <out>/model.pico]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Maximum re-orientations per case [default: 3]
    #[arg(long)]
    budget: Option<usize>,
    /// dispersion, greedy-neighbor or random [default: dispersion]
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Repetitions per size; the median is reported [default: 5]
    #[arg(long)]
    reps: Option<usize>,
    /// Head dimension [default: 16]
    #[arg(long)]
    dim: Option<usize>,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    s.set("seed", cli.seed);
    s.set("out", cli.out.as_ref().map(|p| p.display()));
    match cli.command {
        Command::Gen(a) => {
            s.set("train_normal", a.train_normal);
            s.set("test_normal", a.test_normal);
            s.set("test_defect", a.test_defect);
            s.set("hard", a.hard);
            s.set("size", a.size);
            s.set("poses", a.poses);
            cmd_gen(&s)
        }
        Command::Train(a) => {
            s.set("data", a.data.as_ref().map(|p| p.display()));
            s.set("epochs", a.epochs);
            s.set("batch", a.batch);
            s.set("lr", a.lr);
            s.set("lr_end", a.lr_end);
            s.set("weight_decay", a.weight_decay);
            s.set("alpha_dir", a.alpha_dir);
            s.set("ablation", a.ablation);
            s.set("views", a.views);
            s.set("photo_epochs", a.photo_epochs);
            s.set("latent_noise", a.latent_noise);
            s.set("input_noise", a.input_noise);
            cmd_train(&s)
        }
        Command::Eval(a) => {
            s.set("data", a.data.as_ref().map(|p| p.display()));
            s.set("checkpoint", a.checkpoint.as_ref().map(|p| p.display()));
            s.set("split", a.split);
            if a.dump_maps {
                s.set("dump_maps", Some(true));
            }
            cmd_eval(&s)
        }
        Command::Active(a) => {
            s.set("data", a.data.as_ref().map(|p| p.display()));
            s.set("checkpoint", a.checkpoint.as_ref().map(|p| p.display()));
            s.set("budget", a.budget);
            s.set("strategy", a.strategy);
            cmd_active(&s)
        }
        Command::Bench(a) => {
            s.set("reps", a.reps);
            s.set("dim", a.dim);
            cmd_bench(&s)
        }
        Command::Gradcheck => cmd_gradcheck(&s),
    }
}

fn out_dir(s: &Settings, default: &str) -> Result<PathBuf> {
    let dir = PathBuf::from(s.get_or("out", default.to_string())?);
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn cmd_gen(s: &Settings) -> Result<()> {
    let dcfg = DatasetConfig {
        train_normal: s.get_or("train_normal", 200)?,
        test_normal: s.get_or("test_normal", 50)?,
        test_defect: s.get_or("test_defect", 50)?,
        hard: s.get_or("hard", 50)?,
    };
    let sim = Simulator::new(SimConfig {
        size: s.get_or("size", 32)?,
        poses: s.get_or("poses", 12)?,
        ..SimConfig::default()
    });
    let seed = s.get_or("seed", 0u64)?;
    let dir = out_dir(s, "data")?;
    let generated = data::make_dataset(&sim, &dcfg, seed);
    data::write_dataset(&dir, &sim, &generated)?;
    println!(
        "wrote {} rows to {}: train {} / test normal {} / test defect {} / hard {}",
        generated.rows.len(),
        dir.display(),
        dcfg.train_normal,
        dcfg.test_normal,
        dcfg.test_defect,
        dcfg.hard
    );
    Ok(())
}

struct Dataset {
    sim: Simulator,
    rows: Vec<ManifestRow>,
    archive: Checkpoint,
}

impl Dataset {
    fn load(dir: &Path) -> Result<Self> {
        let rows = data::read_manifest(&dir.join("manifest.csv"))?;
        let archive = Checkpoint::load(dir.join("observations.pico"))?;
        let sim = Simulator::new(SimConfig {
            size: archive.meta_f64("size")? as usize,
            poses: archive.meta_f64("poses")? as usize,
            noise_sigma: archive.meta_f64("noise_sigma")?,
        });
        Ok(Self { sim, rows, archive })
    }

    fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }
}

/// Model and training settings of an ablation variant: (a) single-path
/// baseline without invariance loss, (b)/(c) invariance weight 0.1/0.2, and
/// (d) the full model with linear attention.
fn ablation(variant: &str) -> Result<(bool, bool, f64)> {
    Ok(match variant {
        "a" => (false, false, 0.0),
        "b" => (true, false, 0.1),
        "c" => (true, false, 0.2),
        "d" => (true, true, 0.1),
        _ => bail!("unknown ablation variant `{variant}` (expected a, b, c or d)"),
    })
}

fn cmd_train(s: &Settings) -> Result<()> {
    let seed = s.get_or("seed", 0u64)?;
    let dir = PathBuf::from(s.get_or("data", "data".to_string())?);
    let ds = Dataset::load(&dir)?;
    let variant: String = s.get_or("ablation", "d".to_string())?;
    let (dualpath, la3, alpha) = ablation(&variant)?;
    let defaults = TrainConfig::default();
    let tcfg = TrainConfig {
        epochs: s.get_or("epochs", defaults.epochs)?,
        batch: s.get_or("batch", defaults.batch)?,
        lr_start: s.get_or("lr", defaults.lr_start)?,
        lr_end: s.get_or("lr_end", defaults.lr_end)?,
        weight_decay: s.get_or("weight_decay", defaults.weight_decay)?,
        alpha_dir: s.get_or("alpha_dir", alpha)?,
        photo_epochs: s.get_or("photo_epochs", defaults.photo_epochs)?,
        ..defaults
    };
    let mdefaults = ModelConfig::default();
    let mcfg = ModelConfig {
        image: ds.sim.cfg.size,
        use_dualpath: dualpath,
        use_la3: la3,
        latent_noise: s.get_or("latent_noise", mdefaults.latent_noise)?,
        input_noise: s.get_or("input_noise", mdefaults.input_noise)?,
        ..mdefaults
    };
    let views: usize = s.get_or("views", 4)?;
    let scenes: Vec<SceneViews> = ds
        .split(Split::Train)
        .map(|r| data::train_views(&ds.sim, r, views))
        .collect();
    if scenes.is_empty() {
        bail!("{} has no training rows", dir.display());
    }
    let out = out_dir(s, "run")?;
    let started = Instant::now();
    let outcome = train::train(&mcfg, &tcfg, &scenes, seed)?;
    let mut ck = outcome.checkpoint(&outcome.best, &tcfg, seed);
    ck.meta.insert("ablation".into(), variant.clone());
    ck.meta.insert("views".into(), views.to_string());
    ck.save(out.join("model.pico"))?;
    train::write_log(out.join("train_log.csv"), &outcome.log)?;
    let tau = format!(
        "tau={}\nscore_threshold={}\n",
        outcome.calibration.tau, outcome.calibration.score_threshold
    );
    fs::write(out.join("tau.txt"), tau).with_context(|| format!("cannot write {}", out.display()))?;
    let last = outcome.log.last().expect("at least one epoch");
    println!(
        "variant {variant}: {} epochs in {:.1}s, best epoch {} (val recon {:.3e}), final recon {:.3e} dir {:.3e}, tau {:.4}",
        tcfg.epochs,
        started.elapsed().as_secs_f64(),
        outcome.best_epoch,
        outcome.log[outcome.best_epoch].val_recon,
        last.recon,
        last.dir,
        outcome.calibration.tau
    );
    Ok(())
}

fn load_model(s: &Settings, out: &Path) -> Result<(Model, Checkpoint)> {
    let path = PathBuf::from(s.get_or("checkpoint", out.join("model.pico").display().to_string())?);
    let ck = Checkpoint::load(&path)?;
    Ok((Model::from_checkpoint(&ck)?, ck))
}

fn cmd_eval(s: &Settings) -> Result<()> {
    let ds = Dataset::load(Path::new(&s.get_or("data", "data".to_string())?))?;
    let out = out_dir(s, "run")?;
    let (model, _) = load_model(s, &out)?;
    let split_name: String = s.get_or("split", "test".to_string())?;
    let split = match split_name.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        "hard" => Split::Hard,
        other => bail!("unknown split `{other}`"),
    };
    let rows: Vec<&ManifestRow> = ds.split(split).collect();
    let obs: Vec<Observation> = rows
        .iter()
        .map(|r| data::stored_observation(&ds.archive, r))
        .collect::<pico_core::Result<_>>()?;
    let cases: Vec<(String, &Observation)> = rows.iter().map(|r| r.id.clone()).zip(obs.iter()).collect();
    let (report, maps) = eval::evaluate(&model, &cases).with_context(|| format!("evaluating split `{split_name}`"))?;

    let mut csv = String::from("split,o_auroc,p_auroc,aupro,n_normal,n_defect\n");
    csv.push_str(&format!(
        "{split_name},{},{},{},{},{}\n",
        report.o_auroc, report.p_auroc, report.aupro, report.n_normal, report.n_defect
    ));
    write(&out.join("report.csv"), &csv)?;
    let mut per = String::from("id,label,score,pose\n");
    for c in &report.cases {
        per.push_str(&format!("{},{},{},{}\n", c.id, u8::from(c.label), c.score, c.pose));
    }
    write(&out.join("cases.csv"), &per)?;
    if s.get_or("dump_maps", false)? {
        let dir = out.join("maps");
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let hi = maps.iter().map(|m| m.score).fold(0.0f32, f32::max);
        for (c, m) in report.cases.iter().zip(&maps) {
            data::write_pgm(&dir.join(format!("{}.pgm", c.id)), &m.map, 0.0, hi)?;
        }
    }
    println!(
        "{split_name}: O-AUROC {:.4}  P-AUROC {:.4}  AUPRO {:.4}  ({} normal, {} defect)",
        report.o_auroc, report.p_auroc, report.aupro, report.n_normal, report.n_defect
    );
    Ok(())
}

fn threads() -> usize {
    std::env::var("PICO_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Applies `f` to every item on up to `threads` workers, preserving order.
fn par_map<I: Sync, O: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Result<Vec<O>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn cmd_active(s: &Settings) -> Result<()> {
    let seed = s.get_or("seed", 0u64)?;
    let ds = Dataset::load(Path::new(&s.get_or("data", "data".to_string())?))?;
    let out = out_dir(s, "run")?;
    let (model, ck) = load_model(s, &out)?;
    let strategy: Strategy = s.get_or("strategy", Strategy::Dispersion)?;
    let cfg = PolicyConfig {
        tau: ck.meta_f64("tau")?,
        score_threshold: ck.meta_f64("score_threshold")?,
        budget: s.get_or("budget", 3)?,
        poses: ds.sim.cfg.poses,
        strategy,
    };
    let rows: Vec<&ManifestRow> = ds.split(Split::Hard).collect();
    if rows.is_empty() {
        bail!("dataset has no hard cases");
    }
    let outcomes: Vec<ActiveOutcome> = par_map(&rows, threads(), |r| {
        let case = data::case_of(&ds.sim, r);
        Ok(eval::run_case(&ds.sim, &model, &cfg, &r.id, &case, seed)?)
    })?;
    let mut csv = String::from("case_id,step,pose,U,converged,decision,score\n");
    for o in &outcomes {
        let t = &o.trajectory;
        for (step, rec) in t.records.iter().enumerate() {
            let decision = if step == t.decision {
                if t.anomalous {
                    "anomalous"
                } else {
                    "normal"
                }
            } else {
                ""
            };
            csv.push_str(&format!(
                "{},{step},{},{},{},{decision},{}\n",
                o.id,
                rec.pose.0,
                rec.u,
                u8::from(t.converged() && step + 1 == t.records.len()),
                rec.map.score
            ));
        }
    }
    write(&out.join("trajectory.csv"), &csv)?;
    let sum = eval::summarize(&outcomes);
    let text = format!(
        "cases={}\nstrategy={strategy}\nbudget={}\ninitial_accuracy={}\nfinal_accuracy={}\ninitial_mean_u={}\nfinal_mean_u={}\n",
        sum.cases, cfg.budget, sum.initial_accuracy, sum.final_accuracy, sum.initial_u, sum.final_u
    );
    write(&out.join("active_summary.txt"), &text)?;
    println!(
        "{} hard cases, {strategy}, budget {}: accuracy {:.1}% -> {:.1}%, mean U {:.4} -> {:.4}",
        sum.cases,
        cfg.budget,
        100.0 * sum.initial_accuracy,
        100.0 * sum.final_accuracy,
        sum.initial_u,
        sum.final_u
    );
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn cmd_bench(s: &Settings) -> Result<()> {
    let seed = s.get_or("seed", 0u64)?;
    let reps: usize = s.get_or("reps", 5)?;
    let d: usize = s.get_or("dim", 16)?;
    if reps == 0 || d == 0 {
        bail!("reps and dim must be positive");
    }
    let out = out_dir(s, "run")?;
    let mut r = rng::stream(seed, "bench");
    let mut csv = String::from("N,la3_ms,quadratic_ms\n");
    for n in [256usize, 1024, 4096] {
        let mut gen = || {
            use rand::Rng as _;
            (0..n * d).map(|_| r.random_range(-1.0f32..1.0)).collect::<Vec<f32>>()
        };
        let (q, k, v) = (gen(), gen(), gen());
        let time = |f: &dyn Fn() -> f32| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64() * 1e3
        };
        let la3: Vec<f64> = (0..reps)
            .map(|_| time(&|| kernels::la3_head(&q, &k, &v, n, d, 1e-6, 1e4).out[0]))
            .collect();
        let quad: Vec<f64> = (0..reps)
            .map(|_| time(&|| kernels::quadratic_kernel_head(&q, &k, &v, n, d, 1e-6, 1e4)[0]))
            .collect();
        csv.push_str(&format!("{n},{},{}\n", median(la3), median(quad)));
    }
    write(&out.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck(s: &Settings) -> Result<()> {
    let seed = s.get_or("seed", 0u64)?;
    let mut worst = 0.0f64;
    for (name, e) in gradcheck::suite(seed)? {
        println!("{name:<18} {e:.3e}");
        worst = worst.max(e);
    }
    println!("max relative error {worst:.3e}");
    if worst >= 1e-3 {
        bail!("gradient check failed");
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}
