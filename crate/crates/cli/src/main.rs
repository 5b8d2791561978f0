use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use flashdec::ablation::{
    self, adapter_init_ablation, adapter_init_csv, distill_layers_ablation, distill_layers_csv, prune_ratio_sweep,
    ratio_sweep_csv, Ablation, SWEEP_RATIOS,
};
use flashdec::config::RunConfig;
use flashdec::cost::{block_breakdown, resolution_sweep, sweep_to_csv, WallOptions};
use flashdec::data::Dataset;
use flashdec::decoder::store::{load_weights, save_weights};
use flashdec::decoder::{Decoder, OperatorKind, StageName};
use flashdec::distill::{make_phase3_adapters, Adapters};
use flashdec::error::{Error, Result};
use flashdec::pipeline::{
    evaluate_split, prepare, prepared_from, prune, select, substitute, train_phase1, train_phase2, train_phase3,
    Prepared,
};
use flashdec::pruning::{collect_features, svd_redundancy, PruneSpec, Ratio};

#[derive(Parser)]
#[command(
    name = "flashdec",
    version,
    about = "Compress causal video decoders by operator substitution, channel pruning and distillation"
)]
struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-clip work.
    #[arg(long, global = true, env = "FLASHDEC_THREADS")]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Build the teacher and the synthetic dataset.
    GenData,
    /// Channel-redundancy spectra and the per-block cost breakdown.
    Analyze {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Replace stage operators according to the substitution plan.
    Substitute {
        #[arg(long)]
        weights: PathBuf,
        /// `stage=operator` pairs, comma separated. Overrides the config.
        #[arg(long)]
        plan: Option<String>,
    },
    /// Greedy channel selection on calibration features.
    Select {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `stage=ratio` pairs, comma separated. Overrides the config.
        #[arg(long)]
        ratios: Option<String>,
    },
    /// Run one distillation phase or the whole chain.
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Student to train. For `all`, defaults to substituting the teacher.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Prune spec from `select`. Phases 2 and 3 need it.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// PSNR and SSIM of a student against the dataset's teacher outputs.
    Eval {
        #[arg(long)]
        student: PathBuf,
        /// Teacher weights, used to check the dataset.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Analytic cost and wall-clock timing across latent shapes.
    Bench {
        #[arg(long)]
        weights: PathBuf,
        /// `TxHxW` latent shapes, comma separated. Overrides the config.
        #[arg(long)]
        shapes: Option<String>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Scripted ablations.
    Ablate {
        #[arg(value_parser = parse_ablation)]
        which: Ablation,
        /// Seeds to average over. Defaults to 0..3, or 0..5 for adapter_init.
        #[arg(long)]
        seeds: Option<usize>,
        /// Loss threshold for adapter_init.
        #[arg(long, default_value_t = ablation::INIT_THRESHOLD)]
        threshold: f64,
        /// Smoothing window for adapter_init.
        #[arg(long, default_value_t = ablation::INIT_WINDOW)]
        window: usize,
    },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn pairs(text: &str) -> Result<Vec<(StageName, String)>> {
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected stage=value, got '{p}'")))?;
            Ok((k.trim().parse()?, v.trim().to_string()))
        })
        .collect()
}

fn parse_shapes(text: &str) -> Result<Vec<[usize; 3]>> {
    text.split(',')
        .map(|s| {
            let dims: Vec<usize> = s
                .trim()
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::Config(format!("bad latent shape '{s}'"))))
                .collect::<Result<_>>()?;
            <[usize; 3]>::try_from(dims).map_err(|_| Error::Config(format!("latent shape '{s}' needs three extents")))
        })
        .collect()
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )))
    }
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        std::fs::write(&p, text)?;
        Ok(p)
    }

    fn save(&self, name: &str, d: &Decoder) -> Result<PathBuf> {
        let p = self.out.join(name);
        save_weights(d, &p)?;
        Ok(p)
    }

    fn load(&self, path: &Path) -> Result<Decoder> {
        require(path)?;
        load_weights(path)
    }

    fn prepared(&self, teacher: &Path, data: &Path) -> Result<Prepared> {
        let teacher = self.load(teacher)?;
        require(data)?;
        let dataset = Dataset::load(data)?;
        if dataset.len() != self.cfg.data.train + self.cfg.data.eval {
            return Err(Error::Contract(format!(
                "dataset holds {} clips, the configuration expects {} + {}",
                dataset.len(),
                self.cfg.data.train,
                self.cfg.data.eval
            )));
        }
        prepared_from(&self.cfg, teacher, dataset)
    }

    fn plan(&self, path: Option<&Path>) -> Result<PruneSpec> {
        let path = path.ok_or_else(|| Error::Config("this phase needs --plan".into()))?;
        require(path)?;
        PruneSpec::from_json(&std::fs::read_to_string(path)?)
    }
}

fn cmd_gen_data(ctx: &Ctx) -> Result<()> {
    let prep = prepare(&ctx.cfg)?;
    let t = ctx.save("teacher.fvae", &prep.teacher)?;
    let d = ctx.out.join("dataset.fvae");
    prep.dataset.save(&d)?;
    ctx.write("config.toml", &ctx.cfg.to_toml())?;
    println!("teacher: {} ({} parameters)", t.display(), prep.teacher.num_params());
    println!("dataset: {} ({} clips)", d.display(), prep.dataset.len());
    Ok(())
}

fn cmd_analyze(ctx: &Ctx, weights: &Path, data: &Path) -> Result<()> {
    let prep = ctx.prepared(weights, data)?;
    let decoder = &prep.teacher;
    let latents = prep.calibration(&ctx.cfg);
    for name in decoder.stage_names() {
        let f = collect_features(
            decoder,
            &latents,
            name,
            ctx.cfg.prune.max_samples,
            ctx.cfg.select_seed(),
        )?;
        let report = svd_redundancy(&f.values, 0)?;
        ctx.write(&format!("redundancy_{name}.csv"), &report.to_csv())?;
        println!(
            "{name}: {} of {} components explain 99% of the variance",
            report.components_for(0.99),
            f.channels()
        );
    }
    let cost = block_breakdown(decoder, ctx.cfg.data.latent_extents, None)?;
    ctx.write("cost.csv", &cost.to_csv())?;
    print!("{}", cost.to_table());
    Ok(())
}

fn cmd_substitute(ctx: &Ctx, weights: &Path, plan: Option<&str>) -> Result<()> {
    let teacher = ctx.load(weights)?;
    let mut cfg = ctx.cfg.clone();
    if let Some(p) = plan {
        cfg.substitution = pairs(p)?
            .into_iter()
            .map(|(s, v)| Ok((s, v.parse::<OperatorKind>()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
    }
    let student = substitute(&cfg, &teacher)?;
    let p = ctx.save("student.fvae", &student)?;
    println!(
        "student: {} ({} parameters, teacher {})",
        p.display(),
        student.num_params(),
        teacher.num_params()
    );
    Ok(())
}

fn cmd_select(ctx: &Ctx, weights: &Path, data: &Path, ratios: Option<&str>) -> Result<()> {
    let student = ctx.load(weights)?;
    let mut cfg = ctx.cfg.clone();
    if let Some(r) = ratios {
        cfg.prune.ratios = pairs(r)?
            .into_iter()
            .map(|(s, v)| Ok((s, v.parse::<Ratio>()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
    }
    require(data)?;
    let dataset = Dataset::load(data)?;
    let prep = Prepared {
        teacher: student.clone(),
        train_len: cfg.data.train.min(dataset.len()),
        dataset,
    };
    if prep.train_len < cfg.prune.calibration {
        return Err(Error::Contract("dataset is smaller than the calibration set".into()));
    }
    let spec = select(&cfg, &prep, &student)?;
    ctx.write("plan.json", &spec.to_json())?;
    let mut trace = String::from("stage,k,r2\n");
    for (name, p) in &spec.stages {
        for (i, r2) in p.r2_trace.iter().enumerate() {
            trace.push_str(&format!("{name},{},{r2:.12}\n", i + 1));
        }
        println!(
            "{name}: keep {:?} of {} (R² {:.4})",
            p.retained,
            p.channels,
            p.r2_trace.last().copied().unwrap_or(1.0)
        );
    }
    ctx.write("r2_trace.csv", &trace)?;
    Ok(())
}

fn cmd_train(
    ctx: &Ctx,
    phase: PhaseArg,
    weights: Option<&Path>,
    teacher: &Path,
    data: &Path,
    plan: Option<&Path>,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let prep = ctx.prepared(teacher, data)?;
    let student = match weights {
        Some(w) => ctx.load(w)?,
        None if matches!(phase, PhaseArg::All) => substitute(cfg, &prep.teacher)?,
        None => return Err(Error::Config("this phase needs --weights".into())),
    };
    match phase {
        PhaseArg::One => {
            let o = train_phase1(cfg, &prep, student)?;
            ctx.write("history_p1.csv", &o.history.to_csv())?;
            ctx.save("student_p1.fvae", &o.student)?;
            report_eval(ctx, "eval_p1.csv", &o.student, &prep)?;
        }
        PhaseArg::Two => {
            let spec = ctx.plan(plan)?;
            let o = train_phase2(cfg, &prep, student, &spec)?;
            ctx.write("history_p2.csv", &o.history.to_csv())?;
            ctx.save("student_p2.fvae", &o.student)?;
            report_eval(ctx, "eval_p2.csv", &o.student, &prep)?;
        }
        PhaseArg::Three => {
            let spec = ctx.plan(plan)?;
            let (pruned, report) = prune(cfg, &prep, &student, &spec)?;
            let adapters = make_phase3_adapters(&report, cfg.adapter_init(), cfg.student_seed());
            let o = train_phase3(cfg, &prep, pruned, adapters)?;
            finish_phase3(ctx, &prep, &o.student, &o.adapters, &o.history.to_csv())?;
        }
        PhaseArg::All => {
            report_eval(ctx, "eval_substituted.csv", &student, &prep)?;
            let p1 = train_phase1(cfg, &prep, student)?;
            ctx.write("history_p1.csv", &p1.history.to_csv())?;
            ctx.save("student_p1.fvae", &p1.student)?;
            let spec = select(cfg, &prep, &p1.student)?;
            ctx.write("plan.json", &spec.to_json())?;
            let p2 = train_phase2(cfg, &prep, p1.student, &spec)?;
            ctx.write("history_p2.csv", &p2.history.to_csv())?;
            ctx.save("student_p2.fvae", &p2.student)?;
            let (pruned, report) = prune(cfg, &prep, &p2.student, &spec)?;
            let adapters = make_phase3_adapters(&report, cfg.adapter_init(), cfg.student_seed());
            let p3 = train_phase3(cfg, &prep, pruned, adapters)?;
            finish_phase3(ctx, &prep, &p3.student, &p3.adapters, &p3.history.to_csv())?;
        }
    }
    Ok(())
}

fn finish_phase3(ctx: &Ctx, prep: &Prepared, student: &Decoder, adapters: &Adapters, history: &str) -> Result<()> {
    ctx.write("history_p3.csv", history)?;
    ctx.save("student.fvae", student)?;
    adapters.save(&ctx.out.join("adapters.fvae"))?;
    report_eval(ctx, "eval.csv", student, prep)?;
    let e = ctx.cfg.data.latent_extents;
    let tc = block_breakdown(&prep.teacher, e, None)?;
    let sc = block_breakdown(student, e, None)?;
    ctx.write("cost_teacher.csv", &tc.to_csv())?;
    ctx.write("cost_student.csv", &sc.to_csv())?;
    println!(
        "MACs: teacher {}, student {} ({:.2}x fewer)",
        tc.total_macs(),
        sc.total_macs(),
        tc.total_macs() as f64 / sc.total_macs() as f64
    );
    Ok(())
}

fn report_eval(ctx: &Ctx, name: &str, student: &Decoder, prep: &Prepared) -> Result<()> {
    let e = evaluate_split(student, prep.eval())?;
    ctx.write(name, &e.to_csv())?;
    println!("{name}: PSNR {:.3} dB, SSIM {:.4}", e.psnr, e.ssim);
    Ok(())
}

fn cmd_eval(ctx: &Ctx, student: &Path, weights: &Path, data: &Path) -> Result<()> {
    let prep = ctx.prepared(weights, data)?;
    let student = ctx.load(student)?;
    let e = evaluate_split(&student, prep.eval())?;
    ctx.write("eval.csv", &e.to_csv())?;
    print!("{}", e.to_table());
    Ok(())
}

fn cmd_bench(ctx: &Ctx, weights: &Path, shapes: Option<&str>, repeats: Option<usize>) -> Result<()> {
    let d = ctx.load(weights)?;
    let shapes = match shapes {
        Some(s) => parse_shapes(s)?,
        None => ctx.cfg.bench.shapes.clone(),
    };
    let wall = WallOptions {
        repeats: repeats.unwrap_or(ctx.cfg.bench.repeats),
        warmup: ctx.cfg.bench.warmup,
    };
    let rows = resolution_sweep(&d, &shapes, Some(wall))?;
    ctx.write("sweep.csv", &sweep_to_csv(&rows))?;
    let first = shapes
        .first()
        .copied()
        .ok_or_else(|| Error::Config("no bench shapes".into()))?;
    let b = block_breakdown(&d, first, Some(wall))?;
    ctx.write("breakdown.csv", &b.to_csv())?;
    print!("{}", b.to_table());
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, which: Ablation, seeds: Option<usize>, threshold: f64, window: usize) -> Result<()> {
    let n = seeds.unwrap_or(if which == Ablation::AdapterInit { 5 } else { 3 });
    let seeds: Vec<u64> = (0..n as u64).map(|s| ctx.cfg.seed + s).collect();
    let (name, csv) = match which {
        Ablation::PruneRatio => {
            let rows = prune_ratio_sweep(&ctx.cfg, &SWEEP_RATIOS, &seeds)?;
            ("ablate_prune_ratio.csv", ratio_sweep_csv(&rows, &seeds))
        }
        Ablation::AdapterInit => {
            let rows = adapter_init_ablation(&ctx.cfg, &seeds, threshold, window)?;
            ("ablate_adapter_init.csv", adapter_init_csv(&rows))
        }
        Ablation::DistillLayers => {
            let rows = distill_layers_ablation(&ctx.cfg, &seeds)?;
            ("ablate_distill_layers.csv", distill_layers_csv(&rows, &seeds))
        }
    };
    let p = ctx.write(name, &csv)?;
    print!("{csv}");
    eprintln!("wrote {}", p.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            require(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(n) = cli.threads {
        flashdec::set_threads(n)?;
    }
    std::fs::create_dir_all(&cli.out_dir)?;
    let ctx = Ctx { cfg, out: cli.out_dir };
    match &cli.command {
        Command::GenData => cmd_gen_data(&ctx),
        Command::Analyze { weights, data } => cmd_analyze(&ctx, weights, data),
        Command::Substitute { weights, plan } => cmd_substitute(&ctx, weights, plan.as_deref()),
        Command::Select { weights, data, ratios } => cmd_select(&ctx, weights, data, ratios.as_deref()),
        Command::Train {
            phase,
            weights,
            teacher,
            data,
            plan,
        } => cmd_train(&ctx, *phase, weights.as_deref(), teacher, data, plan.as_deref()),
        Command::Eval { student, weights, data } => cmd_eval(&ctx, student, weights, data),
        Command::Bench {
            weights,
            shapes,
            repeats,
        } => cmd_bench(&ctx, weights, shapes.as_deref(), *repeats),
        Command::Ablate {
            which,
            seeds,
            threshold,
            window,
        } => cmd_ablate(&ctx, *which, *seeds, *threshold, *window),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            eprintln!("error[{class}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(class.exit_code() as u8)
        }
    }
}
