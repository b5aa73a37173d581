use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use neurofuscate::defense::{self, DetectionReport, LayerElimination, Method, RecoveryReport};
use neurofuscate::obfuscate::{inject_campaign, Mix, ObfuscationConfig, ObfuscationPlan, Primitive};
use neurofuscate::verify::{verify, Decision, VerdictReport};
use neurofuscate::watermark::{embed, BitString, EmbedConfig, Scheme, WatermarkKey};
use neurofuscate::{equivalence_check, load, rng, save, zoo, EquivalenceReport, Model32};

#[derive(Parser)]
#[command(name = "neurofuscate", version, about = "Dummy-neuron obfuscation and defenses for watermarked networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    #[arg(long, env = "NEUROFUSCATE_SEED", default_value_t = 0)]
    seed: u64,
    /// Output directory for artifacts and reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Campaign {
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Relative weights zero:clique:split.
    #[arg(long, default_value = "0:0.5:0.5")]
    mix: Mix,
    /// Skip rescaling and permutation of the injected neurons.
    #[arg(long)]
    no_camouflage: bool,
}

impl Campaign {
    fn config(&self, seed: u64) -> ObfuscationConfig {
        let cfg = ObfuscationConfig::new(self.alpha, self.mix, seed);
        if self.no_camouflage {
            cfg.without_camouflage()
        } else {
            cfg
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Cluster,
    Svd,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Cluster => Method::Cluster,
            MethodArg::Svd => Method::Svd,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a built-in fixture model.
    Init {
        /// One of mlp, small_cnn, norm_cnn, residual_cnn, watermark_host.
        #[arg(long)]
        model: String,
        #[command(flatten)]
        common: Common,
    },
    /// Embed a message into a model.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scheme: Scheme,
        #[arg(long)]
        message: String,
        /// Target layer id; the scheme's default otherwise.
        #[arg(long)]
        target: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Inject dummy neurons.
    Attack {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        campaign: Campaign,
        #[command(flatten)]
        common: Common,
    },
    /// Extract and judge a watermark.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        message: String,
        /// Decision threshold; the scheme's preset otherwise.
        #[arg(long)]
        theta: Option<f64>,
        /// Model to measure utility against.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Flag suspected dummy neurons.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "cluster")]
        method: MethodArg,
        /// Attack plan, to score the detector.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Merge and remove dummy neurons; with a reference, also undo rescaling and permutation.
    Eliminate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sampled functional equivalence of two models.
    Equiv {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Scaled BER against alpha for each primitive.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        message: String,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.2,0.5")]
        alphas: Vec<f64>,
        /// Campaign seeds per point.
        #[arg(long, default_value_t = 5)]
        runs: u64,
        #[arg(long)]
        no_camouflage: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn read_model(path: &Path) -> Result<Model32> {
    load(path).with_context(|| format!("loading model from {}", path.display()))
}

/// Refuses to write into a directory that is also an input.
fn prepare_out(out: &Path, inputs: &[&Path]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let o = out.canonicalize()?;
    for i in inputs {
        if i.canonicalize().map(|c| o.starts_with(&c) || c.starts_with(&o)).unwrap_or(false) {
            bail!("output {} overlaps input {}", out.display(), i.display());
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, format!("{text}\n")).with_context(|| format!("writing {}", path.display()))?;
    Ok(text)
}

fn message(text: &str) -> Result<BitString> {
    Ok(BitString::from_text(text)?)
}

#[derive(Serialize)]
struct InitReport {
    model: String,
    seed: u64,
    widths: std::collections::BTreeMap<u32, usize>,
    parameters: usize,
}

#[derive(Serialize)]
struct EmbedReport {
    scheme: Scheme,
    target: u32,
    bits: usize,
    message: String,
    output_deviation: f64,
}

#[derive(Serialize)]
struct AttackReport {
    config: Option<ObfuscationConfig>,
    widths_before: std::collections::BTreeMap<u32, usize>,
    widths_after: std::collections::BTreeMap<u32, usize>,
    equivalence: EquivalenceReport,
}

#[derive(Serialize)]
struct EliminateReport {
    layers: Vec<LayerElimination>,
    recovery: Option<RecoveryReport>,
    equivalence: EquivalenceReport,
}

#[derive(Serialize)]
struct SweepRow {
    primitive: Primitive,
    alpha: f64,
    seed: u64,
    raw_ber: Option<f64>,
    scaled_ber: Option<f64>,
    decision: Decision,
    neurons_removed_by_handling: usize,
    utility_delta: Option<f64>,
}

#[derive(Serialize)]
struct SweepPoint {
    primitive: Primitive,
    alpha: f64,
    mean_scaled_ber: Option<f64>,
    removed: usize,
    runs: usize,
}

#[derive(Serialize)]
struct SweepReport {
    scheme: Scheme,
    theta: f64,
    camouflage: bool,
    points: Vec<SweepPoint>,
    rows: Vec<SweepRow>,
}

fn run(cmd: Cmd) -> Result<String> {
    match cmd {
        Cmd::Init { model, common } => {
            prepare_out(&common.out, &[])?;
            let m: Model32 = zoo::by_name(&model, common.seed)
                .with_context(|| format!("unknown fixture {model:?}; known: {}", zoo::NAMES.join(", ")))?;
            save(&m, common.out.join("model"))?;
            let rep = InitReport {
                model,
                seed: common.seed,
                widths: m.widths(),
                parameters: m.parameter_count(),
            };
            write_json(&common.out.join("init.json"), &rep)
        }
        Cmd::Embed {
            model,
            scheme,
            message: text,
            target,
            common,
        } => {
            prepare_out(&common.out, &[&model])?;
            let m = read_model(&model)?;
            let msg = message(&text)?;
            let (wm, key) = embed(&m, scheme, target, &msg, &EmbedConfig::default(), common.seed)?;
            save(&wm, common.out.join("model"))?;
            key.save(common.out.join("key"))?;
            let eq = equivalence_check(&m, &wm, 100, common.seed, f64::INFINITY)?;
            let rep = EmbedReport {
                scheme,
                target: key.target()?,
                bits: msg.len(),
                message: text,
                output_deviation: eq.max_abs_dev,
            };
            write_json(&common.out.join("embed.json"), &rep)
        }
        Cmd::Attack { model, campaign, common } => {
            prepare_out(&common.out, &[&model])?;
            let m = read_model(&model)?;
            let (att, cfg) = if campaign.alpha == 0.0 {
                (m.clone(), None)
            } else {
                let cfg = campaign.config(common.seed);
                let (att, plan) = inject_campaign(&m, &cfg)?;
                plan.write(common.out.join("plan.json"))?;
                (att, Some(cfg))
            };
            save(&att, common.out.join("model"))?;
            let rep = AttackReport {
                config: cfg,
                widths_before: m.widths(),
                widths_after: att.widths(),
                equivalence: equivalence_check(&m, &att, 100, common.seed, 1e-4)?,
            };
            write_json(&common.out.join("attack.json"), &rep)
        }
        Cmd::Verify {
            model,
            key,
            message: text,
            theta,
            reference,
            common,
        } => {
            let mut inputs = vec![model.as_path(), key.as_path()];
            inputs.extend(reference.as_deref());
            prepare_out(&common.out, &inputs)?;
            let m = read_model(&model)?;
            let key = WatermarkKey::load(&key)?;
            let reference = reference.as_deref().map(read_model).transpose()?;
            let theta = theta.unwrap_or(key.scheme.default_theta());
            let rep = verify(&m, &key, &message(&text)?, theta, reference.as_ref());
            write_json(&common.out.join("verdict.json"), &rep)
        }
        Cmd::Detect {
            model,
            method,
            plan,
            common,
        } => {
            let mut inputs = vec![model.as_path()];
            inputs.extend(plan.as_deref());
            prepare_out(&common.out, &inputs)?;
            let m = read_model(&model)?;
            let plan = plan.as_deref().map(ObfuscationPlan::read).transpose()?;
            let rep: DetectionReport = defense::detect(&m, method.into(), plan.as_ref(), common.seed)?;
            write_json(&common.out.join("detection.json"), &rep)
        }
        Cmd::Eliminate {
            model,
            reference,
            common,
        } => {
            let mut inputs = vec![model.as_path()];
            inputs.extend(reference.as_deref());
            prepare_out(&common.out, &inputs)?;
            let m = read_model(&model)?;
            let (cleaned, layers, recovery) = match reference.as_deref() {
                Some(r) => {
                    let (rec, rr) = defense::recover_with_reference(&m, &read_model(r)?)?;
                    (rec, rr.elimination.clone(), Some(rr))
                }
                None => {
                    let (e, layers) = defense::eliminate_dummy(&m)?;
                    (e, layers, None)
                }
            };
            let rep = EliminateReport {
                layers,
                recovery,
                equivalence: equivalence_check(&m, &cleaned, 100, common.seed, 1e-4)?,
            };
            save(&cleaned, common.out.join("model"))?;
            write_json(&common.out.join("elimination.json"), &rep)
        }
        Cmd::Equiv {
            model,
            reference,
            samples,
            tol,
            common,
        } => {
            prepare_out(&common.out, &[&model, &reference])?;
            let a = read_model(&model)?;
            let b = read_model(&reference)?;
            let rep = equivalence_check(&b, &a, samples, common.seed, tol)?;
            write_json(&common.out.join("equivalence.json"), &rep)
        }
        Cmd::Report {
            model,
            key,
            message: text,
            theta,
            alphas,
            runs,
            no_camouflage,
            common,
        } => {
            prepare_out(&common.out, &[&model, &key])?;
            let m = read_model(&model)?;
            let key = WatermarkKey::load(&key)?;
            let msg = message(&text)?;
            let theta = theta.unwrap_or(key.scheme.default_theta());
            let rep = sweep(&m, &key, &msg, theta, &alphas, runs, no_camouflage, common.seed)?;
            let mut csv = csv::Writer::from_path(common.out.join("sweep.csv"))?;
            for r in &rep.rows {
                csv.serialize(r)?;
            }
            csv.flush()?;
            write_json(&common.out.join("sweep.json"), &rep)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    m: &Model32,
    key: &WatermarkKey,
    msg: &BitString,
    theta: f64,
    alphas: &[f64],
    runs: u64,
    no_camouflage: bool,
    seed: u64,
) -> Result<SweepReport> {
    let mut jobs = Vec::new();
    for p in Primitive::ALL {
        for &alpha in alphas {
            for r in 0..runs {
                jobs.push((p, alpha, rng::child(seed, r)));
            }
        }
    }
    let rows: Vec<Result<SweepRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(p, alpha, seed)| {
                s.spawn(move || -> Result<SweepRow> {
                    let mut cfg = ObfuscationConfig::new(alpha, Mix::only(p), seed);
                    if no_camouflage {
                        cfg = cfg.without_camouflage();
                    }
                    let (att, _) = inject_campaign(m, &cfg)?;
                    let v: VerdictReport = verify(&att, key, msg, theta, Some(m));
                    Ok(SweepRow {
                        primitive: p,
                        alpha,
                        seed,
                        raw_ber: v.raw_ber,
                        scaled_ber: v.scaled_ber,
                        decision: v.decision,
                        neurons_removed_by_handling: v.neurons_removed_by_handling,
                        utility_delta: v.utility_delta,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    for chunk in rows.chunks(runs.max(1) as usize) {
        let scaled: Option<Vec<f64>> = chunk.iter().map(|r| r.scaled_ber).collect();
        points.push(SweepPoint {
            primitive: chunk[0].primitive,
            alpha: chunk[0].alpha,
            mean_scaled_ber: scaled.map(|v| v.iter().sum::<f64>() / v.len() as f64),
            removed: chunk.iter().filter(|r| r.decision == Decision::Removed).count(),
            runs: chunk.len(),
        });
    }
    Ok(SweepReport {
        scheme: key.scheme,
        theta,
        camouflage: !no_camouflage,
        points,
        rows,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(report) => {
            println!("{report}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut parts: Vec<String> = Vec::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !parts.last().is_some_and(|p| p.contains(&c)) {
                    parts.push(c);
                }
            }
            let err = serde_json::json!({ "error": parts.join(": ") });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
